"""Open-loop rollouts and sliding-window RMSE / NLL."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .envs import Normalizer, TooShort
from .gaussian import NonPositiveVariance

METRIC_COLUMNS = ("model", "env", "seed", "horizon_step", "rmse", "nll")


@dataclass
class RolloutResult:
    """Per-step predictions ``(E, L, D)`` for steps ``0 .. context_len + horizon - 1``.

    Index ``t`` holds the prediction of ``o_t`` made before seeing it.
    """

    mean: np.ndarray
    var: np.ndarray
    truth: np.ndarray
    context_len: int
    horizon: int

    def segment(self, which: str = "horizon") -> "RolloutResult":
        s = slice(self.context_len, None) if which == "horizon" else slice(1, self.context_len)
        return RolloutResult(self.mean[:, s], self.var[:, s], self.truth[:, s], self.context_len, self.horizon)


def reconstruct_from_deltas(delta_mean, delta_var, obs, observed):
    """Absolute predictions from predicted differences.

    The memory ``m_t`` is ``o_t`` when it was observed and the previous
    prediction otherwise; ``o_{t+1} = m_t + delta_{t+1}``.  Variances add up
    along stretches of unobserved steps.
    """
    E, L, D = delta_mean.shape
    mean = np.zeros_like(delta_mean)
    var = np.zeros_like(delta_var)
    mem = np.zeros((E, D))
    mem_var = np.zeros((E, D))
    for t in range(L):
        if t > 0:
            mean[:, t] = mem + delta_mean[:, t]
            var[:, t] = mem_var + delta_var[:, t]
        else:
            mean[:, 0] = delta_mean[:, 0]
            var[:, 0] = delta_var[:, 0]
        seen = observed[:, t][:, None]
        mem = np.where(seen, np.nan_to_num(obs[:, t]), mean[:, t])
        mem_var = np.where(seen, 0.0, var[:, t])
    return mean, var


def rollout(
    model,
    obs,
    act,
    context_len: int,
    horizon: int,
    stats: Normalizer | None = None,
    deltas: bool = False,
    extra: dict | None = None,
) -> RolloutResult:
    """Feed ``context_len`` observations, then predict ``horizon`` steps open loop.

    Inputs are in normalized units; outputs are denormalized with ``stats``.
    """
    obs = np.asarray(obs, dtype=np.float64)
    act = np.asarray(act, dtype=np.float64)
    E, T = obs.shape[:2]
    L = context_len + horizon
    if context_len < 1 or horizon < 0 or L > T:
        raise TooShort(f"context {context_len} + horizon {horizon} does not fit length {T}")
    o, a = obs[:, :L], act[:, :L]
    observed = np.all(np.isfinite(o), axis=-1)
    observed[:, context_len:] = False
    batch = {"obs": o, "act": a, "valid": observed}
    if extra:
        batch.update(extra)
    with ad.Tape():
        out = model.forward(batch)
    mean, var = out.mean.data.copy(), out.var.data.copy()
    if deltas:
        mean, var = reconstruct_from_deltas(mean, var, o, observed)
    truth = o
    if stats is not None:
        mean, var, truth = stats.denorm_obs(mean), stats.denorm_var(var), stats.denorm_obs(truth)
    return RolloutResult(mean, var, truth, context_len, horizon)


def _windowed(series: np.ndarray, W: int) -> np.ndarray:
    """Trailing mean with window ``W``; the first steps average what is available."""
    if W < 1:
        raise ValueError("W must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(series)])
    n = np.arange(1, len(series) + 1)
    lo = np.maximum(n - W, 0)
    return (c[n] - c[lo]) / (n - lo)


def sliding_rmse(r: RolloutResult, W: int) -> np.ndarray:
    """``sqrt`` of the trailing-window mean squared error (averaged over episodes and dims)."""
    se = np.nanmean((r.mean - r.truth) ** 2, axis=(0, 2))
    return np.sqrt(_windowed(se, W))


def sliding_nll(r: RolloutResult, W: int) -> np.ndarray:
    if np.any(~(r.var > 0)):
        raise NonPositiveVariance("predicted variance must be positive")
    elem = 0.5 * (np.log(2 * np.pi * r.var) + (r.truth - r.mean) ** 2 / r.var)
    return _windowed(np.nanmean(elem, axis=(0, 2)), W)


def metric_rows(r: RolloutResult, W: int, model: str, env: str, seed: int) -> list[dict]:
    seg = r.segment("horizon")
    rm, nl = sliding_rmse(seg, W), sliding_nll(seg, W)
    return [
        {"model": model, "env": env, "seed": seed, "horizon_step": h + 1, "rmse": float(rm[h]), "nll": float(nl[h])}
        for h in range(len(rm))
    ]


def write_metrics(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row["model"], row["env"], row["seed"], row["horizon_step"], repr(row["rmse"]), repr(row["nll"])])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"], r["horizon_step"] = int(r["seed"]), int(r["horizon_step"])
        r["rmse"], r["nll"] = float(r["rmse"]), float(r["nll"])
    return rows


def final_value(series: np.ndarray) -> float:
    return float(series[-1]) if len(series) else math.nan


def write_predictions(path, r: RolloutResult) -> None:
    """One row per episode and step: ``episode_id, t, horizon_step`` then mean, var and truth columns."""
    E, L, D = r.mean.shape
    cols = ["episode_id", "t", "horizon_step"]
    cols += [f"mean{i}" for i in range(D)] + [f"var{i}" for i in range(D)] + [f"truth{i}" for i in range(D)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for e in range(E):
            for t in range(L):
                h = t - r.context_len + 1 if t >= r.context_len else 0
                vals = list(r.mean[e, t]) + list(r.var[e, t]) + list(r.truth[e, t])
                w.writerow([e, t, h] + [repr(float(v)) for v in vals])


def read_predictions(path) -> RolloutResult:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        cols = next(rd)
        rows = [[float(x) for x in r] for r in rd]
    D = sum(c.startswith("mean") for c in cols)
    a = np.array(rows).reshape(-1, len(cols))
    E = int(a[:, 0].max()) + 1 if len(a) else 0
    L = len(a) // max(E, 1)
    a = a.reshape(E, L, len(cols))
    ctx = int(np.sum(a[0, :, 2] == 0)) if E else 0
    return RolloutResult(a[..., 3 : 3 + D], a[..., 3 + D : 3 + 2 * D], a[..., 3 + 2 * D :], ctx, L - ctx)
