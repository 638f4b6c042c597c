"""Objectives, imputation masks, Adam, checkpoints and the truncated-BPTT loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .gaussian import NonPositiveDefinite, NonPositiveVariance
from .nets import ModelMismatch, Module

log = logging.getLogger(__name__)

LOSS_KINDS = ("gaussian_nll", "rmse_differences")
LOG_2PI = math.log(2.0 * math.pi)


class Diverged(RuntimeError):
    """Training produced a non-finite loss; ``trace`` holds the epochs completed so far."""

    def __init__(self, msg: str, trace: "TrainTrace"):
        super().__init__(msg)
        self.trace = trace


# ---------------------------------------------------------------------------
# specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossSpec:
    kind: str = "gaussian_nll"
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")


@dataclass(frozen=True)
class MaskSpec:
    step_mask_fraction: float = 0.0
    window_mask_fraction: float = 0.0
    resample_per_batch: bool = True

    def __post_init__(self):
        for f in (self.step_mask_fraction, self.window_mask_fraction):
            if not 0.0 <= f <= 1.0:
                raise ValueError("mask fractions must lie in [0, 1]")


@dataclass(frozen=True)
class OptimSpec:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _mask3(mask, shape) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.ndim == len(shape) - 1:
        m = m[..., None]
    return np.broadcast_to(m, shape)


def gaussian_nll(mean, var, target, mask=None) -> Tensor:
    """Mean over valid elements of ``0.5 * (log 2 pi var + (o - mu)^2 / var)``."""
    target = np.asarray(target, dtype=np.float64)
    v = ad.value(var)
    m = np.isfinite(target) if mask is None else _mask3(mask, target.shape) & np.isfinite(target)
    if np.any(~(v[m] > 0)):
        raise NonPositiveVariance("predicted variance must be positive")
    n = int(m.sum())
    if n == 0:
        return ad.tensor(0.0)
    safe_var = ad.where(m, var, 1.0)
    resid = ad.where(m, mean, 0.0) - np.where(m, target, 0.0)
    elem = 0.5 * (ad.log(safe_var) + LOG_2PI + resid * resid / safe_var)
    return ad.where(m, elem, 0.0).sum() * (1.0 / n)


def difference_targets(obs, valid=None) -> tuple[np.ndarray, np.ndarray]:
    """``o_t - o_{t-1}`` aligned at ``t`` (index 0 invalid) and its validity."""
    obs = np.asarray(obs, dtype=np.float64)
    ok = np.all(np.isfinite(obs), axis=-1)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    delta = np.zeros_like(obs)
    delta[:, 1:] = obs[:, 1:] - obs[:, :-1]
    tv = np.zeros(ok.shape, dtype=bool)
    tv[:, 1:] = ok[:, 1:] & ok[:, :-1]
    return np.where(tv[..., None], delta, 0.0), tv


def rmse_on_targets(pred, target, mask) -> Tensor:
    """``sqrt`` of the mean over valid (sequence, step) of the squared error summed over dims."""
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        return ad.tensor(0.0)
    resid = ad.where(_mask3(m, ad.value(pred).shape), pred, 0.0) - np.where(m[..., None], target, 0.0)
    return ad.sqrt((resid * resid).sum() * (1.0 / n) + 1e-300)


def rmse_differences(pred_deltas, obs, valid=None) -> Tensor:
    """RMSE between decoded deltas (index ``t`` predicts ``o_t - o_{t-1}``) and observed deltas."""
    target, tv = difference_targets(obs, valid)
    return rmse_on_targets(pred_deltas, target, tv)


def make_targets(obs, valid, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Targets aligned with predictions; step 0 never counts."""
    obs = np.asarray(obs, dtype=np.float64)
    if kind == "rmse_differences":
        return difference_targets(obs, valid)
    ok = np.all(np.isfinite(obs), axis=-1)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    ok[:, 0] = False
    return np.where(ok[..., None], obs, 0.0), ok


def sequence_loss(out, target, target_valid, kind: str) -> Tensor:
    if kind == "gaussian_nll":
        return gaussian_nll(out.mean, out.var, target, target_valid)
    return rmse_on_targets(out.mean, target, target_valid)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def make_masks(spec: MaskSpec, shape: tuple, rng: np.random.Generator, H: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Boolean "observed" flags per step ``(B, T)`` and per window ``(B, ceil(T / H))``.

    The first step of every sequence is always observed.
    """
    B, T = shape
    n_win = -(-T // H)
    step = rng.random((B, T)) >= spec.step_mask_fraction
    window = rng.random((B, n_win)) >= spec.window_mask_fraction
    step[:, 0] = True
    return step, window


def combine_masks(step: np.ndarray, window: np.ndarray, H: int) -> np.ndarray:
    T = step.shape[1]
    out = step & np.repeat(window, H, axis=1)[:, :T]
    out[:, 0] = True
    return out


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_by_global_norm(grads: list, clip_norm: float) -> tuple[list, float]:
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


class Adam:
    def __init__(self, params: list[Tensor], spec: OptimSpec = OptimSpec(), clip_norm: float | None = 5.0):
        self.params = list(params)
        self.spec = spec
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads) -> float:
        """Apply one update; ``grads`` is a dict keyed by parameter or a list.  Returns the pre-clip norm."""
        if isinstance(grads, dict):
            grads = [grads[p] for p in self.params]
        grads = [np.asarray(g, dtype=np.float64) for g in grads]
        norm = global_norm(grads)
        if self.clip_norm is not None:
            grads, norm = clip_by_global_norm(grads, self.clip_norm)
        s = self.spec
        self.t += 1
        c1 = 1.0 - s.beta1**self.t
        c2 = 1.0 - s.beta2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = s.beta1 * self.m[i] + (1.0 - s.beta1) * g
            self.v[i] = s.beta2 * self.v[i] + (1.0 - s.beta2) * g * g
            p.data = p.data - s.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + s.eps)
        return norm

    def state(self, names: list[str]) -> dict:
        out = {"adam.t": np.array(float(self.t))}
        for n, m, v in zip(names, self.m, self.v):
            out[f"adam.m.{n}"] = m.copy()
            out[f"adam.v.{n}"] = v.copy()
        return out

    def load_state(self, names: list[str], arrays: dict) -> None:
        self.t = int(arrays["adam.t"])
        self.m = [np.array(arrays[f"adam.m.{n}"]) for n in names]
        self.v = [np.array(arrays[f"adam.v.{n}"]) for n in names]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = "MTSWORLD-CHECKPOINT 1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    """Text manifest (name, shape, dtype per line) then little-endian float64 payload."""
    lines = [CKPT_MAGIC]
    for k, v in (meta or {}).items():
        lines.append(f"@{k}={v}")
    blobs = []
    for name, arr in arrays.items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"parameter name {name!r} contains whitespace")
        a = np.asarray(arr, dtype=np.float64)
        shape = ",".join(str(n) for n in a.shape) or "-"
        lines.append(f"{name} {shape} <f8")
        blobs.append(a.astype("<f8").tobytes(order="C"))
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(CKPT_MAGIC.encode()) or end < 0:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header = raw[:end].decode("ascii").split("\n")[1:]
    offset = end + len(b"\nEND\n")
    meta, arrays = {}, {}
    for line in header:
        if line.startswith("@"):
            k, _, v = line[1:].partition("=")
            meta[k] = v
            continue
        name, shape_s, dtype = line.split(" ")
        if dtype != "<f8":
            raise CheckpointError(f"unsupported dtype {dtype}")
        shape = () if shape_s == "-" else tuple(int(n) for n in shape_s.split(","))
        n = int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated payload at {name}")
        arrays[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return arrays, meta


def save_model(path, model: Module, meta: dict | None = None, extra: dict | None = None) -> None:
    arrays = model.state_dict()
    if extra:
        arrays.update(extra)
    save_checkpoint(path, arrays, meta)


def load_model(path, model: Module) -> dict:
    """Load parameters into ``model``; returns the metadata and leaves other arrays aside."""
    arrays, meta = load_checkpoint(path)
    names = {k for k, _ in model.named_parameters()}
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    if set(params) != names:
        raise ModelMismatch("checkpoint parameters do not match the model")
    model.load_state_dict(params)
    return meta


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    grad_norm_mean: float
    grad_norm_max: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf
    checkpoints: list = field(default_factory=list)

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    @property
    def val_losses(self) -> list[float]:
        return [r.val_loss for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "grad_norm_mean", "grad_norm_max"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.grad_norm_mean), repr(r.grad_norm_max)])


def _take(data: dict, idx) -> dict:
    return {k: (v[idx] if isinstance(v, np.ndarray) else v) for k, v in data.items()}


def _window_len(model) -> int:
    return getattr(model, "H", 1)


def detach_state(out):
    """Carry-over state for the next TBPTT chunk."""
    if out.state is not None:
        s = out.state
        from .cells import CellState, Mts3State

        return Mts3State(CellState(s.fast.belief.detach(), s.fast.step_index), s.task_prior.detach(), s.window_index, 1)
    return out.next_prior.detach()


def _chunks(T: int, tbptt_len: int | None, H: int) -> list[tuple[int, int]]:
    if not tbptt_len or tbptt_len >= T:
        return [(0, T)]
    L = max(H, (tbptt_len // H) * H)
    return [(s, min(s + L, T)) for s in range(0, T, L)]


def batch_loss(model, batch: dict, valid_in: np.ndarray, kind: str, tbptt_len=None, step_fn=None) -> float:
    """Forward/backward over one batch, chunked for TBPTT.  ``step_fn(grads)`` applies updates."""
    obs = batch["obs"]
    target, tv = make_targets(obs, batch.get("valid"), kind)
    T = obs.shape[1]
    params = model.parameters()
    init = None
    total, weight = 0.0, 0
    for s, e in _chunks(T, tbptt_len, _window_len(model)):
        chunk = dict(batch)
        for k in ("obs", "act"):
            if k in batch:
                chunk[k] = batch[k][:, s:e]
        chunk["valid"] = valid_in[:, s:e]
        n = int(tv[:, s:e].sum())
        with Tape() as tape:
            out = model.forward(chunk, init)
            loss = sequence_loss(out, target[:, s:e], tv[:, s:e], kind)
            val = loss.item()
            if not math.isfinite(val):
                return val
            if step_fn is not None:
                step_fn(ad.backward(loss, params))
            init = detach_state(out)
            tape.clear()
        total += val * n
        weight += n
    return total / max(weight, 1)


def train(
    model: Module,
    data: dict,
    loss: LossSpec = LossSpec(),
    masks: MaskSpec = MaskSpec(),
    optim: OptimSpec = OptimSpec(),
    epochs: int = 10,
    tbptt_len: int | None = None,
    seed: int = 0,
    batch_size: int = 16,
    val_fraction: float = 0.1,
    out_dir=None,
    resume=None,
    restore_best: bool = True,
    meta: dict | None = None,
) -> TrainTrace:
    """Train ``model`` in place on arrays ``data`` (``obs``, ``act``, ``valid``, optional context keys).

    Every epoch draws its shuffle and imputation masks from ``(seed, epoch)``
    so a resumed run reproduces an uninterrupted one.  The best-validation
    parameters are written to ``out_dir/best.ckpt``; ``out_dir/last.ckpt``
    also carries the optimizer state for resuming.
    """
    E, T = data["obs"].shape[:2]
    H = _window_len(model)
    split = np.random.default_rng([seed, 7919]).permutation(E)
    n_val = int(round(val_fraction * E)) if E >= 2 else 0
    n_val = max(n_val, 1) if val_fraction > 0 and E >= 2 else n_val
    val_idx, train_idx = np.sort(split[:n_val]), np.sort(split[n_val:])
    val_data = _take(data, val_idx) if n_val else None
    if val_data is not None:
        vrng = np.random.default_rng([seed, 104729])
        vmask = combine_masks(*make_masks(masks, (n_val, T), vrng, H), H)
        vvalid = vmask & _data_valid(val_data)

    names = [k for k, _ in model.named_parameters()]
    opt = Adam(model.parameters(), optim, clip_norm=loss.clip_norm)
    trace = TrainTrace()
    start = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        arrays, rmeta = load_checkpoint(resume)
        load_model(resume, model)
        opt.load_state(names, arrays)
        start = int(rmeta.get("epoch", "0"))
        trace.best_val = float(rmeta.get("best_val", "inf"))
        trace.best_epoch = int(rmeta.get("best_epoch", "-1"))

    def guarded(epoch: int, *args, **kw) -> float:
        # numerical breakdowns inside the filter count as divergence, like non-finite losses
        try:
            return batch_loss(*args, **kw)
        except (NonPositiveDefinite, NonPositiveVariance, FloatingPointError) as exc:
            raise Diverged(f"numerical failure at epoch {epoch}: {exc}", trace) from exc

    def val_loss(epoch: int = -1) -> float:
        if val_data is None:
            return math.nan
        return guarded(epoch, model, val_data, vvalid, loss.kind, tbptt_len)

    best_state = model.state_dict()
    if resume is None:
        v0 = val_loss()
        trace.best_val = v0 if math.isfinite(v0) else math.inf
        _save_best(out_dir, model, meta, trace, -1)

    norms: list[float] = []

    def apply(grads):
        norms.append(opt.step(grads))
        model.project()

    for epoch in range(start, epochs):
        rng = np.random.default_rng([seed, epoch + 1])
        order = rng.permutation(train_idx)
        norms.clear()
        tot, cnt = 0.0, 0
        for b0 in range(0, len(order), batch_size):
            idx = np.sort(order[b0 : b0 + batch_size])
            batch = _take(data, idx)
            step, window = make_masks(masks, (len(idx), T), rng, H)
            vin = combine_masks(step, window, H) & _data_valid(batch)
            bl = guarded(epoch, model, batch, vin, loss.kind, tbptt_len, apply)
            if not math.isfinite(bl) or any(not math.isfinite(n) for n in norms):
                raise Diverged(f"non-finite loss at epoch {epoch}", trace)
            tot += bl
            cnt += 1
        v = val_loss(epoch)
        if val_data is not None and not math.isfinite(v):
            raise Diverged(f"non-finite validation loss at epoch {epoch}", trace)
        rec = EpochRecord(epoch, tot / max(cnt, 1), v, float(np.mean(norms)) if norms else 0.0, float(np.max(norms)) if norms else 0.0)
        trace.records.append(rec)
        log.info("epoch %d train %.5f val %.5f |g| %.3f", epoch, rec.train_loss, v, rec.grad_norm_mean)
        improved = math.isfinite(v) and v < trace.best_val or (val_data is None)
        if improved:
            trace.best_val = v if math.isfinite(v) else trace.best_val
            trace.best_epoch = epoch
            best_state = model.state_dict()
            _save_best(out_dir, model, meta, trace, epoch)
        if out_dir is not None:
            m = dict(meta or {}, epoch=epoch + 1, best_val=repr(trace.best_val), best_epoch=trace.best_epoch)
            save_model(out_dir / "last.ckpt", model, m, opt.state(names))
    if restore_best and val_data is not None and resume is None:
        model.load_state_dict(best_state)
    elif restore_best and out_dir is not None and (out_dir / "best.ckpt").exists():
        load_model(out_dir / "best.ckpt", model)
    if out_dir is not None:
        trace.checkpoints = [str(out_dir / "best.ckpt"), str(out_dir / "last.ckpt")]
    return trace


def _data_valid(data: dict) -> np.ndarray:
    obs = data["obs"]
    ok = np.all(np.isfinite(obs), axis=-1)
    if "valid" in data and data["valid"] is not None:
        ok &= np.asarray(data["valid"], dtype=bool)
    return ok


def _save_best(out_dir, model, meta, trace, epoch) -> None:
    if out_dir is None:
        return
    m = dict(meta or {}, epoch=epoch + 1, best_val=repr(trace.best_val))
    save_model(out_dir / "best.ckpt", model, m)


def trace_dict(trace: TrainTrace) -> dict:
    return {"records": [asdict(r) for r in trace.records], "best_epoch": trace.best_epoch, "best_val": trace.best_val}
