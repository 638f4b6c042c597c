"""Synthetic pendulum data, normalization, context/target windowing and dataset files."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TRAIN_MASSES = (0.5, 1.0, 2.5)
TEST_MASSES = (1.5, 2.0)


class TooShort(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PendulumParams:
    mass: float = 1.0
    length: float = 1.0
    damping: float = 0.5
    gravity: float = 9.81
    dt: float = 0.05

    def __post_init__(self):
        if min(self.mass, self.length, self.gravity, self.dt) <= 0 or self.damping < 0:
            raise ValueError("pendulum parameters must be positive (damping may be zero)")
        if self.dt > 0.05:
            raise ValueError("dt must be <= 0.05")


@dataclass(frozen=True)
class Normalizer:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray

    @classmethod
    def fit(cls, obs, act) -> "Normalizer":
        o = obs.reshape(-1, obs.shape[-1])
        a = act.reshape(-1, act.shape[-1])
        return cls(_nanmean(o), _nanstd(o), _nanmean(a), _nanstd(a))

    def norm_obs(self, x):
        return (x - self.obs_mean) / self.obs_std

    def denorm_obs(self, x):
        return x * self.obs_std + self.obs_mean

    def denorm_var(self, v):
        return v * self.obs_std**2

    def norm_act(self, a):
        return (a - self.act_mean) / self.act_std

    def denorm_act(self, a):
        return a * self.act_std + self.act_mean


def _nanmean(x):
    return np.nanmean(x, axis=0) if x.size else np.zeros(x.shape[-1])


def _nanstd(x):
    if not x.size:
        return np.ones(x.shape[-1])
    s = np.nanstd(x, axis=0)
    return np.where(s > 0, s, 1.0)


@dataclass
class EpisodeDataset:
    """``obs`` ``(E, T, Do)`` (NaN marks a missing observation) and ``act`` ``(E, T, Da)``.

    ``stats`` is set once the data are expressed in normalized units.
    ``hidden`` keeps the generating parameter per step for diagnostics.
    """

    obs: np.ndarray
    act: np.ndarray
    dt: float
    split: str = "train"
    stats: Normalizer | None = None
    hidden: np.ndarray | None = field(default=None, repr=False)
    env: str = ""

    @property
    def n_episodes(self) -> int:
        return self.obs.shape[0]

    @property
    def length(self) -> int:
        return self.obs.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.obs), axis=-1)

    def arrays(self) -> dict:
        return {"obs": self.obs, "act": self.act, "valid": self.valid}


@dataclass
class WindowedDataset:
    ctx_obs: np.ndarray
    ctx_act: np.ndarray
    obs: np.ndarray
    act: np.ndarray
    episode: np.ndarray
    start: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]

    def arrays(self) -> dict:
        return {
            "obs": self.obs,
            "act": self.act,
            "valid": np.all(np.isfinite(self.obs), axis=-1),
            "ctx_obs": self.ctx_obs,
            "ctx_act": self.ctx_act,
            "ctx_valid": np.all(np.isfinite(self.ctx_obs), axis=-1),
        }


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


def simulate(params: PendulumParams, torque, theta0: float, omega0: float, mass=None):
    """Semi-implicit Euler; ``mass`` optionally overrides ``params.mass`` per step."""
    torque = np.asarray(torque, dtype=np.float64)
    T = len(torque)
    m = np.full(T, params.mass) if mass is None else np.asarray(mass, dtype=np.float64)
    g, L, c, dt = params.gravity, params.length, params.damping, params.dt
    theta = np.empty(T)
    omega = np.empty(T)
    th, om = float(theta0), float(omega0)
    for t in range(T):
        theta[t], omega[t] = th, om
        acc = -(g / L) * math.sin(th) - c * om + torque[t] / (m[t] * L * L)
        om = om + dt * acc
        th = th + dt * om
    return theta, omega


def energy(params: PendulumParams, theta, omega):
    m, L, g = params.mass, params.length, params.gravity
    return 0.5 * m * L * L * omega**2 + m * g * L * (1.0 - np.cos(theta))


def multisine_torque(rng: np.random.Generator, T: int, dt: float, amplitude: float = 4.0, n_components: int = 4, f_max: float = 1.0):
    """Sum of sines with random frequencies in ``[0.05, f_max]`` Hz and random phases."""
    t = np.arange(T) * dt
    f = rng.uniform(0.05, f_max, n_components)
    ph = rng.uniform(0, 2 * np.pi, n_components)
    a = rng.uniform(0.5, 1.0, n_components)
    a = amplitude * a / a.sum()
    return np.sum(a[:, None] * np.sin(2 * np.pi * f[:, None] * t[None, :] + ph[:, None]), axis=0)


def _episode(params, rng, T, mass, torque_amp, obs_noise):
    u = multisine_torque(rng, T, params.dt, torque_amp)
    th0 = rng.uniform(-np.pi, np.pi)
    om0 = rng.normal(0.0, 1.0)
    theta, _ = simulate(params, u, th0, om0, mass)
    obs = np.stack([np.sin(theta), np.cos(theta)], axis=-1)
    obs = obs + obs_noise * rng.normal(size=obs.shape)
    return obs, u[:, None]


ENV_TAGS = {1: "pendulum", 2: "hip_variant", 3: "hip_variant", 4: "two_timescale", 5: "two_timescale"}


def _generate(params, T, n_episodes, seed, mass_fn, torque_amp, obs_noise, split, tag):
    obs, act, hidden = [], [], []
    for e in range(n_episodes):
        rng = np.random.default_rng([seed, tag, e])
        mass = mass_fn(rng)
        o, a = _episode(params, rng, T, mass, torque_amp, obs_noise)
        obs.append(o)
        act.append(a)
        hidden.append(mass)
    return EpisodeDataset(np.array(obs), np.array(act), params.dt, split, None, np.array(hidden), ENV_TAGS[tag])


def gen_pendulum(
    params: PendulumParams = PendulumParams(),
    T: int = 200,
    n_episodes: int = 32,
    seed: int = 0,
    torque_amp: float = 4.0,
    obs_noise: float = 0.01,
    split: str = "train",
) -> EpisodeDataset:
    """Pendulum driven by random multisine torque; only ``(sin, cos)`` of the angle is observed."""
    return _generate(params, T, n_episodes, seed, lambda rng: np.full(T, params.mass), torque_amp, obs_noise, split, 1)


def gen_hip_variant(
    params: PendulumParams = PendulumParams(),
    T: int = 200,
    n_episodes: int = 32,
    seed: int = 0,
    N: int = 25,
    split: str = "train",
    torque_amp: float = 4.0,
    obs_noise: float = 0.01,
    masses: tuple | None = None,
) -> EpisodeDataset:
    """Mass redrawn for every segment of ``N`` steps from the split's mass set."""
    if masses is None:
        masses = TRAIN_MASSES if split == "train" else TEST_MASSES
    n_seg = -(-T // N)

    def mass_fn(rng):
        return np.repeat(rng.choice(np.asarray(masses, dtype=np.float64), size=n_seg), N)[:T]

    tag = 2 if split == "train" else 3
    return _generate(params, T, n_episodes, seed, mass_fn, torque_amp, obs_noise, split, tag)


def slow_mass(T: int, dt: float, period_steps: int, amplitude: float = 0.8, phase: float = 0.0):
    t = np.arange(T) * dt
    return 1.5 + amplitude * np.sin(2 * np.pi * t / (period_steps * dt) + phase)


def gen_two_timescale(
    params: PendulumParams = PendulumParams(),
    T: int = 300,
    n_episodes: int = 32,
    seed: int = 0,
    H: int = 6,
    period_steps: int | None = None,
    amplitude: float = 0.8,
    split: str = "train",
    torque_amp: float = 4.0,
    obs_noise: float = 0.01,
) -> EpisodeDataset:
    """Mass drifting as ``1.5 + amplitude * sin(2 pi t / (P dt) + phase)`` with ``P >= 20 H``."""
    P = 20 * H if period_steps is None else period_steps
    if P < 20 * H:
        raise ValueError("period must be at least 20 windows")

    def mass_fn(rng):
        return slow_mass(T, params.dt, P, amplitude, rng.uniform(0, 2 * np.pi))

    tag = 4 if split == "train" else 5
    return _generate(params, T, n_episodes, seed, mass_fn, torque_amp, obs_noise, split, tag)


# ---------------------------------------------------------------------------
# normalization and windowing
# ---------------------------------------------------------------------------


def normalize(ds: EpisodeDataset, stats: Normalizer | None = None) -> EpisodeDataset:
    """Express ``ds`` in normalized units; ``stats`` defaults to the dataset's own moments."""
    if ds.stats is not None:
        raise ValueError("dataset is already normalized")
    stats = Normalizer.fit(ds.obs, ds.act) if stats is None else stats
    return replace(ds, obs=stats.norm_obs(ds.obs), act=stats.norm_act(ds.act), stats=stats)


def normalize_splits(train: EpisodeDataset, *others: EpisodeDataset) -> tuple:
    """Fit on ``train`` only and apply the same statistics to the other splits."""
    ntrain = normalize(train)
    return (ntrain,) + tuple(normalize(o, ntrain.stats) for o in others)


def denormalize(ds: EpisodeDataset) -> EpisodeDataset:
    s = ds.stats
    return replace(ds, obs=s.denorm_obs(ds.obs), act=s.denorm_act(ds.act), stats=None)


def window_dataset(ds: EpisodeDataset, N: int) -> WindowedDataset:
    """Non-overlapping target windows of length ``N``, each with the previous window as context."""
    E, T = ds.obs.shape[:2]
    if N < 1 or T < 2 * N:
        raise TooShort(f"need T >= 2N, got T={T}, N={N}")
    n_win = T // N
    co, ca, to, ta, ep, st = [], [], [], [], [], []
    for e in range(E):
        for l in range(1, n_win):
            s = l * N
            co.append(ds.obs[e, s - N : s])
            ca.append(ds.act[e, s - N : s])
            to.append(ds.obs[e, s : s + N])
            ta.append(ds.act[e, s : s + N])
            ep.append(e)
            st.append(s)
    return WindowedDataset(np.array(co), np.array(ca), np.array(to), np.array(ta), np.array(ep), np.array(st))


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

DATA_MAGIC = "# mtsworld-dataset 1"


def _fmt(x: float) -> str:
    return repr(float(x))


def _vec(v) -> str:
    return ",".join(_fmt(x) for x in np.asarray(v).ravel())


def save_dataset(path, ds: EpisodeDataset) -> None:
    """Header lines ``# key=value`` then CSV rows ``episode_id,t,obs...,act...``."""
    E, T, Do = ds.obs.shape
    Da = ds.act.shape[-1]
    head = [
        DATA_MAGIC,
        f"# split={ds.split}",
        f"# episodes={E}",
        f"# length={T}",
        f"# obs_dim={Do}",
        f"# act_dim={Da}",
        f"# dt={_fmt(ds.dt)}",
        f"# normalized={int(ds.stats is not None)}",
    ]
    if ds.env:
        head.append(f"# env={ds.env}")
    if ds.stats is not None:
        s = ds.stats
        head += [f"# obs_mean={_vec(s.obs_mean)}", f"# obs_std={_vec(s.obs_std)}", f"# act_mean={_vec(s.act_mean)}", f"# act_std={_vec(s.act_std)}"]
    cols = ["episode_id", "t"] + [f"obs{i}" for i in range(Do)] + [f"act{i}" for i in range(Da)]
    lines = head + [",".join(cols)]
    for e in range(E):
        for t in range(T):
            vals = [str(e), str(t)] + [_fmt(x) for x in ds.obs[e, t]] + [_fmt(x) for x in ds.act[e, t]]
            lines.append(",".join(vals))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> EpisodeDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != DATA_MAGIC:
        raise DatasetFormatError(f"{path}: missing dataset header")
    meta = {}
    i = 1
    while i < len(lines) and lines[i].startswith("# "):
        k, _, v = lines[i][2:].partition("=")
        meta[k] = v
        i += 1
    try:
        E, T = int(meta["episodes"]), int(meta["length"])
        Do, Da = int(meta["obs_dim"]), int(meta["act_dim"])
        dt = float(meta["dt"])
    except KeyError as exc:
        raise DatasetFormatError(f"{path}: header lacks {exc.args[0]}") from None
    rows = lines[i + 1 :]
    if len(rows) != E * T:
        raise DatasetFormatError(f"{path}: expected {E * T} rows, found {len(rows)}")
    data = np.array([[float(x) for x in r.split(",")] for r in rows]) if rows else np.zeros((0, 2 + Do + Da))
    if data.shape[1] != 2 + Do + Da:
        raise DatasetFormatError(f"{path}: wrong number of columns")
    obs = data[:, 2 : 2 + Do].reshape(E, T, Do)
    act = data[:, 2 + Do :].reshape(E, T, Da)
    stats = None
    if meta.get("normalized") == "1":
        f = lambda k: np.array([float(x) for x in meta[k].split(",")])
        stats = Normalizer(f("obs_mean"), f("obs_std"), f("act_mean"), f("act_std"))
    return EpisodeDataset(obs, act, dt, meta.get("split", "train"), stats, env=meta.get("env", ""))
