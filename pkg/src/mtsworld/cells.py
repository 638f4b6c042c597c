"""Recurrent inference cells: RKN, ac-RKN, HiP-RSSM and the two-level MTS3.

Sequences are laid out as ``(batch, time, features)``.  ``valid`` masks of
shape ``(batch, time)`` say which observations the cell may read; masked
entries are replaced by zeros before any network sees them, so NaN
placeholders never enter the computation.

Every ``run`` method returns a :class:`SequenceOutput` whose prediction at
index ``t`` is decoded from the prior belief for step ``t``, i.e. from
information up to ``t - 1`` only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gaussian import (
    BlockMatrix,
    DiagGaussian,
    FactorizedBelief,
    LatentObservation,
    bayesian_aggregate,
    diag_propagate,
    factorized_kalman_update,
    factorized_predict,
    gaussian_condition_set,
    select_belief,
)
from .nets import (
    ControlModel,
    BandedTransition,
    Decoder,
    GaussianEncoder,
    Module,
    TaskTransform,
    _uniform,
    time_features,
)

INIT_VAR = 10.0


@dataclass(frozen=True)
class CellState:
    belief: FactorizedBelief
    step_index: int = 0


@dataclass(frozen=True)
class Mts3State:
    fast: CellState
    task_prior: FactorizedBelief
    window_index: int = 0
    within_window: int = 1


@dataclass(frozen=True)
class ContextSet:
    """``N`` transitions ``(o_prev, a_prev, o_next)``, batched on the leading axis."""

    obs_prev: np.ndarray
    act_prev: np.ndarray
    obs_next: np.ndarray
    valid: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.obs_prev.shape[-2]

    @classmethod
    def from_window(cls, obs, act, valid=None) -> "ContextSet":
        """Consecutive transitions inside one window of length ``N`` (``N - 1`` tuples)."""
        obs, act = np.asarray(obs, dtype=np.float64), np.asarray(act, dtype=np.float64)
        v = np.ones(obs.shape[:-1], dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        return cls(obs[..., :-1, :], act[..., :-1, :], obs[..., 1:, :], v[..., :-1] & v[..., 1:])


@dataclass
class SequenceOutput:
    mean: Tensor
    var: Tensor
    priors: list
    posteriors: list
    next_prior: FactorizedBelief
    tasks: list = field(default_factory=list)
    state: object = None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def sanitize(x, valid):
    """Zero out entries whose ``valid`` flag is false (NaN included)."""
    m = np.asarray(valid, dtype=bool)[..., None]
    if isinstance(x, Tensor):
        return ad.where(np.broadcast_to(m, x.shape), x, 0.0)
    x = np.asarray(x, dtype=np.float64)
    return np.where(m, x, 0.0)


def mask_variance(obs: LatentObservation, valid) -> LatentObservation:
    """Give invalid set elements infinite variance (zero precision)."""
    if valid is None:
        return obs
    m = np.broadcast_to(np.asarray(valid, dtype=bool)[..., None], ad.value(obs.var).shape)
    if m.all():
        return obs
    return LatentObservation(obs.value, ad.where(m, obs.var, np.inf))


def stack_beliefs(beliefs: Sequence[FactorizedBelief], axis: int = 1) -> FactorizedBelief:
    cols = zip(*(b.fields() for b in beliefs))
    return FactorizedBelief(*(ad.stack(list(c), axis=axis) for c in cols))


def _slice_obs(obs: LatentObservation, t) -> LatentObservation:
    return LatentObservation(obs.value[:, t], obs.var[:, t])


def standard_prior(batch_shape: tuple, dim: int) -> DiagGaussian:
    shape = tuple(batch_shape) + (dim,)
    return DiagGaussian(np.zeros(shape), np.ones(shape))


def unit_belief(batch_shape: tuple, dim: int) -> FactorizedBelief:
    return FactorizedBelief.isotropic(batch_shape, dim, var=1.0)


def _as_valid(valid, shape) -> np.ndarray:
    if valid is None:
        return np.ones(shape, dtype=bool)
    return np.asarray(valid, dtype=bool)


# ---------------------------------------------------------------------------
# RKN / ac-RKN
# ---------------------------------------------------------------------------


class ACRKN(Module):
    """Action-conditional recurrent Kalman network.

    With ``act_dim == 0`` or ``control=None`` it is the plain RKN.
    """

    kind = "acrkn"

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        d: int,
        rng: np.random.Generator,
        K: int = 1,
        bandwidth: int = 3,
        control: str | None = "nonlinear",
        enc_hidden: Sequence[int] = (32,),
        dec_hidden: Sequence[int] = (32,),
        control_hidden: Sequence[int] = (32,),
        control_K: int = 4,
        noise_init: float = 0.1,
    ):
        self.obs_dim, self.act_dim, self.d = obs_dim, act_dim, d
        self.encoder = GaussianEncoder(obs_dim, enc_hidden, d, rng)
        self.transition = BandedTransition(d, K, bandwidth, rng)
        self.noise_raw = ad.parameter(np.full(2 * d, math.log(noise_init)))
        if control is not None and act_dim > 0:
            self.control = ControlModel(control, act_dim, d, rng, K=control_K, hidden=control_hidden)
        else:
            self.control = None
        self.decoder = Decoder(d, dec_hidden, obs_dim, rng)

    # -- pieces -------------------------------------------------------------
    def initial_belief(self, batch_shape: tuple) -> FactorizedBelief:
        return FactorizedBelief.isotropic(batch_shape, self.d, INIT_VAR)

    def trans_noise(self) -> tuple:
        q = ad.elu_plus_one(self.noise_raw)
        return q[: self.d], q[self.d :]

    def encode(self, obs, valid) -> LatentObservation:
        return self.encoder(sanitize(obs, valid))

    def update(self, prior: FactorizedBelief, obs: LatentObservation | None, valid=None) -> FactorizedBelief:
        """Kalman observation update; rows with ``valid`` false keep the prior exactly."""
        if obs is None:
            return prior
        v = _as_valid(valid, ad.value(prior.mean_u).shape[:-1])
        if not v.any():
            return prior
        post, _ = factorized_kalman_update(prior, obs)
        return post if v.all() else select_belief(v, post, prior)

    def control_term(self, a, post: FactorizedBelief | None = None):
        if self.control is None or a is None:
            return None
        return self.control(a, post.mean if (post is not None and self.control.needs_state) else None)

    def predict(self, post: FactorizedBelief, ctrl=None, extra=(), A: BlockMatrix | None = None):
        if A is None:
            A = self.transition.matrix(post.mean if self.transition.K > 1 else None)
        return factorized_predict(post, A, control_mean=ctrl, extra_cov_terms=extra, trans_noise=self.trans_noise())

    def decode(self, b: FactorizedBelief) -> tuple:
        return self.decoder(b)

    # -- sequences ----------------------------------------------------------
    def _filter(self, obs, act, valid, init=None, task_fn=None):
        """Shared loop.  ``task_fn(post)`` returns ``(mean_2d, cov_triple)`` or None."""
        obs_v = ad.value(obs)
        B, T = obs_v.shape[:2]
        valid = _as_valid(valid, (B, T))
        w = self.encode(obs, valid)
        ctrl_all = None
        if self.control is not None and act is not None and not self.control.needs_state:
            ctrl_all = self.control(act)
        A = self.transition.matrix() if self.transition.K == 1 else None
        prior = self.initial_belief((B,)) if init is None else init
        priors, posts = [], []
        for t in range(T):
            priors.append(prior)
            post = self.update(prior, _slice_obs(w, t), valid[:, t])
            posts.append(post)
            if ctrl_all is not None:
                ctrl = ctrl_all[:, t]
            else:
                ctrl = self.control_term(None if act is None else act[:, t], post)
            extra = ()
            if task_fn is not None:
                tm, tc = task_fn(post)
                ctrl = tm if ctrl is None else ctrl + tm
                extra = (tc,)
            prior = self.predict(post, ctrl, extra, A)
        return priors, posts, prior

    def _output(self, priors, posts, next_prior, tasks=()) -> SequenceOutput:
        mean, var = self.decode(stack_beliefs(priors, axis=1))
        return SequenceOutput(mean, var, priors, posts, next_prior, list(tasks))

    def run(self, obs, act=None, valid=None, init: FactorizedBelief | None = None) -> SequenceOutput:
        priors, posts, nxt = self._filter(obs, act, valid, init)
        return self._output(priors, posts, nxt)

    def forward(self, batch: dict, init=None) -> SequenceOutput:
        return self.run(batch["obs"], batch.get("act"), batch.get("valid"), init)


class RKN(ACRKN):
    kind = "rkn"

    def __init__(self, obs_dim: int, d: int, rng: np.random.Generator, **kw):
        kw.pop("control", None)
        super().__init__(obs_dim, 0, d, rng, control=None, **kw)

    def run(self, obs, act=None, valid=None, init=None) -> SequenceOutput:
        return super().run(obs, None, valid, init)


def rkn_step(s: CellState, o, model: ACRKN, valid=None) -> tuple[CellState, FactorizedBelief]:
    """One filter step without actions: returns the posterior state and the next prior."""
    obs = None if o is None else model.encode(o, _as_valid(valid, ad.value(o).shape[:-1]))
    post = model.update(s.belief, obs, valid)
    return CellState(post, s.step_index), model.predict(post)


def acrkn_step(s: CellState, a, o, model: ACRKN, valid=None) -> tuple[CellState, FactorizedBelief]:
    obs = None if o is None else model.encode(o, _as_valid(valid, ad.value(o).shape[:-1]))
    post = model.update(s.belief, obs, valid)
    return CellState(post, s.step_index), model.predict(post, model.control_term(a, post))


# ---------------------------------------------------------------------------
# HiP-RSSM
# ---------------------------------------------------------------------------


class HiPRSSM(ACRKN):
    """ac-RKN whose time update is conditioned on a latent task inferred from context."""

    kind = "hiprssm"

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        d: int,
        rng: np.random.Generator,
        task_dim: int = 4,
        task_kind: str = "linear",
        ctx_hidden: Sequence[int] = (32,),
        task_hidden: Sequence[int] = (32,),
        **kw,
    ):
        super().__init__(obs_dim, act_dim, d, rng, **kw)
        self.task_dim = task_dim
        self.context_encoder = GaussianEncoder(2 * obs_dim + act_dim, ctx_hidden, task_dim, rng)
        self.task_transform = TaskTransform(task_kind, task_dim, d, rng, hidden=task_hidden)

    def infer_task(self, ctx: ContextSet | None, batch_shape: tuple = ()) -> DiagGaussian:
        if ctx is None or ctx.size == 0:
            return standard_prior(batch_shape, self.task_dim)
        valid = _as_valid(ctx.valid, ctx.obs_prev.shape[:-1])
        x = np.concatenate([ctx.obs_prev, ctx.act_prev, ctx.obs_next], axis=-1)
        enc = mask_variance(self.context_encoder(sanitize(x, valid)), valid)
        return bayesian_aggregate(standard_prior(x.shape[:-2], self.task_dim), enc)

    def task_terms(self, task: DiagGaussian):
        """Per-step ``(mean, cov_triple)`` function; constant unless the transform is state dependent."""
        tt = self.task_transform
        if tt.needs_state:
            return lambda post: tt(task, post.mean)
        terms = tt(task)
        return lambda post: terms

    def run_window(self, obs, act, valid, task: DiagGaussian, init=None) -> SequenceOutput:
        priors, posts, nxt = self._filter(obs, act, valid, init, self.task_terms(task))
        return self._output(priors, posts, nxt, [task])

    def run(self, obs, act=None, valid=None, init=None, window: int | None = None, ctx: ContextSet | None = None):
        """Filter an episode window by window.

        With ``ctx`` given, the whole sequence is one target window.  Otherwise
        each window of length ``window`` uses the previous window as context
        (the first one falls back to the prior) and beliefs carry across.
        """
        obs_v = ad.value(obs)
        B, T = obs_v.shape[:2]
        valid = _as_valid(valid, (B, T))
        if ctx is not None or window is None:
            return self.run_window(obs, act, valid, self.infer_task(ctx, (B,)), init)
        priors, posts, tasks = [], [], []
        prior = init
        for s in range(0, T, window):
            e = min(s + window, T)
            if s == 0:
                task = standard_prior((B,), self.task_dim)
            else:
                c = max(0, s - window)
                task = self.infer_task(ContextSet.from_window(obs_v[:, c:s], act[:, c:s], valid[:, c:s]))
            p, q, prior = self._filter(obs[:, s:e], act[:, s:e], valid[:, s:e], prior, self.task_terms(task))
            priors += p
            posts += q
            tasks.append(task)
        return self._output(priors, posts, prior, tasks)

    def forward(self, batch: dict, init=None) -> SequenceOutput:
        ctx = None
        if "ctx_obs" in batch:
            ctx = ContextSet.from_window(batch["ctx_obs"], batch["ctx_act"], batch.get("ctx_valid"))
        return self.run(batch["obs"], batch.get("act"), batch.get("valid"), init, batch.get("window"), ctx)


def infer_task(ctx: ContextSet | None, model: HiPRSSM, batch_shape: tuple = ()) -> DiagGaussian:
    return model.infer_task(ctx, batch_shape)


def hiprssm_step(s: CellState, a, task: DiagGaussian, o, model: HiPRSSM, valid=None):
    obs = None if o is None else model.encode(o, _as_valid(valid, ad.value(o).shape[:-1]))
    post = model.update(s.belief, obs, valid)
    tm, tc = model.task_terms(task)(post)
    ctrl = model.control_term(a, post)
    ctrl = tm if ctrl is None else ctrl + tm
    return CellState(post, s.step_index), model.predict(post, ctrl, (tc,))


# ---------------------------------------------------------------------------
# MTS3
# ---------------------------------------------------------------------------


class MTS3(Module):
    """Two-level model: a fast ac-RKN conditioned on a slow task state updated every ``H`` steps."""

    kind = "mts3"

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        d: int,
        rng: np.random.Generator,
        H: int,
        task_dim: int | None = None,
        abs_act_dim: int | None = None,
        abs_hidden: Sequence[int] = (32,),
        init_noise: float = 0.05,
        **kw,
    ):
        if H < 1:
            raise ValueError("window length H must be >= 1")
        kw.pop("K", None)
        self.H = H
        self.task_dim = dt = task_dim or d
        self.abs_act_dim = da = abs_act_dim or dt
        self.fast = ACRKN(obs_dim, act_dim, d, rng, K=1, **kw)
        self.abs_obs_encoder = GaussianEncoder(obs_dim + 3, abs_hidden, dt, rng)
        self.abs_act_encoder = GaussianEncoder(act_dim + 3, abs_hidden, da, rng)
        eye = np.eye(dt)
        sd = init_noise / math.sqrt(2 * dt)
        self.X_uu = ad.parameter(eye + sd * rng.normal(size=(dt, dt)))
        self.X_ul = ad.parameter(sd * rng.normal(size=(dt, dt)))
        self.X_lu = ad.parameter(sd * rng.normal(size=(dt, dt)))
        self.X_ll = ad.parameter(eye + sd * rng.normal(size=(dt, dt)))
        self.Y = ad.parameter(0.1 * _uniform(rng, da, (2 * dt, da)))
        self.S_raw = ad.parameter(np.full(2 * dt, math.log(0.1)))
        self.task_transform = TaskTransform("linear", 2 * dt, d, rng)

    @property
    def d(self) -> int:
        return self.fast.d

    @property
    def obs_dim(self) -> int:
        return self.fast.obs_dim

    @property
    def act_dim(self) -> int:
        return self.fast.act_dim

    def X(self) -> BlockMatrix:
        return BlockMatrix(self.X_uu, self.X_ul, self.X_lu, self.X_ll)

    def task_noise(self) -> tuple:
        s = ad.elu_plus_one(self.S_raw)
        return s[: self.task_dim], s[self.task_dim :]

    def initial_task(self, batch_shape: tuple) -> FactorizedBelief:
        return unit_belief(batch_shape, self.task_dim)

    # -- slow scale ---------------------------------------------------------
    def abstract_action(self, act, offset_len: int | None = None, valid=None) -> DiagGaussian:
        act = np.asarray(ad.value(act), dtype=np.float64) if not isinstance(act, Tensor) else act
        L = act.shape[-2]
        te = np.broadcast_to(time_features(self.H, L), act.shape[:-1] + (3,))
        enc = mask_variance(self.abs_act_encoder(ad.concat([act, te], axis=-1)), valid)
        return bayesian_aggregate(standard_prior(act.shape[:-2], self.abs_act_dim), enc)

    def abstract_obs(self, obs, valid) -> LatentObservation:
        """Time-encoded abstract observations for one window; masked steps get zero precision."""
        valid = _as_valid(valid, ad.value(obs).shape[:-1])
        L = valid.shape[-1]
        te = np.broadcast_to(time_features(self.H, L), valid.shape + (3,))
        enc = self.abs_obs_encoder(ad.concat([sanitize(obs, valid), te], axis=-1))
        return mask_variance(enc, valid)

    def task_predict(self, task_post: FactorizedBelief, alpha: DiagGaussian) -> FactorizedBelief:
        dt = self.task_dim
        Y = self.Y
        y_rows = BlockMatrix(Y[:dt], None, Y[dt:], None)
        ym = ad.matvec(Y, alpha.mean)
        return factorized_predict(
            task_post,
            self.X(),
            control_mean=ym,
            extra_cov_terms=(diag_propagate(y_rows, alpha.var),),
            trans_noise=self.task_noise(),
        )

    def task_update(self, task_prior: FactorizedBelief, beta: LatentObservation) -> FactorizedBelief:
        return gaussian_condition_set(task_prior, beta, set_axis=-2)

    # -- fast scale ---------------------------------------------------------
    def task_terms(self, task_prior: FactorizedBelief) -> tuple:
        return self.task_transform(task_prior)

    def windows(self, T: int) -> list[tuple[int, int]]:
        return [(s, min(s + self.H, T)) for s in range(0, T, self.H)]

    def run(self, obs, act, valid=None, init: Mts3State | None = None, cut: bool = True) -> SequenceOutput:
        """Two-scale filtering over a whole sequence.

        ``init`` carries the fast prior and the previous task posterior (stored
        in ``task_prior``) from an earlier chunk.  With ``cut`` the fast belief
        is detached at every window boundary.
        """
        fast = self.fast
        obs_v = ad.value(obs)
        B, T = obs_v.shape[:2]
        valid = _as_valid(valid, (B, T))
        w = fast.encode(obs, valid)
        ctrl_all = None
        if fast.control is not None and not fast.control.needs_state:
            ctrl_all = fast.control(act)
        A = fast.transition.matrix()
        if init is None:
            prior, task_post = fast.initial_belief((B,)), self.initial_task((B,))
        else:
            prior, task_post = init.fast.belief, init.task_prior
        priors, posts, tasks = [], [], []
        for s, e in self.windows(T):
            alpha = self.abstract_action(act[:, s:e])
            task_prior = self.task_predict(task_post, alpha)
            tm, tc = self.task_terms(task_prior)
            for t in range(s, e):
                priors.append(prior)
                post = fast.update(prior, _slice_obs(w, t), valid[:, t])
                posts.append(post)
                if ctrl_all is not None:
                    ctrl = ctrl_all[:, t] + tm
                else:
                    c = fast.control_term(act[:, t], post)
                    ctrl = tm if c is None else c + tm
                prior = fast.predict(post, ctrl, (tc,), A)
            task_post = self.task_update(task_prior, self.abstract_obs(obs[:, s:e], valid[:, s:e]))
            tasks.append((task_prior, task_post))
            if cut:
                prior = prior.detach()
        out = fast._output(priors, posts, prior, tasks)
        out.state = Mts3State(CellState(prior, T), task_post, len(tasks), 1)
        return out

    def forward(self, batch: dict, init=None) -> SequenceOutput:
        return self.run(batch["obs"], batch["act"], batch.get("valid"), init)


def mts3_abstract_action(actions, model: MTS3, valid=None) -> DiagGaussian:
    return model.abstract_action(actions, valid=valid)


def mts3_task_predict(task_post: FactorizedBelief, alpha: DiagGaussian, model: MTS3) -> FactorizedBelief:
    return model.task_predict(task_post, alpha)


def mts3_task_update(task_prior: FactorizedBelief, beta, nu=None) -> FactorizedBelief:
    """Condition the task prior on a window of abstract observations.

    ``beta`` is a LatentObservation (set along axis -2) or a list of them; the
    legacy form passes values and variances separately.
    """
    if nu is not None:
        beta = LatentObservation(beta, nu)
    return gaussian_condition_set(task_prior, beta, set_axis=-2)


def mts3_fast_step(s: Mts3State, a, o, model: MTS3, valid=None) -> tuple[CellState, Mts3State]:
    """Update with ``o`` (if present) then predict with the window's task prior.

    After the ``H``-th step of a window the returned state points at the next
    window with a detached fast prior; its ``task_prior`` must be replaced by
    the caller via :func:`mts3_task_predict`.
    """
    fast = model.fast
    obs = None if o is None else fast.encode(o, _as_valid(valid, ad.value(o).shape[:-1]))
    post = fast.update(s.fast.belief, obs, valid)
    tm, tc = model.task_terms(s.task_prior)
    c = fast.control_term(a, post)
    nxt = fast.predict(post, tm if c is None else c + tm, (tc,))
    step = s.fast.step_index + 1
    if s.within_window >= model.H:
        return CellState(post, s.fast.step_index), Mts3State(CellState(nxt.detach(), step), s.task_prior, s.window_index + 1, 1)
    return CellState(post, s.fast.step_index), Mts3State(CellState(nxt, step), s.task_prior, s.window_index, s.within_window + 1)


def mts3_sequence(obs, act, model: MTS3, step_mask=None, window_mask=None, data_valid=None) -> SequenceOutput:
    """Full two-scale rollout with imputation masks at both scales.

    ``step_mask``/``window_mask`` are boolean "observed" flags per step and per
    window; the cell sees an observation only when every flag is true.
    """
    B, T = ad.value(obs).shape[:2]
    valid = _as_valid(data_valid, (B, T)).copy()
    if step_mask is not None:
        valid &= np.asarray(step_mask, dtype=bool)
    if window_mask is not None:
        wm = np.asarray(window_mask, dtype=bool)
        valid &= np.repeat(wm, model.H, axis=1)[:, :T]
    return model.run(obs, act, valid)


MODEL_KINDS = {"rkn": RKN, "acrkn": ACRKN, "hiprssm": HiPRSSM, "mts3": MTS3}


@dataclass(frozen=True)
class ModelSpec:
    """Architecture record; enough to rebuild a model before loading its parameters."""

    kind: str
    obs_dim: int
    act_dim: int
    d: int = 15
    K: int = 1
    bandwidth: int = 3
    control: str = "nonlinear"
    hidden: int = 30
    H: int = 6
    task_dim: int = 15
    task_kind: str = "linear"
    N: int = 25

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if min(self.obs_dim, self.d, self.K, self.hidden, self.H, self.task_dim, self.N) < 1 or self.act_dim < 0:
            raise ValueError("model dimensions must be positive")

    def build(self, rng: np.random.Generator) -> Module:
        h = (self.hidden,)
        kw = dict(bandwidth=self.bandwidth, enc_hidden=h, dec_hidden=h)
        if self.kind == "rkn":
            return RKN(self.obs_dim, self.d, rng, K=self.K, **kw)
        kw.update(control=self.control, control_hidden=h)
        if self.kind == "acrkn":
            return ACRKN(self.obs_dim, self.act_dim, self.d, rng, K=self.K, **kw)
        if self.kind == "hiprssm":
            return HiPRSSM(
                self.obs_dim, self.act_dim, self.d, rng, task_dim=self.task_dim, task_kind=self.task_kind,
                ctx_hidden=h, task_hidden=h, K=self.K, **kw,
            )
        return MTS3(self.obs_dim, self.act_dim, self.d, rng, H=self.H, task_dim=self.task_dim, abs_hidden=h, **kw)

    def to_meta(self) -> dict:
        return {f"model.{k}": v for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelSpec":
        kw = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key not in meta:
                raise KeyError(key)
            kw[f.name] = meta[key] if f.type == "str" else int(meta[key])
        return cls(**kw)
