"""Factorized Gaussian beliefs and the closed-form identities built on them.

A latent state ``z = [u; l]`` of size ``2d`` carries a covariance made of
three diagonal ``d x d`` blocks::

    [[diag(var_u), diag(cov_s)],
     [diag(cov_s), diag(var_l)]]

so that conditioning on ``w ~ N([I, 0] z, diag(var_obs))`` and inverting the
covariance reduce to per-dimension scalar arithmetic.

All functions accept numpy arrays or :class:`~mtsworld.autodiff.Tensor`
values with an arbitrary number of leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from . import autodiff as ad

VAR_FLOOR = 1e-8
COV_SHRINK = 0.99


class NonPositiveDefinite(ValueError):
    pass


class NonPositiveVariance(ValueError):
    pass


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DiagGaussian:
    mean: object
    var: object

    def __post_init__(self):
        if ad.value(self.mean).shape != ad.value(self.var).shape:
            raise DimMismatch("mean and var must have the same shape")

    @property
    def dim(self) -> int:
        return ad.value(self.mean).shape[-1]

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(ad.stop_gradient(self.mean), ad.stop_gradient(self.var))


@dataclass(frozen=True)
class LatentObservation:
    value: object
    var: object

    @property
    def dim(self) -> int:
        return ad.value(self.value).shape[-1]


@dataclass(frozen=True)
class FactorizedPrecision:
    lam_u: object
    lam_l: object
    lam_s: object


@dataclass(frozen=True)
class FactorizedBelief:
    mean_u: object
    mean_l: object
    var_u: object
    var_l: object
    cov_s: object

    @property
    def dim(self) -> int:
        return ad.value(self.mean_u).shape[-1]

    @property
    def mean(self):
        return ad.concat([self.mean_u, self.mean_l], axis=-1)

    @property
    def cov_triple(self) -> tuple:
        return (self.var_u, self.var_l, self.cov_s)

    def detach(self) -> "FactorizedBelief":
        return FactorizedBelief(*(ad.stop_gradient(x) for x in self.fields()))

    def fields(self) -> tuple:
        return (self.mean_u, self.mean_l, self.var_u, self.var_l, self.cov_s)

    def numpy(self) -> "FactorizedBelief":
        return FactorizedBelief(*(ad.value(x).copy() for x in self.fields()))

    def dense_cov(self) -> np.ndarray:
        """Full ``2d x 2d`` covariance (numpy, unbatched beliefs only)."""
        vu, vl, cs = (ad.value(x) for x in self.cov_triple)
        return np.block([[np.diag(vu), np.diag(cs)], [np.diag(cs), np.diag(vl)]])

    def positive_definite(self) -> bool:
        vu, vl, cs = (ad.value(x) for x in self.cov_triple)
        return bool(np.all(vu > 0) and np.all(vl > 0) and np.all(vu * vl - cs * cs > 0))

    @classmethod
    def isotropic(cls, batch_shape: tuple, d: int, var: float = 10.0) -> "FactorizedBelief":
        shape = tuple(batch_shape) + (d,)
        z = np.zeros(shape)
        v = np.full(shape, float(var))
        return cls(z, z.copy(), v, v.copy(), z.copy())


@dataclass(frozen=True)
class KalmanStepTrace:
    gain_u: object
    gain_l: object
    innovation: object


def pairwise_sum(items: Sequence):
    """Sum a list with a fixed left-to-right pairwise tree."""
    items = list(items)
    if not items:
        raise ValueError("pairwise_sum of an empty sequence")
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]


# ---------------------------------------------------------------------------
# block inversion
# ---------------------------------------------------------------------------


def _arr(x):
    return x if ad.is_tensor(x) else np.asarray(x, dtype=np.float64)


def _invert_blocks(a_u, a_l, a_s):
    det = a_u * a_l - a_s * a_s
    if np.any(~(ad.value(det) > 0)):
        raise NonPositiveDefinite("2x2 block with non-positive determinant")
    return a_l / det, a_u / det, (-1.0) * a_s / det


def factorized_invert(cov) -> FactorizedPrecision:
    """Covariance triple -> precision triple using scalar block inversion.

    ``cov`` may be a :class:`FactorizedBelief`, a ``(var_u, var_l, cov_s)``
    tuple, or a :class:`FactorizedPrecision` (then the covariance triple is
    returned as a tuple).
    """
    if isinstance(cov, FactorizedPrecision):
        return covariance_from_precision(cov)
    if isinstance(cov, FactorizedBelief):
        cov = cov.cov_triple
    var_u, var_l, cov_s = (_arr(x) for x in cov)
    lam_u, lam_l, lam_s = _invert_blocks(var_u, var_l, cov_s)
    return FactorizedPrecision(lam_u, lam_l, lam_s)


def covariance_from_precision(prec: FactorizedPrecision) -> tuple:
    """Inverse direction of :func:`factorized_invert`; returns ``(var_u, var_l, cov_s)``."""
    return _invert_blocks(prec.lam_u, prec.lam_l, prec.lam_s)


# ---------------------------------------------------------------------------
# aggregation and conditioning
# ---------------------------------------------------------------------------


def _set_terms(obs, prior_mean, set_axis):
    """Return (sum of precisions, sum of precision-weighted residuals).

    ``obs`` is either a list of LatentObservation or a single
    LatentObservation whose arrays carry the set along ``set_axis``.
    """
    if isinstance(obs, LatentObservation):
        inv = ad.reciprocal(obs.var)
        resid = _sub_expand(obs.value, prior_mean, set_axis) * inv
        return inv.sum(axis=set_axis), resid.sum(axis=set_axis)
    inv = [ad.reciprocal(o.var) for o in obs]
    resid = [(o.value - prior_mean) * i for o, i in zip(obs, inv)]
    return pairwise_sum(inv), pairwise_sum(resid)


def _sub_expand(x, mean, set_axis):
    shape = ad.value(x).shape
    if ad.is_tensor(mean):
        return x - ad.broadcast_to(mean.expand_dims(set_axis), shape)
    return x - np.broadcast_to(np.expand_dims(ad.value(mean), set_axis), shape)


def _check_dims(expected: int, obs) -> None:
    dims = [obs.dim] if isinstance(obs, LatentObservation) else [o.dim for o in obs]
    if any(d != expected for d in dims):
        raise DimMismatch(f"observation dims {dims} do not match {expected}")


def bayesian_aggregate(prior: DiagGaussian, obs, set_axis: int = -2) -> DiagGaussian:
    """Posterior of ``l ~ prior`` given ``r_n ~ N(l, diag(var_n))`` for every element.

    An empty list returns the prior unchanged.
    """
    _check_dims(prior.dim, obs)
    if not isinstance(obs, LatentObservation) and len(obs) == 0:
        return prior
    prec_sum, resid_sum = _set_terms(obs, prior.mean, set_axis)
    var = ad.reciprocal(ad.reciprocal(prior.var) + prec_sum)
    return DiagGaussian(prior.mean + var * resid_sum, var)


def gaussian_condition_set(prior: FactorizedBelief, obs, set_axis: int = -2) -> FactorizedBelief:
    """Condition a factorized belief on a set of observations of its upper half.

    Works in precision form: only the upper-block precision changes, by the
    sum of observation precisions.  Order of the set does not matter.
    """
    _check_dims(prior.dim, obs)
    if not isinstance(obs, LatentObservation) and len(obs) == 0:
        return prior
    prec = factorized_invert(prior)
    prec_sum, resid_sum = _set_terms(obs, prior.mean_u, set_axis)
    post_prec = FactorizedPrecision(prec.lam_u + prec_sum, prec.lam_l, prec.lam_s)
    var_u, var_l, cov_s = covariance_from_precision(post_prec)
    return FactorizedBelief(
        prior.mean_u + var_u * resid_sum,
        prior.mean_l + cov_s * resid_sum,
        var_u,
        var_l,
        cov_s,
    )


def factorized_kalman_update(prior: FactorizedBelief, obs: LatentObservation):
    """Single-observation Kalman update with ``H = [I, 0]`` in scalar form."""
    _check_dims(prior.dim, [obs])
    if np.any(~(ad.value(obs.var) > 0)):
        raise NonPositiveVariance("observation variance must be positive")
    vu, vl, cs = prior.cov_triple
    denom = vu + obs.var
    gain_u = vu / denom
    gain_l = cs / denom
    innovation = obs.value - prior.mean_u
    post = FactorizedBelief(
        prior.mean_u + gain_u * innovation,
        prior.mean_l + gain_l * innovation,
        vu * obs.var / denom,
        vl - cs * cs / denom,
        cs * obs.var / denom,
    )
    return post, KalmanStepTrace(gain_u, gain_l, innovation)


# ---------------------------------------------------------------------------
# marginalization and prediction
# ---------------------------------------------------------------------------


def gaussian_marginalize_linear(terms: Sequence, noise_cov) -> tuple[np.ndarray, np.ndarray]:
    """Moments of ``y = sum_i A_i u_i + eps`` for independent Gaussian ``u_i``.

    Each term is ``(A_i, gaussian)`` where ``gaussian`` is a DiagGaussian or a
    ``(mean, cov)`` pair with a full covariance matrix.  Dense numpy only.
    """
    noise_cov = np.asarray(noise_cov, dtype=np.float64)
    rows = noise_cov.shape[0]
    mean = np.zeros(rows)
    cov = noise_cov.copy()
    for a, g in terms:
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if isinstance(g, DiagGaussian):
            mu, sig = ad.value(g.mean), np.diag(ad.value(g.var))
        else:
            mu, sig = np.asarray(g[0], dtype=np.float64), np.atleast_2d(np.asarray(g[1], dtype=np.float64))
        mu = np.atleast_1d(mu)
        if a.shape[0] != rows or a.shape[1] != mu.shape[0] or sig.shape != (mu.shape[0], mu.shape[0]):
            raise DimMismatch(f"term with A {a.shape}, mean {mu.shape}, cov {sig.shape} vs rows {rows}")
        mean = mean + a @ mu
        cov = cov + a @ sig @ a.T
    return mean, cov


@dataclass(frozen=True)
class BlockMatrix:
    """A ``2n x 2k`` matrix given as four ``n x k`` blocks (optionally batched)."""

    uu: object
    ul: object
    lu: object
    ll: object

    @classmethod
    def from_dense(cls, m) -> "BlockMatrix":
        n2, k2 = ad.value(m).shape[-2:]
        n, k = n2 // 2, k2 // 2
        return cls(m[..., :n, :k], m[..., :n, k:], m[..., n:, :k], m[..., n:, k:])

    def dense(self) -> np.ndarray:
        v = [ad.value(b) for b in (self.uu, self.ul, self.lu, self.ll)]
        top = np.concatenate([v[0], v[1]], axis=-1)
        bot = np.concatenate([v[2], v[3]], axis=-1)
        return np.concatenate([top, bot], axis=-2)

    def apply(self, mean_u, mean_l) -> tuple:
        mv = ad.matvec
        return (
            mv(self.uu, mean_u) + mv(self.ul, mean_l),
            mv(self.lu, mean_u) + mv(self.ll, mean_l),
        )

    @cached_property
    def _products(self) -> tuple:
        # elementwise block products reused by every propagate call
        a, b, c, d = self.uu, self.ul, self.lu, self.ll
        return (a * a, 2.0 * (a * b), b * b, c * c, 2.0 * (c * d), d * d, a * c, a * d + b * c, b * d)

    def propagate(self, triple) -> tuple:
        """Block diagonals of ``M Sigma M^T`` for a factorized ``Sigma``."""
        vu, vl, cs = triple
        mv = ad.matvec
        aa, ab2, bb, cc, cd2, dd, ac, adbc, bd = self._products
        new_u = mv(aa, vu) + mv(ab2, cs) + mv(bb, vl)
        new_l = mv(cc, vu) + mv(cd2, cs) + mv(dd, vl)
        new_s = mv(ac, vu) + mv(adbc, cs) + mv(bd, vl)
        return new_u, new_l, new_s


def diag_propagate(m: BlockMatrix, var) -> tuple:
    """Block diagonals of ``M diag(var) M^T`` for ``M`` mapping a plain vector.

    Here ``M`` is given as a BlockMatrix whose ``uu``/``lu`` blocks hold the
    upper and lower output rows; ``ul``/``ll`` are ignored.
    """
    mv = ad.matvec
    top, bot = m.uu, m.lu
    return mv(top * top, var), mv(bot * bot, var), mv(top * bot, var)


def guard_positive(triple) -> tuple:
    """Clamp variances to the floor and shrink the side covariance inside the PD cone."""
    vu, vl, cs = triple
    vu = ad.maximum(vu, VAR_FLOOR)
    vl = ad.maximum(vl, VAR_FLOOR)
    lim = COV_SHRINK * ad.sqrt(vu * vl)
    cs = ad.maximum(ad.minimum(cs, lim), (-1.0) * lim)
    if np.any(~(ad.value(vu * vl - cs * cs) > 0)):
        raise NonPositiveDefinite("predicted covariance could not be repaired")
    return vu, vl, cs


def factorized_predict(
    post: FactorizedBelief,
    transition: BlockMatrix,
    control_mean=None,
    extra_cov_terms: Sequence = (),
    trans_noise=None,
    guard: bool = True,
) -> FactorizedBelief:
    """Kalman time update in factorized form.

    ``control_mean`` is a ``2d`` vector added to the mean (task and action
    contributions both go here); ``extra_cov_terms`` are additional covariance
    triples and ``trans_noise`` is a ``(q_u, q_l)`` pair of diagonal noise
    variances.  Only the block diagonals of ``A Sigma A^T`` are retained.
    """
    mu, ml = transition.apply(post.mean_u, post.mean_l)
    if control_mean is not None:
        d = post.dim
        mu = mu + control_mean[..., :d]
        ml = ml + control_mean[..., d:]
    vu, vl, cs = transition.propagate(post.cov_triple)
    for eu, el, es in extra_cov_terms:
        vu, vl, cs = vu + eu, vl + el, cs + es
    if trans_noise is not None:
        qu, ql = trans_noise
        vu, vl = vu + qu, vl + ql
    if guard:
        vu, vl, cs = guard_positive((vu, vl, cs))
    return FactorizedBelief(mu, ml, vu, vl, cs)


def select_belief(mask, a: FactorizedBelief, b: FactorizedBelief) -> FactorizedBelief:
    """Per batch element pick ``a`` where ``mask`` is true, else ``b``."""
    m = np.asarray(mask, dtype=bool)[..., None]
    return FactorizedBelief(*(ad.where(np.broadcast_to(m, ad.value(x).shape), x, y) for x, y in zip(a.fields(), b.fields())))
