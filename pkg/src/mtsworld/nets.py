"""Parameterized building blocks shared by the recurrent cells."""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gaussian import BlockMatrix, DiagGaussian, FactorizedBelief, LatentObservation, diag_propagate

OUTPUT_ACTIVATIONS = ("linear", "elu_plus_one", "softmax")


class ModelMismatch(ValueError):
    """A parameter set does not fit the architecture it is loaded into."""


class Module:
    """Container with named parameters discovered from attributes.

    Attributes that are parameter Tensors, Modules, or lists of Modules are
    visited in insertion order, which fixes the checkpoint layout.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
            elif isinstance(v, Module):
                yield from v.named_parameters(f"{prefix}{name}.")
            elif isinstance(v, (list, tuple)):
                for i, item in enumerate(v):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for v in vars(self).values():
            if isinstance(v, Module):
                yield from v.modules()
            elif isinstance(v, (list, tuple)):
                for item in v:
                    if isinstance(item, Module):
                        yield from item.modules()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ModelMismatch(f"parameter names differ (missing {missing}, unexpected {extra})")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ModelMismatch(f"{k}: shape {arr.shape} does not match {p.data.shape}")
            p.data = arr.copy()

    def project(self) -> None:
        """Re-impose structural constraints after a parameter update."""
        for m in self.modules():
            if m is not self:
                m._project_own()
        self._project_own()

    def _project_own(self) -> None:
        pass

    def zero_(self) -> None:
        for p in self.parameters():
            p.data = np.zeros_like(p.data)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _apply_2d(fn, x):
    """Run a rank>=2 op on a possibly 1-D input."""
    x = ad.tensor(x) if not isinstance(x, Tensor) else x
    if x.ndim == 1:
        return fn(x.reshape(1, -1)).reshape(-1)
    return fn(x)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = ad.parameter(_uniform(rng, n_in, (n_in, n_out)))
        self.bias = ad.parameter(_uniform(rng, n_in, (n_out,)))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x) -> Tensor:
        return _apply_2d(lambda v: ad.matmul(v, self.weight) + self.bias, x)


VAR_PREACT_FLOOR = -30.0


def positive_head(x):
    """``elu(x) + 1`` with the pre-activation floored so the result never underflows to 0."""
    return ad.elu_plus_one(ad.maximum(x, VAR_PREACT_FLOOR))


def activate(x, kind: str):
    if kind == "linear":
        return x
    if kind == "elu_plus_one":
        return positive_head(x)
    if kind == "softmax":
        return ad.softmax(x, axis=-1)
    raise ValueError(f"unknown output activation {kind!r}")


class MLP(Module):
    """ReLU hidden layers followed by a chosen output activation."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, output_activation: str = "linear"):
        widths = list(widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least input and output widths >= 1, got {widths}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {output_activation!r}")
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.output_activation = output_activation

    def __call__(self, x) -> Tensor:
        h = x
        for layer in self.layers[:-1]:
            h = ad.relu(layer(h))
        return activate(self.layers[-1](h), self.output_activation)


class GaussianEncoder(Module):
    """Shared ReLU trunk with a mean head and an ``elu + 1`` variance head."""

    def __init__(self, n_in: int, hidden: Sequence[int], n_out: int, rng: np.random.Generator):
        hidden = list(hidden)
        self.trunk = MLP([n_in] + hidden, rng) if hidden else None
        width = hidden[-1] if hidden else n_in
        self.n_in = n_in
        self.mean_head = Linear(width, n_out, rng)
        self.var_head = Linear(width, n_out, rng)

    def __call__(self, x) -> LatentObservation:
        x = ad.tensor(x) if not isinstance(x, Tensor) else x
        if x.shape[-1] != self.n_in:
            raise ad.ShapeMismatch(f"encoder expects {self.n_in} inputs, got {x.shape[-1]}")
        h = x
        if self.trunk is not None:
            # every trunk layer is followed by relu, including the last one
            h = ad.relu(self.trunk(x))
        return LatentObservation(self.mean_head(h), positive_head(self.var_head(h)))


def encode_obs(o, encoder: GaussianEncoder) -> LatentObservation:
    return encoder(o)


def band_mask(d: int, bandwidth: int) -> np.ndarray:
    idx = np.arange(d)
    return (np.abs(idx[:, None] - idx[None, :]) <= bandwidth).astype(np.float64)


class BandedTransition(Module):
    """Mixture of ``K`` band-limited block transition matrices.

    Each basis matrix is made of four ``d x d`` blocks whose entries vanish
    outside ``bandwidth`` of the diagonal.  Mixing coefficients come from a
    softmax layer applied to the posterior mean.
    """

    def __init__(self, d: int, K: int, bandwidth: int, rng: np.random.Generator, init_noise: float = 0.05):
        if K < 1 or bandwidth < 0:
            raise ValueError("K must be >= 1 and bandwidth >= 0")
        self.d, self.K, self.bandwidth = d, K, bandwidth
        self.mask = band_mask(d, bandwidth)
        eye = np.eye(d)
        # entry std chosen so the whole 2d x 2d perturbation has norm ~ init_noise
        sd = init_noise / math.sqrt(2 * d)
        self.basis_uu = ad.parameter((eye + sd * rng.normal(size=(K, d, d))) * self.mask)
        self.basis_ul = ad.parameter(sd * rng.normal(size=(K, d, d)) * self.mask)
        self.basis_lu = ad.parameter(sd * rng.normal(size=(K, d, d)) * self.mask)
        self.basis_ll = ad.parameter((eye + sd * rng.normal(size=(K, d, d))) * self.mask)
        self.coeff_net = MLP([2 * d, K], rng, output_activation="softmax") if K > 1 else None

    def blocks(self) -> tuple:
        return (self.basis_uu, self.basis_ul, self.basis_lu, self.basis_ll)

    def _project_own(self) -> None:
        for b in self.blocks():
            b.data = b.data * self.mask

    def coefficients(self, z_mean) -> Tensor:
        if self.coeff_net is None:
            shape = ad.value(z_mean).shape[:-1] + (1,)
            return ad.tensor(np.ones(shape))
        return self.coeff_net(z_mean)

    def matrix(self, z_mean=None) -> BlockMatrix:
        """``A_t = sum_k alpha_k(z) A_k`` as a (batched) BlockMatrix."""
        d, K = self.d, self.K
        if K == 1:
            return BlockMatrix(*(b[0] for b in self.blocks()))
        alpha = self.coefficients(z_mean)
        lead = alpha.shape[:-1]
        alpha = alpha.reshape((-1, K))
        return BlockMatrix(*(ad.matmul(alpha, b.reshape(K, d * d)).reshape(lead + (d, d)) for b in self.blocks()))


def transition_matrix(z_post_mean, bt: BandedTransition) -> BlockMatrix:
    return bt.matrix(z_post_mean)


CONTROL_KINDS = ("linear", "locally_linear", "nonlinear")


class ControlModel(Module):
    """Deterministic action contribution ``b(a)`` to the prior mean (size ``2d``)."""

    def __init__(
        self,
        kind: str,
        act_dim: int,
        d: int,
        rng: np.random.Generator,
        K: int = 4,
        hidden: Sequence[int] = (32,),
        init_scale: float = 0.1,
    ):
        if kind not in CONTROL_KINDS:
            raise ValueError(f"unknown control model {kind!r}")
        self.kind, self.act_dim, self.d, self.K = kind, act_dim, d, K
        # the control offset is integrated by a near-identity transition, so start it small
        if kind == "linear":
            self.B = ad.parameter(init_scale * _uniform(rng, act_dim, (act_dim, 2 * d)))
        elif kind == "locally_linear":
            self.B = ad.parameter(init_scale * _uniform(rng, act_dim, (act_dim, K * 2 * d)))
            self.coeff_net = MLP([2 * d, K], rng, output_activation="softmax")
        else:
            self.net = MLP([act_dim] + list(hidden) + [2 * d], rng)
            out = self.net.layers[-1]
            out.weight.data *= init_scale
            out.bias.data *= init_scale

    @property
    def needs_state(self) -> bool:
        return self.kind == "locally_linear"

    def __call__(self, a, z_mean=None) -> Tensor:
        a = ad.tensor(a) if not isinstance(a, Tensor) else a
        if a.shape[-1] != self.act_dim:
            raise ad.ShapeMismatch(f"control model expects {self.act_dim} action dims, got {a.shape[-1]}")
        if self.kind == "linear":
            return _apply_2d(lambda v: ad.matmul(v, self.B), a)
        if self.kind == "nonlinear":
            return self.net(a)
        if z_mean is None:
            raise ValueError("locally linear control needs the posterior mean")
        alpha = self.coeff_net(z_mean)

        def mix(v):
            lead = v.shape[:-1]
            per_k = ad.matmul(v, self.B).reshape(lead + (self.K, 2 * self.d))
            return ad.matmul(alpha.reshape(lead + (1, self.K)), per_k).reshape(lead + (2 * self.d,))

        return _apply_2d(mix, a)


def control_mean(a, cm: ControlModel, z_post_mean=None) -> Tensor:
    return cm(a, z_post_mean)


class TaskTransform(Module):
    """Maps latent task moments into an additive prior mean and covariance triple."""

    def __init__(
        self,
        kind: str,
        task_dim: int,
        d: int,
        rng: np.random.Generator,
        K: int = 4,
        hidden: Sequence[int] = (32,),
        init_scale: float = 0.1,
    ):
        if kind not in CONTROL_KINDS:
            raise ValueError(f"unknown task transform {kind!r}")
        self.kind, self.task_dim, self.d, self.K = kind, task_dim, d, K
        # small coupling at init: the task term is added at every fast step
        if kind == "linear":
            self.C = ad.parameter(init_scale * _uniform(rng, task_dim, (2 * d, task_dim)))
        elif kind == "locally_linear":
            self.C = ad.parameter(init_scale * _uniform(rng, task_dim, (K, 2 * d * task_dim)))
            self.coeff_net = MLP([2 * d, K], rng, output_activation="softmax")
        else:
            self.mean_net = MLP([task_dim] + list(hidden) + [2 * d], rng)
            self.var_net = MLP([task_dim] + list(hidden) + [2 * d], rng)

    @property
    def needs_state(self) -> bool:
        return self.kind == "locally_linear"

    def _matrix(self, z_mean):
        if self.kind == "linear":
            return self.C
        alpha = self.coeff_net(z_mean)
        lead = alpha.shape[:-1]
        return ad.matmul(alpha.reshape((-1, self.K)), self.C).reshape(lead + (2 * self.d, self.task_dim))

    def __call__(self, task, z_mean=None) -> tuple:
        """Return ``(mean_2d, (var_u, var_l, cov_s))``.

        ``task`` is a DiagGaussian; a FactorizedBelief is accepted by the
        linear kind, whose matrix then acts on the stacked ``[u; l]`` task.
        """
        d = self.d
        if self.kind == "nonlinear":
            mean = self.mean_net(task.mean)
            raw = ad.maximum(positive_head(self.var_net(task.var)) - 1.0, 0.0)
            zero = ad.tensor(np.zeros(raw.shape[:-1] + (d,)))
            return mean, (raw[..., :d], raw[..., d:], zero)
        C = self._matrix(z_mean)
        if isinstance(task, FactorizedBelief):
            if self.kind != "linear":
                raise ValueError("factorized task beliefs need the linear transform")
            bm = BlockMatrix.from_dense(C)
            mu, ml = bm.apply(task.mean_u, task.mean_l)
            return ad.concat([mu, ml], axis=-1), bm.propagate(task.cov_triple)
        rows = BlockMatrix(C[..., :d, :], None, C[..., d:, :], None)
        return ad.matvec(C, task.mean), diag_propagate(rows, task.var)


def time_features(H: int, length: int | None = None, offset: int = 0) -> np.ndarray:
    """``(t/H, sin 2 pi t/H, cos 2 pi t/H)`` for ``t = offset+1 .. offset+length``."""
    length = H if length is None else length
    t = np.arange(offset + 1, offset + length + 1, dtype=np.float64)
    ph = 2.0 * np.pi * t / H
    return np.stack([t / H, np.sin(ph), np.cos(ph)], axis=-1)


class TimeEncoding:
    def __init__(self, H: int):
        if H < 1:
            raise ValueError("window length must be >= 1")
        self.H = H

    def __call__(self, length: int | None = None) -> np.ndarray:
        return time_features(self.H, length)


class Decoder(Module):
    """Mean MLP on ``[mean_u, mean_l]``; ``elu + 1`` variance MLP on the covariance triple."""

    def __init__(self, d: int, hidden: Sequence[int], out_dim: int, rng: np.random.Generator):
        hidden = list(hidden)
        self.mean_net = MLP([2 * d] + hidden + [out_dim], rng)
        self.var_net = MLP([3 * d] + hidden + [out_dim], rng, output_activation="elu_plus_one")

    def __call__(self, b: FactorizedBelief) -> tuple:
        mean = self.mean_net(ad.concat([b.mean_u, b.mean_l], axis=-1))
        var = self.var_net(ad.concat([b.var_u, b.var_l, b.cov_s], axis=-1))
        return mean, var


def decode_belief(b: FactorizedBelief, dec: Decoder) -> tuple:
    return dec(b)


def diag_gaussian_prior(batch_shape: tuple, dim: int) -> DiagGaussian:
    shape = tuple(batch_shape) + (dim,)
    return DiagGaussian(np.zeros(shape), np.ones(shape))
