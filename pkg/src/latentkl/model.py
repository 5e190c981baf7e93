"""Gaussian mixture with known shared covariance, viewed as a latent-label model.

The parameter vector is laid out as ``(a_1, ..., a_{K-1}, mu_1, ..., mu_K)``
with each ``mu_k`` of length ``M``; the last mixing ratio is implicit.
Labels are 0-based integers in ``range(K)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

BOUNDARY_EPS = 1e-8
LOG_2PI = float(np.log(2.0 * np.pi))


def logsumexp(a, axis=None, keepdims=False):
    """``ln sum exp(a)`` along ``axis``; rows that are entirely ``-inf`` give ``-inf``."""
    a = np.asarray(a, dtype=float)
    top = np.max(a, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - top), axis=axis, keepdims=True)) + top
    return out if keepdims else np.squeeze(out, axis=axis)


class NonRegularError(ValueError):
    """Raised when a parameter or model violates the regular-case assumptions."""


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """K-component mixture of ``N(mu_k, sigma)`` in ``R^M``."""

    K: int
    M: int
    sigma: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ValueError(f"need K >= 1 and M >= 1, got K={self.K}, M={self.M}")
        sigma = np.array(self.sigma, dtype=float).reshape(self.M, self.M)
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise ValueError("sigma must be symmetric")
        try:
            np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            raise ValueError("sigma must be positive definite") from None
        sigma.setflags(write=False)
        object.__setattr__(self, "sigma", sigma)

    @property
    def d(self) -> int:
        return (self.K - 1) + self.K * self.M

    @cached_property
    def whitener(self) -> np.ndarray:
        """Matrix ``L^{-1}`` with ``sigma = L L^T``; maps x to unit-covariance coordinates."""
        chol = np.linalg.cholesky(self.sigma)
        return np.linalg.solve(chol, np.eye(self.M))

    @cached_property
    def precision(self) -> np.ndarray:
        return np.linalg.inv(self.sigma)

    @cached_property
    def log_norm_const(self) -> float:
        _, logdet = np.linalg.slogdet(self.sigma)
        return -0.5 * (self.M * LOG_2PI + logdet)

    # -- parameter layout ---------------------------------------------------

    def unpack(self, w) -> tuple[np.ndarray, np.ndarray]:
        """Split ``w`` (shape ``(..., d)``) into mixing ratios ``(..., K)`` and means ``(..., K, M)``."""
        w = np.asarray(w, dtype=float)
        if w.shape[-1] != self.d:
            raise ValueError(f"parameter has length {w.shape[-1]}, expected d={self.d}")
        head = w[..., : self.K - 1]
        weights = np.concatenate([head, 1.0 - head.sum(axis=-1, keepdims=True)], axis=-1)
        means = w[..., self.K - 1 :].reshape(w.shape[:-1] + (self.K, self.M))
        return weights, means

    def pack(self, weights, means) -> np.ndarray:
        weights = np.asarray(weights, dtype=float)
        means = np.asarray(means, dtype=float)
        lead = weights.shape[:-1]
        return np.concatenate(
            [weights[..., : self.K - 1], means.reshape(lead + (self.K * self.M,))], axis=-1
        )

    def is_interior(self, w) -> np.ndarray:
        weights, _ = self.unpack(w)
        return np.all(weights > BOUNDARY_EPS, axis=-1)

    def check_param(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.ndim != 1:
            raise ValueError("expected a single parameter vector")
        if not np.all(np.isfinite(w)):
            raise NonRegularError("parameter has non-finite entries")
        if not self.is_interior(w):
            raise NonRegularError(
                f"mixing ratios {self.unpack(w)[0]} touch the simplex boundary"
            )
        return w

    # -- densities ----------------------------------------------------------

    def component_logpdf(self, w, x) -> np.ndarray:
        """``ln a_k + ln N(x | mu_k, sigma)`` for every point and component, shape ``(n, K)``."""
        w = self.check_param(w)
        x = self._as_points(x)
        weights, means = self.unpack(w)
        z = x @ self.whitener.T
        nu = means @ self.whitener.T
        sq = ((z[:, None, :] - nu[None, :, :]) ** 2).sum(axis=-1)
        return np.log(weights)[None, :] + self.log_norm_const - 0.5 * sq

    def log_joint(self, w, x, y) -> np.ndarray:
        """``ln p(x, y | w)``; broadcasts over points."""
        x = self._as_points(x)
        y = self._check_labels(y, len(x))
        comp = self.component_logpdf(w, x)
        return comp[np.arange(len(x)), y]

    def log_marginal(self, w, x) -> np.ndarray:
        return logsumexp(self.component_logpdf(w, x), axis=1)

    def posterior_label(self, w, x) -> np.ndarray:
        """Responsibilities ``p(y | x, w)``, shape ``(n, K)``; rows sum to one."""
        comp = self.component_logpdf(w, x)
        comp -= comp.max(axis=1, keepdims=True)
        r = np.exp(comp)
        return r / r.sum(axis=1, keepdims=True)

    def log_posterior_label(self, w, x) -> np.ndarray:
        comp = self.component_logpdf(w, x)
        return comp - logsumexp(comp, axis=1, keepdims=True)

    def _as_points(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1 and self.M == 1:
            x = x[:, None]
        elif x.ndim == 1 and x.shape[0] == self.M:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.M:
            raise ValueError(f"points must have shape (n, {self.M})")
        return x

    def _check_labels(self, y, n: int) -> np.ndarray:
        y = np.asarray(y)
        if y.ndim == 0:
            y = np.full(n, int(y))
        if y.shape != (n,):
            raise ValueError("labels and points differ in length")
        if not np.issubdtype(y.dtype, np.integer) or y.min(initial=0) < 0 or y.max(initial=0) >= self.K:
            raise ValueError(f"labels must be integers in range({self.K})")
        return y.astype(np.intp)


@dataclass(frozen=True, eq=False)
class TrueDistribution:
    model: MixtureModel
    w_star: np.ndarray

    def __post_init__(self):
        w = self.model.check_param(np.array(self.w_star, dtype=float))
        _, means = self.model.unpack(w)
        for i, j in itertools.combinations(range(self.model.K), 2):
            if np.allclose(means[i], means[j], atol=1e-8):
                raise NonRegularError(f"components {i} and {j} share a mean; K exceeds K*")
        w.setflags(write=False)
        object.__setattr__(self, "w_star", w)

    @property
    def weights(self) -> np.ndarray:
        return self.model.unpack(self.w_star)[0]

    @property
    def means(self) -> np.ndarray:
        return self.model.unpack(self.w_star)[1]

    def log_conditional(self, x) -> np.ndarray:
        """``ln q(y | x)`` for every point and label."""
        return self.model.log_posterior_label(self.w_star, x)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        if n < 0:
            raise ValueError("n must be non-negative")
        y = rng.choice(self.model.K, size=n, p=self.weights)
        chol = np.linalg.cholesky(self.model.sigma)
        x = self.means[y] + rng.standard_normal((n, self.model.M)) @ chol.T
        return x, y


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y must have equal length")

    @property
    def n(self) -> int:
        return len(self.y)


def sample_dataset(true_dist: TrueDistribution, n: int, seed) -> LabeledDataset:
    """Draw ``n`` i.i.d. labelled pairs; the label first, then the point given the label."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    x, y = true_dist.sample(n, rng)
    return LabeledDataset(x, y)


@dataclass(frozen=True)
class SymmetryGroup:
    """All ``K!`` relabellings of a mixture, acting on parameter vectors.

    Permutation ``perm`` sends new label ``k`` to old label ``perm[k]``, so
    component ``k`` of the image is component ``perm[k]`` of the original.
    """

    K: int

    @property
    def permutations(self) -> list[tuple[int, ...]]:
        return list(itertools.permutations(range(self.K)))


def apply_permutation(model: MixtureModel, perm, w) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.intp)
    if sorted(perm.tolist()) != list(range(model.K)):
        raise ValueError(f"{perm.tolist()} is not a permutation of range({model.K})")
    weights, means = model.unpack(w)
    return model.pack(weights[..., perm], means[..., perm, :])
