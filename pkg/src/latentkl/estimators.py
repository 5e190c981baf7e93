"""Maximum-likelihood and Bayes estimation of latent labels and new observations.

The maximum-likelihood side fits the mixture by EM (started from the true
parameter when studying the asymptotic branch) and resolves label switching
by aligning to the nearest symmetric image of ``w*``.

The Bayes side integrates over the posterior by self-normalised importance
sampling. Draws come from a Gaussian centred at the MLE with covariance
``inflation * (n I_X(w*))^{-1}``, taken in antithetic pairs, and every Bayes
quantity for one dataset is computed from the same weighted draw set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from ._kernels import em_whitened, pointwise_logmarg, prefix_loglik
from .fisher import FisherBundle
from .model import (
    BOUNDARY_EPS,
    LOG_2PI,
    MixtureModel,
    NonRegularError,
    SymmetryGroup,
    TrueDistribution,
    apply_permutation,
    logsumexp,
)

ESS_FRACTION = 0.05
ML, BAYES = "ML", "Bayes"


class PosteriorWarning(RuntimeWarning):
    pass


# -- prior ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Prior:
    """Dirichlet on the mixing ratios times independent Gaussians on every mean coordinate."""

    model: MixtureModel
    concentration: float = 1.0
    mean_loc: float = 0.0
    mean_scale: float = 10.0

    def __post_init__(self):
        eta = np.broadcast_to(np.asarray(self.concentration, dtype=float), (self.model.K,))
        if np.any(eta <= 0) or self.mean_scale <= 0:
            raise ValueError("prior hyperparameters must be positive")
        object.__setattr__(self, "_eta", eta.copy())

    def logpdf(self, w) -> np.ndarray:
        """Log density; ``-inf`` outside the open simplex."""
        w = np.asarray(w, dtype=float)
        weights, means = self.model.unpack(w)
        eta = self._eta
        out = np.zeros(w.shape[:-1])
        if self.model.K > 1:
            inside = np.all(weights > 0, axis=-1)
            with np.errstate(divide="ignore", invalid="ignore"):
                dirichlet = (eta - 1.0) * np.log(np.where(weights > 0, weights, 1.0))
            out = out + gammaln(eta.sum()) - gammaln(eta).sum() + dirichlet.sum(axis=-1)
            out = np.where(inside, out, -np.inf)
        s2 = self.mean_scale**2
        gauss = -0.5 * ((means - self.mean_loc) ** 2 / s2 + LOG_2PI + np.log(s2))
        return out + gauss.sum(axis=(-2, -1))

    def grad_hess(self, w) -> tuple[np.ndarray, np.ndarray]:
        """Gradient and Hessian of ``ln prior`` at a single point."""
        model = self.model
        w = model.check_param(w)
        weights, means = model.unpack(w)
        K, d = model.K, model.d
        grad = np.zeros(d)
        hess = np.zeros((d, d))
        eta = self._eta
        if K > 1:
            grad[: K - 1] = (eta[:-1] - 1.0) / weights[:-1] - (eta[-1] - 1.0) / weights[-1]
            hess[: K - 1, : K - 1] = -(eta[-1] - 1.0) / weights[-1] ** 2
            idx = np.arange(K - 1)
            hess[idx, idx] -= (eta[:-1] - 1.0) / weights[:-1] ** 2
        s2 = self.mean_scale**2
        grad[K - 1 :] = -(means.ravel() - self.mean_loc) / s2
        idx = np.arange(K - 1, d)
        hess[idx, idx] = -1.0 / s2
        return grad, hess

    def curvature_ratio(self, w) -> np.ndarray:
        """Second derivative of the prior divided by the prior."""
        g, h = self.grad_hess(w)
        return h + np.outer(g, g)


# -- maximum likelihood -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class MLEResult:
    w_hat: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    boundary: bool = False
    trace: np.ndarray = field(default=None, repr=False)


def em_fit(model: MixtureModel, X, init, tol: float = 1e-10, max_iter: int = 500) -> MLEResult:
    """EM for mixing ratios and means with the covariance held fixed.

    Stops once the relative log-likelihood gain falls below ``tol``. Running
    out of iterations is reported through ``converged``; a mixing ratio
    collapsing onto the boundary stops the run with ``boundary=True``.
    ``trace`` holds the log-likelihood of every visited iterate.
    """
    x = model._as_points(X)
    n = len(x)
    if n < model.d:
        raise ValueError(f"need at least d={model.d} points, got {n}")
    weights, means = model.unpack(model.check_param(init))
    whiten = model.whitener
    log_w, nu, ll, iters, status, trace = em_whitened(
        np.ascontiguousarray(x @ whiten.T), np.log(weights), np.ascontiguousarray(means @ whiten.T),
        model.log_norm_const, tol, max_iter, BOUNDARY_EPS,
    )
    chol = np.linalg.cholesky(model.sigma)
    w_hat = model.pack(np.exp(log_w), nu @ chol.T)
    return MLEResult(w_hat, float(ll), int(iters), status == 0, status == 2, trace.copy())


def em_fit_restarts(model, X, rng, restarts: int = 10, **kwargs) -> MLEResult:
    """Best of several EM runs started from random data points; no alignment."""
    x = model._as_points(X)
    best = None
    for _ in range(restarts):
        means = x[rng.choice(len(x), size=model.K, replace=False)]
        init = model.pack(np.full(model.K, 1.0 / model.K), means)
        res = em_fit(model, x, init, **kwargs)
        if not res.boundary and (best is None or res.loglik > best.loglik):
            best = res
    if best is None:
        raise NonRegularError("every EM restart collapsed onto the simplex boundary")
    return best


def align_mle(result: MLEResult, true_dist: TrueDistribution, group: SymmetryGroup | None = None) -> MLEResult:
    """Relabel ``w_hat`` to the symmetric image closest to ``w*``.

    Ties go to the first permutation in lexicographic order.
    """
    model = true_dist.model
    group = group or SymmetryGroup(model.K)
    best, best_dist = result.w_hat, np.inf
    for perm in group.permutations:
        cand = apply_permutation(model, perm, result.w_hat)
        dist = float(np.linalg.norm(cand - true_dist.w_star))
        if dist < best_dist:
            best, best_dist = cand, dist
    return MLEResult(best, result.loglik, result.iterations, result.converged, result.boundary, result.trace)


# -- posterior draws ----------------------------------------------------------


def sample_loglik(model: MixtureModel, W, X, labels=None, breaks=None):
    """Per-draw prefix sums of marginal and label-conditional log-likelihoods.

    Returns ``(marginal, conditional)``, each of shape ``(S, len(breaks))``;
    ``breaks`` defaults to ``[n]``. ``conditional`` is ``None`` without labels.
    """
    x = model._as_points(X)
    W = np.atleast_2d(np.asarray(W, dtype=float))
    n = len(x)
    breaks = np.array([n] if breaks is None else breaks, dtype=np.int64)
    if np.any(np.diff(breaks) < 0) or breaks.min(initial=0) < 0 or breaks.max(initial=0) > n:
        raise ValueError("breaks must be sorted prefix lengths within [0, n]")
    weights, means = model.unpack(W)
    if np.any(weights <= 0):
        raise NonRegularError("draws outside the simplex must be filtered first")
    z = np.ascontiguousarray(x @ model.whitener.T)
    nu = np.ascontiguousarray(means @ model.whitener.T)
    lab = np.empty(0, dtype=np.int64) if labels is None else model._check_labels(labels, n).astype(np.int64)
    marg, cond = prefix_loglik(z, nu, np.log(weights), model.log_norm_const, lab, breaks)
    return marg, (None if labels is None else cond)


def batch_log_posterior_label(model: MixtureModel, W, x) -> np.ndarray:
    """``ln p(y | x, w_s)`` for every draw and point, shape ``(S, n, K)``."""
    x = model._as_points(x)
    weights, means = model.unpack(W)
    z = x @ model.whitener.T
    nu = means @ model.whitener.T
    sq = ((z[None, :, None, :] - nu[:, None, :, :]) ** 2).sum(axis=-1)
    comp = np.log(weights)[:, None, :] - 0.5 * sq
    return comp - logsumexp(comp, axis=-1, keepdims=True)


def batch_log_marginal(model: MixtureModel, W, x) -> np.ndarray:
    """``ln p(x | w_s)``, shape ``(S, n)``."""
    x = model._as_points(x)
    weights, means = model.unpack(np.atleast_2d(W))
    z = np.ascontiguousarray(x @ model.whitener.T)
    nu = np.ascontiguousarray(means @ model.whitener.T)
    return pointwise_logmarg(z, nu, np.log(weights), model.log_norm_const)


@dataclass(frozen=True, eq=False)
class PosteriorSampler:
    """Weighted posterior draws for one dataset.

    Only draws inside the simplex are stored; ``n_draws`` counts all of them so
    the evidence estimate stays unbiased.
    """

    model: MixtureModel
    samples: np.ndarray
    log_target: np.ndarray
    log_proposal: np.ndarray
    n_draws: int
    labels: np.ndarray | None = None
    label_prefix: dict = field(default_factory=dict, repr=False)

    @property
    def log_weights(self) -> np.ndarray:
        return self.log_target - self.log_proposal

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weights
        return np.exp(lw - logsumexp(lw))

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    @property
    def flagged(self) -> bool:
        return self.ess < ESS_FRACTION * self.n_draws

    def log_evidence(self) -> float:
        return float(logsumexp(self.log_weights) - math.log(self.n_draws))

    def log_evidence_se(self) -> float:
        lw = self.log_weights
        r = np.exp(lw - lw.max())
        r_all = np.concatenate([r, np.zeros(self.n_draws - len(r))])
        return float(r_all.std(ddof=1) / (r_all.mean() * math.sqrt(self.n_draws)))

    def expect(self, values) -> np.ndarray:
        return np.tensordot(self.weights, np.asarray(values, dtype=float), axes=(0, 0))

    def log_expect_exp(self, log_values) -> np.ndarray:
        """``ln E_post[exp(v)]`` for per-draw values ``v`` (leading axis over draws)."""
        lv = np.asarray(log_values, dtype=float)
        lw = self.log_weights.reshape((-1,) + (1,) * (lv.ndim - 1))
        return logsumexp(lw + lv, axis=0) - logsumexp(self.log_weights)

    def log_expect_exp_se(self, log_values) -> float:
        lv = np.asarray(log_values, dtype=float)
        W = self.weights
        f = np.exp(lv - lv.max())
        mean = float(W @ f)
        return float(np.sqrt(np.sum(W**2 * (f - mean) ** 2)) / mean)


def build_posterior(
    model: MixtureModel,
    prior: Prior,
    X,
    mle: MLEResult,
    fisher: FisherBundle,
    S: int = 512,
    seed=None,
    inflation: float = 1.2,
    antithetic: bool = True,
    labels=None,
    label_breaks=(),
) -> PosteriorSampler:
    """Importance-sample the posterior around the MLE.

    With ``labels`` given, prefix sums of ``ln p(y_i | x_i, w_s)`` at the
    lengths in ``label_breaks`` (and ``n``) are cached on the sampler, sharing
    the pass over the data that computes the likelihood.
    """
    x = model._as_points(X)
    n = len(x)
    if n < 1:
        raise ValueError("posterior sampling needs at least one observation")
    if antithetic and S % 2:
        raise ValueError("antithetic sampling needs an even draw count")
    rng = np.random.default_rng(seed)
    cov = inflation * np.linalg.inv(n * fisher.i_x)
    chol = np.linalg.cholesky(cov)
    d = model.d
    if antithetic:
        eps = rng.standard_normal((S // 2, d))
        eps = np.concatenate([eps, -eps])
    else:
        eps = rng.standard_normal((S, d))
    draws = mle.w_hat + eps @ chol.T
    _, logdet = np.linalg.slogdet(cov)
    log_prop = -0.5 * (np.sum(eps**2, axis=1) + d * LOG_2PI + logdet)

    keep = model.is_interior(draws)
    draws, log_prop = draws[keep], log_prop[keep]
    breaks = sorted({int(b) for b in label_breaks} | {n})
    marg, cond = sample_loglik(model, draws, x, labels=labels, breaks=breaks)
    log_target = marg[:, -1] + prior.logpdf(draws)
    prefix = {} if cond is None else {b: cond[:, i] for i, b in enumerate(breaks)}
    lab = None if labels is None else np.asarray(labels)
    return PosteriorSampler(model, draws, log_target, log_prop, S, lab, prefix)


def log_marginal_likelihood(sampler: PosteriorSampler | None = None, X=None) -> float:
    """``ln Z`` from the importance weights; the empty dataset gives exactly 0."""
    if X is not None and len(X) == 0:
        return 0.0
    if sampler is None:
        raise ValueError("need a sampler for a non-empty dataset")
    return sampler.log_evidence()


def conjugate_log_evidence(model: MixtureModel, prior: Prior, X) -> float:
    """Exact ``ln Z`` for a single-component model with its Gaussian mean prior."""
    if model.K != 1:
        raise ValueError("closed-form evidence only exists for K=1")
    x = model._as_points(X)
    n, M = x.shape
    if n == 0:
        return 0.0
    prec = model.precision
    s2 = prior.mean_scale**2
    m0 = np.broadcast_to(np.asarray(prior.mean_loc, dtype=float), (M,))
    post_prec = np.eye(M) / s2 + n * prec
    b = m0 / s2 + prec @ x.sum(axis=0)
    _, logdet_sigma = np.linalg.slogdet(model.sigma)
    _, logdet_post = np.linalg.slogdet(post_prec)
    quad = np.einsum("ni,ij,nj->", x, prec, x)
    return float(
        -0.5 * n * (M * LOG_2PI + logdet_sigma)
        - 0.5 * quad
        - 0.5 * M * math.log(s2)
        - 0.5 * m0 @ m0 / s2
        - 0.5 * logdet_post
        + 0.5 * b @ np.linalg.solve(post_prec, b)
    )


def conjugate_posterior(model: MixtureModel, prior: Prior, X) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and covariance of the component mean when K=1."""
    if model.K != 1:
        raise ValueError("closed-form posterior only exists for K=1")
    x = model._as_points(X)
    M = model.M
    s2 = prior.mean_scale**2
    m0 = np.broadcast_to(np.asarray(prior.mean_loc, dtype=float), (M,))
    post_prec = np.eye(M) / s2 + len(x) * model.precision
    cov = np.linalg.inv(post_prec)
    return cov @ (m0 / s2 + model.precision @ x.sum(axis=0)), cov


# -- asymptotic expansion of -ln Z ------------------------------------------


@dataclass(frozen=True)
class LaplaceTerms:
    neg_loglik: float
    half_d_log_n: float
    neg_log_prior: float
    log_2pi: float
    half_logdet_fisher: float
    curvature: float

    @property
    def total(self) -> float:
        return (
            self.neg_loglik
            + self.half_d_log_n
            + self.neg_log_prior
            + self.log_2pi
            + self.half_logdet_fisher
            + self.curvature
        )


def laplace_expansion_F2(model: MixtureModel, prior: Prior, X, mle: MLEResult, fisher: FisherBundle) -> LaplaceTerms:
    """Expansion of ``-ln Z(X)`` to order ``1/n`` around the MLE, term by term."""
    x = model._as_points(X)
    n, d = len(x), model.d
    w = mle.w_hat
    ratio = prior.curvature_ratio(w)
    curvature = -0.5 / n * float(np.trace(np.linalg.solve(fisher.i_x, ratio.T).T))
    _, logdet = np.linalg.slogdet(fisher.i_x)
    return LaplaceTerms(
        neg_loglik=-float(model.log_marginal(w, x).sum()),
        half_d_log_n=0.5 * d * math.log(n),
        neg_log_prior=-float(prior.logpdf(w)),
        log_2pi=-0.5 * d * LOG_2PI,
        half_logdet_fisher=0.5 * logdet,
        curvature=curvature,
    )


# -- estimated probabilities ----------------------------------------------------


def _need(method, fit, sampler):
    if method == ML:
        if fit is None:
            raise ValueError("ML estimation needs an MLEResult")
    elif method == BAYES:
        if sampler is None:
            raise ValueError("Bayes estimation needs a PosteriorSampler")
    else:
        raise ValueError(f"unknown method {method!r}")


def _block_size(alpha: float, n: int, upper_open: bool) -> int:
    if not (0.0 < alpha < 1.0 or (alpha == 1.0 and not upper_open)):
        raise ValueError(f"alpha={alpha} outside its admissible range")
    m = alpha * n
    if abs(m - round(m)) > 1e-9 or round(m) < 1:
        raise ValueError(f"alpha * n = {m} is not a positive integer")
    return int(round(m))


def _cond_logprob(sampler: PosteriorSampler, x, y, m: int) -> np.ndarray:
    """Per-draw ``sum_{i<m} ln p(y_i | x_i, w_s)``, reusing the sampler's cache when possible."""
    y = np.asarray(y)
    if sampler.labels is not None and m in sampler.label_prefix and len(y) >= m:
        if np.array_equal(sampler.labels[:m], y[:m]):
            return sampler.label_prefix[m]
    _, cond = sample_loglik(sampler.model, sampler.samples, np.asarray(x)[:m], labels=y[:m])
    return cond[:, 0]


def estimate_type1(method, model: MixtureModel, X, Y, fit: MLEResult = None, sampler: PosteriorSampler = None) -> float:
    """``ln p(Y^n | X^n)`` at the given label assignment."""
    _need(method, fit, sampler)
    x = model._as_points(X)
    y = model._check_labels(Y, len(x))
    if method == ML:
        return float(model.log_posterior_label(fit.w_hat, x)[np.arange(len(x)), y].sum())
    return float(sampler.log_expect_exp(_cond_logprob(sampler, x, y, len(x))))


def estimate_type2(method, model: MixtureModel, X, j: int, fit=None, sampler=None) -> np.ndarray:
    """Distribution of the label of in-sample point ``j`` (0-based)."""
    _need(method, fit, sampler)
    x = model._as_points(X)
    if not 0 <= j < len(x):
        raise IndexError(f"j={j} outside the dataset")
    return _label_distribution(method, model, x[j : j + 1], fit, sampler)


def estimate_type3(method, model: MixtureModel, X, x_new, fit=None, sampler=None) -> np.ndarray:
    """Distribution of the label of a new point; ``x_new`` enters only through the conditional."""
    _need(method, fit, sampler)
    return _label_distribution(method, model, model._as_points(x_new)[:1], fit, sampler)


def _label_distribution(method, model, point, fit, sampler):
    if method == ML:
        return model.posterior_label(fit.w_hat, point)[0]
    probs = np.exp(batch_log_posterior_label(model, sampler.samples, point)[:, 0, :])
    p = sampler.expect(probs)
    return p / p.sum()


def estimate_type2prime(method, model: MixtureModel, X, Y1, alpha: float, fit=None, sampler=None) -> float:
    """``ln p(Y_1 | X^n)`` for the labels of the first ``alpha * n`` points.

    ``alpha = 1`` is accepted and coincides with the full joint estimate.
    """
    _need(method, fit, sampler)
    x = model._as_points(X)
    m = _block_size(alpha, len(x), upper_open=False)
    y1 = model._check_labels(Y1, m)
    if method == ML:
        return float(model.log_posterior_label(fit.w_hat, x[:m])[np.arange(m), y1].sum())
    return float(sampler.log_expect_exp(_cond_logprob(sampler, x, y1, m)))


def estimate_type3prime(method, model: MixtureModel, X, X2, Y2, alpha: float, fit=None, sampler=None) -> float:
    """``ln p(Y_2 | X^n, X_2)`` for a new block of ``alpha * n`` points."""
    _need(method, fit, sampler)
    x = model._as_points(X)
    x2 = model._as_points(X2)
    m = _block_size(alpha, len(x), upper_open=False)
    if len(x2) != m:
        raise ValueError(f"X2 must hold alpha * n = {m} points")
    y2 = model._check_labels(Y2, m)
    if method == ML:
        return float(model.log_posterior_label(fit.w_hat, x2)[np.arange(m), y2].sum())
    _, cond = sample_loglik(model, sampler.samples, x2, labels=y2)
    return float(sampler.log_expect_exp(cond[:, 0]))


def predict_stp(method, model: MixtureModel, X, x_new, fit=None, sampler=None) -> np.ndarray:
    """Predictive log density at one or more new points, each predicted on its own."""
    _need(method, fit, sampler)
    pts = model._as_points(x_new)
    if method == ML:
        return model.log_marginal(fit.w_hat, pts)
    return sampler.log_expect_exp(batch_log_marginal(model, sampler.samples, pts))


def predict_mtp(method, model: MixtureModel, X, X2, fit=None, sampler=None) -> float:
    """Joint predictive log density of the block ``X2``."""
    _need(method, fit, sampler)
    x2 = model._as_points(X2)
    if method == ML:
        return float(model.log_marginal(fit.w_hat, x2).sum())
    marg, _ = sample_loglik(model, sampler.samples, x2)
    return float(sampler.log_expect_exp(marg[:, 0]))


def fit_and_sample(model, prior, X, fisher, init, S=512, seed=None, **kwargs):
    """EM from ``init`` followed by posterior draws; shared by the evidence-based paths."""
    fit = em_fit(model, X, init)
    return fit, build_posterior(model, prior, X, fit, fisher, S=S, seed=seed, **kwargs)


def predict_mtp_evidence(model, prior, X, X2, fit: MLEResult, fisher, S=512, seed=None) -> tuple[float, float]:
    """Bayes block prediction as ``ln Z(X ∪ X2) - ln Z(X)``, with its standard error.

    Each evidence gets its own fit and draw set, so this path shares nothing
    with :func:`predict_mtp` beyond the data.
    """
    x = model._as_points(X)
    both = np.concatenate([x, model._as_points(X2)])
    seeds = np.random.SeedSequence(seed).spawn(2)
    base = build_posterior(model, prior, x, fit, fisher, S=S, seed=seeds[0])
    _, joint = fit_and_sample(model, prior, both, fisher, fit.w_hat, S=S, seed=seeds[1])
    value = joint.log_evidence() - base.log_evidence()
    return value, math.hypot(joint.log_evidence_se(), base.log_evidence_se())


@dataclass(frozen=True)
class DecompositionResult:
    residual: float
    stderr: float
    block: float
    sequential: np.ndarray


def decomposition_check(method, model, prior, X, X2, fit: MLEResult, fisher=None, S=512, seed=None) -> DecompositionResult:
    """Compare the block predictive of ``X2`` with the product of sequential one-step predictives.

    Under ML every factor is ``p(x | w_hat)`` and the residual is exactly zero.
    Under Bayes each later factor conditions on ``X`` plus the earlier block
    points and is computed from its own refit and draw set; the first factor
    shares the block's draws, so a one-point block has residual zero.
    """
    x = model._as_points(X)
    x2 = model._as_points(X2)
    if method == ML:
        seq = model.log_marginal(fit.w_hat, x2)
        block = float(model.log_marginal(fit.w_hat, x2).sum())
        return DecompositionResult(abs(block - float(seq.sum())), 0.0, block, seq)
    if fisher is None:
        raise ValueError("Bayes decomposition needs the Fisher bundle for its proposals")
    seeds = np.random.SeedSequence(seed).spawn(len(x2) + 1)
    sampler = build_posterior(model, prior, x, fit, fisher, S=S, seed=seeds[0])
    marg, _ = sample_loglik(model, sampler.samples, x2)
    block = float(sampler.log_expect_exp(marg[:, 0]))
    var = sampler.log_expect_exp_se(marg[:, 0]) ** 2
    seq = []
    w_prev = fit.w_hat
    for i in range(len(x2)):
        if i == 0:
            step = sampler
        else:
            data = np.concatenate([x, x2[:i]])
            step_fit, step = fit_and_sample(model, prior, data, fisher, w_prev, S=S, seed=seeds[i + 1])
            w_prev = step_fit.w_hat
        lm = batch_log_marginal(model, step.samples, x2[i : i + 1])[:, 0]
        seq.append(float(step.log_expect_exp(lm)))
        var += step.log_expect_exp_se(lm) ** 2
    seq = np.array(seq)
    return DecompositionResult(abs(block - float(seq.sum())), math.sqrt(var), block, seq)
