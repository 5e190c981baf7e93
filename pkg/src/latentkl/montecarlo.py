"""Replicated Monte Carlo estimates of the error functions and their 1/n coefficients.

One replication at sample size ``n`` draws a labelled dataset, a held-out
labelled block of ``n`` further points and an in-sample index ``j``; it then
fits the MLE, builds one posterior draw set, and evaluates every requested
(target, method, alpha) from that shared material. Because ML and Bayes see
identical data, their per-replication difference is a paired comparison.

Random streams are derived from ``SeedSequence(seed, spawn_key=(n, rep))``,
so a replication's output depends only on the root seed, ``n`` and its
index, never on worker count or on which other targets were requested.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from .fisher import FisherBundle, _gauss_hermite_nodes, coeff_predictions, fisher_matrices
from .model import TrueDistribution
from .estimators import BAYES, ML, Prior

TARGETS = ("I", "II", "III", "IIprime", "IIIprime", "STP", "MTP")
BLOCK_TARGETS = frozenset({"IIprime", "IIIprime", "MTP"})
LATENT_TARGETS = frozenset({"I", "II", "III", "IIprime", "IIIprime"})
METHODS = (ML, BAYES)
PAIRED = "Bayes-ML"
MAX_FLAG_FRACTION = 0.05

EQUIVALENT, BAYES_BETTER, ML_BETTER = "equivalent", "bayes-better", "ml-better"
EXPECTED_VERDICT = {
    "I": BAYES_BETTER,
    "II": EQUIVALENT,
    "III": EQUIVALENT,
    "IIprime": BAYES_BETTER,
    "IIIprime": BAYES_BETTER,
    "STP": EQUIVALENT,
    "MTP": BAYES_BETTER,
}


@dataclass(frozen=True)
class ErrorEstimate:
    target: str
    method: str
    n: int
    alpha: float | None
    mean: float
    stderr: float
    reps: int
    flags: int = 0

    @property
    def valid(self) -> bool:
        return math.isfinite(self.mean) and self.flags <= MAX_FLAG_FRACTION * self.reps


def summarize(values, target, method, n, alpha=None, flags=0) -> ErrorEstimate:
    """Mean and standard error with order-independent (compensated) sums."""
    values = [float(v) for v in values]
    reps = len(values)
    mean = math.fsum(values) / reps
    var = math.fsum((v - mean) ** 2 for v in values) / (reps - 1) if reps > 1 else 0.0
    return ErrorEstimate(target, method, n, alpha, mean, math.sqrt(var / reps), reps, int(flags))


@dataclass(frozen=True, eq=False)
class Experiment:
    """Everything a replication needs besides its index."""

    true_dist: TrueDistribution
    prior: Prior
    fisher: FisherBundle
    S: int = 512
    inflation: float = 1.2
    stp_nodes: int = 40

    @property
    def model(self):
        return self.true_dist.model

    def quadrature(self):
        """Nodes and weights integrating against ``q(x)``, or ``None`` when ``M > 2``."""
        model = self.model
        if model.M > 2:
            return None
        cached = self.__dict__.get("_quad")
        if cached is None:
            z, wz = _gauss_hermite_nodes(model.M, self.stp_nodes)
            chol = np.linalg.cholesky(model.sigma)
            nodes = np.concatenate([mu + z @ chol.T for mu in self.true_dist.means])
            weights = np.concatenate([a * wz for a in self.true_dist.weights])
            log_q = model.log_marginal(self.true_dist.w_star, nodes)
            cached = (nodes, weights, log_q)
            self.__dict__["_quad"] = cached
        return cached


def series_keys(targets, alphas):
    """Ordered ``(target, method, alpha)`` keys for the requested ``(target, method)`` pairs."""
    keys = []
    for target, method in targets:
        if target not in TARGETS or method not in METHODS:
            raise ValueError(f"unknown target/method {target}/{method}")
        if target in BLOCK_TARGETS:
            keys.extend((target, method, float(a)) for a in alphas)
        else:
            keys.append((target, method, None))
    return keys


def _block_sizes(n, alphas, target):
    sizes = []
    for a in alphas:
        m = a * n
        if abs(m - round(m)) > 1e-9 or round(m) < 1:
            raise ValueError(f"alpha={a} gives non-integral block alpha*n={m} at n={n}")
        if target == "IIprime" and not 0 < a <= 1:
            raise ValueError("IIprime needs 0 < alpha <= 1")
        sizes.append(int(round(m)))
    return sizes


def _kl(log_q, log_p):
    """KL divergence between label distributions given as log-probability rows."""
    return float(np.sum(np.exp(log_q) * (log_q - log_p)))


def replicate(exp: Experiment, n: int, rep: int, seed: int, keys) -> tuple[np.ndarray, np.ndarray]:
    """One replication: per-key error contribution (nats) and flag indicator."""
    td, model = exp.true_dist, exp.model
    data_ss, index_ss, block_ss, post_ss = np.random.SeedSequence(seed, spawn_key=(n, rep)).spawn(4)
    x, y = td.sample(n, np.random.default_rng(data_ss))
    j = int(np.random.default_rng(index_ss).integers(n))
    x2, y2 = td.sample(n, np.random.default_rng(block_ss))

    wanted = {(t, m) for t, m, _ in keys}
    alphas = sorted({a for _, _, a in keys if a is not None})
    need_bayes = any(m == BAYES for _, m in wanted)
    sizes = {t: _block_sizes(n, alphas, t) for t in BLOCK_TARGETS if any(w[0] == t for w in wanted)}

    fit = est.align_mle(est.em_fit(model, x, td.w_star), td)
    ml_flag = fit.boundary or not fit.converged
    bayes_flag = ml_flag
    sampler = None
    if need_bayes:
        in_sample_blocks = sizes.get("IIprime", []) + ([n] if (("I", BAYES) in wanted) else [])
        sampler = est.build_posterior(
            model, exp.prior, x, fit, exp.fisher, S=exp.S, seed=post_ss,
            inflation=exp.inflation, labels=y if in_sample_blocks else None,
            label_breaks=in_sample_blocks,
        )
        bayes_flag = bayes_flag or sampler.flagged

    rows = np.arange(n)
    lq = td.log_conditional(x)
    lp = model.log_posterior_label(fit.w_hat, x)
    lq_cum = np.concatenate([[0.0], np.cumsum(lq[rows, y])])
    lp_cum = np.concatenate([[0.0], np.cumsum(lp[rows, y])])

    block_m = max(sizes.get("IIIprime", []) + sizes.get("MTP", []) + [1])
    bx, by = x2[:block_m], y2[:block_m]
    b_rows = np.arange(block_m)
    bq = td.log_conditional(bx)
    bp = model.log_posterior_label(fit.w_hat, bx)
    bq_cum = np.concatenate([[0.0], np.cumsum(bq[b_rows, by])])
    bp_cum = np.concatenate([[0.0], np.cumsum(bp[b_rows, by])])
    mq_cum = np.concatenate([[0.0], np.cumsum(td.model.log_marginal(td.w_star, bx))])
    mp_cum = np.concatenate([[0.0], np.cumsum(model.log_marginal(fit.w_hat, bx))])

    block_pass = None
    if sampler is not None and ({("IIIprime", BAYES), ("MTP", BAYES)} & wanted):
        breaks = sorted(set(sizes.get("IIIprime", []) + sizes.get("MTP", [])))
        marg, cond = est.sample_loglik(model, sampler.samples, bx, labels=by, breaks=breaks)
        block_pass = {m: (marg[:, i], cond[:, i]) for i, m in enumerate(breaks)}

    bayes_label = {}

    def bayes_label_logprob(point, tag):
        if tag not in bayes_label:
            p = est._label_distribution(BAYES, model, point, None, sampler)
            bayes_label[tag] = np.log(p)
        return bayes_label[tag]

    values = np.empty(len(keys))
    flags = np.zeros(len(keys), dtype=bool)
    for idx, (target, method, alpha) in enumerate(keys):
        bayes = method == BAYES
        flags[idx] = bayes_flag if bayes else ml_flag
        if target == "I":
            log_p = sampler.log_expect_exp(sampler.label_prefix[n]) if bayes else lp_cum[n]
            values[idx] = (lq_cum[n] - log_p) / n
        elif target == "II":
            log_p = bayes_label_logprob(x[j : j + 1], "II") if bayes else lp[j]
            values[idx] = _kl(lq[j], log_p)
        elif target == "III":
            log_p = bayes_label_logprob(bx[:1], "III") if bayes else bp[0]
            values[idx] = _kl(bq[0], log_p)
        elif target == "IIprime":
            m = int(round(alpha * n))
            log_p = sampler.log_expect_exp(sampler.label_prefix[m]) if bayes else lp_cum[m]
            values[idx] = (lq_cum[m] - log_p) / m
        elif target == "IIIprime":
            m = int(round(alpha * n))
            log_p = sampler.log_expect_exp(block_pass[m][1]) if bayes else bp_cum[m]
            values[idx] = (bq_cum[m] - log_p) / m
        elif target == "MTP":
            m = int(round(alpha * n))
            log_p = sampler.log_expect_exp(block_pass[m][0]) if bayes else mp_cum[m]
            values[idx] = (mq_cum[m] - log_p) / m
        elif target == "STP":
            values[idx] = _stp_error(exp, fit, sampler if bayes else None, bx[:1], mq_cum[1])
    return values, flags


def _stp_error(exp, fit, sampler, x_new, log_q_new):
    """KL from ``q(x)`` to the predictive, integrated by quadrature when ``M <= 2``.

    For larger ``M`` the held-out point gives a single-draw estimate instead.
    """
    model = exp.model
    quad = exp.quadrature()
    if quad is None:
        method = BAYES if sampler is not None else ML
        return float(log_q_new - est.predict_stp(method, model, None, x_new, fit, sampler)[0])
    nodes, weights, log_q = quad
    if sampler is None:
        log_p = model.log_marginal(fit.w_hat, nodes)
    else:
        log_p = sampler.log_expect_exp(est.batch_log_marginal(model, sampler.samples, nodes))
    return float(weights @ (log_q - log_p))


def _run_chunk(args):
    exp, n, reps, seed, keys = args
    vals = np.empty((len(reps), len(keys)))
    flags = np.zeros((len(reps), len(keys)), dtype=bool)
    for row, rep in enumerate(reps):
        vals[row], flags[row] = replicate(exp, n, rep, seed, keys)
    return vals, flags


@dataclass
class SweepResult:
    """Per-replication values for every sample size, with their series keys."""

    keys: list
    seed: int
    values: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def estimates(self) -> list[ErrorEstimate]:
        out = []
        for key_idx, (target, method, alpha) in enumerate(self.keys):
            for n in sorted(self.values):
                out.append(
                    summarize(self.values[n][:, key_idx], target, method, n, alpha,
                              self.flags[n][:, key_idx].sum())
                )
        return out

    def paired(self) -> list[ErrorEstimate]:
        """Per-replication Bayes minus ML differences for every target present under both methods."""
        index = {k: i for i, k in enumerate(self.keys)}
        out = []
        for target, method, alpha in self.keys:
            if method != BAYES or (target, ML, alpha) not in index:
                continue
            ib, im = index[(target, BAYES, alpha)], index[(target, ML, alpha)]
            for n in sorted(self.values):
                diff = self.values[n][:, ib] - self.values[n][:, im]
                flags = (self.flags[n][:, ib] | self.flags[n][:, im]).sum()
                out.append(summarize(diff, target, PAIRED, n, alpha, flags))
        return out


def run_sweep(exp: Experiment, n_grid, reps: int, seed: int, targets, alphas=(), threads: int = 1,
              progress=None) -> SweepResult:
    if reps < 2:
        raise ValueError("need at least two replications")
    keys = series_keys(targets, alphas)
    result = SweepResult(keys, seed)
    for n in n_grid:
        n = int(n)
        chunks = np.array_split(np.arange(reps), max(threads, 1) * 4 if threads > 1 else 1)
        jobs = [(exp, n, chunk, seed, keys) for chunk in chunks if len(chunk)]
        if threads > 1:
            with ProcessPoolExecutor(threads) as pool:
                parts = list(pool.map(_run_chunk, jobs))
        else:
            parts = [_run_chunk(job) for job in jobs]
        result.values[n] = np.concatenate([p[0] for p in parts])
        result.flags[n] = np.concatenate([p[1] for p in parts])
        if progress is not None:
            progress(n)
    return result


def estimate_error(target, method, true_dist, prior, n, reps, alpha=None, seed=0,
                   fisher=None, S=512) -> ErrorEstimate:
    """Monte Carlo estimate of one error function at one sample size."""
    if reps < 100:
        raise ValueError("reps must be at least 100")
    if fisher is None and method == BAYES:
        fisher = fisher_matrices(true_dist)
    exp = Experiment(true_dist, prior, fisher, S=S)
    alphas = () if alpha is None else (alpha,)
    res = run_sweep(exp, [n], reps, seed, [(target, method)], alphas)
    return res.estimates()[0]


# -- coefficient extraction ---------------------------------------------------


@dataclass(frozen=True)
class CoefficientFit:
    c_hat: float
    c_se: float
    b_hat: float
    n_grid: tuple
    residuals: tuple
    chi2: float
    dof: int


def fit_leading_coefficient(estimates) -> CoefficientFit:
    """Weighted least squares of ``n D(n)`` on ``c + b / n``.

    Weights are ``1 / (n stderr)^2`` with the standard errors taken as known.
    If any standard error is zero the fit is unweighted and ``c_se`` comes
    from the residual scatter.
    """
    estimates = sorted(estimates, key=lambda e: e.n)
    if len(estimates) < 3:
        raise ValueError("need at least three sample sizes to fit c + b/n")
    if len({(e.target, e.method, e.alpha) for e in estimates}) != 1:
        raise ValueError("estimates must share target, method and alpha")
    n = np.array([e.n for e in estimates], dtype=float)
    if len(set(n)) != len(n):
        raise ValueError("sample sizes must be distinct")
    yv = n * np.array([e.mean for e in estimates])
    sig = n * np.array([e.stderr for e in estimates])
    design = np.column_stack([np.ones_like(n), 1.0 / n])
    dof = len(n) - 2
    if np.all(sig > 0):
        wts = 1.0 / sig
        coef, *_ = np.linalg.lstsq(design * wts[:, None], yv * wts, rcond=None)
        cov = np.linalg.inv((design * wts[:, None] ** 2).T @ design)
        resid = yv - design @ coef
        chi2 = float(np.sum((resid * wts) ** 2))
    else:
        coef, *_ = np.linalg.lstsq(design, yv, rcond=None)
        resid = yv - design @ coef
        s2 = float(resid @ resid) / dof
        cov = s2 * np.linalg.inv(design.T @ design)
        chi2 = 0.0
    return CoefficientFit(
        c_hat=float(coef[0]),
        c_se=float(math.sqrt(max(cov[0, 0], 0.0))),
        b_hat=float(coef[1]),
        n_grid=tuple(int(v) for v in n),
        residuals=tuple(float(r) for r in resid),
        chi2=chi2,
        dof=dof,
    )


@dataclass(frozen=True)
class Verdict:
    target: str
    alpha: float | None
    diff: float
    diff_se: float
    verdict: str
    expected: str
    paired: bool

    @property
    def ok(self) -> bool:
        return self.verdict == self.expected


def compare_methods(target, ml_estimates, bayes_estimates, paired_estimates=None, alpha=None) -> Verdict:
    """Classify the fitted constant of ``n (D_Bayes - D_ML)``.

    Paired per-replication differences are used when supplied; otherwise the
    two sweeps are combined as independent, which only costs power.
    """
    if paired_estimates:
        diffs = list(paired_estimates)
    else:
        by_n = {e.n: e for e in ml_estimates}
        diffs = [
            ErrorEstimate(target, PAIRED, b.n, alpha, b.mean - by_n[b.n].mean,
                          math.hypot(b.stderr, by_n[b.n].stderr), min(b.reps, by_n[b.n].reps))
            for b in bayes_estimates
            if b.n in by_n
        ]
    fit = fit_leading_coefficient(diffs)
    band = 3.0 * fit.c_se
    if abs(fit.c_hat) <= band:
        verdict = EQUIVALENT
    elif fit.c_hat < 0:
        verdict = BAYES_BETTER
    else:
        verdict = ML_BETTER
    return Verdict(target, alpha, fit.c_hat, fit.c_se, verdict, EXPECTED_VERDICT[target],
                   bool(paired_estimates))


def theory_coefficient(report, target: str, method: str, alpha: float | None = None) -> float:
    """Leading 1/n coefficient predicted for ``(target, method, alpha)`` by a ``CoefficientReport``."""
    key = None if alpha is None else float(alpha)
    if method == PAIRED:
        return theory_coefficient(report, target, BAYES, alpha) - theory_coefficient(report, target, ML, alpha)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if target == "STP" or (target == "MTP" and method == ML):
        return report.c_stp
    if target == "MTP":
        return report.c_mtp[key] if key in report.c_mtp else coeff_predictions(report.d, key)[1]
    if target not in LATENT_TARGETS:
        raise ValueError(f"unknown target {target!r}")
    if method == ML or target in ("II", "III"):
        return report.c_ml
    if target == "I":
        return report.c_bayes_I
    table = report.c_bayes_IIp if target == "IIprime" else report.c_bayes_IIIp
    if key not in table:
        raise ValueError(f"no coefficient for alpha={alpha}")
    return table[key]
