"""Experiment configuration: a YAML document with a fixed schema.

Parsing validates every field and raises :class:`ConfigError` naming the
offending key. :meth:`ExperimentConfig.to_dict` gives a canonical form, so
``parse(dump(parse(text)))`` equals ``parse(text)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import yaml

from .estimators import BAYES, Prior
from .fisher import FisherBundle, fisher_matrices
from .model import MixtureModel, TrueDistribution
from .montecarlo import BLOCK_TARGETS, METHODS, TARGETS, Experiment

TOP_KEYS = ("model", "prior", "fisher", "targets", "alphas", "n_grid", "reps", "S", "seed",
            "threads", "output")
FISHER_METHODS = ("quadrature", "monte-carlo")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _mapping(raw, key, allowed):
    if not isinstance(raw, dict):
        raise ConfigError(key, "expected a mapping")
    for k in raw:
        if k not in allowed:
            raise ConfigError(f"{key}.{k}" if key else str(k), "unknown key")
    return raw


def _int(raw, key, lo=None):
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ConfigError(key, f"expected an integer, got {raw!r}")
    if lo is not None and raw < lo:
        raise ConfigError(key, f"must be at least {lo}, got {raw}")
    return raw


def _float(raw, key, positive=False):
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ConfigError(key, f"expected a number, got {raw!r}")
    val = float(raw)
    if not math.isfinite(val) or (positive and val <= 0):
        raise ConfigError(key, f"expected a {'positive ' if positive else ''}finite number, got {raw!r}")
    return val


def _floats(raw, key, length=None):
    if not isinstance(raw, list):
        raise ConfigError(key, "expected a list of numbers")
    vals = [_float(v, f"{key}[{i}]") for i, v in enumerate(raw)]
    if length is not None and len(vals) != length:
        raise ConfigError(key, f"expected {length} entries, got {len(vals)}")
    return vals


@dataclass(frozen=True)
class ExperimentConfig:
    K: int
    M: int
    sigma: tuple
    w_star: tuple
    concentration: float = 1.0
    mean_loc: float = 0.0
    mean_scale: float = 10.0
    fisher_method: str = "quadrature"
    resolution: int = 200
    draws: int = 1_000_000
    targets: tuple = ()
    alphas: tuple = ()
    n_grid: tuple = ()
    reps: int = 10_000
    S: int = 512
    seed: int = 0
    threads: int = 1
    output: dict = field(default_factory=dict)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, raw) -> "ExperimentConfig":
        raw = _mapping(raw, "", TOP_KEYS)
        for key in ("model", "targets", "n_grid"):
            if key not in raw:
                raise ConfigError(key, "missing required key")

        mdl = _mapping(raw["model"], "model", ("K", "M", "sigma", "w_star"))
        for key in ("K", "M", "w_star"):
            if key not in mdl:
                raise ConfigError(f"model.{key}", "missing required key")
        K = _int(mdl["K"], "model.K", 1)
        M = _int(mdl["M"], "model.M", 1)
        sig_raw = mdl.get("sigma", np.eye(M).tolist())
        if not isinstance(sig_raw, list) or len(sig_raw) != M:
            raise ConfigError("model.sigma", f"expected an {M}x{M} matrix")
        sigma = tuple(tuple(_floats(row, f"model.sigma[{i}]", M)) for i, row in enumerate(sig_raw))
        try:
            MixtureModel(K, M, np.array(sigma))
        except ValueError as exc:
            raise ConfigError("model.sigma", str(exc)) from None
        d = (K - 1) + K * M
        w_star = tuple(_floats(mdl["w_star"], "model.w_star", d))

        pri = _mapping(raw.get("prior", {}) or {}, "prior", ("concentration", "mean_loc", "mean_scale"))
        fis = _mapping(raw.get("fisher", {}) or {}, "fisher", ("method", "resolution", "draws"))
        fisher_method = fis.get("method", "quadrature")
        if fisher_method not in FISHER_METHODS:
            raise ConfigError("fisher.method", f"expected one of {FISHER_METHODS}, got {fisher_method!r}")
        if fisher_method == "quadrature" and M > 2:
            raise ConfigError("fisher.method", "quadrature needs M <= 2")

        tgt = _mapping(raw["targets"], "targets", TARGETS)
        targets = []
        for name in TARGETS:
            if name not in tgt:
                continue
            methods = tgt[name]
            if not isinstance(methods, list) or not methods:
                raise ConfigError(f"targets.{name}", "expected a non-empty list of methods")
            for m in methods:
                if m not in METHODS:
                    raise ConfigError(f"targets.{name}", f"unknown method {m!r}")
            targets.extend((name, m) for m in METHODS if m in methods)
        if not targets:
            raise ConfigError("targets", "no targets requested")

        n_grid = raw["n_grid"]
        if not isinstance(n_grid, list) or not n_grid:
            raise ConfigError("n_grid", "expected a non-empty list of sample sizes")
        n_grid = tuple(_int(v, f"n_grid[{i}]", 1) for i, v in enumerate(n_grid))
        if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
            raise ConfigError("n_grid", "must be strictly increasing")
        if n_grid[0] < d:
            raise ConfigError("n_grid", f"sample sizes must be at least d={d}")

        alphas = tuple(_floats(raw.get("alphas", []) or [], "alphas"))
        if any(t in BLOCK_TARGETS for t, _ in targets) and not alphas:
            raise ConfigError("alphas", "block targets need at least one alpha")
        if len(set(alphas)) != len(alphas):
            raise ConfigError("alphas", "duplicate values")
        for a in alphas:
            if not 0.0 < a <= 1.0:
                raise ConfigError("alphas", f"alpha must lie in (0, 1], got {a}")
            for n in n_grid:
                m = a * n
                if abs(m - round(m)) > 1e-9:
                    raise ConfigError("alphas", f"alpha={a} gives non-integral alpha*n={m} at n={n}")

        output = _mapping(raw.get("output", {}) or {}, "output", ("coeffs", "csv"))
        for k, v in output.items():
            if not isinstance(v, str) or not v:
                raise ConfigError(f"output.{k}", "expected a path string")

        S = _int(raw.get("S", 512), "S", 2)
        if S % 2:
            raise ConfigError("S", "must be even (draws come in antithetic pairs)")
        return cls(
            K=K,
            M=M,
            sigma=sigma,
            w_star=w_star,
            concentration=_float(pri.get("concentration", 1.0), "prior.concentration", positive=True),
            mean_loc=_float(pri.get("mean_loc", 0.0), "prior.mean_loc"),
            mean_scale=_float(pri.get("mean_scale", 10.0), "prior.mean_scale", positive=True),
            fisher_method=fisher_method,
            resolution=_int(fis.get("resolution", 200), "fisher.resolution", 4),
            draws=_int(fis.get("draws", 1_000_000), "fisher.draws", 1_000_000),
            targets=tuple(targets),
            alphas=alphas,
            n_grid=n_grid,
            reps=_int(raw.get("reps", 10_000), "reps", 100),
            S=S,
            seed=_int(raw.get("seed", 0), "seed", 0),
            threads=_int(raw.get("threads", 1), "threads", 1),
            output=dict(output),
        )

    def to_dict(self) -> dict:
        targets = {}
        for name, method in self.targets:
            targets.setdefault(name, []).append(method)
        return {
            "model": {
                "K": self.K,
                "M": self.M,
                "sigma": [list(row) for row in self.sigma],
                "w_star": list(self.w_star),
            },
            "prior": {
                "concentration": self.concentration,
                "mean_loc": self.mean_loc,
                "mean_scale": self.mean_scale,
            },
            "fisher": {"method": self.fisher_method, "resolution": self.resolution, "draws": self.draws},
            "targets": targets,
            "alphas": list(self.alphas),
            "n_grid": list(self.n_grid),
            "reps": self.reps,
            "S": self.S,
            "seed": self.seed,
            "threads": self.threads,
            "output": dict(sorted(self.output.items())),
        }

    # -- derived objects ----------------------------------------------------

    def model(self) -> MixtureModel:
        return MixtureModel(self.K, self.M, np.array(self.sigma))

    def true_distribution(self) -> TrueDistribution:
        """Raises ``NonRegularError`` for boundary ratios or coincident means."""
        return TrueDistribution(self.model(), np.array(self.w_star))

    def prior(self, model: MixtureModel | None = None) -> Prior:
        return Prior(model or self.model(), self.concentration, self.mean_loc, self.mean_scale)

    def fisher(self, true_dist: TrueDistribution | None = None) -> FisherBundle:
        td = true_dist or self.true_distribution()
        return fisher_matrices(td, self.fisher_method, resolution=self.resolution, draws=self.draws,
                               seed=self.seed)

    def experiment(self) -> Experiment:
        td = self.true_distribution()
        needs_fisher = any(m == BAYES for _, m in self.targets)
        bundle = self.fisher(td) if needs_fisher else None
        return Experiment(td, self.prior(td.model), bundle, S=self.S)


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "document"
        raise ConfigError(where, f"not valid YAML ({getattr(exc, 'problem', exc)})") from None
    if raw is None:
        raise ConfigError("model", "empty configuration")
    return ExperimentConfig.from_dict(raw)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("--config", str(exc)) from None
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

