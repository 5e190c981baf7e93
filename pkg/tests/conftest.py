import numpy as np
import pytest

from latentkl.config import load_config
from latentkl.estimators import Prior
from latentkl.fisher import coefficient_report, fisher_matrices
from latentkl.model import MixtureModel, TrueDistribution
from latentkl.montecarlo import Experiment, run_sweep

BENCHMARK_W = np.array([0.4, -1.5, 1.5])
BENCHMARK_CONFIG = "configs/benchmark.yaml"

# Quadrature oracle values for the benchmark, frozen at resolution 200 and
# cross-checked against adaptive integration in test_fisher.
BENCH_I_X = np.array(
    [
        [3.3322557417667165, -0.2848772256940143, -0.31589864023452985],
        [-0.2848772256940143, 0.282195435779007, -0.08730703827890962],
        [-0.31589864023452985, -0.08730703827890962, 0.45986001730984144],
    ]
)
BENCH_I_XY = np.diag([1.0 / 0.24, 0.4, 0.6])
BENCH_C_ML = 0.9514019936333449
BENCH_C_BAYES_I = 0.5606847569764892
BENCH_C_MULTI = {0.25: 0.7922992401646551, 0.5: 0.6896232822470045, 1.0: 0.5606847569764892}


@pytest.fixture(scope="session")
def bench_model():
    return MixtureModel(2, 1, np.eye(1))


@pytest.fixture(scope="session")
def bench_true(bench_model):
    return TrueDistribution(bench_model, BENCHMARK_W)


@pytest.fixture(scope="session")
def bench_fisher(bench_true):
    return fisher_matrices(bench_true)


@pytest.fixture(scope="session")
def bench_prior(bench_model):
    return Prior(bench_model)


@pytest.fixture(scope="session")
def bench_report(bench_fisher):
    return coefficient_report(bench_fisher, (0.25, 0.5, 1.0))


@pytest.fixture(scope="session")
def bench_config(request):
    return load_config(request.config.rootpath / BENCHMARK_CONFIG)


@pytest.fixture(scope="session")
def bench_sweep(bench_config):
    """The full benchmark sweep (all targets, both methods, 10^4 replications).

    Computed once per session; several minutes on one core.
    """
    cfg = bench_config
    exp = cfg.experiment()
    return run_sweep(exp, cfg.n_grid, cfg.reps, cfg.seed, cfg.targets, cfg.alphas)


@pytest.fixture(scope="session")
def conjugate():
    """Single-component model with the default Gaussian prior on its mean."""
    model = MixtureModel(1, 1, np.eye(1))
    td = TrueDistribution(model, np.array([0.7]))
    return model, td, Prior(model), fisher_matrices(td)


def exp_for(true_dist, prior=None, fisher=None, S=512):
    prior = prior or Prior(true_dist.model)
    fisher = fisher or fisher_matrices(true_dist)
    return Experiment(true_dist, prior, fisher, S=S)
