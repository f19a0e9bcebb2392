import numpy as np
import pytest

from mblr.dataset import CovariateSpec, GroupedDataset


def make_spec(sizes=(2,), K=2):
    covs = tuple((f"C{j}", tuple(f"c{j}{i}" for i in range(s))) for j, s in enumerate(sizes))
    return CovariateSpec(covs, tuple(f"I{k}" for k in range(K)))


def full_layout(spec, n_per=10, rng=None, n_range=None):
    """Every covariate combination in both arms."""
    import itertools

    cells = list(itertools.product(*(range(s) for s in spec.sizes)))
    levels = [c for c in cells for _ in (0, 1)]
    treat = [t for _ in cells for t in (1, 0)]
    if n_range is not None:
        n = rng.integers(*n_range, size=len(levels))
    else:
        n = np.full(len(levels), n_per)
    return GroupedDataset(np.array(levels), np.array(treat), n, np.zeros((len(levels), spec.K), int), spec)


def random_dataset(rng, sizes=(2,), K=2, n_range=(5, 30), base=-1.0, spread=0.6):
    """Random counts from random logistic truths on a full layout; all issues have events."""
    spec = make_spec(sizes, K)
    lay = full_layout(spec, rng=rng, n_range=n_range)
    eta = base + spread * rng.standard_normal((lay.m, K)) + 0.5 * lay.treat[:, None]
    P = 1 / (1 + np.exp(-eta))
    for _ in range(100):
        N = rng.binomial(lay.n[:, None], P)
        tot = N.sum(axis=0)
        if ((tot > 0) & (tot < lay.n.sum())).all():
            return lay.with_counts(N)
    raise RuntimeError("could not draw a fittable dataset")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_data():
    return random_dataset(np.random.default_rng(7), sizes=(2, 3), K=3, n_range=(10, 40))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
