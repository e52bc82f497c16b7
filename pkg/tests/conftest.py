import numpy as np
import pytest

from wedgefe.data import TrialData
from wedgefe.design import DesignKind, Structure, TrialDesign


def valid_structures(kind: DesignKind) -> list[Structure]:
    if kind is DesignKind.Crossover:
        return [Structure.Constant, Structure.DurationSpecific]
    return list(Structure)


def random_design(rng: np.random.Generator, kind: DesignKind | None = None) -> TrialDesign:
    if kind is None:
        kind = list(DesignKind)[rng.integers(3)]
    if kind is DesignKind.SteppedWedge:
        J = int(rng.integers(3, 7))
    elif kind is DesignKind.ParallelBaseline:
        J = int(rng.integers(2, 6))
    else:
        J = int(2 * rng.integers(1, 4))
    return TrialDesign(kind, J)


def random_trial(rng: np.random.Generator, design: TrialDesign | None = None, *,
                 m: int | None = None, p: int | None = None, max_size: int = 20,
                 outcome: str = "normal", cluster_level_covariate: bool | None = None
                 ) -> TrialData:
    """Small random dataset in which every sequence holds at least one cluster.

    ``outcome`` is "normal" (linear outcome with cluster intercepts) or
    "count" (Poisson counts with a log-linear mean).
    """
    design = random_design(rng) if design is None else design
    n_seq = design.n_sequences
    if m is None:
        m = int(rng.integers(max(3, n_seq), max(10, n_seq) + 1))
    m = max(m, n_seq)
    p = int(rng.integers(0, 4)) if p is None else p
    z = np.concatenate([np.asarray(design.sequences),
                        rng.choice(np.asarray(design.sequences), m - n_seq)])
    rng.shuffle(z)
    ids = rng.permutation(np.arange(100, 100 + 3 * m))[:m]
    sizes = rng.integers(1, max_size + 1, (m, design.J))
    cl = np.repeat(np.repeat(np.arange(m), design.J), sizes.ravel())
    pe = np.repeat(np.tile(np.arange(1, design.J + 1), m), sizes.ravel())
    n = cl.size
    X = rng.normal(size=(n, p))
    if p and (cluster_level_covariate if cluster_level_covariate is not None
              else rng.random() < 0.3):
        X[:, 0] = rng.normal(size=m)[cl]
    treated = np.array([design.treated(int(j), int(z[c])) for c, j in zip(cl, pe)], float)
    alpha = rng.normal(0, 0.5, m)
    slope = rng.normal(0, 0.3, design.J)
    eff = 0.4 + 0.2 * rng.normal(size=design.J)
    lin = alpha[cl] + slope[pe - 1] + eff[pe - 1] * treated + X @ rng.normal(0, 0.3, p)
    if outcome == "normal":
        y = lin + rng.normal(size=n)
    elif outcome == "count":
        y = rng.poisson(np.exp(1.0 + 0.5 * lin)).astype(float)
    else:
        raise ValueError(outcome)
    return TrialData.from_arrays(design, ids[cl], pe, y, X,
                                 sequence_of={int(ids[c]): int(z[c]) for c in range(m)})


@pytest.fixture
def rng():
    return np.random.default_rng(20261014)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
