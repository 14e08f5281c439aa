import numpy as np
import pytest

from ptec.objectives import (Batch, MaskedPredictionModel, MaskedPredictionObjective, MaskSpec,
                             QuadraticSource, RandomQuantizer, generate_synthetic_sources,
                             random_shifts)


@pytest.fixture
def scalar_pair():
    """The two-source scalar fixture: A1=1, c1=0 and A2=4, c2=1."""
    return [QuadraticSource.scalar(1.0, 0.0, 0), QuadraticSource.scalar(4.0, 1.0, 1)]


def small_masked_problem(num_sources=2, samples=24, frames=30, feature_dim=4, codebook_size=16,
                         hidden=8, seed=0, mask=MaskSpec(start_prob=0.1, span=4)):
    sources = generate_synthetic_sources(random_shifts(num_sources, feature_dim, seed),
                                         [samples] * num_sources, frames, seed)
    quantizer = RandomQuantizer.random(feature_dim, 6, codebook_size, seed)
    model = MaskedPredictionModel(quantizer, hidden=hidden, context=1, mask_spec=mask)
    objectives = [MaskedPredictionObjective(model, s) for s in sources]
    return model, sources, objectives


@pytest.fixture
def masked_problem():
    return small_masked_problem()


@pytest.fixture
def masked_single(masked_problem):
    model, sources, objectives = masked_problem
    batch = Batch(0, sources[0].samples[:4], seed=11)
    params = model.init_params(np.random.default_rng(3))
    return model, objectives[0], params, batch


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
