import numpy as np
import pytest

from ptec.batching import epoch_plan, proportional_batch_size, random_batch, schedule_batches
from ptec.errors import ContractError
from ptec.objectives import DataSource, Sample


def make_source(sid, n, weight=None):
    samples = [Sample(np.full((1, 1), float(u)), uid=u) for u in range(n)]
    return DataSource(sid, f"s{sid}", samples, float(n if weight is None else weight))


def test_equal_weights_equal_batches():
    plan = schedule_batches([make_source(0, 50), make_source(1, 50)], 5, np.random.default_rng(0))
    assert plan.batch_sizes[0] == plan.batch_sizes[1] == 10
    assert len(plan.batches[0]) == len(plan.batches[1]) == 5


def test_multi_domain_ratio():
    plan = schedule_batches([make_source(0, 420), make_source(1, 860)], 20, np.random.default_rng(0))
    assert (plan.batch_sizes[0], plan.batch_sizes[1]) == (21, 43)
    assert plan.batch_sizes[1] / plan.batch_sizes[0] == pytest.approx(860 / 420, rel=0.05)


def test_rounding_rule():
    assert proportional_batch_size(25, 10) == 3
    assert proportional_batch_size(24, 10) == 2
    assert proportional_batch_size(0.1, 10) == 1


def test_every_source_same_count_and_disjoint_within_epoch():
    sources = [make_source(0, 420), make_source(1, 450), make_source(2, 80), make_source(3, 183),
               make_source(4, 860)]
    plan = schedule_batches(sources, 20, np.random.default_rng(1))
    counts = {sid: len(b) for sid, b in plan.batches.items()}
    assert max(counts.values()) - min(counts.values()) <= 1
    for sid, batches in plan.batches.items():
        uids = [s.uid for b in batches for s in b.samples]
        if plan.padded[sid] == 0:
            assert len(uids) == len(set(uids))
        assert all(b.source_id == sid for b in batches)
        assert all(len(b.samples) == plan.batch_sizes[sid] for b in batches)


def test_surplus_skipping_uniform():
    # weight 60 over 6 batches -> size 10; 100 samples -> 10 chunks, 4 dropped each epoch
    src = make_source(0, 100, weight=60)
    counts = np.zeros(10)
    runs = 1000
    for seed in range(runs):
        plan = schedule_batches([src], 6, np.random.default_rng(seed))
        assert len(plan.skipped[0]) == 4 and len(plan.batches[0]) == 6
        counts[plan.skipped[0]] += 1
    p = 0.4
    sigma = np.sqrt(runs * p * (1 - p))
    assert np.all(np.abs(counts - runs * p) <= 3 * sigma)


def test_short_source_flagged_and_cycled():
    plan = schedule_batches([make_source(0, 3, weight=50), make_source(1, 50)], 5,
                            np.random.default_rng(0))
    assert plan.short_sources == [0]
    assert len(plan.batches[0]) == 5
    assert all(len(b.samples) == 3 for b in plan.batches[0])


def test_padding_when_fewer_chunks():
    plan = schedule_batches([make_source(0, 35, weight=50)], 5, np.random.default_rng(0))
    assert plan.padded[0] == 2 and len(plan.batches[0]) == 5
    assert plan.batches[0][3] is not None


def test_deterministic_and_reshuffled_per_epoch():
    sources = [make_source(0, 40), make_source(1, 60)]
    a = epoch_plan(sources, 4, seed=3, epoch=1)
    b = epoch_plan(sources, 4, seed=3, epoch=1)
    c = epoch_plan(sources, 4, seed=3, epoch=2)
    uid = lambda plan: [[s.uid for s in bt.samples] for bt in plan.batches[1]]
    assert uid(a) == uid(b)
    assert [bt.seed for bt in a.batches[0]] == [bt.seed for bt in b.batches[0]]
    assert uid(a) != uid(c)


def test_batches_at_ascending():
    plan = schedule_batches([make_source(2, 10), make_source(0, 10)], 2, np.random.default_rng(0))
    assert [b.source_id for b in plan.batches_at(1)] == [0, 2]
    assert plan.num_batches == 2


def test_validation():
    with pytest.raises(ContractError):
        schedule_batches([make_source(0, 10)], 0, np.random.default_rng(0))
    with pytest.raises(ContractError):
        schedule_batches([DataSource(0, "e", [], 0.0)], 1, np.random.default_rng(0))


def test_random_batch():
    src = make_source(0, 10)
    b = random_batch(src, 4, np.random.default_rng(0))
    assert len(b.samples) == 4 and len({s.uid for s in b.samples}) == 4
    assert len(random_batch(src, 40, np.random.default_rng(0)).samples) == 10
