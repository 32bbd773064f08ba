import numpy as np
import pytest

from stprune import graph as gr
from stprune import models
from stprune.arch import ArchSpec, WidthGrid
from stprune.pool import (Pool, ScoredArch, init_pool, sample_from_pool,
                          shrink, shrink_count, update_score)
from stprune.arch import FeasibilityError


def make_pool(scores, **kw):
    entries = []
    for i, s in enumerate(scores):
        e = ScoredArch(ArchSpec((i + 1, 1), (0.5, 0.5)))
        if s is not None:
            e.score, e.updates = s, 1
        entries.append(e)
    return Pool(entries=entries, **kw)


# --- schedule arithmetic ---------------------------------------------------

SHRINK_TABLE = [
    ((100, 101, 1000), 10),
    ((391, 1000, 39100), 9),
    ((1, 2, 10), 0),
    ((100, 16, 1500), 1),
    ((50, 16, 1500), 0),
    ((10, 11, 100), 1),
    ((10, 21, 100), 2),
    ((10, 2, 100), 0),
    ((1, 2, 1), 1),
    ((5, 6, 25), 1),
    ((5, 11, 25), 2),
    ((5, 101, 25), 20),
    ((200, 9, 1600), 1),
    ((200, 17, 1600), 2),
    ((300, 16, 1500), 3),
    ((400, 16, 1500), 4),
    ((100, 64, 6300), 1),
    ((700, 64, 6300), 7),
    ((1000, 8, 7000), 1),
    ((123, 46, 1845), 3),
]


@pytest.mark.parametrize("args,want", SHRINK_TABLE)
def test_shrink_count_table(args, want):
    k, n_p, t_shr = args
    assert shrink_count(k, n_p, t_shr) == want
    assert shrink_count(k, n_p, t_shr) == (k * (n_p - 1)) // t_shr


# --- init ------------------------------------------------------------------

def test_init_single_entry():
    g = gr.build_graph(models.tinytoy_spec())
    pool = init_pool(1, g, 0.3, 0.2, np.random.default_rng(0),
                     grid=WidthGrid((0.3, 0.5, 0.7, 1.0)))
    assert len(pool) == 1


def test_init_entries_distinct_and_in_band():
    g = gr.build_graph(models.resnet50_cifar_spec())
    pool = init_pool(16, g, 0.15, 0.03, np.random.default_rng(1))
    archs = [e.arch for e in pool.entries]
    assert len(set(archs)) == 16
    for a in archs:
        assert 0.15 * 0.97 <= gr.flops_ratio(g, a) <= 0.15 * 1.03


def test_init_impossible_distinct_count_raises():
    g = gr.build_graph(models.tinytoy_spec())
    with pytest.raises(FeasibilityError):
        init_pool(500, g, 0.5, 0.5, np.random.default_rng(2),
                  grid=WidthGrid((0.5, 1.0)))


# --- sampling --------------------------------------------------------------

def test_sample_singleton():
    pool = make_pool([0.5])
    rng = np.random.default_rng(0)
    for _ in range(5):
        i, _ = sample_from_pool(pool, rng)
        assert i == 0


def test_sample_prefers_unscored():
    pool = make_pool([0.1] * 9 + [None])
    rng = np.random.default_rng(1)
    for _ in range(20):
        i, _ = sample_from_pool(pool, rng)
        assert i == 9


def test_sample_uniform_when_all_scored():
    pool = make_pool([0.1, 0.2, 0.3, 0.4])
    rng = np.random.default_rng(2)
    counts = np.zeros(4)
    n = 100_000
    for _ in range(n):
        i, _ = sample_from_pool(pool, rng)
        counts[i] += 1
    assert np.abs(counts / n - 0.25).max() <= 0.02


# --- score updates ---------------------------------------------------------

def test_first_update_sets_score():
    pool = make_pool([None])
    update_score(pool, 0, 0.7)
    assert pool.entries[0].score == 0.7


def test_ema_blend():
    pool = make_pool([0.5], alpha=0.3)
    update_score(pool, 0, 0.7)
    assert pool.entries[0].score == pytest.approx(0.56, abs=1e-12)


def test_ema_contracts_to_constant_loss():
    pool = make_pool([2.0], alpha=0.3)
    for n in range(1, 40):
        update_score(pool, 0, 1.0)
        assert abs(pool.entries[0].score - 1.0) <= (0.7 ** n) * 1.0 + 1e-12


def test_literal_update_variant_differs():
    pool = make_pool([0.5], alpha=0.3, literal_ema=True)
    update_score(pool, 0, 0.7)
    assert pool.entries[0].score == pytest.approx((1 - 0.3 * 0.5) + 0.3 * 0.7)


def test_nonfinite_loss_rejected():
    pool = make_pool([0.5])
    with pytest.raises(ValueError):
        update_score(pool, 0, float("nan"))


# --- shrinking -------------------------------------------------------------

def test_shrink_removes_max_score():
    pool = make_pool([0.9, 0.5, 0.7])
    removed = shrink(pool, 1)
    assert [e.score for e in removed] == [0.9]
    assert sorted(e.score for e in pool.entries) == [0.5, 0.7]


def test_shrink_tie_removes_later_entry():
    pool = make_pool([0.9, 0.9, 0.5])
    shrink(pool, 1)
    assert [e.score for e in pool.entries] == [0.9, 0.5]


def test_shrink_never_empties_pool():
    pool = make_pool([0.9, 0.5, 0.7])
    shrink(pool, 10)
    assert len(pool) == 1
    assert pool.entries[0].score == 0.5


def test_forced_final_round_keeps_single_minimum():
    pool = make_pool([0.4, 0.2, 0.3], k=10, T_shr=20, N_p=3,
                     rounds_total=2, rounds_done=1)
    shrink(pool, pool.N_shr)
    assert len(pool) == 1
    assert pool.entries[0].score == 0.2


def test_json_round_trip():
    pool = make_pool([0.9, None, 0.7], alpha=0.25, k=10, T_shr=100, N_p=3)
    again = Pool.from_json(pool.to_json())
    assert [e.score for e in again.entries] == [0.9, None, 0.7]
    assert again.alpha == 0.25
    assert [e.arch for e in again.entries] == [e.arch for e in pool.entries]
