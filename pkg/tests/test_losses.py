import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from s2c.core import ChangeProbMap, LatentMap, LossWeights, ShapeMismatch, SparsityConfig, TripletConfig
from s2c.losses import (BatchTooSmall, GridTooLarge, grid_sparsity, info_nce, patch_cosine, total_loss,
                        triplet_loss)
from s2c.train import grad_check

seeds = st.integers(0, 2 ** 31)


def randn(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape))


# -- independent oracles (plain numpy loops) ----------------------------------

def cos_oracle(a, b):
    a, b = np.asarray(a), np.asarray(b)
    c, h, w = a.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            u, v = a[:, i, j], b[:, i, j]
            total += float(u @ v) / (max(np.linalg.norm(u), 1e-8) * max(np.linalg.norm(v), 1e-8))
    return total / (h * w)


def nce_oracle(A, B):
    n = len(A)
    total = 0.0
    for u in range(n):
        logits = [cos_oracle(A[u], B[v]) for v in range(n)]
        total -= math.log(math.exp(logits[u]) / sum(math.exp(x) for x in logits))
    return total / n


# -- patch cosine ------------------------------------------------------------------

def test_patch_cosine_self_and_antipodal(rng):
    a = randn(rng, 8, 3, 3)
    assert float(patch_cosine(a, a)) == pytest.approx(1.0, abs=1e-12)
    assert float(patch_cosine(a, -a)) == pytest.approx(-1.0, abs=1e-12)


@given(seeds)
def test_patch_cosine_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = randn(rng, 4, 2, 2), randn(rng, 4, 2, 2)
    assert float(patch_cosine(a, b)) == pytest.approx(cos_oracle(a, b), abs=1e-6)


def test_patch_cosine_zero_vector_guarded():
    a = torch.zeros(4, 2, 2, dtype=torch.float64)
    assert float(patch_cosine(a, a)) == 0.0


def test_patch_cosine_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        patch_cosine(torch.zeros(4, 2, 2), torch.zeros(4, 2, 3))


@given(seeds, st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_patch_cosine_scale_invariant(seed, lam, mu):
    rng = np.random.default_rng(seed)
    a, b = randn(rng, 6, 3, 3), randn(rng, 6, 3, 3)
    assert float(patch_cosine(lam * a, mu * b)) == pytest.approx(float(patch_cosine(a, b)), abs=1e-6)


def test_accepts_latent_maps(rng):
    a = randn(rng, 8, 2, 2)
    assert float(patch_cosine(LatentMap(a, 8), LatentMap(a, 8))) == pytest.approx(1.0)


# -- triplet -------------------------------------------------------------------------------

def orthogonal_pair():
    y1 = torch.zeros(8, 2, 2, dtype=torch.float64)
    y2 = torch.zeros(8, 2, 2, dtype=torch.float64)
    y1[0] = 1.0
    y2[1] = 1.0
    return y1, y2


def test_triplet_ideal_separation_zero():
    y1, y2 = orthogonal_pair()
    assert float(triplet_loss(y1, y1, y2, y2)) == 0.0


def test_triplet_collapse_two(rng):
    y = randn(rng, 8, 2, 2)
    assert float(triplet_loss(y, y, y, y)) == pytest.approx(2.0, abs=1e-12)


@given(seeds, st.floats(0.0, 2.0))
def test_triplet_direct_formula(seed, m):
    rng = np.random.default_rng(seed)
    y1, b1, y2, b2 = (randn(rng, 4, 3, 3) for _ in range(4))
    neg = cos_oracle(y1, y2)
    expect = max(neg - cos_oracle(y1, b1) + m, 0) + max(neg - cos_oracle(y2, b2) + m, 0)
    got = float(triplet_loss(y1, b1, y2, b2, TripletConfig(m)))
    assert got == pytest.approx(expect, abs=1e-6)
    assert 0 <= got <= 2 * (1 + m) + 1e-12


def test_triplet_batch_is_mean(rng):
    ys = [randn(rng, 3, 4, 2, 2) for _ in range(4)]
    per = [float(triplet_loss(*(y[i] for y in ys))) for i in range(3)]
    assert float(triplet_loss(*ys)) == pytest.approx(np.mean(per), abs=1e-12)


def test_triplet_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        triplet_loss(torch.zeros(4, 2, 2), torch.zeros(4, 2, 2), torch.zeros(4, 2, 2), torch.zeros(4, 3, 2))


# -- infoNCE -----------------------------------------------------------------------------

def test_info_nce_match_mismatch_construction():
    # matches have cosine +1, mismatches -1
    e = torch.zeros(2, 4, 1, 1, dtype=torch.float64)
    e[0, 0] = 1.0
    e[1, 0] = -1.0
    loss = float(info_nce(e, e, e, e))
    one_term = -math.log(math.e / (math.e + math.exp(-1)))
    assert loss == pytest.approx(2 * one_term, abs=1e-12)
    assert loss == pytest.approx(4 * math.log1p(math.exp(-2)) / 2, abs=1e-12)


@pytest.mark.parametrize("n", [2, 3, 8])
def test_info_nce_uniform_is_two_log_n(rng, n):
    y = randn(rng, 1, 4, 2, 2).expand(n, 4, 2, 2)
    assert float(info_nce(y, y, y, y)) == pytest.approx(2 * math.log(n), abs=1e-6)


@given(seeds, st.integers(2, 4))
def test_info_nce_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    Y1, Y2, B1, B2 = (randn(rng, n, 3, 2, 2) for _ in range(4))
    expect = nce_oracle(Y1, B2) + nce_oracle(Y2, B1)
    got = float(info_nce(Y1, Y2, B1, B2))
    assert got == pytest.approx(expect, abs=1e-6)
    assert got >= 0


@given(seeds)
def test_info_nce_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    batch = [randn(rng, 5, 3, 2, 2) for _ in range(4)]
    perm = torch.from_numpy(rng.permutation(5))
    assert float(info_nce(*(b[perm] for b in batch))) == pytest.approx(float(info_nce(*batch)), abs=1e-6)


def test_info_nce_accepts_lists(rng):
    items = [[randn(rng, 3, 2, 2) for _ in range(3)] for _ in range(4)]
    stacked = [torch.stack(x) for x in items]
    assert float(info_nce(*items)) == float(info_nce(*stacked))


def test_info_nce_needs_two():
    y = torch.zeros(1, 4, 2, 2)
    with pytest.raises(BatchTooSmall):
        info_nce(y, y, y, y)


def test_info_nce_large_logits_stable():
    y = torch.randn(4, 3, 2, 2, dtype=torch.float64) * 1e6
    assert math.isfinite(float(info_nce(y, y, y, y)))


# -- grid sparsity ------------------------------------------------------------------------

def test_sparsity_zero_map():
    assert float(grid_sparsity(torch.zeros(32, 32))) == 0.0


def test_sparsity_uniform_one():
    assert float(grid_sparsity(torch.ones(32, 32), SparsityConfig(0.5, 16))) == 1.0


def test_sparsity_hand_partition():
    yc = torch.zeros(32, 32)
    yc[16:, 16:] = 1.0
    assert float(grid_sparsity(yc, SparsityConfig(0.25, 16))) == 0.0


def test_sparsity_partial_grids_dropped():
    yc = torch.zeros(40, 40)
    yc[32:, :] = 1.0  # only in the dropped strip
    assert float(grid_sparsity(yc, SparsityConfig(0.2, 16))) == 0.0


def test_sparsity_n_zero_returns_zero():
    # one grid, T=0.5: floor(1 * 0.5) = 0
    assert float(grid_sparsity(torch.ones(16, 16), SparsityConfig(0.5, 16))) == 0.0


def test_sparsity_grid_too_large():
    with pytest.raises(GridTooLarge):
        grid_sparsity(torch.zeros(8, 20))


def sparsity_oracle(yc, T, d):
    h, w = yc.shape
    dens = [yc[r * d:(r + 1) * d, c * d:(c + 1) * d].mean() for r in range(h // d) for c in range(w // d)]
    n = int(len(dens) * (1 - T))
    return 0.0 if n == 0 else max(float(np.mean(sorted(dens)[:n])), 0.0)


@given(seeds, st.sampled_from([0.2, 0.4, 0.75]), st.sampled_from([2, 4, 5]))
def test_sparsity_oracle_and_range(seed, T, d):
    rng = np.random.default_rng(seed)
    yc = rng.random((13, 17))
    got = float(grid_sparsity(torch.from_numpy(yc), SparsityConfig(T, d)))
    assert got == pytest.approx(sparsity_oracle(yc, T, d), abs=1e-12)
    assert 0.0 <= got <= 1.0


@given(seeds, st.integers(0, 15), st.integers(0, 15), st.floats(0.0, 1.0))
def test_sparsity_monotone_in_pixel(seed, r, c, bump):
    rng = np.random.default_rng(seed)
    yc = rng.random((16, 16)) * 0.9
    up = yc.copy()
    up[r, c] = min(1.0, up[r, c] + bump)
    cfg = SparsityConfig(0.2, 4)
    assert float(grid_sparsity(torch.from_numpy(up), cfg)) >= float(grid_sparsity(torch.from_numpy(yc), cfg)) - 1e-12


def test_sparsity_accepts_prob_map():
    assert float(grid_sparsity(ChangeProbMap(np.ones((32, 32)), None), SparsityConfig(0.5))) == 1.0


# -- total ----------------------------------------------------------------------------------

def test_total_loss_arithmetic():
    assert total_loss(1.0, 2.0, 3.0, LossWeights(0.2, 1.0)) == pytest.approx(4.4, abs=1e-12)
    assert total_loss(1.5, 2.0, 3.0, LossWeights(0.0, 0.0)) == 1.5
    assert total_loss(0.0, 0.0, 0.0) == 0.0


# -- gradients ---------------------------------------------------------------------------------

def test_gradients_match_finite_differences(rng):
    shapes = {k: (4, 8, 4, 4) for k in ("y1", "b1", "y2", "b2")}
    params = {k: randn(rng, *s) for k, s in shapes.items()}

    losses = {
        "triplet": lambda p: triplet_loss(p["y1"], p["b1"], p["y2"], p["b2"], TripletConfig(0.5)),
        "info": lambda p: info_nce(p["y1"], p["y2"], p["b1"], p["b2"]),
    }
    for name, fn in losses.items():
        report = grad_check(fn, params, 1e-6)
        assert report.worst < 1e-4, (name, report.max_rel_error)


def test_sparsity_gradient_matches_finite_differences(rng):
    yc = {"yc": torch.from_numpy(rng.random((32, 32)))}
    report = grad_check(lambda p: grid_sparsity(p["yc"], SparsityConfig(0.2, 8)), yc, 1e-6)
    assert report.worst < 1e-4
