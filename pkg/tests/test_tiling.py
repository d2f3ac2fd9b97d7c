import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import randomize, tiny_model
from facepers.diffusion import SamplerConfig, sample
from facepers.errors import InvalidArgumentError
from facepers.tiling import partition_of_unity, plan_tiles, restore_super_resolution, restore_tiled


def test_single_tile_plan():
    p = plan_tiles(32, 32, 32, 16)
    assert p.rects == [(0, 0, 32, 32)]
    assert torch.all(p.weights[0] == 1.0)


def test_tile_origins_64_48_16():
    p = plan_tiles(64, 64, 48, 16)
    assert sorted({r[0] for r in p.rects}) == [0, 16]
    assert sorted({r[1] for r in p.rects}) == [0, 16]


def test_last_tile_clamped_to_border():
    p = plan_tiles(50, 70, 32, 8)
    assert max(y + a for y, _, a, _ in p.rects) == 50
    assert max(x + b for _, x, _, b in p.rects) == 70


def test_overlap_must_be_below_tile():
    with pytest.raises(InvalidArgumentError):
        plan_tiles(64, 64, 16, 16)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 80), st.integers(1, 80), st.integers(2, 40), st.data())
def test_coverage_and_partition_of_unity(h, w, tile, data):
    overlap = data.draw(st.integers(0, tile - 1))
    p = plan_tiles(h, w, tile, overlap)
    assert torch.all(p.norm > 0)
    assert (partition_of_unity(p) - 1).abs().max() <= 1e-6
    assert p.rects == sorted(p.rects)


def test_flat_masks_reduce_to_overlap_averaging():
    p = plan_tiles(48, 48, 32, 16, sigma=float("inf"))
    count = torch.zeros(48, 48, dtype=torch.float64)
    for y, x, a, b in p.rects:
        count[y:y + a, x:x + b] += 1
    for (y, x, a, b), wt in zip(p.rects, p.weights):
        assert torch.allclose(wt, 1 / count[y:y + a, x:x + b])


def _setup(size=16):
    m = randomize(tiny_model(), 0, 0.2)
    ps = randomize(m.new_personalization(torch.rand(2, 3, size, size, generator=torch.Generator().manual_seed(1))), 2)
    lq = np.random.default_rng(0).random((size, size, 3)).astype(np.float32)
    return m, ps, lq


@pytest.mark.parametrize("personal", [False, True])
def test_single_tile_matches_untiled_bitwise(personal):
    m, ps, lq = _setup()
    ps = ps if personal else None
    cfg = SamplerConfig(num_steps=6, seed=5)
    a = sample(m, lq, ps, cfg)
    b = restore_tiled(m, lq, ps, cfg, plan_tiles(8, 8, 8, 4))
    c = restore_tiled(m, lq, ps, cfg, plan_tiles(8, 8, 16, 4))
    assert np.array_equal(a, b) and np.array_equal(a, c)


def test_plan_latent_mismatch_rejected():
    m, ps, lq = _setup()
    with pytest.raises(InvalidArgumentError):
        restore_tiled(m, lq, ps, SamplerConfig(num_steps=2), plan_tiles(16, 16, 8, 4))


def test_tiled_output_size_and_determinism():
    m, ps, _ = _setup()
    lq = np.random.default_rng(1).random((40, 24, 3)).astype(np.float32)
    cfg = SamplerConfig(num_steps=3, seed=2)
    plan = plan_tiles(20, 12, 8, 4)
    a = restore_tiled(m, lq, ps, cfg, plan)
    assert a.shape == lq.shape
    assert np.array_equal(a, restore_tiled(m, lq, ps, cfg, plan))


def test_super_resolution_has_no_seams():
    """Seam statistic: the gradient across tile borders is not larger than inside tiles."""
    m, ps, _ = _setup()
    small = np.random.default_rng(3).random((8, 8, 3)).astype(np.float32)
    out = restore_super_resolution(m, small, 8, None, SamplerConfig(num_steps=4, seed=1), tile=8, overlap=4)
    assert out.shape == (64, 64, 3)
    grad = np.abs(np.diff(out.mean(axis=2), axis=1))
    plan = plan_tiles(32, 32, 8, 4)
    borders = sorted({2 * (x + b) - 1 for _, x, _, b in plan.rects if x + b < 32})
    seam = grad[:, borders].max()
    assert seam <= np.percentile(grad, 99.5)
