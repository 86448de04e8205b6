import numpy as np
import pytest

from latentlens.dataset import ImageSample
from latentlens.errors import DimensionMismatch, SizeMismatch
from latentlens.tinyvae import decode, init_params, zero_params
from latentlens.traversal import (
    TraversalSequence, TraversalSpec, compose_strip, generate_grid, generate_sequence,
    sample_base_latent, traversal_values,
)


def test_default_values():
    assert traversal_values(-3, 3, 0.6) == [-3.0, -2.4, -1.8, -1.2, -0.6, 0.0, 0.6, 1.2, 1.8, 2.4, 3.0]


def test_small_grids():
    assert traversal_values(0, 1, 1) == [0.0, 1.0]
    assert traversal_values(0, 1, 0.4) == [0.0, 0.4, 0.8]
    assert traversal_values(0, 0.6, 0.6) == [0.0, 0.6]


def test_spec_validation():
    with pytest.raises(ValueError):
        TraversalSpec((0.0,) * 6, 0, low=1, high=1)
    with pytest.raises(ValueError):
        TraversalSpec((0.0,) * 6, 0, step=0)
    with pytest.raises(DimensionMismatch):
        TraversalSpec((0.0,) * 6, 6)


def test_base_latent():
    assert np.array_equal(sample_base_latent(3), sample_base_latent(3))
    assert sample_base_latent(3, 6).shape == (6,)


def test_base_latent_moments():
    draws = np.array([sample_base_latent(s, 1)[0] for s in range(100_000)])
    assert abs(draws.mean()) < 0.02 and abs(draws.var() - 1) < 0.03


def test_zero_decoder_is_flat():
    params = zero_params(64, 6, [8])
    seq = generate_sequence(params, TraversalSpec((0.0,) * 6, 2))
    assert seq.k == 11
    assert all(np.all(f.pixels == 0.5) for f in seq.frames)


def test_frames_match_direct_decode():
    params = init_params(64, 6, [16], seed=4)
    base = tuple(sample_base_latent(9))
    spec = TraversalSpec(base, 3)
    seq = generate_sequence(params, spec)
    for v, frame in zip(seq.assigned_values, seq.frames):
        z = np.array(base)
        z[3] = v
        np.testing.assert_allclose(frame.pixels, decode(params, z).pixels, rtol=0, atol=1e-15)


def test_grid_shape_and_shared_base():
    params = init_params(64, 6, [16], seed=1)
    grid = generate_grid(params, seed=5)
    assert len(grid) == 6 and sum(s.k for s in grid) == 66
    bases = {s.spec.base for s in grid}
    assert len(bases) == 1
    again = generate_grid(params, seed=5)
    for a, b in zip(grid, again):
        assert all(x == y for x, y in zip(a.frames, b.frames))
    assert [s.sequence_id for s in grid] == [f"model-s5-z{d}" for d in range(6)]


def _seq(frames, values=None):
    values = values or [float(i) for i in range(len(frames))]
    spec = TraversalSpec((0.0,), 0, 0.0, float(len(frames) - 1), 1.0)
    return TraversalSequence(spec, values, frames, "s")


def test_strip_width():
    f = ImageSample(np.zeros((28, 28)))
    assert compose_strip(_seq([f, f]), 2).width == 58


def test_strip_tiling_without_separator():
    f = ImageSample(np.random.default_rng(0).random((4, 5)))
    strip = compose_strip(_seq([f, f, f]), 0).pixels
    np.testing.assert_array_equal(strip, np.tile(f.pixels, (1, 3)))


def test_strip_index_mapping():
    rng = np.random.default_rng(2)
    frames = [ImageSample(rng.random((6, 7))) for _ in range(5)]
    strip = compose_strip(_seq(frames), 3).pixels
    for _ in range(50):
        j, r, c = rng.integers(5), rng.integers(6), rng.integers(7)
        assert strip[r, j * 10 + c] == frames[j].pixels[r, c]
    assert np.all(strip[:, 7:10] == 1.0)


def test_strip_orders_by_value():
    a, b = ImageSample(np.zeros((2, 2))), ImageSample(np.ones((2, 2)))
    strip = compose_strip(_seq([b, a], values=[1.0, 0.0]), 0).pixels
    assert np.all(strip[:, :2] == 0) and np.all(strip[:, 2:] == 1)


def test_strip_rejects_mixed_sizes():
    with pytest.raises(SizeMismatch):
        compose_strip(_seq([ImageSample(np.zeros((2, 2))), ImageSample(np.zeros((3, 2)))]))
