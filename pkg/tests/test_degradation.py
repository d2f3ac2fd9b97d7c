import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facepers.data import FaceParams, generate_face
from facepers.degradation import (DegradationRecord, LightPass, apply_isp_noise, apply_sinc_filter,
                                  degrade, extreme_record, gaussian_kernel1d, motion_kernel,
                                  sample_degradation, sinc_kernel1d, validate_record)
from facepers.errors import InvalidArgumentError, InvalidRecordError

FACE = generate_face(FaceParams(), 64, 1)


def minimal_record(**kw):
    return DegradationRecord("light", LightPass(0.1, 1.0, False, 0.0, False, 100), **kw)


def test_near_lossless_record():
    assert np.abs(degrade(FACE, minimal_record()) - FACE).max() <= 0.02


def test_passthrough_is_bit_identical(rng):
    rec = sample_degradation("heavy", rng, p_hq=1.0)
    assert rec.passthrough_hq
    assert np.array_equal(degrade(FACE, rec), FACE)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["light", "heavy"]))
def test_replay_deterministic_and_size_preserving(seed, level):
    rec = sample_degradation(level, np.random.default_rng(seed), p_hq=0.0)
    a, b = degrade(FACE, rec), degrade(FACE, rec)
    assert np.array_equal(a, b)
    assert a.shape == FACE.shape
    assert a.min() >= 0 and a.max() <= 1


def test_non_square_size_preserved(rng):
    img = np.random.default_rng(0).random((40, 24, 3)).astype(np.float32)
    for _ in range(10):
        assert degrade(img, sample_degradation("heavy", rng, 0.0)).shape == img.shape


def test_json_round_trip(rng):
    for level in ("light", "heavy"):
        rec = sample_degradation(level, rng)
        assert DegradationRecord.from_json(rec.to_json()) == rec


def test_light_records_never_set_heavy_flags(rng):
    for _ in range(2000):
        rec = sample_degradation("light", rng)
        assert not (rec.apply_isp or rec.apply_motion or rec.apply_median or rec.apply_second or rec.apply_sinc)


def test_heavy_flag_frequencies():
    rng = np.random.default_rng(0)
    recs = [sample_degradation("heavy", rng) for _ in range(10_000)]
    assert abs(np.mean([r.apply_isp for r in recs]) - 0.5) < 0.02
    assert abs(np.mean([r.apply_motion for r in recs]) - 0.05) < 0.01
    assert abs(np.mean([r.passthrough_hq for r in recs]) - 0.03) < 0.005


@pytest.mark.parametrize("bad", [
    dict(first=LightPass(0.05, 1.0, False, 0.0, False, 90)),
    dict(first=LightPass(1.0, 5.0, True, 0.0, False, 90)),
    dict(first=LightPass(1.0, 1.0, False, 3.0, True, 90)),
    dict(first=LightPass(1.0, 1.0, False, 0.0, False, 20)),
    dict(first=LightPass(1.0, 1.0, False, 0.0, False, 50.5)),
    dict(apply_isp=True),
    dict(level="medium"),
])
def test_malformed_records_rejected(bad):
    rec = minimal_record()
    for k, v in bad.items():
        setattr(rec, k, v)
    with pytest.raises(InvalidRecordError):
        degrade(FACE, rec)


def test_from_dict_missing_fields():
    with pytest.raises(InvalidRecordError):
        DegradationRecord.from_dict({"level": "light"})


def test_heavy_second_pass_requires_parameters():
    rec = DegradationRecord("heavy", LightPass(1.0, 1.0, False, 0.0, False, 90), apply_second=True)
    with pytest.raises(InvalidRecordError):
        validate_record(rec)


def test_extreme_record_forces_strength(rng):
    rec = extreme_record(rng)
    assert rec.first.down_factor == 10 and rec.first.noise_std == 15
    assert rec.first.apply_down and rec.first.apply_noise and not rec.passthrough_hq


# -- ISP ----------------------------------------------------------------------

def test_isp_zero_noise_round_trip(rng):
    out = apply_isp_noise(FACE, 2.2, 0.0, 0.0, rng)
    assert np.abs(out - FACE).max() <= 1e-6


def test_isp_read_noise_std_in_linear_space():
    img = np.full((256, 256, 3), 0.5)
    out = apply_isp_noise(img, 2.2, 0.0, 0.1, np.random.default_rng(0))
    # reference: the clipped normal around 0.5**2.2 has std within 5% of 0.1 (2.2 sigma to zero)
    assert abs((out ** 2.2).std() - 0.1) < 0.005


def test_isp_output_clamped(rng):
    out = apply_isp_noise(np.random.default_rng(1).random((32, 32, 3)), 2.2, 0.01, 0.3, rng)
    assert out.min() >= 0 and out.max() <= 1


def test_isp_rejects_nonpositive_gamma(rng):
    with pytest.raises(InvalidArgumentError):
        apply_isp_noise(FACE, 0.0, 0.0, 0.0, rng)


# -- sinc and blur kernels --------------------------------------------------------

def test_sinc_all_pass_limit():
    img = np.random.default_rng(0).random((32, 32, 3))
    assert np.abs(apply_sinc_filter(img, math.pi, 21) - img).max() <= 1e-3


def test_sinc_preserves_constant():
    img = np.full((16, 16, 3), 0.37)
    assert np.allclose(apply_sinc_filter(img, math.pi / 3, 11), img, atol=1e-12)


def test_sinc_removes_checkerboard_energy():
    y, x = np.mgrid[0:64, 0:64]
    img = np.repeat(((x + y) % 2).astype(np.float64)[..., None], 3, axis=2)
    out = apply_sinc_filter(img, math.pi / 3, 21)

    def hf_energy(a):
        spec = np.abs(np.fft.fft2(a[..., 0] - a[..., 0].mean())) ** 2
        f = np.abs(np.fft.fftfreq(64))
        high = (f[:, None] > 0.25) | (f[None, :] > 0.25)
        return spec[high].sum()

    assert hf_energy(out) <= 0.1 * hf_energy(img)


@pytest.mark.parametrize("k", [6, 8, 5])
def test_sinc_kernel_size_validation(k):
    with pytest.raises(InvalidArgumentError):
        apply_sinc_filter(FACE, 1.0, k)


@settings(max_examples=30, deadline=None)
@given(st.floats(math.pi / 3, math.pi), st.sampled_from(range(7, 22, 2)))
def test_sinc_kernel_rows_sum_to_one(cutoff, k):
    assert abs(sinc_kernel1d(cutoff, k).sum() - 1) < 1e-12


def test_gaussian_kernel_size_rule():
    assert gaussian_kernel1d(0.1).size == 1
    assert gaussian_kernel1d(1.0).size == 7
    assert gaussian_kernel1d(10.0).size == 21


@settings(max_examples=30, deadline=None)
@given(st.floats(0, math.pi), st.integers(3, 15))
def test_motion_kernel_normalized(angle, length):
    k = motion_kernel(angle, length)
    assert abs(k.sum() - 1) < 1e-12 and k.min() >= 0
