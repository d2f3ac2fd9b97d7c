import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from facepers.data import face_landmarks, generate_face, random_face_params
from facepers.errors import InvalidArgumentError
from facepers.metrics import (CSV_HEADER, LMSE_FAIL, OracleEmbedder, OracleFaceDetector, evaluate_dataset,
                              id_cosine, lmse, psnr, ssim)


def face(seed, jitter=0):
    return generate_face(random_face_params(np.random.default_rng(seed)), 64, jitter)


def test_psnr_identical_is_capped():
    x = face(0)
    assert psnr(x, x) == 100.0


def test_psnr_zero_vs_half():
    assert psnr(np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.5)) == pytest.approx(6.0206, abs=1e-3)


def test_psnr_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        psnr(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_psnr_and_ssim_symmetric(seed):
    g = np.random.default_rng(seed)
    a, b = g.random((16, 16, 3)), g.random((16, 16, 3))
    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 <= ssim(a, b) <= 1


def test_ssim_identical_is_one():
    x = face(1)
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_binary_inverse_is_negative():
    g = np.random.default_rng(0)
    a = (g.random((32, 32, 3)) > 0.5).astype(np.float64)
    assert ssim(a, 1 - a) < 0


def test_ssim_matches_reference_implementation():
    g = np.random.default_rng(3)
    a = face(2)
    b = np.clip(a + 0.1 * g.standard_normal(a.shape), 0, 1)
    luma = np.array([0.299, 0.587, 0.114])
    ref = structural_similarity(a @ luma, b @ luma, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_too_small():
    with pytest.raises(InvalidArgumentError):
        ssim(np.zeros((10, 10, 3)), np.zeros((10, 10, 3)))


class ShiftDetector:
    def __init__(self, shift=(0.0, 0.0), fail=False):
        self.shift, self.fail = np.array(shift), fail

    def detect(self, image):
        if self.fail or image.mean() > 0.9:
            return None
        return np.array([[10.0, 10.0], [20.0, 10.0], [15.0, 20.0]]) + self.shift * (image.mean() > 0.4)


def test_lmse_identical_faces_zero():
    x = face(3)
    assert lmse(x, x) == 0.0


def test_lmse_offset_three_four_is_25():
    a = np.full((8, 8, 3), 0.2)
    b = np.full((8, 8, 3), 0.5)
    assert lmse(a, b, ShiftDetector((3.0, 4.0))) == pytest.approx(25.0)


def test_lmse_failure_path_is_exactly_128():
    a = np.full((8, 8, 3), 0.2)
    assert lmse(a, np.ones((8, 8, 3)), ShiftDetector()) == LMSE_FAIL == 128.0
    # the oracle detector fails on a flat image
    assert lmse(np.full((64, 64, 3), 0.5), face(4)) == 128.0


def test_lmse_is_capped():
    a = np.full((8, 8, 3), 0.2)
    b = np.full((8, 8, 3), 0.5)
    assert lmse(a, b, ShiftDetector((30.0, 40.0))) == 128.0


def test_oracle_detector_matches_analytic_landmarks():
    for seed in range(10):
        p = random_face_params(np.random.default_rng(seed))
        pts = OracleFaceDetector().detect(generate_face(p, 64, seed))
        assert pts is not None
        assert np.abs(pts - face_landmarks(p, 64, seed)).max() < 1.0


def test_id_cosine_identical_is_100():
    x = face(5)
    assert id_cosine(x, x) == pytest.approx(100.0)


class FixedEmbedder:
    def embed(self, image):
        v = np.zeros(2)
        v[int(image.mean() > 0.5)] = 1.0
        return v


def test_id_cosine_orthogonal_is_zero():
    assert id_cosine(np.zeros((4, 4, 3)), np.ones((4, 4, 3)), FixedEmbedder()) == 0.0


def test_embedding_unit_norm():
    emb = OracleEmbedder()
    for x in (face(6), np.zeros((64, 64, 3)), np.random.default_rng(0).random((64, 64, 3))):
        assert np.linalg.norm(emb.embed(x)) == pytest.approx(1.0)


def test_oracle_embedder_separates_identities():
    emb = OracleEmbedder()
    same = [id_cosine(face(s, 1), face(s, 2), emb) for s in range(10)]
    diff = [id_cosine(face(s, 1), face(s + 100, 2), emb) for s in range(10)]
    assert np.mean(same) > np.mean(diff) + 50
    assert all(a > b for a, b in zip(same, diff))


def test_report_single_identical_pair():
    x = face(7)
    rep = evaluate_dataset([(x, x)])
    m = rep.means
    assert m["psnr_db"] == 100.0 and m["ssim"] == pytest.approx(1.0)
    assert m["lmse"] == 0.0 and m["id_percent"] == pytest.approx(100.0)


def test_report_means_and_csv():
    pairs = [(face(s, 1), face(s, 2)) for s in range(3)]
    rep = evaluate_dataset(pairs, names=["a", "b", "c"])
    for k in CSV_HEADER[1:]:
        assert rep.means[k] == pytest.approx(np.mean([r[k] for r in rep.rows]))
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert tuple(rows[0]) == CSV_HEADER and rows[-1][0] == "mean" and len(rows) == 5
    assert rep.digest() == evaluate_dataset(pairs, names=["a", "b", "c"]).digest()
    assert "mean" in rep.table()
    for r in rep.rows:
        assert -1 <= r["ssim"] <= 1 and 0 <= r["lmse"] <= 128 and -100 <= r["id_percent"] <= 100


def test_report_empty_input():
    with pytest.raises(InvalidArgumentError):
        evaluate_dataset([])
