"""Image quality and identity metrics with pixel-level synthetic-face oracles.

The default landmark detector and identity embedder read the rendered face
structure straight from pixels: the skin region, the dark eye discs, the
brows above them and the red mouth stroke. They stand in for pretrained face
networks and work on any image, including restorations.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

PSNR_CAP = 100.0
LMSE_FAIL = 128.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def _luma(x: np.ndarray) -> np.ndarray:
    return x @ LUMA if x.ndim == 3 else x


def _gaussian_valid(x: np.ndarray) -> np.ndarray:
    n = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-0.5 * (n / SSIM_SIGMA) ** 2)
    k /= k.sum()
    r = SSIM_WINDOW // 2
    y = ndimage.correlate1d(x, k, axis=0, mode="reflect")
    y = ndimage.correlate1d(y, k, axis=1, mode="reflect")
    return y[r:-r, r:-r]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM of the luminance channels over fully covered 11 x 11 Gaussian windows."""
    a, b = _pair(a, b)
    a, b = _luma(a), _luma(b)
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidArgumentError(f"image smaller than the {SSIM_WINDOW}px SSIM window")
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _gaussian_valid(a), _gaussian_valid(b)
    var_a = _gaussian_valid(a * a) - mu_a ** 2
    var_b = _gaussian_valid(b * b) - mu_b ** 2
    cov = _gaussian_valid(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(np.clip(s.mean(), -1.0, 1.0))


# -- plug-in interfaces -------------------------------------------------------------------

class LandmarkDetector(Protocol):
    def detect(self, image: np.ndarray) -> np.ndarray | None:
        """(K, 2) landmark (x, y) pixel coordinates, or None on failure."""


class IdentityEmbedder(Protocol):
    def embed(self, image: np.ndarray) -> np.ndarray:
        """Unit-norm identity vector."""


def lmse(a, b, detector: LandmarkDetector | None = None) -> float:
    """Mean squared landmark distance in pixels; 128 on failure, capped at 128."""
    detector = detector or OracleFaceDetector()
    la, lb = detector.detect(np.asarray(a)), detector.detect(np.asarray(b))
    if la is None or lb is None or la.shape != lb.shape:
        return LMSE_FAIL
    return float(min(LMSE_FAIL, np.mean(np.sum((la - lb) ** 2, axis=1))))


def id_cosine(a, b, embedder: IdentityEmbedder | None = None) -> float:
    embedder = embedder or OracleEmbedder()
    return float(100.0 * np.dot(embedder.embed(np.asarray(a)), embedder.embed(np.asarray(b))))


# -- synthetic-face oracle -------------------------------------------------------------------

@dataclass
class FaceAnalysis:
    ok: bool
    size: int
    skin: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))
    center: tuple[float, float] = (np.nan, np.nan)
    radii: tuple[float, float] = (np.nan, np.nan)
    eyes: np.ndarray | None = None        # (2, 2) left, right (x, y)
    eye_mass: float = np.nan
    brow_slope: float = np.nan
    mouth: tuple[float, float] = (np.nan, np.nan)
    mouth_spread: float = np.nan
    mouth_bend: float = np.nan


def _weighted_centroid(w, xs, ys):
    s = w.sum()
    return float((w * xs).sum() / s), float((w * ys).sum() / s)


def analyze_face(image: np.ndarray, min_eye_darkness: float = 0.2,
                 min_mouth_mass: float = 1.0) -> FaceAnalysis:
    """Locate the face structures of a synthetic render from pixels alone."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    size = (h + w) / 2
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    mask = ndimage.binary_fill_holes(r - b > 0.1)
    labels, n = ndimage.label(mask)
    if n == 0:
        return FaceAnalysis(False, int(size))
    areas = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
    mask = labels == (1 + int(np.argmax(areas)))
    if mask.sum() < 0.05 * h * w:
        return FaceAnalysis(False, int(size))
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    cx, cy = float(xs[mask].mean()), float(ys[mask].mean())
    rx = 2.0 * float(xs[mask].std())
    ry = 2.0 * float(ys[mask].std())
    skin = np.median(img[mask], axis=0)
    res = FaceAnalysis(False, int(size), skin, (cx, cy), (rx, ry))

    lum = img @ LUMA
    skin_lum = float(skin @ LUMA)
    dark = np.where(mask, np.clip((skin_lum - lum) / max(skin_lum, 1e-6), 0, 1), 0.0)
    smooth = ndimage.uniform_filter(dark, 3, mode="constant")

    # eyes: darkest blob in each upper quadrant of the face
    band = (ys > cy - 0.6 * ry) & (ys < cy + 0.05 * ry) & mask
    eyes = []
    for side in (xs < cx, xs >= cx):
        region = np.where(band & side, smooth, -1.0)
        iy, ix = np.unravel_index(int(np.argmax(region)), region.shape)
        if region[iy, ix] < min_eye_darkness:
            return res
        win = (np.abs(ys - ys[iy, ix]) <= 2.5) & (np.abs(xs - xs[iy, ix]) <= 2.5)
        wt = np.where(win, dark, 0.0)
        eyes.append(_weighted_centroid(wt, xs, ys))
    eyes = np.array(eyes)
    unit = size / 64.0
    mass = 0.0
    slopes = []
    for k, (ex, ey) in enumerate(eyes):
        win = (np.abs(ys - ey) <= 3 * unit) & (np.abs(xs - ex) <= 4 * unit)
        mass += float(dark[win].sum())
        # brow: darkness above the eye, fit row centroid against column
        bw = (ys > ey - 7.5 * unit) & (ys < ey - 3 * unit) & (np.abs(xs - ex) <= 4 * unit)
        wt = np.where(bw, dark, 0.0)
        col_w = wt.sum(axis=0)
        cols = col_w > 1e-3
        if cols.sum() >= 3:
            col_y = (wt * ys).sum(axis=0)[cols] / col_w[cols]
            col_x = xs[0][cols]
            cw = col_w[cols]
            mxw = np.average(col_x, weights=cw)
            myw = np.average(col_y, weights=cw)
            slope = np.sum(cw * (col_x - mxw) * (col_y - myw)) / max(np.sum(cw * (col_x - mxw) ** 2), 1e-9)
            # the outer end rises for positive angles: flip the left side
            slopes.append(slope if k == 0 else -slope)
    res.eyes = eyes
    res.eye_mass = mass / 2.0
    res.brow_slope = float(np.mean(slopes)) if slopes else 0.0

    # mouth: red stroke in the lower face, where g/r falls well below the skin's
    skin_gr = skin[1] / max(skin[0], 1e-6)
    gr = g / np.maximum(r, 1e-6)
    red = np.where(mask & (ys > cy + 0.1 * ry), np.clip(skin_gr - gr, 0, 1), 0.0)
    red = np.where(red > 0.15 * max(skin_gr, 1e-6), red, 0.0)
    if red.sum() < min_mouth_mass * unit ** 2:
        return res
    mx, my = _weighted_centroid(red, xs, ys)
    spread = float(np.sqrt(np.average((xs - mx) ** 2, weights=red)))
    s2 = ((xs - mx) / max(spread * np.sqrt(3.0), 1e-6)) ** 2
    m_s2 = np.average(s2, weights=red)
    bend = np.sum(red * (s2 - m_s2) * (ys - my)) / max(np.sum(red * (s2 - m_s2) ** 2), 1e-9)
    res.mouth = (mx, my)
    res.mouth_spread = spread
    res.mouth_bend = float(bend)
    res.ok = True
    return res


class OracleFaceDetector:
    """Eye and mouth centers of a synthetic face: (3, 2) in (x, y) pixels."""

    def detect(self, image: np.ndarray) -> np.ndarray | None:
        a = analyze_face(image)
        if not a.ok:
            return None
        pts = np.vstack([a.eyes, np.array(a.mouth)[None]])
        h, w = np.asarray(image).shape[:2]
        if np.any(pts < 0) or np.any(pts[:, 0] > w) or np.any(pts[:, 1] > h):
            return None
        return pts


FEATURE_NAMES = (
    "skin_g_over_r", "skin_b_over_r", "skin_r", "face_aspect", "face_width",
    "eye_spacing", "eye_height", "eye_mass", "brow_slope",
    "mouth_height", "mouth_width", "mouth_bend",
)


def face_features(image: np.ndarray) -> np.ndarray:
    """Pose-normalized identity features; NaN marks structures that were not found."""
    a = analyze_face(image)
    out = np.full(len(FEATURE_NAMES), np.nan)
    if not np.isfinite(a.radii[0]):
        return out
    skin = a.skin
    (cx, cy), (rx, ry) = a.center, a.radii
    out[0] = skin[1] / max(skin[0], 1e-6)
    out[1] = skin[2] / max(skin[0], 1e-6)
    out[2] = skin[0]
    out[3] = ry / rx
    out[4] = rx / a.size
    if a.eyes is not None:
        out[5] = (a.eyes[1, 0] - a.eyes[0, 0]) / (2 * rx)
        out[6] = (a.eyes[:, 1].mean() - cy) / ry
        out[7] = a.eye_mass / (rx * ry)
        out[8] = a.brow_slope
    if a.ok:
        out[9] = (a.mouth[1] - cy) / ry
        out[10] = a.mouth_spread / rx
        out[11] = a.mouth_bend / ry
    return out


@lru_cache(maxsize=4)
def feature_statistics(n: int = 300, size: int = 64, seed: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Population mean and std of :func:`face_features` over random clean renders."""
    from .data import generate_face, random_face_params

    rng = np.random.default_rng([seed, 0xFEA7])
    feats = np.array([face_features(generate_face(random_face_params(rng), size,
                                                  int(rng.integers(2**31 - 1))))
                      for _ in range(n)])
    mean = np.nanmean(feats, axis=0)
    std = np.nanstd(feats, axis=0)
    return mean, np.where(std > 1e-9, std, 1.0)


class OracleEmbedder:
    """z-scored face features, L2-normalized. Missing structures sit at the population mean."""

    def __init__(self, size: int = 64):
        self.mean, self.std = feature_statistics(size=size)

    def embed(self, image: np.ndarray) -> np.ndarray:
        z = (face_features(image) - self.mean) / self.std
        z = np.nan_to_num(z, nan=0.0)
        n = np.linalg.norm(z)
        if n == 0:
            z = np.zeros_like(z)
            z[0] = 1.0
            return z
        return z / n


# -- reports ------------------------------------------------------------------------

CSV_HEADER = ("name", "psnr_db", "ssim", "lmse", "id_percent")


@dataclass
class MetricsReport:
    rows: list[dict]

    @property
    def means(self) -> dict[str, float]:
        return {k: float(np.mean([r[k] for r in self.rows])) for k in CSV_HEADER[1:]}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r["name"]] + [f"{r[k]:.6f}" for k in CSV_HEADER[1:]])
        writer.writerow(["mean"] + [f"{v:.6f}" for v in self.means.values()])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def table(self) -> str:
        lines = [f"{'name':<24}{'PSNR':>9}{'SSIM':>8}{'LMSE':>9}{'ID':>8}"]
        for r in self.rows + [dict(name="mean", **self.means)]:
            lines.append(f"{r['name']:<24}{r['psnr_db']:>9.3f}{r['ssim']:>8.4f}"
                         f"{r['lmse']:>9.3f}{r['id_percent']:>8.2f}")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


def evaluate_dataset(pairs: Sequence[tuple[np.ndarray, np.ndarray]], detector: LandmarkDetector | None = None,
                     embedder: IdentityEmbedder | None = None, names: Sequence[str] | None = None) -> MetricsReport:
    """Score (restored, ground truth) pairs."""
    if len(pairs) == 0:
        raise InvalidArgumentError("no image pairs to evaluate")
    detector = detector or OracleFaceDetector()
    embedder = embedder or OracleEmbedder()
    names = list(names) if names is not None else [f"{i:04d}" for i in range(len(pairs))]
    rows = []
    for name, (restored, gt) in zip(names, pairs):
        rows.append(dict(name=name, psnr_db=psnr(restored, gt), ssim=ssim(restored, gt),
                         lmse=lmse(restored, gt, detector), id_percent=id_cosine(restored, gt, embedder)))
    return MetricsReport(rows)
