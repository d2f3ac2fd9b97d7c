"""Light and heavy synthetic degradations with replayable parameter records.

One light pass is ``{[(I * k_sigma) down_r + n_delta] JPEG_q} up_r``. The
heavy pipeline optionally runs ISP noise, motion blur and median blur first,
then one light pass with wider ranges, a sinc filter, and with probability
0.9 a second light pass with freshly drawn parameters.

Every random choice, including the seed of the noise generators, is stored
in a :class:`DegradationRecord`, so ``degrade(image, record)`` is a pure
function.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import resize, to_uint8
from .errors import InvalidArgumentError, InvalidRecordError

LEVELS = ("light", "heavy")

P_NOISE = 0.4
P_DOWN = 0.7
P_ISP = 0.5
P_MOTION = 0.05
P_MEDIAN = 0.1
P_SECOND = 0.9
P_HQ = 0.03

SIGMA_RANGE = (0.1, 10.0)
DOWN_RANGE = {"light": (1.0, 4.0), "heavy": (1.0, 10.0)}
NOISE_RANGE = {"light": (0.0, 2.0), "heavy": (0.0, 15.0)}
JPEG_RANGE = (30, 100)
ISP_GAMMA = 2.2
ISP_SHOT_RANGE = (0.0, 0.01)
ISP_READ_RANGE = (0.0, 0.05)
MOTION_LENGTHS = tuple(range(3, 16))
MEDIAN_KERNELS = (3, 5, 7)
SINC_CUTOFF_RANGE = (math.pi / 3, math.pi)
SINC_KERNELS = tuple(range(7, 22, 2))
MAX_BLUR_KERNEL = 21
INTERPOLATION = "bilinear"


@dataclass
class LightPass:
    sigma: float
    down_factor: float
    apply_down: bool
    noise_std: float
    apply_noise: bool
    jpeg_q: int


@dataclass
class DegradationRecord:
    level: str
    first: LightPass
    passthrough_hq: bool = False
    apply_isp: bool = False
    isp_gamma: float = ISP_GAMMA
    isp_shot: float = 0.0
    isp_read: float = 0.0
    apply_motion: bool = False
    motion_angle: float = 0.0
    motion_length: int = 3
    apply_median: bool = False
    median_kernel: int = 3
    apply_sinc: bool = False
    sinc_cutoff: float = math.pi
    sinc_kernel: int = 7
    apply_second: bool = False
    second: LightPass | None = None
    noise_seed: int = 0
    interpolation: str = INTERPOLATION

    # flat views of the first pass
    @property
    def sigma(self) -> float:
        return self.first.sigma

    @property
    def down_factor(self) -> float:
        return self.first.down_factor

    @property
    def noise_std(self) -> float:
        return self.first.noise_std

    @property
    def jpeg_q(self) -> int:
        return self.first.jpeg_q

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationRecord":
        try:
            d = dict(d)
            d["first"] = LightPass(**d["first"])
            if d.get("second") is not None:
                d["second"] = LightPass(**d["second"])
            return validate_record(cls(**d))
        except (TypeError, KeyError) as exc:
            raise InvalidRecordError(f"malformed degradation record: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "DegradationRecord":
        return cls.from_dict(json.loads(text))


def _in(value, lo, hi, name):
    if not (isinstance(value, (int, float)) and lo <= value <= hi):
        raise InvalidRecordError(f"{name}={value!r} outside [{lo}, {hi}]")


def _check_pass(p: LightPass, level: str, tag: str):
    _in(p.sigma, *SIGMA_RANGE, f"{tag}.sigma")
    _in(p.down_factor, *DOWN_RANGE[level], f"{tag}.down_factor")
    _in(p.noise_std, *NOISE_RANGE[level], f"{tag}.noise_std")
    if int(p.jpeg_q) != p.jpeg_q:
        raise InvalidRecordError(f"{tag}.jpeg_q must be an integer")
    _in(p.jpeg_q, *JPEG_RANGE, f"{tag}.jpeg_q")


def validate_record(rec: DegradationRecord) -> DegradationRecord:
    if rec.level not in LEVELS:
        raise InvalidRecordError(f"unknown level {rec.level!r}")
    if not isinstance(rec.first, LightPass):
        raise InvalidRecordError("record has no first pass")
    _check_pass(rec.first, rec.level, "first")
    if rec.level == "light" and (rec.apply_isp or rec.apply_motion or rec.apply_median
                                 or rec.apply_second or rec.apply_sinc):
        raise InvalidRecordError("light records cannot enable heavy-only stages")
    if rec.apply_isp:
        if rec.isp_gamma <= 0:
            raise InvalidRecordError("isp_gamma must be positive")
        _in(rec.isp_shot, *ISP_SHOT_RANGE, "isp_shot")
        _in(rec.isp_read, *ISP_READ_RANGE, "isp_read")
    if rec.apply_motion and rec.motion_length not in MOTION_LENGTHS:
        raise InvalidRecordError(f"motion_length {rec.motion_length} not in {MOTION_LENGTHS}")
    if rec.apply_median and rec.median_kernel not in MEDIAN_KERNELS:
        raise InvalidRecordError(f"median_kernel {rec.median_kernel} not in {MEDIAN_KERNELS}")
    if rec.apply_sinc:
        if rec.sinc_kernel % 2 == 0 or rec.sinc_kernel < 7:
            raise InvalidRecordError("sinc_kernel must be odd and >= 7")
        if not 0 < rec.sinc_cutoff <= math.pi:
            raise InvalidRecordError("sinc_cutoff must lie in (0, pi]")
    if rec.apply_second:
        if not isinstance(rec.second, LightPass):
            raise InvalidRecordError("second pass enabled without parameters")
        _check_pass(rec.second, rec.level, "second")
    if rec.interpolation != INTERPOLATION:
        raise InvalidRecordError(f"unsupported interpolation {rec.interpolation!r}")
    return rec


def _sample_pass(level: str, rng: np.random.Generator) -> LightPass:
    sigma = float(rng.uniform(*SIGMA_RANGE))
    down = float(rng.uniform(*DOWN_RANGE[level]))
    apply_down = bool(rng.random() < P_DOWN)
    noise = float(rng.uniform(*NOISE_RANGE[level]))
    apply_noise = bool(rng.random() < P_NOISE)
    q = int(rng.integers(JPEG_RANGE[0], JPEG_RANGE[1] + 1))
    return LightPass(sigma, down, apply_down, noise, apply_noise, q)


def sample_degradation(level: str, rng: np.random.Generator, p_hq: float = P_HQ) -> DegradationRecord:
    """Draw every stochastic choice of one degradation."""
    if level not in LEVELS:
        raise InvalidArgumentError(f"level must be one of {LEVELS}, got {level!r}")
    passthrough = bool(rng.random() < p_hq)
    first = _sample_pass(level, rng)
    rec = DegradationRecord(level=level, first=first, passthrough_hq=passthrough)
    if level == "heavy":
        rec.apply_isp = bool(rng.random() < P_ISP)
        rec.isp_shot = float(rng.uniform(*ISP_SHOT_RANGE))
        rec.isp_read = float(rng.uniform(*ISP_READ_RANGE))
        rec.apply_motion = bool(rng.random() < P_MOTION)
        rec.motion_angle = float(rng.uniform(0.0, math.pi))
        rec.motion_length = int(rng.choice(MOTION_LENGTHS))
        rec.apply_median = bool(rng.random() < P_MEDIAN)
        rec.median_kernel = int(rng.choice(MEDIAN_KERNELS))
        rec.apply_sinc = True
        rec.sinc_cutoff = float(rng.uniform(*SINC_CUTOFF_RANGE))
        rec.sinc_kernel = int(rng.choice(SINC_KERNELS))
        rec.apply_second = bool(rng.random() < P_SECOND)
        rec.second = _sample_pass(level, rng)
    rec.noise_seed = int(rng.integers(0, 2**63 - 1))
    return rec


def extreme_record(rng: np.random.Generator, down_factor: float = 10.0,
                   noise_std: float = 15.0) -> DegradationRecord:
    """Heavy record with downsampling and noise forced on at fixed strength in every pass."""
    rec = sample_degradation("heavy", rng, p_hq=0.0)
    force = dict(down_factor=down_factor, apply_down=True, noise_std=noise_std, apply_noise=True)
    rec.first = replace(rec.first, **force)
    if rec.second is not None:
        rec.second = replace(rec.second, **force)
    return validate_record(rec)


# -- operators ----------------------------------------------------------------

def _filter_separable(image: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(image, kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(out, kernel, axis=1, mode="reflect")


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    size = min(int(math.ceil(6 * sigma)) | 1, MAX_BLUR_KERNEL)
    n = np.arange(size) - size // 2
    k = np.exp(-0.5 * (n / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    return _filter_separable(image, gaussian_kernel1d(sigma))


def motion_kernel(angle: float, length: int) -> np.ndarray:
    size = length | 1
    k = np.zeros((size, size))
    c = size // 2
    for s in np.linspace(-(length - 1) / 2, (length - 1) / 2, 8 * length):
        x, y = c + s * math.cos(angle), c + s * math.sin(angle)
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for dy, wy in ((0, 1 - fy), (1, fy)):
            for dx, wx in ((0, 1 - fx), (1, fx)):
                if 0 <= y0 + dy < size and 0 <= x0 + dx < size:
                    k[y0 + dy, x0 + dx] += wx * wy
    return k / k.sum()


def motion_blur(image: np.ndarray, angle: float, length: int) -> np.ndarray:
    k = motion_kernel(angle, length)[:, :, None]
    return ndimage.correlate(image, k, mode="reflect")


def median_blur(image: np.ndarray, kernel: int) -> np.ndarray:
    return ndimage.median_filter(image, size=(kernel, kernel, 1), mode="reflect")


def sinc_kernel1d(cutoff: float, kernel_size: int) -> np.ndarray:
    if kernel_size % 2 == 0 or kernel_size < 7:
        raise InvalidArgumentError(f"sinc kernel size must be odd and >= 7, got {kernel_size}")
    if not 0 < cutoff <= math.pi:
        raise InvalidArgumentError(f"sinc cutoff must lie in (0, pi], got {cutoff}")
    n = np.arange(kernel_size) - kernel_size // 2
    k = cutoff / math.pi * np.sinc(cutoff * n / math.pi) * np.hamming(kernel_size)
    return k / k.sum()


def apply_sinc_filter(image: np.ndarray, cutoff: float, kernel_size: int) -> np.ndarray:
    """Separable windowed-sinc low-pass with unit DC gain and reflective borders."""
    return _filter_separable(np.asarray(image, dtype=np.float64), sinc_kernel1d(cutoff, kernel_size))


def apply_isp_noise(image: np.ndarray, gamma: float, shot_scale: float, read_std: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Signal-dependent sensor noise added in gamma-linearized space."""
    if gamma <= 0:
        raise InvalidArgumentError("gamma must be positive")
    linear = np.asarray(image, dtype=np.float64) ** gamma
    std = np.sqrt(shot_scale * linear + read_std ** 2)
    noisy = np.clip(linear + std * rng.standard_normal(linear.shape), 0.0, 1.0)
    return noisy ** (1.0 / gamma)


def jpeg(image: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def light_pass(image: np.ndarray, p: LightPass, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    x = gaussian_blur(image, p.sigma)
    if p.apply_down:
        small = (max(1, round(h / p.down_factor)), max(1, round(w / p.down_factor)))
        x = resize(np.clip(x, 0, 1).astype(np.float32), small, INTERPOLATION).astype(np.float64)
    if p.apply_noise:
        x = x + rng.standard_normal(x.shape) * (p.noise_std / 255.0)
    x = jpeg(np.clip(x, 0.0, 1.0), p.jpeg_q)
    if x.shape[:2] != (h, w):
        x = resize(x.astype(np.float32), (h, w), INTERPOLATION).astype(np.float64)
    return x


def degrade(image: np.ndarray, record: DegradationRecord) -> np.ndarray:
    """Apply ``record`` to an H x W x 3 image; output has the input's size."""
    record = validate_record(record)
    if record.passthrough_hq:
        return image.copy()
    seeds = np.random.SeedSequence(record.noise_seed).spawn(3)
    rng_isp, rng_first, rng_second = (np.random.default_rng(s) for s in seeds)
    x = np.asarray(image, dtype=np.float64)
    if record.apply_isp:
        x = apply_isp_noise(x, record.isp_gamma, record.isp_shot, record.isp_read, rng_isp)
    if record.apply_motion:
        x = motion_blur(x, record.motion_angle, record.motion_length)
    if record.apply_median:
        x = median_blur(x, record.median_kernel)
    x = light_pass(x, record.first, rng_first)
    if record.apply_sinc:
        x = apply_sinc_filter(x, record.sinc_cutoff, record.sinc_kernel)
    if record.apply_second:
        x = light_pass(np.clip(x, 0.0, 1.0), record.second, rng_second)
    return np.clip(x, 0.0, 1.0).astype(np.float32)
