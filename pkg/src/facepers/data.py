"""Identity datasets, training crops, reference sampling and a synthetic face renderer.

Images are ``float32`` arrays of shape ``(H, W, 3)`` with values in [0, 1].
The synthetic renderer draws a face from a :class:`FaceParams` vector; the
vector is the ground-truth identity of every render, and eye and mouth
landmarks follow from it analytically.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import EmptyDatasetError, InvalidArgumentError

ImageBuffer = np.ndarray

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def check_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3 or min(image.shape[:2]) < 1:
        raise InvalidArgumentError(f"expected an H x W x 3 image, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise InvalidArgumentError("image values must be finite and within [0, 1]")
    return image


def load_image(path) -> ImageBuffer:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def to_uint8(image: ImageBuffer) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image: ImageBuffer) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def resize(image: ImageBuffer, size: tuple[int, int], mode: str = "bilinear") -> ImageBuffer:
    """Resize an H x W x 3 image to ``size = (h, w)``; bilinear uses antialiasing."""
    if tuple(image.shape[:2]) == tuple(size):
        return image.copy()
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1), dtype=np.float32))[None]
    kwargs = {"antialias": True} if mode in ("bilinear", "bicubic") else {}
    if mode in ("bilinear", "bicubic"):
        kwargs["align_corners"] = False
    y = F.interpolate(x, size=tuple(size), mode=mode, **kwargs)
    return y[0].numpy().transpose(1, 2, 0).clip(0.0, 1.0).astype(np.float32)


# -- synthetic faces ------------------------------------------------------------

@dataclass(frozen=True)
class FaceParams:
    """Identity of a synthetic face. Positions are fractions of the image size."""

    skin_lightness: float = 0.65   # [0.35, 0.95]
    skin_warmth: float = 0.5       # [0, 1]
    face_cx: float = 0.5           # [0.46, 0.54]
    face_cy: float = 0.51          # [0.48, 0.54]
    face_rx: float = 0.31          # [0.26, 0.36] half width
    face_ry: float = 0.39          # [0.34, 0.44] half height
    eye_dx: float = 0.15           # [0.12, 0.18] half distance between eyes
    eye_dy: float = -0.11          # [-0.15, -0.07] eye height relative to face center
    eye_size: float = 0.035        # [0, 0.05] eye radius; 0 draws no eyes
    brow_angle: float = 0.0        # [-0.5, 0.5] radians, positive raises the outer end
    mouth_dy: float = 0.16         # [0.12, 0.2] mouth height relative to face center
    mouth_w: float = 0.12          # [0.08, 0.16] half width of the mouth
    mouth_curve: float = 0.0       # [-1, 1], positive smiles

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)

    @classmethod
    def from_vector(cls, v) -> "FaceParams":
        return cls(*[float(x) for x in v])

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "FaceParams":
        for name, (lo, hi) in PARAM_RANGES.items():
            value = getattr(self, name)
            if not lo - 1e-12 <= value <= hi + 1e-12:
                raise InvalidArgumentError(f"{name}={value} outside [{lo}, {hi}]")
        return self


PARAM_RANGES = {
    "skin_lightness": (0.35, 0.95),
    "skin_warmth": (0.0, 1.0),
    "face_cx": (0.46, 0.54),
    "face_cy": (0.48, 0.54),
    "face_rx": (0.26, 0.36),
    "face_ry": (0.34, 0.44),
    "eye_dx": (0.12, 0.18),
    "eye_dy": (-0.15, -0.07),
    "eye_size": (0.0, 0.05),
    "brow_angle": (-0.5, 0.5),
    "mouth_dy": (0.12, 0.2),
    "mouth_w": (0.08, 0.16),
    "mouth_curve": (-1.0, 1.0),
}
# identities drawn for datasets always have visible eyes
SAMPLING_RANGES = dict(PARAM_RANGES, eye_size=(0.025, 0.05))

EYE_COLOR = np.array([0.07, 0.05, 0.06])
BROW_COLOR = np.array([0.25, 0.16, 0.10])
MOUTH_COLOR = np.array([0.62, 0.14, 0.20])
BROW_OFFSET = 0.075      # brow center above eye center
BROW_HALF_LEN = 0.05
BROW_HALF_THICK = 0.0125
MOUTH_HALF_THICK = 0.011
MOUTH_BEND = 0.04


def random_face_params(rng: np.random.Generator) -> FaceParams:
    return FaceParams(**{k: float(rng.uniform(lo, hi)) for k, (lo, hi) in SAMPLING_RANGES.items()})


def skin_color(params: FaceParams) -> np.ndarray:
    w = params.skin_warmth
    return params.skin_lightness * np.array([1.0, 0.74 - 0.12 * w, 0.58 - 0.16 * w])


@dataclass(frozen=True)
class PoseJitter:
    """Per-render nuisance: translation, scale, lighting gain and background."""

    tx: float
    ty: float
    scale: float
    gain: float
    background: tuple[float, float, float]

    @classmethod
    def from_seed(cls, seed: int | None) -> "PoseJitter":
        if seed is None:
            return cls(0.0, 0.0, 1.0, 1.0, (0.15, 0.45, 0.7))
        rng = np.random.default_rng([int(seed), 0x1ACE])
        tx, ty = rng.uniform(-0.03, 0.03, size=2)
        scale = rng.uniform(0.95, 1.05)
        gain = rng.uniform(0.92, 1.08)
        bg = (rng.uniform(0.05, 0.3), rng.uniform(0.3, 0.7), rng.uniform(0.5, 0.9))
        return cls(float(tx), float(ty), float(scale), float(gain), tuple(float(b) for b in bg))

    def apply(self, u, v):
        """Face coordinates -> image coordinates (both as fractions)."""
        return 0.5 + self.scale * (u - 0.5) + self.tx, 0.5 + self.scale * (v - 0.5) + self.ty


def _mouth_curve_y(params: FaceParams, s):
    # zero-mean bend over s in [-1, 1] keeps the centroid at the landmark height
    return params.face_cy + params.mouth_dy - MOUTH_BEND * params.mouth_curve * (s ** 2 - 1.0 / 3.0)


def _segment_distance(px, py, ax, ay, bx, by):
    dx, dy = bx - ax, by - ay
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
    return np.hypot(px - ax - t * dx, py - ay - t * dy)


def _ellipse_distance(px, py, cx, cy, rx, ry):
    ex, ey = (px - cx) / rx, (py - cy) / ry
    rho = np.sqrt(ex * ex + ey * ey)
    grad = np.sqrt((ex / rx) ** 2 + (ey / ry) ** 2) / np.maximum(rho, 1e-12)
    return (rho - 1.0) / np.maximum(grad, 1e-12)


def _coverage(dist_px):
    return np.clip(0.5 - dist_px, 0.0, 1.0)[..., None]


def face_coverage(params: FaceParams, size: int, pose_jitter: int | None = 0) -> np.ndarray:
    """Fractional coverage (H, W) of the face ellipse."""
    jit = PoseJitter.from_seed(pose_jitter)
    u, v = _face_grid(size, jit)
    d = _ellipse_distance(u, v, params.face_cx, params.face_cy, params.face_rx, params.face_ry)
    return _coverage(d * size * jit.scale)[..., 0]


def _face_grid(size, jit):
    c = (np.arange(size) + 0.5) / size
    x, y = np.meshgrid(c, c)
    # image -> face coordinates
    return 0.5 + (x - 0.5 - jit.tx) / jit.scale, 0.5 + (y - 0.5 - jit.ty) / jit.scale


def generate_face(params: FaceParams, size: int = 64, pose_jitter: int | None = 0) -> ImageBuffer:
    """Render ``params`` at ``size`` x ``size``; ``pose_jitter`` seeds the nuisance pose."""
    if size < 16:
        raise InvalidArgumentError(f"size must be >= 16, got {size}")
    jit = PoseJitter.from_seed(pose_jitter)
    u, v = _face_grid(size, jit)
    px_per_unit = size * jit.scale
    img = np.empty((size, size, 3))
    img[:] = np.array(jit.background)

    def paint(dist_units, color):
        cov = _coverage(dist_units * px_per_unit)
        img[:] = img * (1 - cov) + cov * color

    p = params
    paint(_ellipse_distance(u, v, p.face_cx, p.face_cy, p.face_rx, p.face_ry), skin_color(p))
    eye_y = p.face_cy + p.eye_dy
    for side in (-1, 1):
        ex = p.face_cx + side * p.eye_dx
        # outer end rises for positive angles on both sides
        ca, sa = np.cos(p.brow_angle), np.sin(p.brow_angle)
        bx, by = ex, eye_y - BROW_OFFSET
        ax_, ay_ = bx - side * BROW_HALF_LEN * ca, by + BROW_HALF_LEN * sa
        bx_, by_ = bx + side * BROW_HALF_LEN * ca, by - BROW_HALF_LEN * sa
        paint(_segment_distance(u, v, ax_, ay_, bx_, by_) - BROW_HALF_THICK, BROW_COLOR)
        if p.eye_size > 0:
            paint(np.hypot(u - ex, v - eye_y) - p.eye_size, EYE_COLOR)
    s = np.linspace(-1.0, 1.0, 17)
    mx = p.face_cx + s * p.mouth_w
    my = _mouth_curve_y(p, s)
    d = np.full(u.shape, np.inf)
    for i in range(len(s) - 1):
        d = np.minimum(d, _segment_distance(u, v, mx[i], my[i], mx[i + 1], my[i + 1]))
    paint(d - MOUTH_HALF_THICK, MOUTH_COLOR)
    return np.clip(img * jit.gain, 0.0, 1.0).astype(np.float32)


def face_landmarks(params: FaceParams, size: int = 64, pose_jitter: int | None = 0) -> np.ndarray:
    """Left eye, right eye and mouth centers as (x, y) pixel coordinates, shape (3, 2)."""
    jit = PoseJitter.from_seed(pose_jitter)
    pts = [
        (params.face_cx - params.eye_dx, params.face_cy + params.eye_dy),
        (params.face_cx + params.eye_dx, params.face_cy + params.eye_dy),
        (params.face_cx, params.face_cy + params.mouth_dy),
    ]
    return np.array([jit.apply(u, v) for u, v in pts]) * size


# -- datasets -----------------------------------------------------------------

@dataclass
class IdentityDataset:
    identities: list[tuple[str, list[ImageBuffer]]]
    identity_params: dict[str, FaceParams] | None = None

    def __post_init__(self):
        ids = [i for i, _ in self.identities]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("identity ids must be unique")
        for ident, images in self.identities:
            if not images:
                raise InvalidArgumentError(f"identity {ident!r} has no images")

    def __len__(self):
        return len(self.identities)

    def ids(self) -> list[str]:
        return [i for i, _ in self.identities]

    def images(self, identity_id: str) -> list[ImageBuffer]:
        for ident, images in self.identities:
            if ident == identity_id:
                return images
        raise KeyError(identity_id)

    def subset(self, identity_id: str) -> "IdentityDataset":
        params = None
        if self.identity_params and identity_id in self.identity_params:
            params = {identity_id: self.identity_params[identity_id]}
        return IdentityDataset([(identity_id, self.images(identity_id))], params)


@dataclass
class ReferenceSet:
    identity_id: str
    images: list[ImageBuffer]

    def __post_init__(self):
        if not self.images:
            raise InvalidArgumentError("a reference set needs at least one image")

    @property
    def n_ref(self) -> int:
        return len(self.images)

    def as_tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.stack(self.images).transpose(0, 3, 1, 2).copy()).float()


def make_synthetic_dataset(n_identities: int, images_per_identity: int, size: int = 64,
                           seed: int = 0, prefix: str = "id") -> IdentityDataset:
    """Random identities, each rendered under ``images_per_identity`` poses."""
    rng = np.random.default_rng([seed, 0xDA7A])
    identities, params = [], {}
    for k in range(n_identities):
        ident = f"{prefix}{k:04d}"
        p = random_face_params(rng)
        jitter_seeds = rng.integers(0, 2**31 - 1, size=images_per_identity)
        identities.append((ident, [generate_face(p, size, int(s)) for s in jitter_seeds]))
        params[ident] = p
    return IdentityDataset(identities, params)


def sample_training_example(dataset: IdentityDataset, crop_size: int, crop_prob: float,
                            rng: np.random.Generator) -> ImageBuffer:
    """A random crop (probability ``crop_prob``) or the resized full image."""
    if len(dataset) == 0:
        raise EmptyDatasetError("cannot sample from an empty dataset")
    _, images = dataset.identities[rng.integers(len(dataset))]
    image = images[rng.integers(len(images))]
    h, w = image.shape[:2]
    if rng.random() < crop_prob:
        if crop_size > min(h, w):
            raise InvalidArgumentError(f"crop {crop_size} larger than image {h}x{w}")
        top = int(rng.integers(h - crop_size + 1))
        left = int(rng.integers(w - crop_size + 1))
        return image[top:top + crop_size, left:left + crop_size].copy()
    return resize(image, (crop_size, crop_size))


def sample_reference(refs: ReferenceSet, rng: np.random.Generator) -> ImageBuffer:
    return refs.images[int(rng.integers(refs.n_ref))]


def split_references(dataset: IdentityDataset, identity_id: str, n_ref: int = 5,
                     seed: int = 0) -> tuple[ReferenceSet, list[ImageBuffer]]:
    """Randomly reserve ``n_ref`` images as references; the rest are returned for testing."""
    images = dataset.images(identity_id)
    if n_ref < 1 or n_ref >= len(images):
        raise InvalidArgumentError(f"need 1 <= n_ref < {len(images)}")
    order = np.random.default_rng([seed, 0x5EF]).permutation(len(images))
    refs = [images[i] for i in sorted(order[:n_ref])]
    rest = [images[i] for i in sorted(order[n_ref:])]
    return ReferenceSet(identity_id, refs), rest


# -- on-disk layout -----------------------------------------------------------

def save_dataset(dataset: IdentityDataset, root) -> None:
    """Write ``<root>/<identity_id>/NNN.png`` plus a ``params.json`` sidecar when known."""
    root = Path(root)
    for ident, images in dataset.identities:
        (root / ident).mkdir(parents=True, exist_ok=True)
        for k, image in enumerate(images):
            save_image(root / ident / f"{k:03d}.png", image)
    if dataset.identity_params:
        payload = {k: v.to_dict() for k, v in sorted(dataset.identity_params.items())}
        (root / "params.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_dataset(root) -> IdentityDataset:
    root = Path(root)
    identities = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in sub.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
        if files:
            identities.append((sub.name, [load_image(f) for f in files]))
    if not identities:
        raise EmptyDatasetError(f"no identity folders with images under {root}")
    params = None
    sidecar = root / "params.json"
    if sidecar.exists():
        params = {k: FaceParams(**v) for k, v in json.loads(sidecar.read_text()).items()}
    return IdentityDataset(identities, params)


def load_reference_dir(path, identity_id: str | None = None) -> ReferenceSet:
    path = Path(path)
    files = sorted(f for f in path.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise EmptyDatasetError(f"no reference images in {path}")
    return ReferenceSet(identity_id or path.name, [load_image(f) for f in files])
