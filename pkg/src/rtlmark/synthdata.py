"""Procedural face-like images with exactly known landmarks.

Each sample is drawn from ``SynthFaceParams``; the 14 landmarks are
analytic functions of those parameters, so ground truth carries no
annotation noise. Identity classes share a class mean with small jitter.
A ``textures`` variant renders non-face pattern classes for a
domain-dissimilar source task.

On-disk layout::

    manifest.json
    images/NNNN.ppm        binary P6
    landmarks/NNNN.csv     k,x,y   (faces only)
    labels.csv             index,class
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import heatmap

K = 14
LANDMARK_NAMES = (
    "left_eye_outer", "left_eye_inner", "right_eye_inner", "right_eye_outer",
    "left_eye_center", "right_eye_center", "nose_base",
    "crista_philtri_left", "crista_philtri_right", "labiale_superius",
    "cheilion_left", "cheilion_right", "lower_lip_left", "lower_lip_right",
)
# left/right refer to the image; a horizontal flip swaps each pair
FLIP_PERM = (3, 2, 1, 0, 5, 4, 6, 8, 7, 9, 11, 10, 13, 12)
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
TEXTURE_CLASSES = ("h_stripes", "v_stripes", "diag_stripes", "anti_diag_stripes",
                   "checkers", "rings", "blobs", "dots")
SUPERSAMPLE = 4
MAX_REJITTER = 100


class DataError(RuntimeError):
    pass


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for ``(seed, *keys)``; order of generation is irrelevant."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


# ---------------------------------------------------------------- face geometry

@dataclass(frozen=True)
class SynthFaceParams:
    """Face layout in pixels; offsets are in the face frame before rotation."""

    cx: float
    cy: float
    head_ax: float
    head_ay: float
    rotation: float
    eye_dx: float
    eye_dy: float
    eye_w: float
    eye_h: float
    nose_dy: float
    nose_w: float
    philtrum_dx: float
    lip_dy: float
    bow: float
    upper_lip_h: float
    mouth_w: float
    lower_lip_h: float
    skin: tuple
    lip_color: tuple
    iris_color: tuple
    bg_top: tuple
    bg_bottom: tuple
    identity_class: int


_GEOM_RANGES = {
    # name: (low, high) at a 64-pixel image
    "head_ax": (19.0, 23.0), "head_ay": (24.0, 27.0),
    "eye_dx": (8.0, 11.0), "eye_dy": (5.0, 8.0), "eye_w": (3.5, 5.0), "eye_h": (1.8, 2.8),
    "nose_dy": (5.0, 8.5), "nose_w": (2.8, 4.2),
    "philtrum_dx": (1.6, 2.6), "lip_dy": (3.0, 4.5), "bow": (0.4, 1.0), "upper_lip_h": (1.6, 2.4),
    "mouth_w": (6.5, 9.5), "lower_lip_h": (2.0, 3.2),
}
_JITTER = 0.04          # relative geometry jitter within a class
_MAX_ROTATION = math.radians(10.0)
_FACE_SCALE = (0.8, 1.15)   # per-sample zoom of the whole face
_SHIFT = (8.0, 6.0)         # max head-center offset (x, y) at 64 px


def class_means(seed: int, C: int) -> list:
    """Per-class mean geometry, as fractions of each parameter range.

    Identity lives in facial proportions only; colors are drawn per sample.
    """
    out = []
    for c in range(C):
        rng = sample_rng(seed, 1_000_003, c)
        out.append({k: float(rng.uniform(0.1, 0.9)) for k in _GEOM_RANGES})
    return out


def _palette(rng: np.random.Generator) -> dict:
    return {
        "skin": tuple(rng.uniform([120, 70, 40], [250, 200, 170]).tolist()),
        "lip_color": tuple(rng.uniform([130, 20, 30], [220, 90, 110]).tolist()),
        "iris_color": tuple(rng.uniform([10, 10, 10], [110, 90, 70]).tolist()),
        "bg_top": tuple(rng.uniform(0, 255, 3).tolist()),
        "bg_bottom": tuple(rng.uniform(0, 255, 3).tolist()),
    }


def draw_params(seed: int, index: int, C: int, size: int, means: Optional[list] = None) -> SynthFaceParams:
    """Sample parameters for ``index``, re-jittering until every landmark is inside the image."""
    means = means or class_means(seed, C)
    cls = index % C
    geom = means[cls]
    rng = sample_rng(seed, index)
    s = size / 64.0
    for _ in range(MAX_REJITTER):
        g = {}
        face_scale = rng.uniform(*_FACE_SCALE) * s
        for k, (lo, hi) in _GEOM_RANGES.items():
            base = lo + geom[k] * (hi - lo)
            g[k] = base * (1 + rng.uniform(-_JITTER, _JITTER)) * face_scale
        col = _palette(rng)
        p = SynthFaceParams(
            cx=float(size / 2 + rng.uniform(-_SHIFT[0], _SHIFT[0]) * s),
            cy=float(size / 2 - 2 * s + rng.uniform(-_SHIFT[1], _SHIFT[1]) * s),
            rotation=float(rng.uniform(-_MAX_ROTATION, _MAX_ROTATION)),
            identity_class=cls, **g, **col,
        )
        pts = landmarks_from_params(p)
        if np.all(pts > 0.5) and np.all(pts < size - 1.5):
            return p
    raise DataError(f"sample {index}: landmarks escaped the image after {MAX_REJITTER} draws")


def _face_frame_landmarks(p: SynthFaceParams) -> np.ndarray:
    lip_top = p.nose_dy + p.lip_dy
    mouth = lip_top + p.upper_lip_h
    lower = mouth + p.lower_lip_h * math.sqrt(0.75)
    return np.array([
        (-p.eye_dx - p.eye_w, -p.eye_dy),
        (-p.eye_dx + p.eye_w, -p.eye_dy),
        (p.eye_dx - p.eye_w, -p.eye_dy),
        (p.eye_dx + p.eye_w, -p.eye_dy),
        (-p.eye_dx, -p.eye_dy),
        (p.eye_dx, -p.eye_dy),
        (0.0, p.nose_dy),
        (-p.philtrum_dx, lip_top),
        (p.philtrum_dx, lip_top),
        (0.0, lip_top + p.bow),
        (-p.mouth_w, mouth),
        (p.mouth_w, mouth),
        (-p.mouth_w / 2, lower),
        (p.mouth_w / 2, lower),
    ])


def landmarks_from_params(p: SynthFaceParams) -> np.ndarray:
    """The 14 ``(x, y)`` image-pixel landmarks implied by ``p``."""
    uv = _face_frame_landmarks(p)
    c, s = math.cos(p.rotation), math.sin(p.rotation)
    x = p.cx + c * uv[:, 0] - s * uv[:, 1]
    y = p.cy + s * uv[:, 0] + c * uv[:, 1]
    return np.stack([x, y], axis=1)


# ---------------------------------------------------------------- rasterization

def _sample_grid(size: int, p: SynthFaceParams):
    """Supersample points mapped into the (unrotated) face frame."""
    off = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE - 0.5
    coords = (np.arange(size)[:, None] + off[None, :]).ravel()
    y, x = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = x - p.cx, y - p.cy
    c, s = math.cos(p.rotation), math.sin(p.rotation)
    return c * dx + s * dy, -s * dx + c * dy


def _coverage(inside: np.ndarray, size: int) -> np.ndarray:
    return inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))


def _ellipse(u, v, cu, cv, a, b):
    return ((u - cu) / a) ** 2 + ((v - cv) / b) ** 2 <= 1.0


def _polygon(u, v, verts):
    """Even-odd point-in-polygon test."""
    inside = np.zeros(u.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        (x1, y1), (x2, y2) = verts[i], verts[(i + 1) % n]
        if y1 == y2:
            continue
        cond = (v >= min(y1, y2)) & (v < max(y1, y2))
        xint = x1 + (v - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cond & (u < xint)
    return inside


def _segment(u, v, a, b, half_width):
    (x1, y1), (x2, y2) = a, b
    dx, dy = x2 - x1, y2 - y1
    t = np.clip(((u - x1) * dx + (v - y1) * dy) / (dx * dx + dy * dy), 0, 1)
    return (u - x1 - t * dx) ** 2 + (v - y1 - t * dy) ** 2 <= half_width ** 2


def eye_masks(p: SynthFaceParams, size: int) -> tuple:
    """Anti-aliased coverage of the two eye ellipses (left, right)."""
    u, v = _sample_grid(size, p)
    return tuple(_coverage(_ellipse(u, v, sx * p.eye_dx, -p.eye_dy, p.eye_w, p.eye_h), size)
                 for sx in (-1, 1))


def render_face(p: SynthFaceParams, size: int, rng: np.random.Generator) -> np.ndarray:
    u, v = _sample_grid(size, p)
    rows = np.linspace(0, 1, size)[:, None, None]
    img = (1 - rows) * np.array(p.bg_top) + rows * np.array(p.bg_bottom)
    img = np.broadcast_to(img, (size, size, 3)).copy()

    def paint(mask, color):
        cov = _coverage(mask, size)[..., None]
        img[...] = cov * np.asarray(color) + (1 - cov) * img

    skin = np.asarray(p.skin)
    shade = skin * 0.78
    paint(_ellipse(u, v, 0, 0, p.head_ax, p.head_ay), skin)
    lip_top = p.nose_dy + p.lip_dy
    mouth = lip_top + p.upper_lip_h
    # nose wedge and nostril shadow
    paint(_polygon(u, v, [(0, -p.eye_dy + 1.0), (p.nose_w, p.nose_dy), (-p.nose_w, p.nose_dy)]), shade)
    paint(_ellipse(u, v, 0, p.nose_dy - 0.4, p.nose_w * 0.55, 0.7), skin * 0.45)
    # philtral ridges
    for sx in (-1, 1):
        paint(_segment(u, v, (sx * p.philtrum_dx * 0.6, p.nose_dy + 0.6), (sx * p.philtrum_dx, lip_top), 0.45),
              skin * 0.65)
    # lips: upper lip bounded by the cupid's bow, lower lip by an elliptical arc
    upper = [(-p.mouth_w, mouth), (-p.philtrum_dx, lip_top), (0.0, lip_top + p.bow),
             (p.philtrum_dx, lip_top), (p.mouth_w, mouth)]
    paint(_polygon(u, v, upper), p.lip_color)
    lower = _ellipse(u, v, 0, mouth, p.mouth_w, p.lower_lip_h) & (v >= mouth)
    paint(lower, np.asarray(p.lip_color) * 0.85)
    paint(_segment(u, v, (-p.mouth_w, mouth), (p.mouth_w, mouth), 0.3), np.asarray(p.lip_color) * 0.4)
    # eyes with iris
    for sx in (-1, 1):
        ex = sx * p.eye_dx
        paint(_ellipse(u, v, ex, -p.eye_dy, p.eye_w, p.eye_h), (245, 245, 240))
        paint(_ellipse(u, v, ex, -p.eye_dy, p.eye_h * 0.85, p.eye_h * 0.85), p.iris_color)
    img += rng.normal(0, 3.0, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- textures

def render_texture(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    y, x = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    period = rng.uniform(5, 11) * size / 64
    phase = rng.uniform(0, 2 * np.pi)
    w = 2 * np.pi / period
    name = TEXTURE_CLASSES[cls]
    if name == "h_stripes":
        f = np.sin(w * y + phase)
    elif name == "v_stripes":
        f = np.sin(w * x + phase)
    elif name == "diag_stripes":
        f = np.sin(w * (x + y) / np.sqrt(2) + phase)
    elif name == "anti_diag_stripes":
        f = np.sin(w * (x - y) / np.sqrt(2) + phase)
    elif name == "checkers":
        f = np.sin(w * x + phase) * np.sin(w * y + phase)
    elif name == "rings":
        cx, cy = rng.uniform(0.3, 0.7, 2) * size
        f = np.sin(w * np.hypot(x - cx, y - cy) + phase)
    elif name == "blobs":
        f = -np.ones_like(x)
        for _ in range(int(rng.integers(4, 8))):
            bx, by = rng.uniform(0, size, 2)
            r = rng.uniform(3, 7) * size / 64
            f = np.maximum(f, 2 * np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2 * r * r)) - 1)
    else:  # dots
        f = np.where((np.sin(w * x + phase) > 0.7) & (np.sin(w * y + phase) > 0.7), 1.0, -1.0)
    a, b = rng.uniform(0, 255, 3), rng.uniform(0, 255, 3)
    if np.abs(a - b).sum() < 150:
        b = 255 - a
    t = ((f + 1) / 2)[..., None]
    img = t * a + (1 - t) * b + rng.normal(0, 3.0, (size, size, 3))
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- files

def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts, pos = [], 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        parts.append(raw[pos:end])
        pos = end
    if parts[0] != b"P6" or int(parts[3]) != 255:
        raise DataError(f"{path}: not an 8-bit binary PPM")
    w, h = int(parts[1]), int(parts[2])
    data = raw[pos + 1:pos + 1 + w * h * 3]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def split_indices(n: int, seed: int) -> dict:
    perm = sample_rng(seed, 2_000_003).permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return {
        "train": sorted(perm[:n_train].tolist()),
        "val": sorted(perm[n_train:n_train + n_val].tolist()),
        "test": sorted(perm[n_train + n_val:].tolist()),
    }


def channel_stats(images: np.ndarray) -> tuple:
    x = images.astype(np.float64) / 255.0
    return x.mean(axis=(0, 1, 2)).tolist(), x.std(axis=(0, 1, 2)).tolist()


@dataclass
class Dataset:
    images: np.ndarray          # (N, S, S, 3) uint8
    labels: np.ndarray          # (N,)
    landmarks: Optional[np.ndarray]   # (N, K, 2) or None for textures
    manifest: dict

    @property
    def size(self) -> int:
        return int(self.manifest["image_size"])

    @property
    def flip_perm(self) -> tuple:
        return tuple(self.manifest["flip_perm"])

    def split(self, name: str) -> list:
        return list(self.manifest["splits"][name])

    def normalized(self, idx=None) -> np.ndarray:
        """Images scaled to [0, 1] then standardized by the train-split channel stats."""
        imgs = self.images if idx is None else self.images[np.asarray(idx, dtype=np.int64)]
        mean = np.asarray(self.manifest["channel_mean"], dtype=np.float32)
        std = np.asarray(self.manifest["channel_std"], dtype=np.float32)
        return (imgs.astype(np.float32) / np.float32(255.0) - mean) / std


def generate_arrays(n: int, image_size: int, C: int, seed: int, variant: str = "faces") -> Dataset:
    if n < C or C < 2:
        raise DataError(f"need n >= C >= 2 (n={n}, C={C})")
    if image_size % 4:
        raise DataError("image_size must be divisible by 4")
    if variant not in ("faces", "textures"):
        raise DataError(f"unknown variant {variant!r}")
    if variant == "textures" and C > len(TEXTURE_CLASSES):
        raise DataError(f"textures support at most {len(TEXTURE_CLASSES)} classes")
    images = np.empty((n, image_size, image_size, 3), dtype=np.uint8)
    labels = np.arange(n) % C
    landmarks = np.empty((n, K, 2)) if variant == "faces" else None
    means = class_means(seed, C) if variant == "faces" else None
    for i in range(n):
        if variant == "faces":
            p = draw_params(seed, i, C, image_size, means)
            images[i] = render_face(p, image_size, sample_rng(seed, i, 1))
            landmarks[i] = landmarks_from_params(p)
        else:
            images[i] = render_texture(int(labels[i]), image_size, sample_rng(seed, i, 1))
    splits = split_indices(n, seed)
    mean, std = channel_stats(images[splits["train"]])
    manifest = {
        "variant": variant,
        "n": n,
        "image_size": image_size,
        "K": K if variant == "faces" else 0,
        "C": C,
        "seed": int(seed),
        "counts": {k: len(v) for k, v in splits.items()},
        "splits": splits,
        "channel_mean": mean,
        "channel_std": std,
        "flip_perm": list(FLIP_PERM) if variant == "faces" else [],
        "landmark_names": list(LANDMARK_NAMES) if variant == "faces" else [],
        "class_names": list(TEXTURE_CLASSES[:C]) if variant == "textures" else [f"identity{c}" for c in range(C)],
    }
    return Dataset(images, labels, landmarks, manifest)


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    if ds.landmarks is not None:
        (out / "landmarks").mkdir(exist_ok=True)
    for i in range(len(ds.images)):
        write_ppm(out / "images" / f"{i:04d}.ppm", ds.images[i])
        if ds.landmarks is not None:
            heatmap.write_landmarks_csv(out / "landmarks" / f"{i:04d}.csv", ds.landmarks[i])
    lines = ["index,class"] + [f"{i},{int(c)}" for i, c in enumerate(ds.labels)]
    (out / "labels.csv").write_text("\n".join(lines) + "\n")
    (out / "manifest.json").write_text(json.dumps(ds.manifest, indent=1, sort_keys=True) + "\n")
    return out


def generate(n: int, image_size: int, C: int, seed: int, out_dir=None, variant: str = "faces") -> Dataset:
    """Render ``n`` samples; when ``out_dir`` is given also write the dataset directory."""
    ds = generate_arrays(n, image_size, C, seed, variant)
    if out_dir is not None:
        write_dataset(ds, out_dir)
    return ds


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "manifest.json").exists():
        raise DataError(f"{root}: no manifest.json")
    manifest = json.loads((root / "manifest.json").read_text())
    n = manifest["n"]
    images = np.stack([read_ppm(root / "images" / f"{i:04d}.ppm") for i in range(n)])
    labels = np.zeros(n, dtype=np.int64)
    for line in (root / "labels.csv").read_text().splitlines()[1:]:
        i, c = line.split(",")
        labels[int(i)] = int(c)
    landmarks = None
    if manifest["K"]:
        landmarks = np.stack([heatmap.read_landmarks_csv(root / "landmarks" / f"{i:04d}.csv") for i in range(n)])
    return Dataset(images, labels, landmarks, manifest)


# ---------------------------------------------------------------- teachers

class DegenerateTeacherError(RuntimeError):
    pass


def pretrain_teacher(dataset: Dataset, model_config, epochs: int = 8, seed: int = 0,
                     batch_size: int = 16, lr0: float = 1e-3, indices=None, log=None):
    """Train encoder + classifier on identity labels, then freeze everything.

    Returns ``(teacher, train_accuracy)``; accuracy is measured in inference
    mode, the way the teacher is used afterwards.
    """
    from . import diffcore as dc
    from .model import build, forward
    from .optim import AdamState, adam_step, lr_at
    import copy

    cfg = copy.deepcopy(model_config)
    cfg.seed = seed
    cfg.C = int(dataset.manifest["C"])
    cfg.classifier = True
    model = build(cfg)
    idx = np.arange(len(dataset.images)) if indices is None else np.asarray(indices)
    x_all = dataset.normalized(idx)
    y_all = dataset.labels[idx]
    steps_per_epoch = int(math.ceil(len(idx) / batch_size))
    total = epochs * steps_per_epoch
    state = AdamState()
    # only the encoder and classifier take part in the source task
    params = {n: p for n, p in model.params.items() if not n.startswith("decoder.")}
    step = 0
    for epoch in range(epochs):
        order = sample_rng(seed, 3_000_017, epoch).permutation(len(idx))
        for b in range(steps_per_epoch):
            sel = order[b * batch_size:(b + 1) * batch_size]
            xb = x_all[sel]
            flip = sample_rng(seed, 3_000_019, epoch, b).random(len(sel)) < 0.5
            xb = np.where(flip[:, None, None, None], xb[:, :, ::-1], xb)
            for p in params.values():
                p.grad = None
            with dc.Tape() as tape:
                art = forward(model, xb, need={"logits"}, train=True)
                loss = dc.cross_entropy(art.logits, y_all[sel])
            dc.backward(loss, tape)
            adam_step(params, state, lr_at(step, total, lr0))
            step += 1
        if log:
            log(f"pretrain epoch {epoch + 1}/{epochs} loss {loss.item():.4f}")
    acc = classification_accuracy(model, x_all, y_all)
    if acc < 2.0 / cfg.C:
        raise DegenerateTeacherError(f"teacher train accuracy {acc:.3f} below 2/C")
    model.freeze_all()
    return model, acc


def classification_accuracy(model, images: np.ndarray, labels: np.ndarray, batch: int = 64) -> float:
    from .model import forward
    correct = 0
    for i in range(0, len(images), batch):
        logits = forward(model, images[i:i + batch], need={"logits"}, train=False).logits.data
        correct += int((logits.argmax(axis=1) == labels[i:i + batch]).sum())
    return correct / len(images)


def make_alternate_teacher(dataset_variant: str, model_config, n: int = 500, image_size: int = 64,
                           C: int = 8, epochs: int = 8, seed: int = 0, data_seed: int = 1, log=None):
    """Teacher pretrained on a freshly generated ``faces`` or ``textures`` source dataset."""
    ds = generate(n, image_size, C, data_seed, variant=dataset_variant)
    return pretrain_teacher(ds, model_config, epochs=epochs, seed=seed, log=log)
