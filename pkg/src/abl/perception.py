"""Procedural glyphs for the four symbols and the perception wrapper."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import neural
from .neural import Network, TrainConfig

SIZE = 16
IMG_MAGIC = b"ABLIMG1\n"
_SCALE = 5.5  # pixels per prototype unit

Stroke = tuple  # ((x0, y0), (x1, y1)) in prototype units, y pointing down


def _ring(rx: float, ry: float, n: int = 16, cx: float = 0.0, cy: float = 0.0) -> list:
    pts = [(cx + rx * np.sin(2 * np.pi * i / n), cy - ry * np.cos(2 * np.pi * i / n)) for i in range(n + 1)]
    return [(pts[i], pts[i + 1]) for i in range(n)]


EASY_PROTOTYPES = (
    tuple(_ring(0.5, 0.75)),                                          # 0
    (((0.0, -0.8), (0.0, 0.8)), ((-0.25, -0.55), (0.0, -0.8))),       # 1
    (((-0.7, 0.0), (0.7, 0.0)), ((0.0, -0.7), (0.0, 0.7))),           # +
    (((-0.7, -0.3), (0.7, -0.3)), ((-0.7, 0.3), (0.7, 0.3))),         # =
)

# confusable shapes sharing a common frame, differing in one short stroke
_FRAME = (((-0.6, -0.6), (0.6, -0.6)), ((-0.6, -0.6), (-0.6, 0.6)))
HARD_PROTOTYPES = (
    _FRAME + (((0.6, -0.6), (0.6, -0.2)),),
    _FRAME + (((-0.6, 0.6), (-0.2, 0.6)),),
    _FRAME + (((-0.1, 0.0), (0.3, 0.0)),),
    _FRAME + (((0.0, -0.1), (0.0, 0.3)),),
)

FAMILY_DEFAULTS = {
    "easy": dict(prototypes=EASY_PROTOTYPES, noise=0.1),
    "hard": dict(prototypes=HARD_PROTOTYPES, noise=0.3),
}


@dataclass(frozen=True)
class GlyphFamilySpec:
    family: str = "easy"
    noise: float | None = None
    translate: float = 2.0
    rotate: float = 15.0
    widths: tuple = (1, 2)
    seed: int = 0
    prototypes: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.family not in FAMILY_DEFAULTS:
            raise ValueError(f"unknown glyph family {self.family!r}")
        if self.noise is None:
            object.__setattr__(self, "noise", FAMILY_DEFAULTS[self.family]["noise"])
        if self.prototypes is None:
            object.__setattr__(self, "prototypes", FAMILY_DEFAULTS[self.family]["prototypes"])
        if len(self.prototypes) != 4:
            raise ValueError("need exactly four stroke prototypes")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    def manifest(self) -> dict:
        d = asdict(self)
        d.pop("prototypes")
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_manifest(cls, d: dict) -> "GlyphFamilySpec":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


_CENTERS = np.stack(np.meshgrid(np.arange(SIZE) + 0.5, np.arange(SIZE) + 0.5, indexing="xy"), -1).reshape(-1, 2)


def _raster(strokes, width: float, angle_deg: float = 0.0, shift=(0.0, 0.0)) -> np.ndarray:
    th = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    seg = np.asarray(strokes, dtype=float)  # (S, 2, 2)
    pts = seg @ rot.T * _SCALE + np.array([SIZE / 2 + shift[0], SIZE / 2 + shift[1]])
    a, b = pts[:, 0], pts[:, 1]
    ab = b - a
    ap = _CENTERS[:, None, :] - a[None]
    t = np.clip(np.sum(ap * ab, -1) / np.maximum(np.sum(ab * ab, -1), 1e-12), 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    d = np.sqrt(np.sum((_CENTERS[:, None, :] - closest) ** 2, -1)).min(axis=1)
    img = np.clip(width / 2.0 + 0.5 - d, 0.0, 1.0)
    return img.reshape(SIZE, SIZE)


def prototype_raster(cls: int, spec: GlyphFamilySpec, width: int = 1) -> np.ndarray:
    return _raster(spec.prototypes[int(cls)], width)


def render_glyph(cls: int, spec: GlyphFamilySpec, rng: np.random.Generator) -> np.ndarray:
    """Rasterise one jittered, noisy 16x16 glyph of the given class."""
    width = spec.widths[rng.integers(len(spec.widths))] if len(spec.widths) > 1 else spec.widths[0]
    angle = rng.uniform(-spec.rotate, spec.rotate) if spec.rotate else 0.0
    shift = rng.uniform(-spec.translate, spec.translate, size=2) if spec.translate else (0.0, 0.0)
    img = _raster(spec.prototypes[int(cls)], width, angle, shift)
    if spec.noise:
        img = np.clip(img + rng.normal(0.0, spec.noise, size=img.shape), 0.0, 1.0)
    return img


def render_many(classes: Sequence[int], spec: GlyphFamilySpec, seed: int) -> np.ndarray:
    """Glyph per class entry, each from its own seed derived from (spec.seed, seed, index)."""
    out = np.empty((len(classes), SIZE, SIZE))
    for i, c in enumerate(classes):
        rng = np.random.default_rng([spec.seed, seed, i])
        out[i] = render_glyph(c, spec, rng)
    return out


def labeled_glyphs(spec: GlyphFamilySpec, per_class: int, seed: int):
    """Balanced labeled glyph set (evaluation / calibration only)."""
    labels = np.repeat(np.arange(4), per_class)
    return render_many(labels, spec, seed), labels


# --------------------------------------------------------------------------

@dataclass
class PerceptionModel:
    """Image -> symbol classifier; output unit i means alphabet symbol i."""

    net: Network

    def __post_init__(self):
        if self.net.output_dim != 4:
            raise ValueError("perception network must have 4 outputs")

    @classmethod
    def fresh(cls, seed: int = 0) -> "PerceptionModel":
        return cls(neural.init_network(neural.perception_spec(seed)))


def center_outputs(model: PerceptionModel, images, spread: float = 1.0) -> PerceptionModel:
    """Data-dependent rescaling of every conv/dense layer, first to last.

    Each unit's pre-activation over ``images`` gets zero mean and unit standard
    deviation (``spread`` for the output logits).  Uses images only.  Without
    it a fresh network maps nearly every glyph to the same hidden code, so the
    first few retraining steps push all glyphs into one class.
    """
    net = model.net.copy()
    x = _as_batch(images)
    for i, (layer, ps) in enumerate(zip(net.spec.layers, net.params)):
        if not ps:
            continue
        out, _, _ = neural._run(neural.Network(net.spec, net.params[:i + 1]), x, keep=False)
        axes = (0, 2, 3) if out.ndim == 4 else (0,)
        mean, std = out.mean(axis=axes), out.std(axis=axes)
        last = i == max(j for j, q in enumerate(net.params) if q)
        gain = (spread if last else 1.0) / np.where(std > 0, std, 1.0)
        W, b = ps
        if W.ndim == 4:
            W *= gain[:, None, None, None]
        else:
            W *= gain
        b[:] = (b - mean) * gain
    return PerceptionModel(net)


def _as_batch(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr[:, None, :, :]


def class_probs(model: PerceptionModel, images) -> np.ndarray:
    return neural.forward(model.net, _as_batch(images))


def perceive(model: PerceptionModel, images):
    """Argmax symbol sequence (ties -> lowest index) and the probability matrix."""
    if len(images) == 0:
        raise ValueError("need at least one image")
    probs = class_probs(model, images)
    return tuple(int(i) for i in probs.argmax(axis=1)), probs


def retrain(model: PerceptionModel, pairs, cfg: TrainConfig) -> PerceptionModel:
    """Warm-start supervised training on (image, symbol) pairs."""
    if len(pairs) == 0:
        raise ValueError("retrain needs at least one (image, symbol) pair")
    images = np.stack([p[0] for p in pairs])
    labels = np.array([int(p[1]) for p in pairs])
    net, _ = neural.train_supervised(model.net, _as_batch(images), labels, cfg)
    return PerceptionModel(net)


def perception_accuracy(model: PerceptionModel, images, labels) -> float:
    pred = class_probs(model, images).argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


# --------------------------------------------------------------------------
# image files

class FormatError(ValueError):
    pass


def images_to_bytes(images) -> bytes:
    arr = np.asarray(images, dtype="<f8")
    if arr.ndim == 2:
        arr = arr[None]
    n, h, w = arr.shape
    return IMG_MAGIC + struct.pack("<III", n, w, h) + np.ascontiguousarray(arr).tobytes()


def images_from_bytes(data: bytes, offset: int = 0):
    """Parse an ABLIMG1 block at ``offset``; returns (images, end_offset)."""
    if data[offset:offset + len(IMG_MAGIC)] != IMG_MAGIC:
        raise FormatError("bad magic: not an ABLIMG1 block")
    pos = offset + len(IMG_MAGIC)
    if len(data) < pos + 12:
        raise FormatError("truncated image header")
    n, w, h = struct.unpack_from("<III", data, pos)
    pos += 12
    size = n * w * h * 8
    if len(data) < pos + size:
        raise FormatError("truncated image data")
    arr = np.frombuffer(data, dtype="<f8", count=n * w * h, offset=pos).astype(np.float64)
    return arr.reshape(n, h, w), pos + size


def save_images(path, images) -> None:
    Path(path).write_bytes(images_to_bytes(images))


def load_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, end = images_from_bytes(data)
    if end != len(data):
        raise FormatError("trailing bytes after image data")
    return arr


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def save_corpus(directory, spec: GlyphFamilySpec, images, labels) -> None:
    """Glyph corpus: manifest.json, images.bin and a separate labels sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    img = images_to_bytes(images)
    lab = "".join(f"{int(l)}\n" for l in labels).encode()
    (d / "images.bin").write_bytes(img)
    (d / "labels.sidecar").write_bytes(lab)
    manifest = {"format": "ablglyphs", "version": 1, "family": spec.manifest(),
                "count": int(len(labels)),
                "sha256": {"images.bin": _sha256(img), "labels.sidecar": _sha256(lab)}}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_corpus(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    data = (d / "images.bin").read_bytes()
    if _sha256(data) != manifest["sha256"]["images.bin"]:
        raise FormatError("images.bin checksum mismatch")
    return GlyphFamilySpec.from_manifest(manifest["family"]), load_images(d / "images.bin")


def load_corpus_labels(directory) -> np.ndarray:
    """Evaluation-only access to the true symbol classes."""
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    data = (d / "labels.sidecar").read_bytes()
    if _sha256(data) != manifest["sha256"]["labels.sidecar"]:
        raise FormatError("labels.sidecar checksum mismatch")
    return np.array([int(x) for x in data.split()], dtype=int)
