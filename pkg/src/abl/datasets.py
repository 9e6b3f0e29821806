"""Labeled equation-image datasets (binary addition or XOR) and their files."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import equation as eqn
from .equation import ADDITION_TABLE, XOR_TABLE, Sym
from .perception import GlyphFamilySpec, images_from_bytes, images_to_bytes, render_glyph

FORMAT_VERSION = 1
IDX_MAGIC = b"ABLIDX1\n"
MAX_ATTEMPTS = 10**6
SEMANTICS = {"binary_add": ADDITION_TABLE, "xor": XOR_TABLE}


class FormatError(ValueError):
    pass


class VersionError(ValueError):
    pass


class UnsatisfiableLength(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    semantics: str = "binary_add"
    glyphs: str = "easy"
    lengths: tuple = (5, 6, 7, 8)
    per_length: int = 300
    positive_fraction: float = 0.5
    seed: int = 0
    glyph_noise: Optional[float] = None

    def __post_init__(self):
        if self.semantics not in SEMANTICS:
            raise ValueError(f"semantics must be one of {sorted(SEMANTICS)}")
        if self.per_length < 1:
            raise ValueError("per_length must be >= 1")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError("positive_fraction must lie in (0, 1)")
        for L in self.lengths:
            if L < 5:
                raise UnsatisfiableLength(f"length {L} < 5 cannot hold d+d=d")
        object.__setattr__(self, "lengths", tuple(int(L) for L in self.lengths))

    def family(self) -> GlyphFamilySpec:
        return GlyphFamilySpec(self.glyphs, noise=self.glyph_noise)

    def to_json(self) -> dict:
        d = asdict(self)
        d["lengths"] = list(self.lengths)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["lengths"] = tuple(d["lengths"])
        return cls(**d)


@dataclass
class EquationInstance:
    images: np.ndarray
    label: bool

    @property
    def length(self) -> int:
        return len(self.images)


@dataclass
class EquationView:
    """Label-stripped view: equation images and equation labels only."""

    images: list
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(x) for x in self.images])

    def __getitem__(self, i) -> EquationInstance:
        return EquationInstance(self.images[i], bool(self.labels[i]))

    def subset(self, idx) -> "EquationView":
        return EquationView([self.images[i] for i in idx], self.labels[np.asarray(idx, dtype=int)])


@dataclass
class Dataset:
    spec: DatasetSpec
    images: list          # per instance (L, 16, 16)
    labels: np.ndarray    # bool per instance
    _truth: Optional[list] = field(default=None, repr=False)
    effective_seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> EquationInstance:
        return EquationInstance(self.images[i], bool(self.labels[i]))

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(x) for x in self.images])

    def training_view(self) -> EquationView:
        return EquationView(self.images, self.labels.copy())

    def truth(self) -> list:
        """Evaluation-only ground-truth symbol sequences."""
        if self._truth is None:
            raise LookupError("ground truth not loaded; use load_truth()")
        return self._truth

    def select(self, lengths) -> "Dataset":
        keep = [i for i, x in enumerate(self.images) if len(x) in set(lengths)]
        truth = None if self._truth is None else [self._truth[i] for i in keep]
        return Dataset(self.spec, [self.images[i] for i in keep], self.labels[keep], truth, self.effective_seed)


def _digits(rng, n: int) -> tuple:
    d = rng.integers(0, 2, size=n)
    if n > 1:
        d[0] = 1
    return tuple(int(v) for v in d)


def _true_z(semantics: str, x: tuple, y: tuple) -> tuple:
    return eqn.bitwise_calc(SEMANTICS[semantics], x, y)


def _wrong_z(rng, z_true: tuple):
    m = len(z_true)
    if m == 1:
        return (1 - z_true[0],)
    while True:
        z = _digits(rng, m)
        if z != z_true:
            return z


def _sample_equation(rng, semantics: str, L: int, positive: bool) -> tuple:
    budget = L - 2
    for _ in range(MAX_ATTEMPTS):
        nx = int(rng.integers(1, budget - 1))
        ny = int(rng.integers(1, budget - nx))
        x, y = _digits(rng, nx), _digits(rng, ny)
        z_true = _true_z(semantics, x, y)
        if nx + ny + len(z_true) != budget:
            continue
        z = z_true if positive else _wrong_z(rng, z_true)
        return x + (Sym.PLUS,) + y + (Sym.EQ,) + z
    raise UnsatisfiableLength(f"no equation of length {L} after {MAX_ATTEMPTS} attempts")


def _column_pairs(seq: tuple) -> set:
    x, y, _ = eqn._parse(tuple(seq))
    n = max(len(x), len(y))
    xr, yr = (0,) * (n - len(x)) + x, (0,) * (n - len(y)) + y
    return set(zip(xr, yr))


def _generate_symbols(spec: DatasetSpec, seed: int):
    seqs, labels = [], []
    for L in spec.lengths:
        rng = np.random.default_rng([seed, L])
        n_pos = int(round(spec.per_length * spec.positive_fraction))
        flags = np.array([True] * n_pos + [False] * (spec.per_length - n_pos))
        rng.shuffle(flags)
        for positive in flags:
            seq = _sample_equation(rng, spec.semantics, L, bool(positive))
            verdict = eqn.entails(SEMANTICS[spec.semantics], seq)
            assert verdict is bool(positive), (seq, positive, verdict)
            seqs.append(tuple(int(s) for s in seq))
            labels.append(bool(positive))
    return seqs, np.array(labels, dtype=bool)


def _pairs_covered(seqs: list, min_frac: float = 0.01) -> bool:
    counts = {p: 0 for p in eqn.PAIRS}
    for s in seqs:
        for p in _column_pairs(s):
            counts[p] += 1
    return all(c >= min_frac * len(seqs) for c in counts.values())


def generate(spec: DatasetSpec, check_pairs: bool = True) -> Dataset:
    """Sample equations per length with exact label quotas and render their glyphs.

    With ``check_pairs`` (ignored when every length is 5, where 1+1 cannot
    occur) the seed is bumped until every digit pair occurs as a column in at
    least 1% of instances.
    """
    check_pairs = check_pairs and max(spec.lengths) > 5
    seed = spec.seed
    for bump in range(100):
        seqs, labels = _generate_symbols(spec, seed + bump)
        if not check_pairs or _pairs_covered(seqs):
            seed = seed + bump
            break
    else:
        raise UnsatisfiableLength("could not cover all digit pairs")
    family = spec.family()
    images = []
    for i, s in enumerate(seqs):
        rng = np.random.default_rng([family.seed, seed, len(s), i])
        images.append(np.stack([render_glyph(c, family, rng) for c in s]))
    return Dataset(spec, images, labels, seqs, seed)


# --------------------------------------------------------------------------
# persistence

def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _encode(ds: Dataset):
    lengths = [len(x) for x in ds.images]
    flat = np.concatenate(ds.images) if ds.images else np.zeros((0, 16, 16))
    images = images_to_bytes(flat) + IDX_MAGIC + struct.pack("<I", len(lengths)) + \
        struct.pack(f"<{len(lengths)}I", *lengths)
    labels = bytes(int(b) for b in ds.labels)
    truth = "".join(eqn.seq_to_str(s) + "\n" for s in ds.truth()).encode()
    return images, labels, truth


def save(ds: Dataset, path) -> None:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    images, labels, truth = _encode(ds)
    (d / "images.bin").write_bytes(images)
    (d / "labels.bin").write_bytes(labels)
    (d / "truth.sidecar").write_bytes(truth)
    manifest = {
        "format": "abldataset", "version": FORMAT_VERSION,
        "spec": ds.spec.to_json(), "effective_seed": ds.effective_seed,
        "count": len(ds),
        "sha256": {"images.bin": _sha(images), "labels.bin": _sha(labels), "truth.sidecar": _sha(truth)},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest(d: Path) -> dict:
    try:
        m = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable manifest: {e}") from None
    if m.get("format") != "abldataset":
        raise FormatError("not a dataset manifest")
    if m.get("version") != FORMAT_VERSION:
        raise VersionError(f"dataset version {m.get('version')} != {FORMAT_VERSION}")
    return m


def _read_checked(d: Path, name: str, manifest: dict) -> bytes:
    data = (d / name).read_bytes()
    if _sha(data) != manifest["sha256"][name]:
        raise FormatError(f"{name}: checksum mismatch")
    return data


def load(path) -> Dataset:
    """Images, labels and spec; ground truth stays on disk until load_truth."""
    d = Path(path)
    m = _manifest(d)
    data = _read_checked(d, "images.bin", m)
    try:
        flat, pos = images_from_bytes(data)
    except ValueError as e:
        raise FormatError(str(e)) from None
    if data[pos:pos + len(IDX_MAGIC)] != IDX_MAGIC:
        raise FormatError("missing index table")
    pos += len(IDX_MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) != pos + 4 * n:
        raise FormatError("truncated index table")
    lengths = struct.unpack_from(f"<{n}I", data, pos)
    if sum(lengths) != len(flat):
        raise FormatError("index table does not match image count")
    labels_raw = _read_checked(d, "labels.bin", m)
    if len(labels_raw) != n:
        raise FormatError("label count mismatch")
    images, start = [], 0
    for L in lengths:
        images.append(flat[start:start + L])
        start += L
    labels = np.frombuffer(labels_raw, dtype=np.uint8).astype(bool)
    return Dataset(DatasetSpec.from_json(m["spec"]), images, labels, None, m["effective_seed"])


def load_truth(path) -> list:
    """Evaluation-only: the hidden symbol sequences, one per instance."""
    d = Path(path)
    m = _manifest(d)
    data = _read_checked(d, "truth.sidecar", m)
    return [eqn.seq_from_str(line) for line in data.decode().splitlines()]


def load_with_truth(path) -> Dataset:
    ds = load(path)
    ds._truth = load_truth(path)
    return ds
