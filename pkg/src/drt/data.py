"""Synthetic multi-domain glyph data and the ``MSD1`` dataset file format.

Every domain renders the same family of procedurally jittered glyph classes
and then applies one style transform (inversion, additive noise, edge-only
stroke, blur or a gamma curve). Images are 32x32 grayscale in [0, 1], stored
at float32 precision so that dataset files round-trip exactly.

Domain tags travel with each batch for analysis only. While a
:func:`domain_tag_firewall` is active, every read of
:attr:`DomainBatch.domain_tag` is counted; training runs inside the firewall
and requires the count to stay at zero.
"""

from __future__ import annotations

import contextlib
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import BadMagicError, ConfigError, DataError, TruncatedPayloadError, VersionMismatchError

IMAGE_SIZE = 32
DATASET_MAGIC = b"MSD1"
NO_TAG = 0xFF


# ---------------------------------------------------------------------------
# domain-label firewall
# ---------------------------------------------------------------------------

class _Firewall:
    active = 0
    reads = 0


@contextlib.contextmanager
def domain_tag_firewall():
    """Count domain-tag reads inside the block; yields a callable returning the count."""
    _Firewall.active += 1
    start = _Firewall.reads
    try:
        yield lambda: _Firewall.reads - start
    finally:
        _Firewall.active -= 1


def domain_tag_reads() -> int:
    """Total tag reads recorded while any firewall was active."""
    return _Firewall.reads


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

class DomainBatch:
    """Images [B,1,H,W] with optional integer labels and domain tags."""

    def __init__(self, images: np.ndarray, labels: Optional[np.ndarray] = None,
                 domain_tag: Optional[np.ndarray] = None):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1] != 1:
            raise DataError(f"images must be [B,1,H,W], got {images.shape}")
        self.images = images
        n = images.shape[0]
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        if self.labels is not None and self.labels.shape != (n,):
            raise DataError("labels must have one entry per image")
        self._domain_tag = None if domain_tag is None else np.asarray(domain_tag, dtype=np.int64)
        if self._domain_tag is not None and self._domain_tag.shape != (n,):
            raise DataError("domain tags must have one entry per image")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def domain_tag(self) -> Optional[np.ndarray]:
        if _Firewall.active:
            _Firewall.reads += 1
        return self._domain_tag

    @property
    def has_tags(self) -> bool:
        return self._domain_tag is not None

    def subset(self, idx) -> "DomainBatch":
        idx = np.asarray(idx)
        return DomainBatch(
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            None if self._domain_tag is None else self._domain_tag[idx],
        )

    def without_tags(self) -> "DomainBatch":
        return DomainBatch(self.images, self.labels, None)

    def without_labels(self) -> "DomainBatch":
        return DomainBatch(self.images, None, self._domain_tag)


def concat_batches(batches: Sequence[DomainBatch], keep_tags: bool = True) -> DomainBatch:
    """Concatenate batches. With ``keep_tags=False`` tags are dropped unread."""
    if not batches:
        raise DataError("nothing to concatenate")
    images = np.concatenate([b.images for b in batches])
    labels = None
    if all(b.labels is not None for b in batches):
        labels = np.concatenate([b.labels for b in batches])
    tags = None
    if keep_tags and all(b.has_tags for b in batches):
        tags = np.concatenate([b.domain_tag for b in batches])
    return DomainBatch(images, labels, tags)


def split_batch(batch: DomainBatch, eval_fraction: float, seed: int):
    """Deterministic disjoint (train, eval) split."""
    if not 0 < eval_fraction < 1:
        raise ConfigError("eval_fraction must be in (0, 1)")
    perm = np.random.default_rng([int(seed), 7]).permutation(len(batch))
    n_eval = int(round(len(batch) * eval_fraction))
    return batch.subset(np.sort(perm[n_eval:])), batch.subset(np.sort(perm[:n_eval]))


# ---------------------------------------------------------------------------
# glyph rendering
# ---------------------------------------------------------------------------

# Segments in a unit box [-1, 1]^2; "ring" and "disk" are handled separately.
_GLYPHS = [
    ("hbar", [((-1, 0), (1, 0))]),
    ("vbar", [((0, -1), (0, 1))]),
    ("plus", [((-1, 0), (1, 0)), ((0, -1), (0, 1))]),
    ("ring", None),
    ("xcross", [((-1, -1), (1, 1)), ((-1, 1), (1, -1))]),
    ("square", [((-1, -1), (1, -1)), ((1, -1), (1, 1)), ((1, 1), (-1, 1)), ((-1, 1), (-1, -1))]),
    ("triangle", [((-1, 1), (1, 1)), ((1, 1), (0, -1)), ((0, -1), (-1, 1))]),
    ("ell", [((-1, -1), (-1, 1)), ((-1, 1), (1, 1))]),
    ("tee", [((-1, -1), (1, -1)), ((0, -1), (0, 1))]),
    ("disk", None),
]
MAX_CLASSES = len(_GLYPHS)
GLYPH_NAMES = [name for name, _ in _GLYPHS]

_yy, _xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5


def _segment_distance(px, py, a, b):
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    den = dx * dx + dy * dy
    t = np.clip(((px - ax) * dx + (py - ay) * dy) / den, 0.0, 1.0) if den > 0 else 0.0
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


def render_glyph(label: int, rng: np.random.Generator) -> np.ndarray:
    """Render glyph class ``label`` with random placement, size, angle and stroke."""
    name, segments = _GLYPHS[label]
    half = rng.uniform(7.0, 11.0)
    cx = IMAGE_SIZE / 2 + rng.uniform(-3.0, 3.0)
    cy = IMAGE_SIZE / 2 + rng.uniform(-3.0, 3.0)
    angle = rng.uniform(-0.25, 0.25)
    width = rng.uniform(1.5, 3.0)
    ca, sa = np.cos(angle), np.sin(angle)
    # pixel coordinates mapped into the glyph's unit frame
    u = ((_xx - cx) * ca + (_yy - cy) * sa) / half
    v = (-(_xx - cx) * sa + (_yy - cy) * ca) / half
    if name == "ring":
        dist = np.abs(np.hypot(u, v) - 0.8) * half
    elif name == "disk":
        dist = np.maximum(np.hypot(u, v) - 0.6, 0.0) * half
    else:
        dist = np.min([_segment_distance(u, v, a, b) for a, b in segments], axis=0) * half
    return np.clip(width / 2 - dist + 0.5, 0.0, 1.0)


# ---------------------------------------------------------------------------
# domain transforms
# ---------------------------------------------------------------------------

class TransformKind(str, enum.Enum):
    IDENTITY = "Identity"
    INVERT = "Invert"
    NOISE = "Noise"
    STROKE = "Stroke"
    BLUR = "Blur"
    SHIFT_INTENSITY = "ShiftIntensity"


_PARAM_RANGES = {
    TransformKind.NOISE: (0.0, 0.3),
    TransformKind.BLUR: (0.0, 3.0),
    TransformKind.SHIFT_INTENSITY: (0.5, 2.0),
}
_PARAM_DEFAULTS = {
    TransformKind.NOISE: 0.3,
    TransformKind.BLUR: 1.5,
    TransformKind.SHIFT_INTENSITY: 0.5,
}


@dataclass(frozen=True)
class Transform:
    kind: TransformKind
    param: Optional[float] = None

    def __post_init__(self):
        kind = TransformKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind in _PARAM_RANGES:
            p = _PARAM_DEFAULTS[kind] if self.param is None else float(self.param)
            lo, hi = _PARAM_RANGES[kind]
            if not lo <= p <= hi:
                raise ConfigError(f"{kind.value} parameter {p} outside [{lo}, {hi}]")
            object.__setattr__(self, "param", p)
        elif self.param is not None:
            raise ConfigError(f"{kind.value} takes no parameter")


def apply_transform(img: np.ndarray, transform: Transform, rng: np.random.Generator) -> np.ndarray:
    kind = transform.kind
    if kind is TransformKind.IDENTITY:
        out = img
    elif kind is TransformKind.INVERT:
        out = 1.0 - img
    elif kind is TransformKind.NOISE:
        out = img + rng.normal(0.0, transform.param, size=img.shape)
    elif kind is TransformKind.STROKE:
        mag = np.hypot(ndimage.sobel(img, axis=0), ndimage.sobel(img, axis=1))
        peak = mag.max()
        out = mag / peak if peak > 0 else mag
    elif kind is TransformKind.BLUR:
        out = ndimage.gaussian_filter(img, sigma=transform.param, mode="constant")
        peak = out.max()
        out = out / peak if peak > 0 else out
    elif kind is TransformKind.SHIFT_INTENSITY:
        out = np.power(img, transform.param)
    else:  # pragma: no cover - enum is closed
        raise ConfigError(f"unsupported transform {kind}")
    return np.clip(out, 0.0, 1.0)


@dataclass(frozen=True)
class DomainSpec:
    classes: int
    transform: Transform
    seed: int = 0
    tag: Optional[int] = None

    def __post_init__(self):
        if not 1 <= self.classes <= MAX_CLASSES:
            raise ConfigError(f"classes must be in [1, {MAX_CLASSES}]")


def generate_domain(spec: DomainSpec, n: int, start: int = 0) -> DomainBatch:
    """Render samples ``start .. start+n-1`` of a domain.

    Sample ``i`` uses its own generator seeded from ``(spec.seed, i)`` and has
    label ``i mod classes``, so classes are balanced and any sample can be
    regenerated independently.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    images = np.empty((n, 1, IMAGE_SIZE, IMAGE_SIZE))
    labels = np.empty(n, dtype=np.int64)
    for j in range(n):
        i = start + j
        rng = np.random.default_rng([int(spec.seed), i])
        label = i % spec.classes
        img = apply_transform(render_glyph(label, rng), spec.transform, rng)
        images[j, 0] = img.astype(np.float32)
        labels[j] = label
    tags = None if spec.tag is None else np.full(n, spec.tag, dtype=np.int64)
    return DomainBatch(images, labels, tags)


DEFAULT_DOMAINS = [
    ("identity", Transform(TransformKind.IDENTITY)),
    ("invert", Transform(TransformKind.INVERT)),
    ("noise", Transform(TransformKind.NOISE, 0.3)),
    ("stroke", Transform(TransformKind.STROKE)),
    ("blur", Transform(TransformKind.BLUR, 1.5)),
]


# ---------------------------------------------------------------------------
# MSD1 file format
# ---------------------------------------------------------------------------

def _record_dtype(h: int, w: int, has_labels: bool) -> np.dtype:
    fields = [("pixels", "<f4", (h * w,))]
    if has_labels:
        fields.append(("label", "<u2"))
    fields.append(("tag", "u1"))
    return np.dtype(fields)


def encode_dataset(batch: DomainBatch) -> bytes:
    n, _, h, w = batch.images.shape
    has_labels = batch.labels is not None
    header = DATASET_MAGIC + struct.pack("<III", n, h, w) + struct.pack("<B", int(has_labels))
    rec = np.zeros(n, dtype=_record_dtype(h, w, has_labels))
    rec["pixels"] = batch.images.reshape(n, h * w).astype(np.float32)
    if has_labels:
        if batch.labels.min(initial=0) < 0 or batch.labels.max(initial=0) > 0xFFFF:
            raise DataError("labels must fit in u16")
        rec["label"] = batch.labels
    tags = batch._domain_tag
    if tags is None:
        rec["tag"] = NO_TAG
    else:
        if tags.min(initial=0) < 0 or tags.max(initial=0) >= NO_TAG:
            raise DataError("domain tags must be in [0, 254]")
        rec["tag"] = tags
    return header + rec.tobytes()


def decode_dataset(buf: bytes) -> DomainBatch:
    if len(buf) < 4 or buf[:3] != DATASET_MAGIC[:3] or not buf[3:4].isdigit():
        raise BadMagicError("not an MSD dataset file (bad magic)")
    if buf[:4] != DATASET_MAGIC:
        raise VersionMismatchError(f"dataset version {buf[3:4].decode()} is not supported")
    if len(buf) < 17:
        raise TruncatedPayloadError("dataset header truncated")
    n, h, w = struct.unpack_from("<III", buf, 4)
    (flag,) = struct.unpack_from("<B", buf, 16)
    if flag not in (0, 1):
        raise DataError(f"invalid label-presence flag {flag}")
    dt = _record_dtype(h, w, bool(flag))
    need = 17 + n * dt.itemsize
    if len(buf) < need:
        raise TruncatedPayloadError(f"dataset payload truncated: {len(buf)} < {need} bytes")
    if len(buf) > need:
        raise DataError("trailing bytes after dataset payload")
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=17)
    images = rec["pixels"].astype(np.float64).reshape(n, 1, h, w)
    labels = rec["label"].astype(np.int64) if flag else None
    raw_tags = rec["tag"].astype(np.int64)
    tags = None if (raw_tags == NO_TAG).all() else raw_tags
    if tags is not None and (raw_tags == NO_TAG).any():
        raise DataError("mixed present/absent domain tags are not supported")
    return DomainBatch(images, labels, tags)


def write_dataset(batch: DomainBatch, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_dataset(batch))
    return path


def read_dataset(path) -> DomainBatch:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    return decode_dataset(buf)


# ---------------------------------------------------------------------------
# benchmark suites (gen-data spec files)
# ---------------------------------------------------------------------------

@dataclass
class SuiteSpec:
    """A set of domains rendered with shared class count, sizes and seed."""

    classes: int = 5
    n_train: int = 200
    n_eval: int = 200
    seed: int = 0
    domains: List[tuple] = field(default_factory=lambda: list(DEFAULT_DOMAINS))

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteSpec":
        try:
            domains = [(item["name"], Transform(item["transform"], item.get("param")))
                       for item in d.get("domains", [])] or list(DEFAULT_DOMAINS)
            return cls(classes=int(d.get("classes", 5)), n_train=int(d.get("n_train", 200)),
                       n_eval=int(d.get("n_eval", 200)), seed=int(d.get("seed", 0)), domains=domains)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid data spec: {exc}") from exc


def generate_suite(spec: SuiteSpec, out_dir) -> dict:
    """Write ``<name>_train.msd`` and ``<name>_eval.msd`` per domain.

    Train and eval files use disjoint sample index ranges. Returns a mapping
    name -> {"train": path, "eval": path, "tag": int}.
    """
    out_dir = Path(out_dir)
    written = {}
    for tag, (name, transform) in enumerate(spec.domains):
        ds = DomainSpec(spec.classes, transform, seed=spec.seed * 1000 + tag, tag=tag)
        total = generate_domain(ds, spec.n_train + spec.n_eval)
        train = total.subset(np.arange(spec.n_train))
        evals = total.subset(np.arange(spec.n_train, spec.n_train + spec.n_eval))
        written[name] = {
            "train": str(write_dataset(train, out_dir / f"{name}_train.msd")),
            "eval": str(write_dataset(evals, out_dir / f"{name}_eval.msd")),
            "tag": tag,
        }
    return written
