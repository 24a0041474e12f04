"""LeNet-scale adaptation network: dynamic feature extractor plus two heads.

The feature extractor ``g`` is a stack of :class:`DynamicConv2d` layers, each
followed by ReLU and 2x2 average pooling. ``f1`` and ``f2`` are identically
shaped, independently initialised two-layer classifiers whose disagreement
drives classifier-discrepancy alignment.

Checkpoints are little-endian binary: magic ``DRTM``, u32 version, then for
each parameter in sorted name order: u32 name length, UTF-8 name, u32 rank,
u32 extents, float64 payload. The architecture is recovered from parameter
names and shapes when loading.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .dynamic import BasisLayout, DynamicConv2d, ResidualMode
from .errors import BadMagicError, DataError, DimensionError, TruncatedPayloadError, VersionMismatchError
from .tensor import Parameter, Tensor

CHECKPOINT_MAGIC = b"DRTM"
CHECKPOINT_VERSION = 1


@dataclass
class Architecture:
    mode: ResidualMode = ResidualMode.SUBSPACE_ROUTING
    K: int = 4
    channels: Tuple[int, ...] = (32, 64)
    kernel_size: int = 5
    hidden: int = 128
    classes: int = 5
    reduction: int = 4
    layout: BasisLayout = BasisLayout.FULL
    image_size: int = 32
    in_channels: int = 1

    def __post_init__(self):
        self.mode = ResidualMode(self.mode)
        self.layout = BasisLayout(self.layout)
        self.channels = tuple(int(c) for c in self.channels)

    def feature_geometry(self) -> Tuple[int, int]:
        """(channels, spatial side) of the final feature map."""
        side = self.image_size
        for _ in self.channels:
            side = (side - self.kernel_size + 1) // 2
            if side < 1:
                raise DimensionError("image too small for the configured conv stack")
        return self.channels[-1], side

    @property
    def feature_dim(self) -> int:
        c, s = self.feature_geometry()
        return c * s * s


def layer_reduction(cin: int, reduction: int) -> int:
    """Largest ratio <= ``reduction`` that divides ``cin`` (1 for a grayscale input)."""
    r = min(reduction, cin)
    while cin % r:
        r -= 1
    return r


class Head:
    """Two fully connected layers with a ReLU in between."""

    def __init__(self, fin: int, hidden: int, classes: int, rng: np.random.Generator, name: str):
        b1, b2 = 1.0 / np.sqrt(fin), 1.0 / np.sqrt(hidden)
        self.fc1_w = Parameter(rng.uniform(-b1, b1, (hidden, fin)), f"{name}.fc1.weight")
        self.fc1_b = Parameter(rng.uniform(-b1, b1, (hidden,)), f"{name}.fc1.bias")
        self.fc2_w = Parameter(rng.uniform(-b2, b2, (classes, hidden)), f"{name}.fc2.weight")
        self.fc2_b = Parameter(rng.uniform(-b2, b2, (classes,)), f"{name}.fc2.bias")

    def parameters(self) -> List[Parameter]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def logits(self, feats: Tensor) -> Tensor:
        h = T.relu(T.linear(feats, self.fc1_w, self.fc1_b))
        return T.linear(h, self.fc2_w, self.fc2_b)


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(tag)])


class AdaptationModel:
    """Feature extractor ``g`` and classifier heads ``f1``/``f2``.

    ``head_seeds`` overrides the seeds used for the two heads; by default they
    are derived from ``seed`` and differ so the heads start out disagreeing.
    """

    def __init__(self, arch: Optional[Architecture] = None, seed: int = 0,
                 head_seeds: Optional[Tuple[int, int]] = None):
        self.arch = arch = arch or Architecture()
        rng = _stream(seed, 0)
        self.g: List[DynamicConv2d] = []
        cin = arch.in_channels
        for i, cout in enumerate(arch.channels):
            self.g.append(DynamicConv2d(
                cin, cout, arch.kernel_size, mode=arch.mode, K=arch.K,
                reduction=layer_reduction(cin, arch.reduction), layout=arch.layout,
                rng=rng, name=f"g.conv{i + 1}", layer_index=i))
            cin = cout
        s1, s2 = head_seeds if head_seeds is not None else (seed * 2 + 1, seed * 2 + 2)
        self.f1 = Head(arch.feature_dim, arch.hidden, arch.classes, _stream(s1, 1), "f1")
        self.f2 = Head(arch.feature_dim, arch.hidden, arch.classes, _stream(s2, 1), "f2")

    # -- parameter groups ----------------------------------------------
    def g_parameters(self) -> List[Parameter]:
        return [p for layer in self.g for p in layer.parameters()]

    def head_parameters(self) -> List[Parameter]:
        return self.f1.parameters() + self.f2.parameters()

    def parameters(self) -> List[Parameter]:
        return self.g_parameters() + self.head_parameters()

    def named_parameters(self) -> Dict[str, Parameter]:
        named = {}
        for p in self.parameters():
            if p.name in named:
                raise ValueError(f"duplicate parameter name {p.name}")
            named[p.name] = p
        return named

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    def attach_sink(self, sink) -> None:
        for layer in self.g:
            layer.sink = sink

    # -- forward -------------------------------------------------------
    def features(self, x: Tensor) -> Tensor:
        a = self.arch
        if x.ndim != 4 or x.shape[1:] != (a.in_channels, a.image_size, a.image_size):
            raise DimensionError(
                f"expected input [B,{a.in_channels},{a.image_size},{a.image_size}], got {x.shape}")
        h = x
        for layer in self.g:
            h = T.avg_pool2d(T.relu(layer(h)), 2)
        return T.reshape(h, (h.shape[0], -1))

    def head_probs(self, feats: Tensor) -> Tuple[Tensor, Tensor]:
        return T.softmax(self.f1.logits(feats)), T.softmax(self.f2.logits(feats))

    def predict(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        return self.head_probs(self.features(x))

    def predict_ensemble(self, x: Tensor) -> Tensor:
        p1, p2 = self.predict(x)
        return T.scale(T.add(p1, p2), 0.5)

    # -- persistence ---------------------------------------------------
    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(named) != set(state):
            missing = sorted(set(named) ^ set(state))
            raise DataError(f"checkpoint parameters do not match the model: {missing[:5]}")
        for name, p in named.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DataError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def copy(self) -> "AdaptationModel":
        clone = AdaptationModel(self.arch)
        clone.load_state_dict(self.state_dict())
        return clone


def predict_ensemble(model: AdaptationModel, x: Tensor) -> Tensor:
    return model.predict_ensemble(x)


def static_parameter_overhead(model: AdaptationModel) -> int:
    """Parameters contributed by basis kernels and coefficient branches."""
    extra = 0
    for layer in model.g:
        if layer.phi is not None:
            extra += layer.phi.size
        if layer.branch is not None:
            extra += sum(p.size for p in layer.branch.parameters())
    return extra


# ---------------------------------------------------------------------------
# checkpoint IO
# ---------------------------------------------------------------------------

def encode_state(state: Dict[str, np.ndarray]) -> bytes:
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_state(buf: bytes) -> Dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError("not a DRTM checkpoint (bad magic)")
    if len(buf) < 8:
        raise TruncatedPayloadError("checkpoint truncated in header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos, state = 8, {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedPayloadError("checkpoint payload truncated")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
        state[name] = arr
    return state


def infer_architecture(state: Dict[str, np.ndarray]) -> Architecture:
    """Reconstruct the :class:`Architecture` implied by checkpoint shapes."""
    conv_ids = sorted({int(m.group(1)) for n in state if (m := re.match(r"g\.conv(\d+)\.w0$", n))})
    if not conv_ids or "f1.fc2.weight" not in state:
        raise DataError("checkpoint lacks the expected g.conv*/f1 parameters")
    w0s = [state[f"g.conv{i}.w0"] for i in conv_ids]
    channels = tuple(w.shape[0] for w in w0s)
    k = w0s[0].shape[-1]
    first = f"g.conv{conv_ids[0]}"
    has_pi = f"{first}.branch.fc2_pi" in state
    has_lam = f"{first}.branch.fc2_lambda" in state
    mode = {(False, False): ResidualMode.STATIC, (False, True): ResidualMode.CHANNEL_ATTENTION,
            (True, False): ResidualMode.SUBSPACE_ROUTING, (True, True): ResidualMode.COMBINATION}[(has_pi, has_lam)]
    K, layout, reduction = 4, BasisLayout.FULL, 4
    if has_pi:
        phi = state[f"{first}.phi"]
        K = phi.shape[0]
        layout = BasisLayout.FULL if phi.ndim == 5 else BasisLayout.CENTER_TAP_1X1
    if mode is not ResidualMode.STATIC:
        # the last layer has the widest input so its ratio is the configured one
        last = state[f"g.conv{conv_ids[-1]}.branch.fc1"]
        reduction = last.shape[1] // last.shape[0]
    hidden, fin = state["f1.fc1.weight"].shape
    classes = state["f1.fc2.weight"].shape[0]
    in_channels = w0s[0].shape[1]
    arch = Architecture(mode=mode, K=K, channels=channels, kernel_size=k, hidden=hidden,
                        classes=classes, reduction=reduction, layout=layout, in_channels=in_channels)
    c, _ = arch.feature_geometry()
    side = int(round(np.sqrt(fin / c)))
    size = side
    for _ in channels:
        size = size * 2 + k - 1
    arch.image_size = size
    if arch.feature_dim != fin:
        raise DataError("cannot infer input geometry from checkpoint")
    return arch


def save_checkpoint(model: AdaptationModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_state(model.state_dict()))
    return path


def load_checkpoint(path) -> AdaptationModel:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    state = decode_state(buf)
    model = AdaptationModel(infer_architecture(state))
    model.load_state_dict(state)
    return model
