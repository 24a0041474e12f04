"""Convolution layers with input-conditioned residual kernels.

A :class:`DynamicConv2d` keeps a static kernel ``w0`` and, depending on its
:class:`ResidualMode`, a set of ``K`` residual basis kernels plus a small
coefficient branch (global average pooling followed by two bias-free fully
connected layers). For every sample the branch produces softmax routing
weights ``pi`` over the basis and/or sigmoid per-output-channel gains
``lambda``; the kernel applied to that sample is

    W(x) = w0 + diag(lambda(x)) w0 + sum_i pi_i(x) phi_i

with the terms that the mode does not use dropped. ``Static`` mode has no
residual at all and runs a plain convolution.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Parameter, Tensor


class ResidualMode(str, enum.Enum):
    STATIC = "Static"
    CHANNEL_ATTENTION = "ChannelAttention"
    SUBSPACE_ROUTING = "SubspaceRouting"
    COMBINATION = "Combination"

    @property
    def routes(self) -> bool:
        return self in (ResidualMode.SUBSPACE_ROUTING, ResidualMode.COMBINATION)

    @property
    def attends(self) -> bool:
        return self in (ResidualMode.CHANNEL_ATTENTION, ResidualMode.COMBINATION)


class BasisLayout(str, enum.Enum):
    FULL = "Full"
    CENTER_TAP_1X1 = "CenterTap1x1"


@dataclass
class CoefficientRecord:
    layer_index: int
    sample_id: int
    pi: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None
    domain_tag: Optional[int] = None


class CoefficientSink:
    """Collects per-sample coefficients emitted by dynamic layers.

    The caller sets ``sample_ids`` (and optionally ``domain_tags``) before each
    forward pass; layers call :meth:`emit` with batch-shaped arrays. Not safe
    for concurrent writers.
    """

    def __init__(self):
        self.records: List[CoefficientRecord] = []
        self.sample_ids: Optional[np.ndarray] = None
        self.domain_tags: Optional[np.ndarray] = None

    def emit(self, layer_index: int, pi: Optional[np.ndarray], lam: Optional[np.ndarray]) -> None:
        n = (pi if pi is not None else lam).shape[0]
        ids = self.sample_ids if self.sample_ids is not None else np.arange(n)
        if len(ids) != n:
            raise DimensionError("sink sample_ids do not match the batch")
        for b in range(n):
            tag = None if self.domain_tags is None else int(self.domain_tags[b])
            self.records.append(CoefficientRecord(
                layer_index=layer_index,
                sample_id=int(ids[b]),
                pi=None if pi is None else pi[b].copy(),
                lam=None if lam is None else lam[b].copy(),
                domain_tag=tag,
            ))


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class CoefficientBranch:
    """Pooling + FC(Cin -> Cin/r) + ReLU + FC heads for ``pi`` and ``lambda``.

    Both heads share the first layer. The routing head exists only for modes
    that route, the attention head only for modes that attend.
    """

    def __init__(self, cin: int, cout: int, K: int, mode: ResidualMode,
                 reduction: int = 4, rng: Optional[np.random.Generator] = None,
                 name: str = "branch"):
        if reduction < 1 or cin % reduction:
            raise DimensionError(f"reduction ratio {reduction} must divide Cin={cin}")
        if mode.routes and K < 1:
            raise DimensionError("routing modes need K >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.K = cin, cout, K
        self.mode = mode
        self.reduction = reduction
        hidden = cin // reduction
        self.hidden = hidden
        self.fc1 = Parameter(_uniform(rng, 1.0 / np.sqrt(cin), (hidden, cin)), f"{name}.fc1")
        self.fc2_pi = None
        self.fc2_lambda = None
        if mode.routes:
            self.fc2_pi = Parameter(_uniform(rng, 1.0 / np.sqrt(hidden), (K, hidden)), f"{name}.fc2_pi")
        if mode.attends:
            self.fc2_lambda = Parameter(_uniform(rng, 1.0 / np.sqrt(hidden), (cout, hidden)),
                                        f"{name}.fc2_lambda")

    def parameters(self) -> List[Parameter]:
        return [p for p in (self.fc1, self.fc2_pi, self.fc2_lambda) if p is not None]


def compute_coefficients(x: Tensor, branch: CoefficientBranch,
                         mode: ResidualMode) -> Tuple[Optional[Tensor], Optional[Tensor]]:
    """Return ``(pi [B,K], lambda [B,Cout])``; entries not used by ``mode`` are None."""
    if mode is ResidualMode.STATIC:
        return None, None
    if x.ndim != 4 or x.shape[1] != branch.cin:
        raise DimensionError(f"branch expects [B,{branch.cin},H,W], got {x.shape}")
    hidden = T.relu(T.linear(T.global_avg_pool(x), branch.fc1))
    pi = lam = None
    if mode.routes:
        pi = T.softmax(T.linear(hidden, branch.fc2_pi))
    if mode.attends:
        lam = T.sigmoid(T.linear(hidden, branch.fc2_lambda))
    return pi, lam


def _aggregate_batch(w0: Tensor, phi: Optional[Tensor], pi: Optional[Tensor],
                     lam: Optional[Tensor], layout: BasisLayout) -> Tensor:
    """Materialise one kernel per sample: [B, Cout, Cin, k, k]."""
    cout, cin, k, _ = w0.shape
    c = k // 2
    w0d = w0.data
    B = pi.shape[0] if pi is not None else lam.shape[0]
    if lam is not None:
        if lam.shape != (B, cout):
            raise DimensionError(f"lambda must be [B,{cout}], got {lam.shape}")
        out = w0d[None] * (1.0 + lam.data)[:, :, None, None, None]
    else:
        out = np.broadcast_to(w0d, (B,) + w0d.shape).copy()
    if pi is not None:
        K = phi.shape[0]
        if pi.shape != (B, K):
            raise DimensionError(f"pi must be [B,{K}], got {pi.shape}")
        flat = phi.data.reshape(K, -1)
        res = (pi.data @ flat).reshape((B,) + phi.shape[1:])
        if layout is BasisLayout.FULL:
            out += res
        else:
            out[:, :, :, c, c] += res

    parents = [w0]
    if phi is not None:
        parents += [phi, pi]
    if lam is not None:
        parents.append(lam)

    def bw(g):
        gw0 = g.sum(axis=0) if lam is None else np.einsum("bo...,bo->o...", g, 1.0 + lam.data)
        grads = [gw0]
        if phi is not None:
            gsub = g if layout is BasisLayout.FULL else g[:, :, :, c, c]
            gflat = gsub.reshape(B, -1)
            grads.append((pi.data.T @ gflat).reshape(phi.shape))
            grads.append(gflat @ phi.data.reshape(phi.shape[0], -1).T)
        if lam is not None:
            grads.append(np.einsum("boikl,oikl->bo", g, w0d))
        return tuple(grads)

    return Tensor._make(out, parents, bw, "aggregate_kernel")


def _check_layout(w0: Tensor, phi: Optional[Tensor], layout: BasisLayout) -> None:
    cout, cin, k, _ = w0.shape
    if layout is BasisLayout.CENTER_TAP_1X1 and k % 2 == 0:
        raise DimensionError("CenterTap1x1 layout requires an odd kernel size")
    if phi is None:
        return
    expected = (cout, cin, k, k) if layout is BasisLayout.FULL else (cout, cin)
    if tuple(phi.shape[1:]) != expected:
        raise DimensionError(f"basis kernels must be {expected} for layout {layout.value}, got {phi.shape[1:]}")


def aggregate_kernel(w0: Tensor, phi: Optional[Tensor], pi: Optional[Tensor],
                     lam: Optional[Tensor], mode: ResidualMode,
                     layout: BasisLayout = BasisLayout.FULL) -> Tensor:
    """Build the kernel for a single sample.

    ``pi`` has shape [K] and ``lam`` shape [Cout]. Coefficients that ``mode``
    does not use are ignored. Returns [Cout, Cin, k, k].
    """
    mode = ResidualMode(mode)
    layout = BasisLayout(layout)
    _check_layout(w0, phi if mode.routes else None, layout)
    if mode is ResidualMode.STATIC:
        return w0
    if mode.routes:
        if phi is None or pi is None:
            raise DimensionError("routing mode needs basis kernels and pi")
        if pi.ndim != 1 or pi.shape[0] != phi.shape[0]:
            raise DimensionError(f"pi must have length {phi.shape[0]}")
        pi_b = T.reshape(pi, (1, -1))
    else:
        pi_b, phi = None, None
    if mode.attends:
        if lam is None or lam.shape != (w0.shape[0],):
            raise DimensionError(f"lambda must have length {w0.shape[0]}")
        lam_b = T.reshape(lam, (1, -1))
    else:
        lam_b = None
    out = _aggregate_batch(w0, phi, pi_b, lam_b, layout)
    return T.reshape(out, w0.shape)


class DynamicConv2d:
    """Square-kernel convolution whose kernel is a static matrix plus a
    per-sample residual.

    Parameters
    ----------
    cin, cout, k : int
        Channel counts and kernel size.
    mode : ResidualMode
        Which residual family to use.
    K : int
        Number of residual basis kernels (ignored unless the mode routes).
    reduction : int
        Coefficient branch reduction ratio; must divide ``cin``.
    layout : BasisLayout
        ``Full`` k x k basis kernels, or 1x1 kernels applied at the center tap.
    """

    def __init__(self, cin: int, cout: int, k: int, mode=ResidualMode.SUBSPACE_ROUTING,
                 K: int = 4, reduction: int = 4, layout=BasisLayout.FULL,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, name: str = "conv",
                 layer_index: int = 0):
        self.mode = ResidualMode(mode)
        self.layout = BasisLayout(layout)
        if self.layout is BasisLayout.CENTER_TAP_1X1 and k % 2 == 0:
            raise DimensionError("CenterTap1x1 layout requires an odd kernel size")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding = stride, padding
        self.name = name
        self.layer_index = layer_index
        self.K = K if self.mode.routes else 0
        bound = 1.0 / np.sqrt(cin * k * k)
        self.w0 = Parameter(_uniform(rng, bound, (cout, cin, k, k)), f"{name}.w0")
        self.bias = Parameter(_uniform(rng, bound, (cout,)), f"{name}.bias") if bias else None
        self.phi = None
        self.branch = None
        if self.mode.routes:
            basis_shape = (cout, cin, k, k) if self.layout is BasisLayout.FULL else (cout, cin)
            self.phi = Parameter(_uniform(rng, 1.0 / (cin * k * k), (K,) + basis_shape), f"{name}.phi")
        if self.mode is not ResidualMode.STATIC:
            self.branch = CoefficientBranch(cin, cout, K, self.mode, reduction, rng, f"{name}.branch")
        self.sink: Optional[CoefficientSink] = None

    def parameters(self) -> List[Parameter]:
        params = [self.w0]
        if self.bias is not None:
            params.append(self.bias)
        if self.phi is not None:
            params.append(self.phi)
        if self.branch is not None:
            params.extend(self.branch.parameters())
        return params

    def coefficients(self, x: Tensor):
        if self.branch is None:
            return None, None
        return compute_coefficients(x, self.branch, self.mode)

    def kernels(self, x: Tensor) -> Tensor:
        """Per-sample kernels [B, Cout, Cin, k, k] for a non-static layer."""
        pi, lam = self.coefficients(x)
        return _aggregate_batch(self.w0, self.phi if pi is not None else None, pi, lam, self.layout)

    def forward(self, x: Tensor) -> Tensor:
        if self.mode is ResidualMode.STATIC:
            return T.conv2d(x, self.w0, self.bias, self.stride, self.padding)
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise DimensionError(f"{self.name}: expected [B,{self.cin},H,W], got {x.shape}")
        pi, lam = self.coefficients(x)
        if self.sink is not None:
            self.sink.emit(self.layer_index,
                           None if pi is None else pi.data,
                           None if lam is None else lam.data)
        kernels = _aggregate_batch(self.w0, self.phi if pi is not None else None, pi, lam, self.layout)
        return T.conv2d_per_sample(x, kernels, self.bias, self.stride, self.padding)

    __call__ = forward


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------

SOFTMAX_FLOPS_PER_ENTRY = 3  # exp, accumulate, divide
SIGMOID_FLOPS_PER_ENTRY = 3  # exp, add, divide


def count_flops(layer: DynamicConv2d, H: int, W: int) -> Tuple[int, int]:
    """Count (static conv FLOPs, dynamic-path overhead FLOPs) for an H x W input.

    A multiply-add is two FLOPs. The overhead covers pooling, both branch FC
    layers, the softmax/sigmoid normalisations, the weighted basis sum, the
    channel rescaling of ``w0`` and the final kernel addition. Bias terms and
    the branch ReLU are not counted.
    """
    Ho = (H + 2 * layer.padding - layer.k) // layer.stride + 1
    Wo = (W + 2 * layer.padding - layer.k) // layer.stride + 1
    cin, cout, k = layer.cin, layer.cout, layer.k
    static = 2 * cout * cin * k * k * Ho * Wo
    if layer.mode is ResidualMode.STATIC:
        return static, 0
    hidden = layer.branch.hidden
    full = cout * cin * k * k
    overhead = cin * H * W            # pooling sums
    overhead += 2 * hidden * cin      # fc1
    if layer.mode.routes:
        K = layer.K
        basis = full if layer.layout is BasisLayout.FULL else cout * cin
        overhead += 2 * K * hidden                  # fc2 routing head
        overhead += SOFTMAX_FLOPS_PER_ENTRY * K
        overhead += 2 * K * basis                   # sum_i pi_i phi_i
        overhead += basis                           # add residual to kernel
    if layer.mode.attends:
        overhead += 2 * cout * hidden               # fc2 attention head
        overhead += SIGMOID_FLOPS_PER_ENTRY * cout
        overhead += 2 * full                        # lambda * w0 and add
    return static, overhead
