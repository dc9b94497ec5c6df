"""Symmetric INT8 quantization with scale search, block clipping and smoothing.

Orientation throughout is ``Y = X @ W`` with activations ``X`` of shape
``(tokens, in)`` and weights ``W`` of shape ``(in, out)``. Activations are
quantized per token (row), weights per output channel (column). Codes lie in
``[-127, 127]`` and all-zero slices get scale 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

QMAX = 127


class Granularity(str, Enum):
    PER_TOKEN = "PER_TOKEN"
    PER_CHANNEL = "PER_CHANNEL"
    PER_BLOCK = "PER_BLOCK"


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    scales: np.ndarray
    granularity: Granularity

    def dequantize(self) -> np.ndarray:
        c = self.codes.astype(np.float64)
        if self.granularity is Granularity.PER_TOKEN:
            return c * self.scales[:, None]
        if self.granularity is Granularity.PER_CHANNEL:
            return c * self.scales[None, :]
        return c * float(self.scales[0])


def _finite(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite values")
    return a


def _codes(a: np.ndarray, scale) -> np.ndarray:
    return np.clip(np.rint(a / scale), -QMAX, QMAX).astype(np.int8)


def _scale(amax: np.ndarray) -> np.ndarray:
    s = amax / QMAX
    # Below the normal range the step loses precision; one code step of amax keeps the bound.
    s = np.where(s < np.finfo(np.float64).tiny, amax, s)
    return np.where(amax > 0, s, 1.0)


def quantize_per_token(X) -> QuantizedTensor:
    X = _finite(X)
    s = _scale(np.abs(X).max(axis=1)) if X.shape[1] else np.ones(X.shape[0])
    return QuantizedTensor(_codes(X, s[:, None]), s, Granularity.PER_TOKEN)


def quantize_per_channel(W) -> QuantizedTensor:
    W = _finite(W)
    s = _scale(np.abs(W).max(axis=0)) if W.shape[0] else np.ones(W.shape[1])
    return QuantizedTensor(_codes(W, s[None, :]), s, Granularity.PER_CHANNEL)


def quantize_per_block(W) -> QuantizedTensor:
    W = _finite(W)
    s = float(_scale(np.array(np.abs(W).max() if W.size else 0.0)))
    return QuantizedTensor(_codes(W, s), np.array([s]), Granularity.PER_BLOCK)


def int8_matmul_reference(Xq: QuantizedTensor, Wq: QuantizedTensor) -> np.ndarray:
    """Integer GEMM with int64 accumulation, then ``scale_token * scale_channel``.

    Raises:
        ValueError: granularities are not (PER_TOKEN, PER_CHANNEL) or inner
            dimensions differ.
    """
    if Xq.granularity is not Granularity.PER_TOKEN or Wq.granularity is not Granularity.PER_CHANNEL:
        raise ValueError("need PER_TOKEN activations and PER_CHANNEL weights")
    if Xq.codes.shape[1] != Wq.codes.shape[0]:
        raise ValueError("inner dimensions differ")
    acc = Xq.codes.astype(np.int64) @ Wq.codes.astype(np.int64)
    return acc * Xq.scales[:, None] * Wq.scales[None, :]


def matmul_error_bound(X, W, Xq: QuantizedTensor, Wq: QuantizedTensor) -> float:
    """Frobenius bound on ``int8 result - X @ W`` from half-step rounding errors.

    Elementwise ``|dX| <= sx/2`` and ``|dW| <= sw/2`` give
    ``|Xh Wh - X W| <= (sx/2) |W| + |Xh| (sw/2)``.
    """
    X, W = _finite(X), _finite(W)
    ex = np.broadcast_to(Xq.scales[:, None] / 2, X.shape)
    ew = np.broadcast_to(Wq.scales[None, :] / 2, W.shape)
    return float(np.linalg.norm(ex @ np.abs(W) + np.abs(Xq.dequantize()) @ ew))


# -- scale search ----------------------------------------------------------

def default_scale_grid(n: int = 64, lo: float = 2.0 ** -4, hi: float = 2.0 ** 4) -> np.ndarray:
    """``n`` log-spaced points on ``[lo, hi]`` with 1.0 added if absent."""
    g = np.geomspace(lo, hi, n)
    return np.unique(np.append(g, 1.0))


def _static_weight(W: np.ndarray, s: float, step: np.ndarray) -> np.ndarray:
    """Quantize ``W * s`` on the fixed per-channel ``step`` grid, then undo ``s``-free."""
    return np.clip(np.rint(W * s / step), -QMAX, QMAX) * step


def scale_loss(W, X, s: float) -> float:
    """``|| deq(Q_tok(X / s)) @ Q_step(W * s) - X @ W ||_F``.

    ``Q_step`` rounds onto the per-channel step of the unscaled weights
    (``max|W_col| / 127``) and saturates at ±127, so ``s > 1`` trades clipping
    of large weights for finer resolution of small ones and ``s < 1`` the
    reverse.
    """
    W, X = _finite(W), _finite(X)
    step = _scale(np.abs(W).max(axis=0))[None, :]
    xq = quantize_per_token(X / s).dequantize()
    return float(np.linalg.norm(xq @ _static_weight(W, s, step) - X @ W))


@dataclass(frozen=True)
class SearchResult:
    best: float
    grid: np.ndarray
    losses: np.ndarray


def scale_search(W, X, grid: Sequence[float] | None = None) -> SearchResult:
    """Grid argmin of :func:`scale_loss`; ties go to the smaller ``s``.

    Raises:
        ValueError: empty or nonpositive grid, or ``X @ W`` undefined.
    """
    W, X = _finite(W), _finite(X)
    if X.shape[1] != W.shape[0]:
        raise ValueError("X @ W is not defined for these shapes")
    g = default_scale_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if g.size == 0 or np.any(g <= 0):
        raise ValueError("grid must be nonempty and positive")
    g = np.unique(g)  # ascending, so argmin's first hit is the smallest s
    losses = np.array([scale_loss(W, X, s) for s in g])
    return SearchResult(float(g[int(np.argmin(losses))]), g, losses)


# -- block clipping ----------------------------------------------------------

def default_alpha_grid() -> np.ndarray:
    return np.round(np.linspace(0.05, 1.0, 96), 10)


def clip_block(W_block, alpha: float) -> np.ndarray:
    W_block = _finite(W_block)
    return np.clip(W_block, alpha * min(W_block.min(), 0.0), alpha * max(W_block.max(), 0.0))


def clip_loss(W_block, X, alpha: float) -> float:
    """``|| X @ W_block - X @ deq(Q_block(clip(W_block, alpha))) ||_F``."""
    W_block, X = _finite(W_block), _finite(X)
    wq = quantize_per_block(clip_block(W_block, alpha)).dequantize()
    return float(np.linalg.norm(X @ W_block - X @ wq))


def block_clip_search(W_block, X, alpha_grid: Sequence[float] | None = None) -> SearchResult:
    """Grid argmin of :func:`clip_loss`; ties go to the larger ``alpha``.

    The clipping range is ``[alpha * min, alpha * max]`` and the clipped block
    is quantized with one scale.

    Raises:
        ValueError: empty grid or ``alpha`` outside (0, 1].
    """
    g = default_alpha_grid() if alpha_grid is None else np.asarray(alpha_grid, dtype=np.float64)
    if g.size == 0:
        raise ValueError("alpha grid is empty")
    if np.any((g <= 0) | (g > 1)):
        raise ValueError("alpha must lie in (0, 1]")
    g = np.unique(g)[::-1]  # descending, so argmin's first hit is the largest alpha
    losses = np.array([clip_loss(W_block, X, a) for a in g])
    return SearchResult(float(g[int(np.argmin(losses))]), g, losses)


# -- outlier suppression -------------------------------------------------------

@dataclass(frozen=True)
class SmoothTransform:
    """Per-input-channel divisor ``d``: ``X' = X / d``, ``W' = d[:, None] * W``."""

    d: np.ndarray


def outlier_suppress(W, X) -> tuple[np.ndarray, np.ndarray, SmoothTransform]:
    """Move activation range into the weights, channel by channel.

    ``d_j = sqrt(max|X[:, j]| / max|W[j, :]|)``; channels where either side
    is all zero keep ``d_j = 1``. ``X' @ W'`` equals ``X @ W`` up to rounding.
    """
    W, X = _finite(W), _finite(X)
    if X.shape[1] != W.shape[0]:
        raise ValueError("X @ W is not defined for these shapes")
    xa = np.abs(X).max(axis=0) if X.shape[0] else np.zeros(X.shape[1])
    wa = np.abs(W).max(axis=1) if W.shape[1] else np.zeros(W.shape[0])
    ok = (xa > 0) & (wa > 0)
    d = np.ones(W.shape[0])
    d[ok] = np.sqrt(xa[ok] / wa[ok])
    return d[:, None] * W, X / d[None, :], SmoothTransform(d)


# -- end-to-end linear layer ---------------------------------------------------

@dataclass(frozen=True)
class LinearQuantResult:
    error: float
    scale: float
    alphas: tuple[float, ...]
    transform: SmoothTransform | None


def quantize_linear(W, X, *, suppress: bool = False, clip: bool = False, search: bool = False,
                    block_cols: int = 8, scale_grid=None, alpha_grid=None) -> LinearQuantResult:
    """Quantize one ``X @ W`` layer and report its output error against float.

    Steps, each optional: smoothing, per-column-block clipping, scale search.
    With every step off this is plain max-abs per-token/per-channel INT8.
    """
    W0, X0 = _finite(W), _finite(X)
    W, X = W0, X0
    tr = None
    if suppress:
        W, X, tr = outlier_suppress(W, X)
    alphas: list[float] = []
    if clip:
        parts = []
        for c in range(0, W.shape[1], block_cols):
            blk = W[:, c:c + block_cols]
            a = block_clip_search(blk, X, alpha_grid).best
            alphas.append(a)
            parts.append(clip_block(blk, a))
        Wc = np.concatenate(parts, axis=1)
    else:
        Wc = W
    s = scale_search(Wc, X, scale_grid).best if search else 1.0
    step = _scale(np.abs(Wc).max(axis=0))[None, :]
    y = quantize_per_token(X / s).dequantize() @ _static_weight(Wc, s, step)
    return LinearQuantResult(float(np.linalg.norm(y - X0 @ W0)), s, tuple(alphas), tr)


def outlier_corpus(seed: int, tokens: int = 16, d_in: int = 32, d_out: int = 16,
                   outlier_channels: int = 2, magnitude: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
    """Synthetic layer with a few activation channels ``magnitude`` times larger."""
    rng = np.random.Generator(np.random.PCG64(seed))
    X = rng.normal(size=(tokens, d_in))
    cols = rng.choice(d_in, size=outlier_channels, replace=False)
    X[:, cols] *= magnitude
    W = rng.normal(size=(d_in, d_out)) * 0.05
    return W, X


# -- operator classification ---------------------------------------------------

class OpPath(str, Enum):
    INT8_PATH = "INT8_PATH"
    HIGH_PRECISION_PATH = "HIGH_PRECISION_PATH"


INT8_CLASSES = frozenset({"matmul", "ffn_matmul", "expert_matmul", "attention_proj", "linear"})
HIGH_PRECISION_CLASSES = frozenset({"norm", "normalization", "gate", "gating", "softmax", "rope"})


@dataclass(frozen=True)
class Operator:
    name: str
    op_class: str
    flops: float = 0.0
    sensitivity: str = "normal"


@dataclass
class QuantScheme:
    assignment: dict = field(default_factory=dict)
    block_partition: tuple[int, int] = (0, 8)
    clip_alphas: dict = field(default_factory=dict)
    search_grid: tuple[float, ...] = ()


def classify_operators(ops: Iterable[Operator | dict]) -> QuantScheme:
    """Route large matmuls to INT8 and accuracy-critical ops to high precision.

    A matmul tagged ``sensitivity="high"`` also stays in high precision.

    Raises:
        ValueError: unknown operator class or a duplicated operator name.
    """
    scheme = QuantScheme(search_grid=tuple(default_scale_grid()))
    for op in ops:
        if isinstance(op, dict):
            op = Operator(**op)
        cls = op.op_class.lower()
        if op.name in scheme.assignment:
            raise ValueError(f"operator {op.name!r} classified twice")
        if cls in INT8_CLASSES:
            path = OpPath.HIGH_PRECISION_PATH if op.sensitivity == "high" else OpPath.INT8_PATH
        elif cls in HIGH_PRECISION_CLASSES:
            path = OpPath.HIGH_PRECISION_PATH
        else:
            raise ValueError(f"unknown operator class {op.op_class!r}")
        scheme.assignment[op.name] = path
    return scheme
