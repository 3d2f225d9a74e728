"""Dense array substrate and differentiable primitives.

Conventions used repo-wide:
  * feature maps are numpy arrays of shape (H, W, C), channels last;
  * patch matrices are (P, C);
  * float32 is the storage dtype, but every op preserves the dtype of its
    inputs so the exact same code paths can be exercised in float64
    (gradient checks do this to control finite-difference roundoff).

Backward passes are hand-written per operation; there is no autograd.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float32


def as_tensor(data, dtype=DTYPE) -> np.ndarray:
    """Checked tensor constructor: rank 1-4, finite entries, contiguous."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if arr.ndim < 1 or arr.ndim > 4:
        raise ShapeError(f"tensor rank must be 1-4, got {arr.ndim}")
    require_finite(arr, "tensor")
    return arr


def require_finite(arr: np.ndarray, what: str = "array") -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{what} contains non-finite values")


# ---------------------------------------------------------------------------
# Deterministic random streams
# ---------------------------------------------------------------------------


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    if isinstance(tag, str):
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "little")
    raise TypeError(f"rng tag must be int or str, got {type(tag)!r}")


class Rng:
    """Deterministic counter-based random stream (Philox).

    Streams are identified by a 64-bit seed plus a path of int/str tags.
    Derivation is pure: the same (seed, path) always yields the same stream,
    regardless of thread scheduling or call order, so per-client and
    per-round generators can be rebuilt at any time (e.g. when resuming a
    checkpointed run) without serializing generator state.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._path = tuple(_path)
        self._gen: np.random.Generator | None = None

    def child(self, *tags) -> "Rng":
        return Rng(self.seed, self._path + tuple(_tag_to_int(t) for t in tags))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def normal(self, shape, std: float = 1.0, dtype=DTYPE) -> np.ndarray:
        return (self.generator.standard_normal(shape) * std).astype(dtype)

    def uniform(self, low: float, high: float, shape, dtype=DTYPE) -> np.ndarray:
        return self.generator.uniform(low, high, shape).astype(dtype)

    def integers(self, low: int, high: int | None = None) -> int:
        return int(self.generator.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def dirichlet(self, alpha: np.ndarray) -> np.ndarray:
        return self.generator.dirichlet(alpha)

    def choice_weighted(self, weights: np.ndarray) -> int:
        """Index drawn proportionally to nonnegative weights."""
        total = float(weights.sum())
        if total <= 0.0:
            return self.integers(0, len(weights))
        u = self.generator.uniform(0.0, total)
        return int(np.searchsorted(np.cumsum(weights), u, side="right").clip(0, len(weights) - 1))


def xavier_uniform(rng: Rng, fan_in: int, fan_out: int, shape, dtype=DTYPE) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape, dtype=dtype)


def xavier_normal(rng: Rng, fan_in: int, fan_out: int, shape, dtype=DTYPE) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(shape, std=std, dtype=dtype)


# ---------------------------------------------------------------------------
# 1x1 convolution (per-pixel linear map)
# ---------------------------------------------------------------------------


def conv1x1_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Per-pixel linear map: out[h, w, :] = x[h, w, :] @ weight + bias."""
    if x.ndim != 3:
        raise ShapeError(f"conv1x1 input must be (H, W, Cin), got {x.shape}")
    if weight.ndim != 2 or weight.shape[0] != x.shape[2]:
        raise ShapeError(f"weight {weight.shape} incompatible with input {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias {bias.shape} incompatible with weight {weight.shape}")
    h, w, cin = x.shape
    out = x.reshape(h * w, cin) @ weight + bias
    return out.reshape(h, w, weight.shape[1])


def conv1x1_backward(
    x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of conv1x1_forward w.r.t. input, weight and bias."""
    if grad_out.shape != x.shape[:2] + (weight.shape[1],):
        raise ShapeError(f"grad {grad_out.shape} incompatible with forward shapes")
    h, w, cin = x.shape
    g = grad_out.reshape(h * w, weight.shape[1])
    xf = x.reshape(h * w, cin)
    grad_x = (g @ weight.T).reshape(x.shape)
    grad_weight = xf.T @ g
    grad_bias = g.sum(axis=0)
    return grad_x, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# Bilinear resize (align-corners)
# ---------------------------------------------------------------------------


def _resize_axis_coords(n_in: int, n_out: int, dtype):
    """Source coordinates for align-corners bilinear resampling."""
    if n_out == 1 or n_in == 1:
        src = np.zeros(n_out, dtype=dtype)
    else:
        src = np.arange(n_out, dtype=dtype) * ((n_in - 1) / (n_out - 1))
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(dtype)
    return lo, hi, frac


def bilinear_resize(x: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear interpolation of an (H, W, C) map to target dims."""
    if x.ndim != 3:
        raise ShapeError(f"resize input must be (H, W, C), got {x.shape}")
    h0, w0 = int(target[0]), int(target[1])
    if h0 < 1 or w0 < 1:
        raise ShapeError(f"target extents must be >= 1, got {target}")
    h, w, _ = x.shape
    if (h0, w0) == (h, w):
        return x.copy()
    y0, y1, fy = _resize_axis_coords(h, h0, x.dtype)
    x0, x1, fx = _resize_axis_coords(w, w0, x.dtype)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    # lerp form a + f*(b - a) keeps constant inputs exactly constant
    top = x[y0][:, x0]
    top = top + fx * (x[y0][:, x1] - top)
    bot = x[y1][:, x0]
    bot = bot + fx * (x[y1][:, x1] - bot)
    return top + fy * (bot - top)


# ---------------------------------------------------------------------------
# Pairwise Euclidean distances
# ---------------------------------------------------------------------------


def pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """d[p, q] = ||a_p - b_q||_2 for patch matrices (P, C) and (Q, C).

    Uses explicit differences rather than the |a|^2 + |b|^2 - 2ab expansion
    so that identical rows give an exact 0.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("pairwise_dist expects 2-D patch matrices")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"patch dims differ: {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("pqc,pqc->pq", diff, diff))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-tensor Adam buffers; mutated only by its owning client."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4

    @classmethod
    def init_like(cls, param: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
                  beta2: float = 0.999, eps: float = 1e-8,
                  weight_decay: float = 5e-4) -> "AdamState":
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        zeros = np.zeros_like(param)
        return cls(m=zeros.copy(), v=zeros.copy(), step=0, lr=lr, beta1=beta1,
                   beta2=beta2, eps=eps, weight_decay=weight_decay)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One classic Adam update with bias correction; L2 weight decay is folded
    into the gradient. Returns the new parameter array; state is mutated."""
    if grad.shape != param.shape:
        raise ShapeError(f"grad shape {grad.shape} != param shape {param.shape}")
    if not np.isfinite(grad).all():
        raise NumericError("non-finite gradient passed to adam_step")
    g = grad + state.weight_decay * param if state.weight_decay else grad
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Finite differences (gradient-check oracle)
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad = np.zeros_like(x, dtype=np.float64)
    flat = grad.reshape(-1)
    xw = x.copy()
    xf = xw.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        fp = float(f(xw))
        xf[i] = orig - eps
        fm = float(f(xw))
        xf[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite function value in finite_diff_grad")
        flat[i] = (fp - fm) / (2.0 * eps)
    return grad.astype(x.dtype)
