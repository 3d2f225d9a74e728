"""Client-side training: metric loss against the received global bank,
memory extraction over the local dataset, and memory-reduce.

A client never shares raw samples. Per round it (1) trains the projection
and generator so local memory features align with the bank from the previous
round, (2) extracts memory features for every local sample with the trained
weights, and (3) compresses them into one bank-sized tensor via
distance-weighted averaging plus a round-indexed EMA.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .features import ProjectionParams, project_backward, project_forward
from .generator import GeneratorParams, generator_backward, generator_forward
from .numerics import AdamState, Rng, adam_step, pairwise_dist

DTYPE = np.float32


@dataclass
class MemoryBank:
    """Fixed-size set of patch features; (H, W, C) with HW patches of dim C."""

    data: np.ndarray
    round_index: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"bank must be (H, W, C), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ShapeError("bank contains non-finite patches")

    @property
    def patches(self) -> np.ndarray:
        return self.data.reshape(-1, self.data.shape[2])

    @property
    def size(self) -> int:
        return self.data.shape[0] * self.data.shape[1]

    def copy(self) -> "MemoryBank":
        return MemoryBank(data=self.data.copy(), round_index=self.round_index)


@dataclass
class LossConfig:
    hinge_margin: float = 0.01
    knn_k: int = 3
    batch_size: int = 10
    learning_rate: float = 1e-3
    local_epochs: int = 1
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    activation: str = "relu"

    def __post_init__(self):
        if self.hinge_margin < 0:
            raise ValueError("hinge_margin must be >= 0")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")


@dataclass
class ClientDataset:
    """Local samples with their frozen fused features, precomputed once."""

    fused: list[np.ndarray]
    sample_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.fused)


@dataclass
class ClientModelState:
    client_id: int
    projection: ProjectionParams
    generator: GeneratorParams
    adam: dict[str, AdamState]
    local_bank: MemoryBank | None = None


PARAM_NAMES = (
    "proj_w", "proj_b",
    "coord_w", "coord_b",
    "phi1_w", "phi1_b",
    "phi2_w", "phi2_b",
    "out_w", "out_b",
    "grid",
)


def named_params(state: ClientModelState) -> dict[str, np.ndarray]:
    p, g = state.projection, state.generator
    return {
        "proj_w": p.weight, "proj_b": p.bias,
        "coord_w": g.coord_w, "coord_b": g.coord_b,
        "phi1_w": g.phi1_w, "phi1_b": g.phi1_b,
        "phi2_w": g.phi2_w, "phi2_b": g.phi2_b,
        "out_w": g.out_w, "out_b": g.out_b,
        "grid": g.grid,
    }


def set_param(state: ClientModelState, name: str, value: np.ndarray) -> None:
    if name == "proj_w":
        state.projection.weight = value
    elif name == "proj_b":
        state.projection.bias = value
    elif name == "grid":
        state.generator.grid = value
    else:
        setattr(state.generator, name, value)


def init_adam_states(state: ClientModelState, cfg: LossConfig) -> None:
    state.adam = {
        name: AdamState.init_like(param, lr=cfg.learning_rate, beta1=cfg.beta1,
                                  beta2=cfg.beta2, eps=cfg.adam_eps,
                                  weight_decay=cfg.weight_decay)
        for name, param in named_params(state).items()
    }


# ---------------------------------------------------------------------------
# KNN and metric loss
# ---------------------------------------------------------------------------


def knn_lookup(patches: np.ndarray, bank: MemoryBank, k: int) -> tuple[np.ndarray, np.ndarray]:
    """K nearest bank entries per patch: (indices, distances), ascending,
    ties broken toward the lower bank index."""
    if k > bank.size:
        raise ValueError(f"k={k} exceeds bank size {bank.size}")
    d = pairwise_dist(patches, bank.patches)
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d, idx, axis=1)


def metric_loss(m: np.ndarray, bank: MemoryBank,
                cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Hinge loss over each patch's K nearest bank entries, and its gradient
    w.r.t. the memory feature.

    loss = mean over (patch, k) of max(0, dist - margin). The bank and the
    neighbor selection are treated as constants: gradient flows only through
    the distances back to the memory feature.
    """
    h, w, c = m.shape
    if c != bank.data.shape[2]:
        raise ShapeError(f"memory channels {c} != bank channels {bank.data.shape[2]}")
    patches = m.reshape(h * w, c)
    idx, dist = knn_lookup(patches, bank, cfg.knn_k)
    margin = cfg.hinge_margin
    active = dist > margin
    denom = float(h * w * cfg.knn_k)
    loss = float(np.where(active, dist - margin, 0.0).sum() / denom)

    neighbors = bank.patches[idx]                       # (P, K, C)
    diff = patches[:, None, :] - neighbors
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where((active & (dist > 0))[..., None], diff / dist[..., None], 0.0)
    grad_patches = unit.sum(axis=1) / denom
    return loss, grad_patches.reshape(h, w, c).astype(m.dtype)


# ---------------------------------------------------------------------------
# Forward/backward through the whole client model
# ---------------------------------------------------------------------------


def _forward_backward(state: ClientModelState, fused: np.ndarray, bank: MemoryBank,
                      cfg: LossConfig) -> tuple[float, dict[str, np.ndarray]]:
    projected, proj_cache = project_forward(fused, state.projection, cfg.activation)
    m, gen_cache = generator_forward(projected, state.generator)
    loss, grad_m = metric_loss(m, bank, cfg)
    gen_grads = generator_backward(gen_cache, grad_m)
    _, g_proj_w, g_proj_b = project_backward(proj_cache, gen_grads.input, state.projection)
    grads = {
        "proj_w": g_proj_w, "proj_b": g_proj_b,
        "coord_w": gen_grads.coord_w, "coord_b": gen_grads.coord_b,
        "phi1_w": gen_grads.phi1_w, "phi1_b": gen_grads.phi1_b,
        "phi2_w": gen_grads.phi2_w, "phi2_b": gen_grads.phi2_b,
        "out_w": gen_grads.out_w, "out_b": gen_grads.out_b,
        "grid": gen_grads.grid,
    }
    return loss, grads


def forward_memory(state: ClientModelState, fused: np.ndarray,
                   activation: str = "relu") -> np.ndarray:
    """Inference-only pass: fused features -> memory feature."""
    projected, _ = project_forward(fused, state.projection, activation)
    return generator_forward(projected, state.generator)[0]


def client_update(state: ClientModelState, dataset: ClientDataset, cfg: LossConfig,
                  round_t: int, rng: Rng) -> tuple[list[float], list[float]]:
    """Local epochs of batched training against the client's current bank.

    Returns (per-batch loss trace, per-batch squared gradient norm trace);
    trace length is local_epochs * ceil(len(dataset) / batch_size).
    """
    if len(dataset) == 0:
        raise ValueError("client dataset is empty")
    if state.local_bank is None:
        raise ValueError("client has no bank; run initialization first")
    bank = state.local_bank
    loss_trace: list[float] = []
    grad_sq_trace: list[float] = []
    n = len(dataset)
    for epoch in range(cfg.local_epochs):
        order = rng.child("shuffle", round_t, epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc: dict[str, np.ndarray] = {}
            batch_loss = 0.0
            for i in batch:
                loss, grads = _forward_backward(state, dataset.fused[i], bank, cfg)
                batch_loss += loss
                for name, g in grads.items():
                    acc[name] = acc.get(name, 0.0) + g
            scale = 1.0 / len(batch)
            batch_loss *= scale
            grad_sq = 0.0
            params = named_params(state)
            for name in PARAM_NAMES:
                g = acc[name] * scale
                grad_sq += float((g.astype(np.float64) ** 2).sum())
                set_param(state, name, adam_step(params[name], g, state.adam[name]))
            loss_trace.append(batch_loss)
            grad_sq_trace.append(grad_sq)
    return loss_trace, grad_sq_trace


def extract_all_memories(state: ClientModelState, dataset: ClientDataset,
                         activation: str = "relu") -> list[np.ndarray]:
    """Pure inference pass over the dataset in manifest order."""
    return [forward_memory(state, f, activation) for f in dataset.fused]


# ---------------------------------------------------------------------------
# Memory-reduce
# ---------------------------------------------------------------------------


def memory_reduce(memories: list[np.ndarray], prev_bank: MemoryBank | None,
                  t: int) -> MemoryBank:
    """Compress per-sample memory features into one bank-sized tensor.

    Round 0 uses uniform weights; later rounds weight each memory by the
    Frobenius norm of its difference from the previous bank, then blend the
    weighted mean with the previous bank using alpha = 1 / (t + 1). If every
    memory coincides with the previous bank (all weights zero) the weights
    fall back to uniform, the limit of the weighting as distances vanish.
    """
    if not memories:
        raise ValueError("memory_reduce needs at least one memory feature")
    if t == 0:
        if prev_bank is not None:
            raise ValueError("round 0 must not have a previous bank")
    elif prev_bank is None:
        raise ValueError(f"round {t} requires the previous bank")

    shape = memories[0].shape
    for m in memories:
        if m.shape != shape:
            raise ShapeError("memory features must share one shape")

    stack = np.stack(memories).astype(np.float64)
    if t == 0:
        weights = np.ones(len(memories), dtype=np.float64)
    else:
        diff = stack - prev_bank.data.astype(np.float64)
        weights = np.sqrt((diff * diff).sum(axis=(1, 2, 3)))
        if weights.sum() == 0.0:
            weights = np.ones(len(memories), dtype=np.float64)

    mean = np.tensordot(weights, stack, axes=1) / weights.sum()
    if t > 0:
        alpha = 1.0 / (t + 1)
        mean = alpha * mean + (1.0 - alpha) * prev_bank.data.astype(np.float64)
    return MemoryBank(data=mean.astype(DTYPE), round_index=t)


def max_patch_norm(arr: np.ndarray) -> float:
    """Largest L2 norm over the HW patch vectors of an (H, W, C) tensor."""
    flat = arr.reshape(-1, arr.shape[-1]).astype(np.float64)
    return float(np.sqrt((flat * flat).sum(axis=1)).max())
