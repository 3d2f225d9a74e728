"""Frozen feature pyramid, multi-level fusion and the trainable projection.

The pretrained backbone is abstracted behind `ExtractorSpec`: the synthetic
kind builds an L-level pyramid from fixed seeded 1x1 channel mixing, 2x2
mean-pool downsampling and a tanh nonlinearity; the file kind loads
precomputed pyramids from FDMC containers listed in a JSON manifest. Both
are frozen: outputs depend only on (sample, spec) and never change across
training rounds.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .errors import ShapeError
from .numerics import Rng, bilinear_resize, conv1x1_backward, conv1x1_forward, require_finite, xavier_uniform

DTYPE = np.float32
SAMPLE_CHANNELS = 3


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str = "synthetic"
    seed: int = 0
    levels: int = 3
    base_hw: tuple[int, int] = (16, 16)
    level_channels: tuple[int, ...] = (32, 64, 128)
    manifest_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "file"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.kind == "synthetic":
            if self.levels < 1:
                raise ValueError("levels must be >= 1")
            if len(self.level_channels) != self.levels:
                raise ValueError("level_channels must have one entry per level")
            if any(c < 1 for c in self.level_channels):
                raise ValueError("level channel counts must be >= 1")
            div = 2 ** (self.levels - 1)
            if self.base_hw[0] % div or self.base_hw[1] % div:
                raise ValueError(f"base dims {self.base_hw} must be divisible by {div}")
        elif self.manifest_path is None:
            raise ValueError("file extractor requires manifest_path")

    @property
    def fused_channels(self) -> int:
        if self.kind == "synthetic":
            return int(sum(self.level_channels))
        pyramids = _manifest_index(self.manifest_path)
        first = read_pyramid(next(iter(pyramids.values())))
        return int(sum(lvl.shape[2] for lvl in first.levels))


@dataclass
class FeaturePyramid:
    """L per-level feature maps, spatial extents nonincreasing with level."""

    levels: list[np.ndarray]
    provenance: str = ""

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("pyramid must have at least one level")
        prev = None
        for lvl in self.levels:
            if lvl.ndim != 3:
                raise ShapeError(f"pyramid level must be (H, W, C), got {lvl.shape}")
            if prev is not None and (lvl.shape[0] > prev[0] or lvl.shape[1] > prev[1]):
                raise ShapeError("pyramid spatial extents must be nonincreasing")
            prev = lvl.shape


@functools.lru_cache(maxsize=32)
def _synthetic_weights(spec: ExtractorSpec) -> tuple[np.ndarray, ...]:
    """Fixed per-level 1x1 mixing weights, drawn once from the spec seed."""
    rng = Rng(spec.seed)
    weights = []
    cin = SAMPLE_CHANNELS
    for level, cout in enumerate(spec.level_channels):
        w = rng.child("extractor_mix", level).normal((cin, cout), std=1.0 / np.sqrt(cin))
        weights.append(w)
        cin = cout
    return tuple(weights)


def _mean_pool2(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"mean-pool needs even extents, got {x.shape}")
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


@functools.lru_cache(maxsize=8)
def _manifest_index(manifest_path: str) -> dict[str, str]:
    entries = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    return {e.sample_id: str(base / e.path) for e in entries}


def extract_pyramid(sample, spec: ExtractorSpec) -> FeaturePyramid:
    """Frozen multi-level features for one sample.

    Synthetic kind takes the raw (H, W, 3) tensor; the file kind takes a
    sample id and loads the precomputed pyramid from the spec's manifest.
    """
    if spec.kind == "file":
        index = _manifest_index(spec.manifest_path)
        if sample not in index:
            raise FileNotFoundError(f"sample id {sample!r} not in manifest {spec.manifest_path}")
        return read_pyramid(index[sample])

    x = np.asarray(sample, dtype=DTYPE)
    if x.shape != (spec.base_hw[0], spec.base_hw[1], SAMPLE_CHANNELS):
        raise ShapeError(f"sample {x.shape} does not match spec base dims {spec.base_hw}")
    require_finite(x, "sample")
    levels = []
    cur = x
    for w in _synthetic_weights(spec):
        if levels:
            cur = _mean_pool2(cur)
        cur = np.tanh(cur @ w)
        levels.append(cur)
    return FeaturePyramid(levels=levels, provenance=f"synthetic:{spec.seed}")


def fuse_pyramid(p: FeaturePyramid) -> np.ndarray:
    """Resize every level to level-0 dims and concatenate along channels."""
    h0, w0 = p.levels[0].shape[:2]
    parts = [lvl if lvl.shape[:2] == (h0, w0) else bilinear_resize(lvl, (h0, w0))
             for lvl in p.levels]
    return np.concatenate(parts, axis=2)


# ---------------------------------------------------------------------------
# Trainable projection
# ---------------------------------------------------------------------------


@dataclass
class ProjectionParams:
    weight: np.ndarray  # (Cin, C)
    bias: np.ndarray    # (C,)


def init_projection(rng: Rng, cin: int, c: int) -> ProjectionParams:
    return ProjectionParams(
        weight=xavier_uniform(rng, cin, c, (cin, c)),
        bias=np.zeros(c, dtype=DTYPE),
    )


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0)
    if activation == "tanh":
        return np.tanh(pre)
    raise ValueError(f"unknown activation {activation!r}")


def _activate_backward(out: np.ndarray, grad_out: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return grad_out * (out > 0)
    if activation == "tanh":
        return grad_out * (1.0 - out * out)
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class ProjectionCache:
    fused: np.ndarray
    out: np.ndarray
    activation: str


def project_forward(fused: np.ndarray, params: ProjectionParams,
                    activation: str = "relu") -> tuple[np.ndarray, ProjectionCache]:
    if fused.shape[-1] != params.weight.shape[0]:
        raise ShapeError(
            f"fused channels {fused.shape[-1]} != projection input {params.weight.shape[0]}")
    out = _activate(conv1x1_forward(fused, params.weight, params.bias), activation)
    return out, ProjectionCache(fused=fused, out=out, activation=activation)


def project(fused: np.ndarray, params: ProjectionParams, activation: str = "relu") -> np.ndarray:
    """Trainable per-pixel projection with nonlinearity: sigma(conv1x1(fused))."""
    return project_forward(fused, params, activation)[0]


def project_backward(cache: ProjectionCache, grad_out: np.ndarray,
                     params: ProjectionParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (w.r.t. fused input, weight, bias) of `project`."""
    grad_pre = _activate_backward(cache.out, grad_out, cache.activation)
    return conv1x1_backward(cache.fused, params.weight, grad_pre)


# ---------------------------------------------------------------------------
# Pyramid / manifest persistence
# ---------------------------------------------------------------------------


def write_pyramid(path: str | Path, p: FeaturePyramid) -> int:
    sections = {f"level{i}": lvl for i, lvl in enumerate(p.levels)}
    return tensorio.write_container(path, sections)


def read_pyramid(path: str | Path) -> FeaturePyramid:
    sections = tensorio.read_container(path)
    names = sorted(sections, key=lambda n: int(n.removeprefix("level")))
    return FeaturePyramid(levels=[sections[n] for n in names], provenance=str(path))


@dataclass
class ManifestEntry:
    sample_id: str
    path: str
    label: int
    mask_path: str | None = None


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    doc = []
    for e in entries:
        row = {"sample_id": e.sample_id, "path": e.path, "label": e.label}
        if e.mask_path is not None:
            row["mask_path"] = e.mask_path
        doc.append(row)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    doc = json.loads(Path(path).read_text())
    return [ManifestEntry(sample_id=row["sample_id"], path=row["path"],
                          label=int(row["label"]), mask_path=row.get("mask_path"))
            for row in doc]
