"""Encoders for the three modalities.

The text and image branches are frozen: deterministic functions of a seeded
spec, never touched by training.  The point-cloud branch is the trainable
one; it runs on the differentiation tape.  View embeddings add fixed
sinusoidal angle/depth tables to frozen image features and re-normalize.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import N_ANGLE_BUCKETS, PointCloud, ViewRecord, angle_bucket
from .errors import ConfigError, InputError, ShapeError

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_RASTER_SIDE = 16  # frozen image path reduces rasters to 16 x 16 grayscale


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


# ---------------------------------------------------------------------------
# frozen text / image stubs


@dataclass(frozen=True)
class FrozenEncoderSpec:
    """Fixed tables and projections for the frozen branches.

    Everything is derived from (seed, dim, vocab_size) at construction;
    encoding is a pure function of (spec, input).
    """

    seed: int
    dim: int
    vocab_size: int = 4096
    token_table: np.ndarray = field(init=False, repr=False)
    text_proj: np.ndarray = field(init=False, repr=False)
    image_proj: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError(f"feature dim must be >= 2, got {self.dim}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        rng = np.random.Generator(np.random.PCG64(int(self.seed)))
        object.__setattr__(self, "token_table",
                           rng.normal(size=(self.vocab_size, self.dim)) / math.sqrt(self.dim))
        object.__setattr__(self, "text_proj",
                           rng.normal(size=(self.dim, self.dim)) / math.sqrt(self.dim))
        object.__setattr__(self, "image_proj",
                           rng.normal(size=(_RASTER_SIDE * _RASTER_SIDE, self.dim)) / _RASTER_SIDE)


def _hash_token(token: str, vocab_size: int) -> int:
    # blake2b, not hash(): Python string hashing is salted per process
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % vocab_size


def encode_text_frozen(text: str, spec: FrozenEncoderSpec) -> np.ndarray:
    """Unit-norm D-vector for a string: hash tokens, mean-pool, project."""
    if not isinstance(text, str) or not text:
        raise InputError("text must be a nonempty string")
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        raise InputError(f"text {text!r} has no tokens")
    rows = spec.token_table[[_hash_token(t, spec.vocab_size) for t in tokens]]
    pooled = rows.mean(axis=0)
    return _unit_rows(pooled @ spec.text_proj)


def _block_mean_16(gray: np.ndarray) -> np.ndarray:
    """Area mean over a 16 x 16 partition of the image (uneven blocks allowed)."""
    h, w = gray.shape
    row_edges = np.linspace(0, h, _RASTER_SIDE + 1).astype(int)
    col_edges = np.linspace(0, w, _RASTER_SIDE + 1).astype(int)
    sums = np.add.reduceat(np.add.reduceat(gray, row_edges[:-1], axis=0), col_edges[:-1], axis=1)
    areas = np.outer(np.diff(row_edges), np.diff(col_edges))
    return sums / np.maximum(areas, 1)


def encode_image_frozen(view: ViewRecord, spec: FrozenEncoderSpec) -> np.ndarray:
    """Unit-norm D-vector for a view; all-zero inputs stay at zero."""
    if view.feature is not None:
        feat = np.asarray(view.feature, dtype=np.float64).reshape(-1)
        if feat.shape[0] != spec.dim:
            raise ShapeError(f"view feature has dim {feat.shape[0]}, spec expects {spec.dim}")
        return _unit_rows(feat)
    if view.raster is None:
        raise InputError("view has no payload")
    raster = np.asarray(view.raster, dtype=np.float64)
    if raster.ndim != 3 or raster.shape[0] < 1 or raster.shape[1] < 1:
        raise ShapeError(f"raster must be H x W x C, got {raster.shape}")
    gray = raster.mean(axis=2) / 255.0
    if gray.shape[0] < _RASTER_SIDE or gray.shape[1] < _RASTER_SIDE:
        # small rasters are tiled up by repetition before block averaging
        reps = (math.ceil(_RASTER_SIDE / gray.shape[0]), math.ceil(_RASTER_SIDE / gray.shape[1]))
        gray = np.tile(gray, reps)
    pooled = _block_mean_16(gray).reshape(-1)
    return _unit_rows(pooled @ spec.image_proj)


# ---------------------------------------------------------------------------
# view embedding


@dataclass(frozen=True)
class ViewEmbeddingTables:
    """Two fixed sinusoidal tables over the 30 angle buckets.

    The depth family is phase-shifted by pi/4 so the tables are distinct.
    Amplitude is 1/sqrt(dim), matching the per-coordinate scale of a unit
    feature vector so neither additive term drowns the other.
    """

    degree: np.ndarray
    depth: np.ndarray

    @classmethod
    def build(cls, dim: int, scale: float | None = None) -> "ViewEmbeddingTables":
        if dim < 2:
            raise ConfigError(f"embedding dim must be >= 2, got {dim}")
        amp = (1.0 / math.sqrt(dim)) if scale is None else float(scale)
        pos = np.arange(N_ANGLE_BUCKETS, dtype=np.float64)[:, None]
        i = np.arange(dim, dtype=np.float64)[None, :]
        freq = np.power(10000.0, -2.0 * np.floor(i / 2.0) / dim)
        phase = np.where(i % 2 == 0, 0.0, np.pi / 2.0)  # sin on even, cos on odd
        degree = amp * np.sin(pos * freq + phase)
        depth = amp * np.sin(pos * freq + phase + np.pi / 4.0)
        return cls(degree, depth)


def embed_view(feature, angle_deg: int, tables: ViewEmbeddingTables):
    """Angle-aware view embedding: normalize(feature + degree[b] + depth[b]).

    Accepts a Tensor or an array; constants stay off the tape.
    """
    bucket = angle_bucket(angle_deg)
    t = feature if isinstance(feature, ad.Tensor) else ad.constant(np.atleast_2d(feature))
    if t.values.shape[-1] != tables.degree.shape[1]:
        raise ShapeError(f"feature dim {t.values.shape[-1]} does not match tables dim {tables.degree.shape[1]}")
    shift = ad.constant((tables.degree[bucket] + tables.depth[bucket])[None, :])
    return ad.layer_norm(ad.add(t, shift))


# ---------------------------------------------------------------------------
# trainable point encoder


@dataclass(frozen=True)
class PointEncoderParams:
    """Tape-registered weights: shared per-point MLP 3 -> h -> h, then a
    projection head h -> D after symmetric pooling."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor
    wp: ad.Tensor
    bp: ad.Tensor

    @property
    def hidden(self) -> int:
        return self.w1.values.shape[1]

    @property
    def dim(self) -> int:
        return self.wp.values.shape[1]


def init_point_encoder(tape: ad.Tape, hidden: int, dim: int, rng, prefix: str = "point") -> PointEncoderParams:
    """Register freshly initialized encoder weights on a tape."""
    if hidden < 1 or dim < 1:
        raise ConfigError(f"hidden and dim must be >= 1, got {hidden}, {dim}")

    def make(name, shape, fan_in):
        return tape.parameter(f"{prefix}.{name}", rng.normal(size=shape) / math.sqrt(fan_in))

    return PointEncoderParams(
        w1=make("w1", (3, hidden), 3),
        b1=tape.parameter(f"{prefix}.b1", np.zeros((1, hidden))),
        w2=make("w2", (hidden, hidden), hidden),
        b2=tape.parameter(f"{prefix}.b2", np.zeros((1, hidden))),
        wp=make("wp", (hidden, dim), hidden),
        bp=tape.parameter(f"{prefix}.bp", np.zeros((1, dim))),
    )


POINT_PARAM_NAMES = ("w1", "b1", "w2", "b2", "wp", "bp")


def point_encoder_from_values(tape: ad.Tape, values: dict[str, np.ndarray],
                              prefix: str = "point") -> PointEncoderParams:
    """Register existing weight arrays (e.g. from a checkpoint) on a tape."""
    return PointEncoderParams(**{
        name: tape.parameter(f"{prefix}.{name}", values[f"{prefix}.{name}"])
        for name in POINT_PARAM_NAMES
    })


def encode_point_cloud(cloud: PointCloud, params: PointEncoderParams) -> ad.Tensor:
    """Unit-norm 1 x D feature; exactly invariant to point order.

    Every per-point operation is row-local and the pooling is a coordinate
    max, so permuting input rows cannot change a single output bit.
    """
    pts = cloud.points
    if pts.shape[0] < 1:
        raise InputError("empty point cloud")
    x = ad.constant(pts)
    h1 = ad.tanh(ad.add(ad.matmul(x, params.w1), params.b1))
    h2 = ad.tanh(ad.add(ad.matmul(h1, params.w2), params.b2))
    pooled = ad.max_pool_rows(h2)
    projected = ad.add(ad.matmul(pooled, params.wp), params.bp)
    return ad.l2_normalize(projected)
