"""Optimization loop: AdamW with decoupled weight decay, cosine learning
rate, seeded batching with per-epoch view resampling, ablation switches,
and a versioned binary checkpoint.

Determinism contract: a (config, seed, dataset) triple fixes every random
draw.  The single generator is consumed in a documented order: point
encoder init, head init, then per epoch one shuffle followed by one view
draw per sample in shuffle order.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import alignment as al
from . import autodiff as ad
from .data import CategoryTree, LoadedDataset, TripletSample, resolve_label, sample_within_window
from .encoders import (FrozenEncoderSpec, ViewEmbeddingTables, embed_view,
                       encode_image_frozen, encode_point_cloud, encode_text_frozen,
                       init_point_encoder, point_encoder_from_values)
from .errors import ConfigError, ContractError, InputError, ShapeError
from .evaluation import PromptTemplate


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    base_lr: float = 1e-3
    epochs: int = 250
    v_views: int = 2
    omega_deg: float = 60.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    cis_on: bool = True
    htt_on: bool = True
    jma_on: bool = True
    embeddings_on: bool = True
    within_view_on: bool = True
    point_hidden: int = 64
    head_hidden: int = 64
    tau_init: float = 0.07
    frozen_seed: int = 7
    prompt: str = "a point cloud of [CLASS]"
    normalize_before_nce: bool = True
    symmetric_nce: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 (contrastive loss needs negatives), got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.v_views < 1:
            raise ConfigError(f"v_views must be >= 1, got {self.v_views}")
        if self.base_lr <= 0 or self.omega_deg <= 0 or self.tau_init <= 0 or self.adam_eps <= 0:
            raise ConfigError("base_lr, omega_deg, tau_init, adam_eps must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.point_hidden < 1 or self.head_hidden < 1:
            raise ConfigError("hidden widths must be >= 1")
        PromptTemplate(self.prompt)
        self.loss_weights()

    def loss_weights(self) -> al.LossWeights:
        """Effective contrastive weights; with fusion off the text-to-view
        term trains nothing (both sides frozen), so it is dropped."""
        if self.jma_on:
            return al.LossWeights(self.lambda1, self.lambda2, self.lambda3)
        return al.LossWeights(self.lambda1, self.lambda2, 0.0)


# ---------------------------------------------------------------------------
# optimizer


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * (1 + cos(pi * step / total_steps)) / 2, no warmup."""
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   step=0)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.01) -> None:
    """One decoupled-weight-decay update, in place on params and state."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter is {p.shape}")
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# frozen-side preparation (computed once, reused every epoch)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


@dataclass(frozen=True, eq=False)
class _Prepped:
    sample: TripletSample
    parent_idx: int
    view_rows: np.ndarray  # V x D, already embedded or plainly normalized
    row_of: dict[int, int]  # id(ViewRecord) -> row
    text_row: np.ndarray  # 1 x D unit


def _prepare_frozen(dataset: LoadedDataset, config: TrainConfig,
                    spec: FrozenEncoderSpec, tables: ViewEmbeddingTables) -> list[_Prepped]:
    template = PromptTemplate(config.prompt)
    apply_embeddings = config.cis_on and config.embeddings_on
    text_cache: dict[str, np.ndarray] = {}
    prepped = []
    for sample in dataset.samples:
        p_idx, leaf_idx = resolve_label(sample, dataset.tree)
        # the fine-grained target needs the tree; without it prompts name
        # the parent category only
        label = dataset.tree.leaf_names[leaf_idx] if config.htt_on else dataset.tree.parents[p_idx]
        text = text_cache.get(label)
        if text is None:
            text = encode_text_frozen(template.instantiate(label), spec)[None, :]
            text_cache[label] = text
        raw = np.stack([encode_image_frozen(vw, spec) for vw in sample.views])
        if apply_embeddings:
            rows = np.concatenate([embed_view(raw[i], vw.angle_deg, tables).values
                                   for i, vw in enumerate(sample.views)])
        else:
            rows = ad.layer_norm(ad.constant(raw)).values
        prepped.append(_Prepped(
            sample=sample, parent_idx=p_idx, view_rows=rows,
            row_of={id(vw): i for i, vw in enumerate(sample.views)},
            text_row=text,
        ))
    return prepped


def _select_rows(p: _Prepped, config: TrainConfig, rng) -> list[int]:
    """Row indices of this step's views, consuming rng in a fixed order."""
    n = len(p.sample.views)
    if not config.cis_on:
        return [int(rng.integers(n))]
    v = min(config.v_views, n)
    if not config.within_view_on:
        return sorted(int(i) for i in rng.choice(n, size=v, replace=False))
    picked = sample_within_window(p.sample.views, v, config.omega_deg, rng)
    return [p.row_of[id(vw)] for vw in picked]


def _fused_row(rows: np.ndarray, text_row: np.ndarray, jma_on: bool) -> np.ndarray:
    if jma_on:
        return al.jma_fuse(ad.constant(rows), ad.constant(text_row)).values
    return rows.mean(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# checkpoint

CHECKPOINT_MAGIC = b"JM3DCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate: config echo, label tree,
    parameters, optimizer moments, step counter, loss history."""

    config: dict
    tree_pairs: list
    dim: int
    step: int
    losses: list
    params: dict
    opt_m: dict
    opt_v: dict

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.config)

    def tree(self) -> CategoryTree:
        return CategoryTree.from_pairs(self.tree_pairs)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "config": ckpt.config,
        "tree": [[p, s] for p, s in ckpt.tree_pairs],
        "dim": int(ckpt.dim),
        "step": int(ckpt.step),
        "losses": [float(x) for x in ckpt.losses],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    arrays = [(name, arr) for name, arr in ckpt.params.items()]
    arrays += [(f"opt_m.{name}", arr) for name, arr in ckpt.opt_m.items()]
    arrays += [(f"opt_v.{name}", arr) for name, arr in ckpt.opt_v.items()]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            arr = np.asarray(arr, dtype=np.float64)
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", raw, 12)
    off = 16
    try:
        meta = json.loads(raw[off:off + blob_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: corrupt checkpoint metadata: {exc}") from None
    off += blob_len
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params: dict = {}
    opt_m: dict = {}
    opt_v: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n_items = int(np.prod(shape, dtype=np.int64))
        n_bytes = 8 * n_items
        if off + n_bytes > len(raw):
            raise InputError(f"{path}: truncated checkpoint at array {name!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=n_items, offset=off).reshape(shape).copy()
        off += n_bytes
        if name.startswith("opt_m."):
            opt_m[name[len("opt_m."):]] = arr
        elif name.startswith("opt_v."):
            opt_v[name[len("opt_v."):]] = arr
        else:
            params[name] = arr
    return Checkpoint(
        config=meta["config"],
        tree_pairs=[(p, s) for p, s in meta["tree"]],
        dim=int(meta["dim"]),
        step=int(meta["step"]),
        losses=[float(x) for x in meta["losses"]],
        params=params, opt_m=opt_m, opt_v=opt_v,
    )


# ---------------------------------------------------------------------------
# training loop


def _batch_bounds(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Contiguous batch slices into a shuffled index array; a ragged tail
    is kept when it still has the 2 rows the contrastive loss needs."""
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    return [(a, b) for a, b in bounds if b - a >= 2]


def train(dataset: LoadedDataset, config: TrainConfig, out_dir=None) -> Checkpoint:
    """Full pretraining run; returns (and optionally writes) a checkpoint.

    Frozen-side features are encoded once up front; each optimizer step
    re-registers the trainable arrays on a fresh tape, so frozen work is
    plain-numpy and never recorded.
    """
    n = len(dataset.samples)
    if n == 0:
        raise ConfigError("dataset is empty")
    if config.batch_size > n:
        raise ConfigError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    weights = config.loss_weights()
    dim = dataset.dim
    spec = FrozenEncoderSpec(seed=config.frozen_seed, dim=dim)
    tables = ViewEmbeddingTables.build(dim)
    prepped = _prepare_frozen(dataset, config, spec, tables)

    rng = np.random.default_rng(config.seed)
    init_tape = ad.Tape()
    init_point_encoder(init_tape, config.point_hidden, dim, rng)
    al.init_alignment_heads(init_tape, dim, dataset.tree.n_parents,
                            config.head_hidden, rng, config.tau_init)
    params = {name: t.values.copy() for name, t in init_tape.parameters.items()}
    opt = OptimizerState.fresh(params)

    bounds = _batch_bounds(n, config.batch_size)
    total_steps = config.epochs * len(bounds)
    epoch_losses: list[float] = []

    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        step_losses = []
        for a, b in bounds:
            batch = [prepped[i] for i in order[a:b]]
            tape = ad.Tape()
            enc = point_encoder_from_values(tape, params)
            heads = al.heads_from_values(tape, params)
            h_point = ad.concat_rows([encode_point_cloud(p.sample.cloud, enc) for p in batch])
            fused_rows = []
            text_rows = []
            parent_idx = []
            for p in batch:
                rows = p.view_rows[_select_rows(p, config, rng)]
                fused_rows.append(_fused_row(rows, p.text_row, config.jma_on))
                text_rows.append(p.text_row)
                parent_idx.append(p.parent_idx)
            h_joint = np.concatenate(fused_rows)
            h_text = np.concatenate(text_rows)
            if config.normalize_before_nce:
                h_joint = _unit_rows(h_joint)
                h_text = _unit_rows(h_text)
            loss = al.total_loss(h_point, ad.constant(h_joint), ad.constant(h_text),
                                 parent_idx, heads, weights,
                                 htt_on=config.htt_on, symmetric=config.symmetric_nce)
            grads = tape.backward(loss)
            lr = cosine_lr(opt.step, total_steps, config.base_lr)
            adamw_step(params, grads, opt, lr, config.beta1, config.beta2,
                       config.adam_eps, config.weight_decay)
            step_losses.append(loss.item())
        epoch_losses.append(float(np.mean(step_losses)))

    ckpt = Checkpoint(
        config=dataclasses.asdict(config),
        tree_pairs=dataset.tree.to_pairs(),
        dim=dim,
        step=opt.step,
        losses=epoch_losses,
        params=params,
        opt_m=opt.m,
        opt_v=opt.v,
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out_dir / "checkpoint.bin")
        with open(out_dir / "losses.jsonl", "w") as f:
            for i, x in enumerate(epoch_losses):
                f.write(json.dumps({"epoch": i, "loss": x}) + "\n")
    return ckpt


def point_features(samples, params: dict) -> np.ndarray:
    """N x D trained-encoder features for a list of samples (inference
    path: a throwaway tape per call, no gradients kept)."""
    tape = ad.Tape()
    enc = point_encoder_from_values(tape, params)
    return np.concatenate([encode_point_cloud(s.cloud, enc).values for s in samples])
