"""Batch entry points: data generation, pretraining, zero-shot evaluation,
retrieval, gradient checking, ablations, and feature export.

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 numeric failure (non-finite values or a gradient check over tolerance).
Every run prints a header with the package version, a hash of the resolved
configuration, and the seed, so reports are traceable to their inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import alignment as al
from .data import (LoadedDataset, PointCloud, load_manifest, resolve_label,
                   stratified_split, write_feature_file)
from .encoders import (FrozenEncoderSpec, ViewEmbeddingTables, embed_view,
                       encode_image_frozen, encode_point_cloud,
                       init_point_encoder, point_encoder_from_values)
from .errors import (ConfigError, ContractError, InputError, Jm3dError, LabelError,
                     ManifestError, NumericError, SamplingError, ShapeError)
from .evaluation import (PromptTemplate, accuracy_topk, build_label_features,
                         format_records, format_table, metric_record,
                         modelnet_eval_sets, retrieve_by_image, zero_shot_topk)
from .synth import SynthConfig, synth_generate
from .training import (Checkpoint, TrainConfig, load_checkpoint, point_features,
                       train)

GRADCHECK_TOLERANCE = 1e-4

ABLATION_AXES = {
    "cis": "cis_on",
    "embeddings": "embeddings_on",
    "within": "within_view_on",
    "htt": "htt_on",
    "jma": "jma_on",
}


# ---------------------------------------------------------------------------
# pipeline helpers (plain functions so tests and scripts can drive them)


def observed_leaf_classes(samples, tree) -> list[str]:
    """Leaf names that actually occur in the samples, in leaf-index order.

    Fallback leaves nobody uses stay out of the prompt list, so a fully
    subcategorized dataset is scored over its true subcategories only.
    """
    seen = set()
    for s in samples:
        _, leaf = resolve_label(s, tree)
        seen.add(leaf)
    return [tree.leaf_names[i] for i in sorted(seen)]


def gold_indices(samples, tree, classes):
    """(kept samples, gold index per kept sample) for a class list.

    A sample matches by its leaf name first, then its parent name; samples
    matching neither are skipped (evaluation sets may cover a subset).
    """
    index = {name: i for i, name in enumerate(classes)}
    kept, gold = [], []
    for s in samples:
        p_idx, leaf_idx = resolve_label(s, tree)
        leaf_name = tree.leaf_names[leaf_idx]
        parent_name = tree.parents[p_idx]
        if leaf_name in index:
            kept.append(s)
            gold.append(index[leaf_name])
        elif parent_name in index:
            kept.append(s)
            gold.append(index[parent_name])
    if not kept:
        raise LabelError("no sample matches any class in the evaluation set")
    return kept, gold


def zero_shot_records(ckpt: Checkpoint, samples, tree, classes, set_name: str,
                      topk: int, checkpoint_label: str) -> list[dict]:
    """Top-1 and top-k accuracy records for one checkpoint on one set."""
    cfg = ckpt.train_config()
    spec = FrozenEncoderSpec(seed=cfg.frozen_seed, dim=ckpt.dim)
    label_feats = build_label_features(classes, spec, PromptTemplate(cfg.prompt))
    kept, gold = gold_indices(samples, tree, classes)
    feats = point_features(kept, ckpt.params)
    k = min(topk, len(classes))
    ranked = [zero_shot_topk(f, label_feats, k) for f in feats]
    records = [metric_record(set_name, 1, accuracy_topk(ranked, gold, 1),
                             len(kept), cfg.seed, checkpoint_label)]
    if k > 1:
        records.append(metric_record(set_name, k, accuracy_topk(ranked, gold, k),
                                     len(kept), cfg.seed, checkpoint_label))
    return records


def split_dataset(dataset: LoadedDataset, held_fraction: float, seed: int):
    """Deterministic stratified split into (train dataset, held samples)."""
    rng = np.random.default_rng(seed)
    train_samples, held = stratified_split(dataset.samples, dataset.tree,
                                           held_fraction, rng)
    train_ds = LoadedDataset(manifest=dataset.manifest,
                             samples=tuple(train_samples), tree=dataset.tree)
    return train_ds, held


def run_ablation(dataset: LoadedDataset, base_config: TrainConfig, axes,
                 held_fraction: float = 0.2, topk: int = 5):
    """Train the full configuration plus one switched-off run per axis and
    score each on the same held-out split.  Returns (rows, records): rows
    are (label, top1, topk_acc, n) tuples for the comparison table."""
    bad = [a for a in axes if a not in ABLATION_AXES]
    if bad:
        raise ConfigError(f"unknown ablation axes {bad}; choose from {sorted(ABLATION_AXES)}")
    train_ds, held = split_dataset(dataset, held_fraction, base_config.seed)
    if not held:
        raise ConfigError("held-out split is empty; need more samples or a larger fraction")
    classes = observed_leaf_classes(dataset.samples, dataset.tree)
    runs = [("full", base_config)]
    runs += [(f"no-{axis}", replace(base_config, **{ABLATION_AXES[axis]: False}))
             for axis in axes]
    rows, records = [], []
    for label, cfg in runs:
        ckpt = train(train_ds, cfg)
        recs = zero_shot_records(ckpt, held, dataset.tree, classes, label, topk, label)
        top1 = recs[0]["accuracy"]
        top_k = recs[-1]["accuracy"]
        rows.append((label, top1, top_k, len(held)))
        records.extend(recs)
    return rows, records


def ablation_table(rows, topk: int) -> str:
    header = ("config", "top1", f"top{topk}", "n")
    body = [(label, f"{t1:.4f}", f"{tk:.4f}", str(n)) for label, t1, tk, n in rows]
    all_rows = [header] + body
    widths = [max(len(r[i]) for r in all_rows) for i in range(4)]
    lines = []
    for j, row in enumerate(all_rows):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def model_gradient_check(seed: int = 0, n_samples: int = 4, dim: int = 16,
                         v_views: int = 2, points: int = 32, hidden: int = 8,
                         head_hidden: int = 8, n_parents: int = 2,
                         eps: float = 1e-6) -> dict:
    """Central-difference check of the full training loss.

    Builds a tiny random batch, fixes the frozen-side features, and bumps
    every coordinate of every trainable parameter.  Returns the worst
    relative disagreement and the loss value.
    """
    rng = np.random.default_rng(seed)
    clouds = [PointCloud.from_raw(rng.normal(size=(points, 3)))
              for _ in range(n_samples)]
    tables = ViewEmbeddingTables.build(dim)
    fused_rows, text_rows = [], []
    for _ in range(n_samples):
        raw = rng.normal(size=(v_views, dim))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        angles = rng.choice(30, size=v_views, replace=False) * 12
        views = np.concatenate([embed_view(raw[i], int(angles[i]), tables).values
                                for i in range(v_views)])
        text = rng.normal(size=(1, dim))
        text /= np.linalg.norm(text)
        fused_rows.append(al.jma_fuse(ad.constant(views), ad.constant(text)).values)
        text_rows.append(text)
    h_joint = np.concatenate(fused_rows)
    h_joint /= np.linalg.norm(h_joint, axis=1, keepdims=True)
    h_text = np.concatenate(text_rows)
    parent_idx = rng.integers(n_parents, size=n_samples).tolist()
    weights = al.LossWeights(1.0, 1.0, 1.0)

    init_tape = ad.Tape()
    init_point_encoder(init_tape, hidden, dim, rng)
    al.init_alignment_heads(init_tape, dim, n_parents, head_hidden, rng)
    values = {name: t.values.copy() for name, t in init_tape.parameters.items()}

    def build(vals):
        tape = ad.Tape()
        enc = point_encoder_from_values(tape, vals)
        heads = al.heads_from_values(tape, vals)
        h_point = ad.concat_rows([encode_point_cloud(c, enc) for c in clouds])
        loss = al.total_loss(h_point, ad.constant(h_joint), ad.constant(h_text),
                             parent_idx, heads, weights, htt_on=True)
        return tape, loss

    tape, loss = build(values)
    analytic = tape.backward(loss)
    worst = 0.0
    worst_param = ""
    for name in values:
        arr = values[name]
        grad = analytic[name]
        flat = arr.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = build(values)[1].item()
            flat[i] = keep - eps
            lo = build(values)[1].item()
            flat[i] = keep
            num[i] = (hi - lo) / (2.0 * eps)
        g = grad.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(num)), 1e-8)
        rel = float((np.abs(g - num) / denom).max())
        if rel > worst:
            worst = rel
            worst_param = name
    return {"max_rel": worst, "worst_param": worst_param, "loss": loss.item(),
            "n_coordinates": int(sum(v.size for v in values.values()))}


# ---------------------------------------------------------------------------
# config files and headers


_CONFIG_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce_config_value(key: str, raw: str):
    kind = _CONFIG_FIELD_TYPES[key]
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_file(path) -> dict:
    """Flat key = value lines mirroring TrainConfig fields; # comments."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _CONFIG_FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce_config_value(key, raw.strip())
    return out


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.blake2b(blob, digest_size=6).hexdigest()


def report_header(config_payload: dict, seed: int) -> str:
    return f"jm3d {__version__} config={config_hash(config_payload)} seed={seed}"


def _write_report(out_dir, name: str, text: str) -> None:
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text + "\n")


# ---------------------------------------------------------------------------
# subcommands


def _resolve_train_config(ns) -> TrainConfig:
    merged = dict(parse_config_file(ns.config)) if getattr(ns, "config", None) else {}
    flag_map = {
        "epochs": "epochs", "batch": "batch_size", "lr": "base_lr",
        "views": "v_views", "omega": "omega_deg", "lambda1": "lambda1",
        "lambda2": "lambda2", "lambda3": "lambda3", "seed": "seed",
        "hidden": "point_hidden", "tau": "tau_init",
    }
    for flag, field in flag_map.items():
        value = getattr(ns, flag, None)
        if value is not None:
            merged[field] = value
    for flag, field in (("no_jma", "jma_on"), ("no_htt", "htt_on"),
                        ("no_cis", "cis_on"), ("no_embed", "embeddings_on"),
                        ("no_within", "within_view_on")):
        if getattr(ns, flag, False):
            merged[field] = False
    return TrainConfig(**merged)


def _cmd_gen_data(ns) -> int:
    cfg = SynthConfig(parents=ns.parents, subs_per_parent=ns.subs,
                      samples_per_sub=ns.per_sub, points=ns.points, dim=ns.dim,
                      n_angles=ns.angles)
    payload = dataclasses.asdict(cfg)
    print(report_header(payload, ns.seed))
    dataset = synth_generate(cfg, ns.out, seed=ns.seed)
    print(f"wrote {len(dataset.samples)} samples "
          f"({dataset.tree.n_parents} parents, {dataset.tree.n_leaves} leaves, "
          f"dim {dataset.dim}) to {ns.out}")
    return 0


def _cmd_pretrain(ns) -> int:
    cfg = _resolve_train_config(ns)
    print(report_header(dataclasses.asdict(cfg), cfg.seed))
    dataset = load_manifest(ns.data)
    ckpt = train(dataset, cfg, out_dir=ns.out)
    print(f"trained {cfg.epochs} epochs on {len(dataset.samples)} samples; "
          f"loss {ckpt.losses[0]:.4f} -> {ckpt.losses[-1]:.4f}")
    if ns.out:
        print(f"checkpoint written to {Path(ns.out) / 'checkpoint.bin'}")
    return 0


def _eval_classes(ns, dataset):
    spec = ns.set
    if spec == "data":
        return "data", observed_leaf_classes(dataset.samples, dataset.tree)
    if spec in ("all", "medium", "hard"):
        es = modelnet_eval_sets()[spec]
        return es.name, list(es.classes)
    if spec.startswith("custom:"):
        path = Path(spec[len("custom:"):])
        if not path.is_file():
            raise InputError(f"custom set file not found: {path}")
        classes = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
        return path.stem, classes
    raise ConfigError(f"unknown evaluation set {spec!r}; "
                      "use data, all, medium, hard, or custom:FILE")


def _cmd_eval_zeroshot(ns) -> int:
    ckpt = load_checkpoint(ns.checkpoint)
    cfg = ckpt.train_config()
    print(report_header(ckpt.config, cfg.seed))
    dataset = load_manifest(ns.data)
    set_name, classes = _eval_classes(ns, dataset)
    records = zero_shot_records(ckpt, dataset.samples, dataset.tree, classes,
                                set_name, ns.topk, str(ns.checkpoint))
    print(format_table(records))
    _write_report(ns.out, "zeroshot.txt", format_records(records))
    return 0


def _cmd_retrieve(ns) -> int:
    ckpt = load_checkpoint(ns.checkpoint)
    cfg = ckpt.train_config()
    print(report_header(ckpt.config, cfg.seed))
    dataset = load_manifest(ns.data)
    by_id = {s.sample_id: s for s in dataset.samples}
    if ns.query not in by_id:
        raise InputError(f"unknown sample id {ns.query!r}")
    query_sample = by_id[ns.query]
    if not 0 <= ns.view < len(query_sample.views):
        raise InputError(f"sample {ns.query!r} has {len(query_sample.views)} views; "
                         f"--view {ns.view} is out of range")
    spec = FrozenEncoderSpec(seed=cfg.frozen_seed, dim=ckpt.dim)
    query = encode_image_frozen(query_sample.views[ns.view], spec)
    ids = [s.sample_id for s in dataset.samples]
    feats = point_features(dataset.samples, ckpt.params)
    k = min(ns.topk, len(ids))
    hits = retrieve_by_image(query, feats, ids, k)
    lines = [f"query={ns.query} view={ns.view}"]
    lines += [f"{rank + 1}  {sid}" for rank, sid in enumerate(hits)]
    text = "\n".join(lines)
    print(text)
    _write_report(ns.out, "retrieval.txt", text)
    return 0


def _cmd_gradcheck(ns) -> int:
    payload = {"seed": ns.seed, "eps": 1e-6, "tolerance": GRADCHECK_TOLERANCE}
    print(report_header(payload, ns.seed))
    result = model_gradient_check(seed=ns.seed)
    print(f"max relative error {result['max_rel']:.3e} over "
          f"{result['n_coordinates']} coordinates (worst: {result['worst_param']})")
    if result["max_rel"] >= GRADCHECK_TOLERANCE:
        print(f"FAIL: exceeds tolerance {GRADCHECK_TOLERANCE:.0e}", file=sys.stderr)
        return 3
    print(f"OK: within tolerance {GRADCHECK_TOLERANCE:.0e}")
    return 0


def _cmd_ablate(ns) -> int:
    cfg = _resolve_train_config(ns)
    print(report_header(dataclasses.asdict(cfg), cfg.seed))
    dataset = load_manifest(ns.data)
    axes = list(ABLATION_AXES) if ns.axis == "all" else [ns.axis]
    rows, records = run_ablation(dataset, cfg, axes, held_fraction=ns.held,
                                 topk=ns.topk)
    table = ablation_table(rows, min(ns.topk, len(observed_leaf_classes(
        dataset.samples, dataset.tree))))
    print(table)
    _write_report(ns.out, "ablation.txt", format_records(records))
    return 0


def _cmd_export_features(ns) -> int:
    ckpt = load_checkpoint(ns.checkpoint)
    cfg = ckpt.train_config()
    print(report_header(ckpt.config, cfg.seed))
    dataset = load_manifest(ns.data)
    feats = point_features(dataset.samples, ckpt.params)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    write_feature_file(out / "features.bin", feats)
    ids = "\n".join(s.sample_id for s in dataset.samples)
    (out / "ids.txt").write_text(ids + "\n")
    print(f"wrote {feats.shape[0]} x {feats.shape[1]} features to {out / 'features.bin'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jm3d",
                                     description="tri-modal point cloud pretraining toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--parents", type=int, default=4)
    g.add_argument("--subs", type=int, default=3)
    g.add_argument("--per-sub", dest="per_sub", type=int, default=20)
    g.add_argument("--points", type=int, default=256)
    g.add_argument("--dim", type=int, default=32)
    g.add_argument("--angles", type=int, default=30)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen_data)

    def add_train_flags(p):
        p.add_argument("--data", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--config", default=None, help="key = value file of TrainConfig fields")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--views", type=int, default=None)
        p.add_argument("--omega", type=float, default=None)
        p.add_argument("--lambda1", type=float, default=None)
        p.add_argument("--lambda2", type=float, default=None)
        p.add_argument("--lambda3", type=float, default=None)
        p.add_argument("--hidden", type=int, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--no-jma", dest="no_jma", action="store_true")
        p.add_argument("--no-htt", dest="no_htt", action="store_true")
        p.add_argument("--no-cis", dest="no_cis", action="store_true")
        p.add_argument("--no-embed", dest="no_embed", action="store_true")
        p.add_argument("--no-within", dest="no_within", action="store_true")

    t = sub.add_parser("pretrain", help="train the point encoder and heads")
    add_train_flags(t)
    t.set_defaults(func=_cmd_pretrain)

    e = sub.add_parser("eval-zeroshot", help="zero-shot classification from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--set", default="data",
                   help="data, all, medium, hard, or custom:FILE")
    e.add_argument("--topk", type=int, default=5)
    e.add_argument("--out", default=None)
    e.set_defaults(func=_cmd_eval_zeroshot)

    r = sub.add_parser("retrieve", help="image-to-point-cloud retrieval")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--query", required=True, help="sample id whose view is the query")
    r.add_argument("--view", type=int, default=0)
    r.add_argument("--topk", type=int, default=3)
    r.add_argument("--out", default=None)
    r.set_defaults(func=_cmd_retrieve)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_cmd_gradcheck)

    a = sub.add_parser("ablate", help="train with switches off and compare")
    add_train_flags(a)
    a.add_argument("--axis", default="all",
                   choices=["all", *ABLATION_AXES])
    a.add_argument("--held", type=float, default=0.2)
    a.add_argument("--topk", type=int, default=5)
    a.set_defaults(func=_cmd_ablate)

    x = sub.add_parser("export-features", help="dump trained features for a dataset")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=_cmd_export_features)

    return parser


def run(argv) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(list(argv))
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return ns.func(ns)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ManifestError, ConfigError, InputError, LabelError, SamplingError,
            ShapeError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Jm3dError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
