"""Command-line entry point: ``idfree <command> ...``.

Exit codes: 0 success, 1 usage or configuration error (and failed gradient
checks), 2 data or file-format error, 3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import formats, gradcheck
from .checkpoint import Checkpoint
from .dataset import (DataError, FeatureMatrix, InteractionSet, build_splits, load_features,
                      load_interactions, user_modal_features)
from .evaluator import DEFAULT_KS, DimensionError, evaluate, evaluate_embeddings
from .model import ABLATION_ROWS, AblationFlags, ConfigError, build_inputs, forward, static_graphs
from .trainer import NumericError, TrainConfig, train

log = logging.getLogger("idfree")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRAPH_NAMES = ("S_U_t", "S_U_v", "S_I_t", "S_I_v")
BASELINES = {
    # LightGCN-style propagation over interactions only, softmax loss only
    "lightgcn-sl": AblationFlags(use_pe=True, use_asg=False, use_static_graphs=False,
                                 use_age=True, use_align=False),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _echo(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True), file=sys.stderr)


def _echo_config(cfg: dict, **extra) -> None:
    _echo({"config": cfg, "config_hash": formats.config_hash(cfg), **extra})


# prepared dataset directories -----------------------------------------------

def load_prepared(data_dir):
    """Read a directory written by ``idfree prepare``."""
    d = Path(data_dir)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{d}: not a prepared dataset (manifest.json missing)")
    manifest = json.loads(manifest_path.read_text())
    data = InteractionSet.load(d)
    text = load_features(d / "item_text.idfv", data.n_items, "text")
    visual = load_features(d / "item_visual.idfv", data.n_items, "visual")
    graphs = {g: formats.read_graph(d / f"{g}.idfg") for g in GRAPH_NAMES}
    return data, text, visual, graphs, manifest


def _graphs_for(manifest: dict, graphs: dict, k: int):
    """Precomputed graphs are reused only when built with the same k."""
    return graphs if manifest.get("k") == k else None


def _read_item_ids(path) -> list[str]:
    ids = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate item ids")
    return ids


def cmd_prepare(args) -> int:
    text = load_features(args.text, modality="text")
    visual = load_features(args.visual, modality="visual")
    if text.n_rows != visual.n_rows:
        raise DataError(f"{args.text} has {text.n_rows} rows but {args.visual} has {visual.n_rows}")
    if args.item_ids:
        item_ids = _read_item_ids(args.item_ids)
        if len(item_ids) != text.n_rows:
            raise DataError(f"{args.item_ids}: {len(item_ids)} ids for {text.n_rows} feature rows")
    else:
        # without an id list, item ids are the feature row numbers
        item_ids = [str(j) for j in range(text.n_rows)]
    pairs = load_interactions(args.interactions)
    try:
        data = build_splits(pairs, seed=args.seed, item_ids=item_ids)
    except DataError as e:
        raise DataError(f"{args.interactions}: {e}") from None
    cfg = {"seed": args.seed, "k": args.k, "ratios": [0.8, 0.1, 0.1]}
    _echo_config(cfg)
    out = Path(args.out)
    data.save(out)
    text.save(out / "item_text.idfv")
    visual.save(out / "item_visual.idfv")
    user_t, cold = user_modal_features(data.train, text)
    user_v, _ = user_modal_features(data.train, visual)
    user_t.save(out / "user_text.idfv")
    user_v.save(out / "user_visual.idfv")
    graphs = static_graphs(user_t, user_v, text, visual, args.k)
    for name in GRAPH_NAMES:
        formats.write_graph(out / f"{name}.idfg", graphs[name])
    manifest = {
        **cfg,
        "config_hash": formats.config_hash(cfg),
        "n_users": data.n_users,
        "n_items": data.n_items,
        "n_cold_users": int(cold.sum()),
        "nnz": {s: data.split(s).nnz for s in ("train", "val", "test")},
        "text_dim": text.dim,
        "visual_dim": visual.dim,
        "graphs": [f"{g}.idfg" for g in GRAPH_NAMES],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(json.dumps(manifest, sort_keys=True))
    return EXIT_OK


# training -------------------------------------------------------------------

_FLAG_FIELDS = [f.name for f in fields(AblationFlags)]
_SKIP = {"flags"}


def _add_config_overrides(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        if f.name in _SKIP:
            continue
        opt = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(opt, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            typ = {"int": int, "float": float, "str": str}.get(str(f.type), str)
            p.add_argument(opt, dest=f.name, type=typ, default=None)
    for name in _FLAG_FIELDS:
        p.add_argument("--" + name.replace("_", "-"), dest="flag_" + name,
                       action=argparse.BooleanOptionalAction, default=None)


def resolve_config(args) -> TrainConfig:
    cfg = TrainConfig.from_toml(args.config) if args.config else TrainConfig()
    over = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
            if f.name not in _SKIP and getattr(args, f.name, None) is not None}
    flags = {n: getattr(args, "flag_" + n) for n in _FLAG_FIELDS
             if getattr(args, "flag_" + n, None) is not None}
    if getattr(args, "model", None):
        base = BASELINES[args.model]
        flags = {**{n: getattr(base, n) for n in _FLAG_FIELDS}, **flags}
    cfg = cfg.override(**over, flags=flags or None)
    cfg.flags.validate()
    return cfg.validate()


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data, text, visual, graphs, manifest = load_prepared(args.data)
    out = Path(args.out or Path(args.data) / "run")
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg.to_dict(), seed=cfg.seed, out=str(out))
    inputs = build_inputs(data, text, visual, cfg.k, _graphs_for(manifest, graphs, cfg.k))
    res = train(cfg, inputs, data, log_path=out / "metrics.jsonl",
                checkpoint_path=out / "checkpoint.idfc",
                loss_log_path=out / "losses.jsonl" if args.log_losses else None,
                source={"data_dir": str(Path(args.data).resolve())})
    print(json.dumps({"best_epoch": res.best_epoch, "val_recall@20": res.best_val,
                      "epochs_run": len(res.log), "checkpoint": str(out / "checkpoint.idfc"),
                      "config_hash": formats.config_hash(cfg.to_dict())}, sort_keys=True))
    return EXIT_OK


# evaluation -----------------------------------------------------------------

def _parse_ks(text: str) -> tuple:
    try:
        ks = tuple(sorted({int(x) for x in text.split(",") if x.strip()}))
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k needs at least one positive cutoff")
    return ks


def cmd_evaluate(args) -> int:
    ks = _parse_ks(args.k)
    ckpt = Checkpoint.load(args.checkpoint)
    target = args.transfer_data or args.data
    data, text, visual, graphs, manifest = load_prepared(target)
    k = TrainConfig.from_dict(ckpt.config).k
    _echo_config(ckpt.config, checkpoint=str(args.checkpoint), dataset=str(target))
    rep = evaluate(ckpt, data, text, visual, args.split, ks, _graphs_for(manifest, graphs, k))
    out = {**rep.to_dict(), "dataset": str(target), "transfer": bool(args.transfer_data),
           "config_hash": ckpt.config_hash}
    text_out = json.dumps(out, sort_keys=True)
    print(text_out)
    if args.out:
        Path(args.out).write_text(text_out + "\n")
    return EXIT_OK


def _parse_rows(path) -> list[tuple[str, AblationFlags]]:
    try:
        rows = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(rows, list) or not rows:
        raise UsageError(f"{path}: expected a non-empty list of ablation rows")
    out = []
    for row in rows:
        if isinstance(row, str):
            if row not in ABLATION_ROWS:
                raise UsageError(f"unknown ablation row {row!r}; known: {sorted(ABLATION_ROWS)}")
            out.append((row, ABLATION_ROWS[row]))
        elif isinstance(row, dict) and "flags" in row:
            out.append((row.get("name", f"row{len(out)}"), AblationFlags.from_dict(row["flags"])))
        else:
            raise UsageError(f"ablation row must be a name or {{name, flags}}, got {row!r}")
    return out


def ablation_markdown(report: dict) -> str:
    cols = ["recall@5", "recall@20", "ndcg@5", "ndcg@20"]
    lines = ["| row | R@5 | R@20 | N@5 | N@20 |", "|---|---|---|---|---|"]
    for r in report["rows"]:
        lines.append("| " + " | ".join([r["name"]] + [f"{r[c]:.4f}" for c in cols]) + " |")
    return "\n".join(lines) + "\n"


def run_ablation(base: TrainConfig, rows, data, text, visual, graphs=None) -> dict:
    inputs = build_inputs(data, text, visual, base.k, graphs)
    out = []
    for name, flags in rows:
        cfg = base.override(flags=flags).validate()
        res = train(cfg, inputs, data)
        bundle = forward(res.checkpoint.params, inputs, cfg.model_config(), "infer")
        rep = evaluate_embeddings(bundle.E_U, bundle.E_I, data, "test", (5, 20),
                                  cosine=cfg.scoring == "cosine")
        out.append({"name": name, "flags": {n: getattr(flags, n) for n in _FLAG_FIELDS},
                    "best_epoch": res.best_epoch, **{k: v for k, v in rep.to_dict().items()
                                                     if "@" in k}})
    return {"split": "test", "config_hash": formats.config_hash(base.to_dict()), "rows": out}


def cmd_ablate(args) -> int:
    rows = _parse_rows(args.rows)
    base = resolve_config(args)
    data, text, visual, graphs, manifest = load_prepared(args.data)
    _echo_config(base.to_dict(), seed=base.seed, rows=[n for n, _ in rows])
    report = run_ablation(base, rows, data, text, visual, _graphs_for(manifest, graphs, base.k))
    md = ablation_markdown(report)
    print(json.dumps(report, sort_keys=True))
    sys.stderr.write(md)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        (out / "ablation.md").write_text(md)
    return EXIT_OK


def cmd_export(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    data_dir = args.data or ckpt.source.get("data_dir")
    if not data_dir:
        raise UsageError("checkpoint does not record its dataset; pass --data")
    data, text, visual, graphs, manifest = load_prepared(data_dir)
    cfg = TrainConfig.from_dict(ckpt.config)
    _echo_config(ckpt.config, checkpoint=str(args.checkpoint), dataset=str(data_dir))
    inputs = build_inputs(data, text, visual, cfg.k, _graphs_for(manifest, graphs, cfg.k))
    bundle = forward(ckpt.params, inputs, cfg.model_config(), "infer")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    FeatureMatrix("user", bundle.E_U.astype(np.float32)).save(out / "user_embeddings.idfv")
    FeatureMatrix("item", bundle.E_I.astype(np.float32)).save(out / "item_embeddings.idfv")
    (out / "id_maps.json").write_text(json.dumps(data.id_maps(), indent=1) + "\n")
    print(json.dumps({"users": data.n_users, "items": data.n_items, "dim": int(bundle.E_U.shape[1]),
                      "out": str(out), "config_hash": ckpt.config_hash}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _echo_config({"seed": args.seed}, seed=args.seed)
    results = gradcheck.run_all(args.seed)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:28s} rel_err={r.rel_err:.2e} tol={r.tol:.0e}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="idfree", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="split interactions and precompute graphs")
    s.add_argument("--interactions", required=True)
    s.add_argument("--text", required=True)
    s.add_argument("--visual", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--item-ids", help="file with one item id per feature row")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a model on a prepared dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", help="run directory (default: <data>/run)")
    s.add_argument("--model", choices=sorted(BASELINES), help="train a baseline flag set")
    s.add_argument("--log-losses", action="store_true", help="write per-step losses")
    _add_config_overrides(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="score a checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=("val", "test"), default="test")
    s.add_argument("--transfer-data", help="evaluate on another prepared dataset")
    s.add_argument("--k", default=",".join(map(str, DEFAULT_KS)))
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and score a list of flag sets")
    s.add_argument("--data", required=True)
    s.add_argument("--rows", required=True)
    s.add_argument("--config")
    s.add_argument("--out")
    _add_config_overrides(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("export-embeddings", help="write final user/item embeddings")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data", help="prepared dataset (default: the one recorded in the checkpoint)")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def _threads() -> int | None:
    raw = os.environ.get("IDFREE_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"IDFREE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"IDFREE_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"idfree: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DimensionError, formats.FormatError, FileNotFoundError) as e:
        print(f"idfree: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"idfree: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
