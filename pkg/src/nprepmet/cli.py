"""Command-line interface: ``nprepmet <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, embed_net
from .config import RunConfig, load_config
from .errors import ConfigError, NumericalError, UsageError
from .evaluation import ABLATION_AXES, make_episodes, run_ablation, run_episodes
from .geometry import NEGATIVE, POSITIVE, label_proposals_arrays
from .gradcheck import TOLERANCE, run_default
from .synth_world import Dataset, build_dataset, derive_rng
from .trainer import epoch_means, load_state, train

log = logging.getLogger("nprepmet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
_EXPORT_SAMPLE = 71


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers

def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n")


def _write_csv(path, header: list, rows: list, meta: dict) -> None:
    """CSV with one leading ``#`` line holding the JSON run metadata."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        f.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _load_dataset(path) -> Dataset:
    try:
        return Dataset.load(path)
    except FileNotFoundError:
        raise ConfigError(f"dataset {path} not found") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"dataset {path} is malformed: {exc}") from None


def _load_ckpt(path):
    try:
        return load_state(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint {path} not found") from None
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint {path} is malformed: {exc}") from None


def _config_for_dataset(cfg: RunConfig, ds: Dataset, explicit: bool) -> RunConfig:
    """Adopt the dataset's world section; an explicit config must agree on dims and class ranges."""
    mine, theirs = cfg.world, ds.config
    if explicit:
        for key in ("feature_dim", "n_base_classes", "n_novel_classes"):
            if getattr(mine, key) != getattr(theirs, key):
                raise ConfigError(f"config world.{key}={getattr(mine, key)} does not match dataset ({getattr(theirs, key)})")
    doc = cfg.to_dict()
    doc["world"] = theirs.to_dict()
    doc["embed"]["input_dim"] = theirs.feature_dim
    return RunConfig.from_dict(doc)


def _resolve_eval_config(args, ds: Dataset, run_info: dict) -> RunConfig:
    if args.config is not None:
        cfg = _config_for_dataset(load_config(args.config), ds, explicit=True)
    elif "config" in run_info:
        cfg = _config_for_dataset(RunConfig.from_dict(run_info["config"]), ds, explicit=False)
    else:
        cfg = _config_for_dataset(RunConfig(), ds, explicit=False)
    return cfg


def _check_model_matches(model, ds: Dataset) -> None:
    d = model.net.config.input_dim
    if d != ds.config.feature_dim:
        raise ConfigError(f"checkpoint expects {d}-dim features but dataset has {ds.config.feature_dim}")


def _apply_eval_overrides(cfg: RunConfig, args) -> RunConfig:
    ev = {k: getattr(args, k) for k in ("way", "shot", "episodes", "seed") if getattr(args, k, None) is not None}
    if ev:
        cfg = cfg.override("eval", **ev)
    inf = {}
    if getattr(args, "inference", None) is not None:
        inf["positive_only"] = args.inference == "pos"
    if getattr(args, "strategy", None) is not None:
        inf["strategy"] = args.strategy
    return cfg.override("inference", **inf) if inf else cfg


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.override("world", seed=args.seed)
    ds = build_dataset(cfg.world)
    ds.run_info = {"command": "gen-data", "seed": cfg.world.seed, "config": cfg.to_dict()}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ds.save(args.out)
    dots = ds.prototypes.dot_products()
    off = dots[~np.eye(len(dots), dtype=bool)]
    n_props = sum(len(s.boxes) for s in ds.train_scenes)
    n_gts = sum(len(s.gt_boxes) for s in ds.train_scenes)
    print(f"seed: {cfg.world.seed}")
    print(f"classes: {cfg.world.n_base_classes} base + {cfg.world.n_novel_classes} novel")
    print(f"train scenes: {len(ds.train_scenes)}  objects: {n_gts}  proposals: {n_props}")
    print(f"prototype dot products: mean {off.mean():+.4f}  max |dot| {np.abs(off).max():.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = _load_dataset(args.data)
    cfg = _config_for_dataset(load_config(args.config), ds, explicit=args.config is not None)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.epochs is not None:
        # keep only decay points the shortened schedule still reaches
        over["epochs"] = args.epochs
        over["lr_decay_epochs"] = [e for e in cfg.train.lr_decay_epochs if e <= args.epochs]
    if over:
        cfg = cfg.override("train", **over)
    state = None
    if args.resume is not None:
        state, info = _load_ckpt(args.resume)
        _check_model_matches(state.model, ds)
        if state.model.net.config != cfg.embed:
            raise ConfigError("resume checkpoint was trained with a different embed config")
        log.info("resuming at epoch %d step %d", state.epoch, state.step)
    run_info = {"command": "train", "seed": cfg.train.seed, "config": cfg.to_dict(), "data": str(args.data)}
    state = train(ds.train_scenes, cfg.world.n_base_classes, cfg.embed, cfg.prob, cfg.loss, cfg.train,
                  out_dir=args.out, state=state, run_info=run_info)
    means = epoch_means(state.history)
    print(f"seed: {cfg.train.seed}")
    for e in sorted(means):
        print(f"epoch {e:3d}  mean loss {means[e]:.5f}")
    print(f"steps: {state.step}  checkpoint: {Path(args.out) / 'final.json'}")
    return EXIT_OK


def _report_rows(report) -> list:
    return [[r["episode_seed"], r["class_id"], _fmt(r["AP"]), _fmt(r["episode_mAP"])] for r in report.rows()]


def cmd_evaluate(args) -> int:
    ds = _load_dataset(args.data)
    state, run_info = _load_ckpt(args.ckpt)
    _check_model_matches(state.model, ds)
    cfg = _apply_eval_overrides(_resolve_eval_config(args, ds, run_info), args)
    protocol = cfg.eval.protocol()
    report = run_episodes(state.model, ds, protocol, cfg.inference, keep_detections=args.detections is not None)
    meta = {"command": "evaluate", "seed": cfg.eval.seed, "config": cfg.to_dict(), "ckpt": str(args.ckpt),
            "data": str(args.data), "episode_seeds": [protocol.episode_seed(i) for i in range(protocol.n_episodes)]}
    out = Path(args.out)
    doc = report.to_dict()
    doc.update(meta)
    _write_json(out / "report.json", doc)
    _write_csv(out / "report.csv", ["episode_seed", "class_id", "AP", "episode_mAP"], _report_rows(report), meta)
    if args.detections is not None:
        rows = []
        for e in report.episodes:
            for qi, dets in enumerate(e.detections):
                for b, c, s in zip(dets.boxes, dets.classes, dets.scores):
                    rows.append([e.seed, qi, *(_fmt(v) for v in b), int(c), _fmt(s)])
        _write_csv(args.detections, ["episode_seed", "query_index", "x1", "y1", "x2", "y2", "class_id", "score"],
                   rows, meta)
    print(f"seed: {cfg.eval.seed}")
    mode = "pos" if cfg.inference.positive_only else "np"
    print(f"{protocol.way}-way {protocol.shot}-shot, {protocol.n_episodes} episodes, "
          f"inference {mode}, strategy {cfg.inference.strategy.value}")
    if report.empty or math.isnan(report.mean):
        print("mAP: nan (no episodes evaluated)")
    else:
        print(f"mAP: {100 * report.mean:.2f} +- {100 * report.std:.2f}")
    print(f"wrote {out / 'report.json'} and {out / 'report.csv'}")
    return EXIT_OK


def _load_grid(path) -> dict:
    try:
        grid = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"grid file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid file {path} is not valid JSON ({exc}); valid axes: {list(ABLATION_AXES)}") from None
    if not isinstance(grid, dict) or not grid:
        raise ConfigError(f"grid must be a non-empty JSON object mapping axes to value lists; "
                          f"valid axes: {list(ABLATION_AXES)}")
    return grid


def cmd_ablate(args) -> int:
    grid = _load_grid(args.grid)
    ds = _load_dataset(args.data)
    state, run_info = _load_ckpt(args.ckpt)
    _check_model_matches(state.model, ds)
    cfg = _apply_eval_overrides(_resolve_eval_config(args, ds, run_info), args)
    protocol = cfg.eval.protocol()
    episodes = make_episodes(ds, protocol)
    models = {"np": state.model}

    def model_for(kind):
        if kind not in models:
            # the single-embedding cell needs its own training run
            single = cfg.override("embed", single_embedding=(kind == "single"))
            log.info("retraining with single_embedding=%s for the embedding axis", kind == "single")
            models[kind] = train(ds.train_scenes, single.world.n_base_classes, single.embed, single.prob,
                                 single.loss, single.train).model
        return models[kind]

    rows = run_ablation(grid, cfg.inference, episodes, model_for)
    axes = [a for a in ABLATION_AXES if a in grid]
    seeds = [protocol.episode_seed(i) for i in range(protocol.n_episodes)]
    meta = {"command": "ablate", "seed": cfg.eval.seed, "config": cfg.to_dict(), "grid": grid,
            "ckpt": str(args.ckpt), "data": str(args.data), "episode_seeds": seeds}
    table = [[json.dumps(r.cell[a]) if isinstance(r.cell[a], list) else r.cell[a] for a in axes]
             + [_fmt(r.report.mean), _fmt(r.report.std), len(r.report.episodes), cfg.eval.seed] for r in rows]
    _write_csv(args.out, axes + ["mean_mAP", "std_mAP", "n_episodes", "eval_seed"], table, meta)
    doc = dict(meta)
    doc["rows"] = [{"cell": r.cell, "mean_mAP": r.report.mean, "std_mAP": r.report.std,
                    "episode_mAP": r.report.maps.tolist()} for r in rows]
    _write_json(Path(args.out).with_suffix(".json"), doc)
    print(f"seed: {cfg.eval.seed}")
    for r in rows:
        print(f"{json.dumps(r.cell, sort_keys=True)}  mAP {100 * r.report.mean:.2f} +- {100 * r.report.std:.2f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.probes < 1:
        raise UsageError("--probes must be >= 1")
    cfg = load_config(args.config)
    seed = 0 if args.seed is None else args.seed
    res = run_default(probes=args.probes, seed=seed, embed_cfg=cfg.embed, prob_cfg=cfg.prob, loss_cfg=cfg.loss)
    print(f"seed: {seed}")
    print(f"probes: {len(res.probes)}  max relative error: {res.max_rel_error:.3e}  tolerance: {TOLERANCE:.0e}")
    if args.out is not None:
        _write_json(args.out, {"command": "gradcheck", "seed": seed, "config": cfg.to_dict(),
                               "max_rel_error": res.max_rel_error, "passed": res.passed,
                               "probes": [p.__dict__ | {"rel_error": p.rel_error} for p in res.probes]})
    if not res.passed:
        w = res.worst
        raise NumericalError(f"gradient check failed at {w.name}{list(w.index)}: "
                             f"analytic {w.analytic:.6e} numeric {w.numeric:.6e} rel {w.rel_error:.3e}")
    print("gradcheck passed")
    return EXIT_OK


def cmd_export_embeddings(args) -> int:
    ds = _load_dataset(args.data)
    state, run_info = _load_ckpt(args.ckpt)
    model = state.model
    _check_model_matches(model, ds)
    if args.samples < 0:
        raise UsageError("--samples must be >= 0")
    seed = 0 if args.seed is None else args.seed
    e = model.net.config.embed_dim
    rows = []
    for kind, bank in (("pos", model.bank.pos), ("neg", model.bank.neg)):
        for c in range(bank.shape[0]):
            for j in range(bank.shape[1]):
                rows.append(["representative", c, kind, *(_fmt(v) for v in bank[c, j])])
    # labeled proposals across the training scenes, sampled uniformly
    feats, kinds, classes = [], [], []
    for s in ds.train_scenes:
        k, c, _ = label_proposals_arrays(s.boxes, s.gt_boxes, s.gt_classes)
        keep = k != 0
        feats.append(s.features[keep])
        kinds.append(k[keep])
        classes.append(c[keep])
    feats, kinds, classes = np.concatenate(feats), np.concatenate(kinds), np.concatenate(classes)
    n = min(args.samples, len(kinds))
    pick = np.sort(derive_rng(seed, _EXPORT_SAMPLE).choice(len(kinds), size=n, replace=False))
    emb = embed_net.embed(model.net, feats[pick])
    for i, idx in enumerate(pick):
        if kinds[idx] == POSITIVE:
            rows.append(["proposal", int(classes[idx]), "pos", *(_fmt(v) for v in emb.e_pos[i])])
        elif kinds[idx] == NEGATIVE:
            rows.append(["proposal", int(classes[idx]), "neg", *(_fmt(v) for v in emb.e_neg[i])])
    meta = {"command": "export-embeddings", "seed": seed, "config": run_info.get("config", {}),
            "ckpt": str(args.ckpt), "data": str(args.data), "samples": n}
    _write_csv(args.out, ["source", "class_id", "kind"] + [f"e{i}" for i in range(e)], rows, meta)
    print(f"seed: {seed}")
    print(f"rows: {len(rows)} ({len(rows) - n} representatives, {n} proposals)  wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nprepmet", description="Few-shot detection with negative and positive representatives.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread count (default: $NPMD_THREADS, else all cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", type=Path, default=None, help="JSON run config (default: built-in defaults)")
        sp.add_argument("--seed", type=int, default=None)
        return sp

    g = common(sub.add_parser("gen-data", help="generate a synthetic dataset"))
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_data)

    t = common(sub.add_parser("train", help="train embedding and representatives on base classes"))
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="checkpoint directory")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    def eval_flags(sp):
        sp.add_argument("--ckpt", type=Path, required=True)
        sp.add_argument("--data", type=Path, required=True)
        sp.add_argument("--way", type=int, default=None)
        sp.add_argument("--shot", type=int, default=None)
        sp.add_argument("--episodes", type=int, default=None)
        sp.add_argument("--inference", choices=("pos", "np"), default=None)
        sp.add_argument("--strategy", choices=("rd", "cluster-rd", "cluster-min"), default=None)

    e = common(sub.add_parser("evaluate", help="episodic few-shot evaluation"))
    eval_flags(e)
    e.add_argument("--out", type=Path, default=Path("eval_out"), help="report directory")
    e.add_argument("--detections", type=Path, default=None, help="also export detections to this CSV")
    e.set_defaults(func=cmd_evaluate)

    a = common(sub.add_parser("ablate", help="evaluate an ablation grid on paired episodes"))
    eval_flags(a)
    a.add_argument("--grid", type=Path, required=True,
                   help=f"JSON object mapping axes {list(ABLATION_AXES)} to value lists")
    a.add_argument("--out", type=Path, default=Path("ablation.csv"))
    a.set_defaults(func=cmd_ablate)

    c = common(sub.add_parser("gradcheck", help="finite-difference gradient check"))
    c.add_argument("--probes", type=int, default=100)
    c.add_argument("--out", type=Path, default=None, help="optional JSON with every probe")
    c.set_defaults(func=cmd_gradcheck)

    x = common(sub.add_parser("export-embeddings", help="export representatives and proposal embeddings"), config=False)
    x.add_argument("--ckpt", type=Path, required=True)
    x.add_argument("--data", type=Path, required=True)
    x.add_argument("--out", type=Path, required=True)
    x.add_argument("--samples", type=int, default=200)
    x.set_defaults(func=cmd_export_embeddings)
    return p


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        n = flag
    elif os.environ.get("NPMD_THREADS"):
        try:
            n = int(os.environ["NPMD_THREADS"])
        except ValueError:
            raise ConfigError(f"NPMD_THREADS must be an integer, got {os.environ['NPMD_THREADS']!r}") from None
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=resolve_threads(args.threads)):
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
