"""Command-line entry point: ``artlabel generate|train|label|eval|inspect``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .anatomy import AnatomySchema, default_schema, load_schema
from .errors import ArtLabelError, DivergenceError, InputError
from .gnn import ModelConfig, load_checkpoint, save_checkpoint
from .io import dump_json, graph_to_dict, load_json, read_centerlines
from .metrics import (aggregate, bifurcation_csv, bifurcation_report, default_exclusion, scans_csv,
                      score_scan, summary_csv, summary_table)
from .pipeline import label_case, select_thres
from .refine import HRConfig
from .synth import MANIFEST_FORMAT, SynthConfig, generate, write_dataset
from .training import ClassWeights, DistanceStats, TrainConfig, train, write_log
from .vessel_graph import build_graph

logger = logging.getLogger("artlabel")

EXIT_OK = 0
EXIT_FAILURES = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

LABELS_FORMAT = "artlabel-labels"
LABEL_RUN_FORMAT = "artlabel-label-run"
CHECKPOINT_FILE = "checkpoint.json"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Resolved options of one invocation (flags merged with an optional config file)."""

    subcommand: str
    options: dict = field(default_factory=dict)
    schema_path: str | None = None
    seed: int | None = None

    def get(self, key, default=None):
        v = self.options.get(key)
        return default if v is None else v


# ---------------------------------------------------------------------------
# option handling


def _merge_config(args, file_keys: set) -> dict:
    """Flags overlaid by the config file; the file wins on conflicts (with a warning)."""
    opts = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    path = getattr(args, "config", None)
    if not path:
        return opts
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    try:
        extra = load_json(path)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    if not isinstance(extra, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    for k, v in extra.items():
        if k not in file_keys:
            raise UsageError(f"{path}: unknown option {k!r}")
        if opts.get(k) is not None and opts[k] != v:
            logger.warning("option %s: config file value %r overrides flag value %r", k, v, opts[k])
        opts[k] = v
    return opts


def _schema(path) -> AnatomySchema:
    return load_schema(path) if path else default_schema()


def _require_dir(path, what):
    if not path or not os.path.isdir(path):
        raise UsageError(f"{what} not found: {path}")


def _load_manifest(data_dir) -> dict:
    _require_dir(data_dir, "dataset directory")
    mpath = os.path.join(data_dir, "manifest.json")
    if not os.path.isfile(mpath):
        raise UsageError(f"no manifest.json in {data_dir}")
    m = load_json(mpath)
    if m.get("format") != MANIFEST_FORMAT:
        raise UsageError(f"{mpath}: not an {MANIFEST_FORMAT} manifest")
    return m


def _split_cases(manifest, split):
    return [c for c in manifest["cases"] if split in (None, "all") or c["split"] == split]


# ---------------------------------------------------------------------------
# generate


_SYNTH_FIELDS = {f.name for f in dataclasses.fields(SynthConfig)}


def cmd_generate(rc: RunConfig) -> int:
    schema = _schema(rc.schema_path)
    o = rc.options
    fields = {k: o[k] for k in _SYNTH_FIELDS if o.get(k) is not None}
    if o.get("count") is not None:
        count = int(o["count"])
        if count < 0:
            raise UsageError("--count must be >= 0")
        n_test = int(round(count * float(o.get("test_fraction") or 0.2)))
        fields["counts"] = {"train": count - n_test, "test": n_test}
    try:
        cfg = SynthConfig.from_dict(fields)
    except (TypeError, ValueError) as exc:
        logger.error("invalid generator config: %s", exc)
        return EXIT_FAILURES
    cases = generate(cfg, schema)
    out = o["out"]
    os.makedirs(out, exist_ok=True)
    write_dataset(cases, out, cfg, schema)
    logger.info("wrote %d cases to %s", len(cases), out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"model"}
_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}


def _read_graphs(data_dir, entries, schema):
    out = []
    for e in entries:
        cl = read_centerlines(os.path.join(data_dir, e["file"]), schema)
        out.append(build_graph(cl))
    return out


def cmd_train(rc: RunConfig) -> int:
    schema = _schema(rc.schema_path)
    o = rc.options
    manifest = _load_manifest(o.get("data"))
    train_entries = _split_cases(manifest, "train")
    if not train_entries:
        raise UsageError(f"{o['data']}: no train split in manifest")
    val_entries = _split_cases(manifest, "val")
    seed = int(rc.seed if rc.seed is not None else 0)
    model_kw = {k: o[k] for k in _MODEL_FIELDS if o.get(k) is not None}
    model_kw["seed"] = seed
    if o.get("no_direction_features"):
        model_kw["use_direction"] = False
    train_kw = {k: o[k] for k in _TRAIN_FIELDS if o.get(k) is not None}
    train_kw["seed"] = seed
    try:
        tcfg = TrainConfig(model=ModelConfig(**model_kw), **train_kw)
    except (TypeError, ValueError) as exc:
        logger.error("invalid training config: %s", exc)
        return EXIT_FAILURES

    t0 = time.perf_counter()
    graphs = _read_graphs(o["data"], train_entries, schema)
    val = _read_graphs(o["data"], val_entries, schema) if val_entries else None
    out = o["out"]
    os.makedirs(out, exist_ok=True)
    ckpt = os.path.join(out, CHECKPOINT_FILE)
    try:
        res = train(graphs, tcfg, val, progress=lambda r: logger.info(
            "epoch %d train %.4f val %.4f node %.4f edge %.4f", r["epoch"], r["train_loss"],
            r["val_loss"], r["node_acc"], r["edge_acc"]))
    except DivergenceError as exc:
        logger.error("training diverged: %s", exc)
        params = getattr(exc, "params", None)
        if params is not None:
            save_checkpoint(ckpt, params, {"schema_version": schema.schema_version, "seed": seed,
                                           "diverged": True})
            logger.error("last good parameters kept in %s", ckpt)
        return EXIT_DIVERGED

    hr_base = HRConfig(**{k: o[k] for k in ("distance_sigma_mult",) if o.get(k) is not None})
    if o.get("thres") is not None:
        thres, thres_acc = float(o["thres"]), {}
    else:
        thres, thres_acc = select_thres(res.params, res.validation, schema, res.stats, base=hr_base)
    extra = {
        "schema_version": schema.schema_version,
        "seed": seed,
        "train_config": tcfg.to_dict(),
        "best_epoch": res.best_epoch,
        "steps": res.steps,
        "distance_stats": res.stats.to_dict(),
        "class_weights": {"node": res.weights.node_weights.tolist(), "edge": res.weights.edge_weights.tolist()},
        "hr": {"thres": thres, "distance_sigma_mult": hr_base.distance_sigma_mult,
               "validation_node_acc": {repr(k): v for k, v in sorted(thres_acc.items())}},
        "dataset": {"seed": manifest.get("seed"), "n_train": len(graphs),
                    "n_val": len(res.validation)},
    }
    save_checkpoint(ckpt, res.params, extra)
    write_log(res.log, os.path.join(out, "train_log.csv"))
    dump_json({"train_seconds": time.perf_counter() - t0}, os.path.join(out, "timings.json"))
    logger.info("checkpoint written to %s (best epoch %d)", ckpt, res.best_epoch)
    return EXIT_OK


def checkpoint_extras(raw: dict):
    stats = DistanceStats.from_dict(raw.get("distance_stats", {}))
    weights = None
    if "class_weights" in raw:
        weights = ClassWeights(np.array(raw["class_weights"]["node"]), np.array(raw["class_weights"]["edge"]))
    return stats, weights


# ---------------------------------------------------------------------------
# label


def _label_inputs(o):
    """(case_id, path, split) triples in manifest order, or from explicit files."""
    if o.get("inputs"):
        out = []
        for p in o["inputs"]:
            if not os.path.isfile(p):
                raise UsageError(f"input not found: {p}")
            out.append((os.path.splitext(os.path.basename(p))[0], p))
        return out, None
    manifest = _load_manifest(o.get("data"))
    entries = _split_cases(manifest, o.get("split") or "test")
    return [(e["case_id"], os.path.join(o["data"], e["file"])) for e in entries], manifest


def cmd_label(rc: RunConfig) -> int:
    schema = _schema(rc.schema_path)
    o = rc.options
    ck = o.get("checkpoint")
    if not ck or not os.path.isfile(ck):
        raise UsageError(f"checkpoint not found: {ck}")
    params, raw = load_checkpoint(ck)
    if raw.get("schema_version") not in (None, schema.schema_version):
        logger.error("checkpoint schema %s does not match schema %s", raw.get("schema_version"),
                     schema.schema_version)
        return EXIT_FAILURES
    stats, _ = checkpoint_extras(raw)
    hr_raw = raw.get("hr", {})
    hr = HRConfig(thres=float(o["thres"]) if o.get("thres") is not None else float(hr_raw.get("thres", 1e-10)),
                  distance_sigma_mult=float(o.get("distance_sigma_mult") or hr_raw.get("distance_sigma_mult", 1.5)))
    use_hr = not o.get("no_hr")
    base = "GNN(Pos+Dir)" if params.config.use_direction else "GNN(Pos)"
    method = o.get("method") or (base + "+HR" if use_hr else base)
    inputs, manifest = _label_inputs(o)
    out = o["out"]
    os.makedirs(os.path.join(out, "labels"), exist_ok=True)

    def one(item):
        case_id, path = item
        t0 = time.perf_counter()
        try:
            cl = read_centerlines(path, schema)
            if cl.schema_version not in (None, raw.get("schema_version"), schema.schema_version):
                raise InputError(f"centerline schema {cl.schema_version} does not match checkpoint "
                                 f"{raw.get('schema_version')}")
            done = label_case(params, cl, schema, stats, hr, use_hr)
        except ArtLabelError as exc:
            return case_id, None, None, str(exc), time.perf_counter() - t0
        d = done.result.to_dict(schema, cl.case_id or case_id)
        d["method"] = method
        d["n_nodes"], d["n_edges"] = done.graph.n_nodes, done.graph.n_edges
        dump_json(d, os.path.join(out, "labels", f"{case_id}.json"), indent=1)
        return case_id, f"labels/{case_id}.json", done.seconds, None, time.perf_counter() - t0

    workers = max(1, int(o.get("workers") or 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, inputs))

    errors = [{"case_id": cid, "error": err} for cid, _, _, err, _ in results if err]
    for e in errors:
        logger.error("%s: %s", e["case_id"], e["error"])
    run = {
        "format": LABEL_RUN_FORMAT,
        "format_version": 1,
        "method": method,
        "seed": raw.get("seed"),
        "schema_version": schema.schema_version,
        "hr": dataclasses.asdict(hr) if use_hr else None,
        "cases": [{"case_id": cid, "file": f} for cid, f, _, err, _ in results if not err],
        "errors": errors,
    }
    dump_json(run, os.path.join(out, "run.json"), indent=1)
    with open(os.path.join(out, "timings.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case_id", "processing_seconds", "wall_seconds"])
        for cid, _, sec, err, wall in results:
            if not err:
                w.writerow([cid, repr(sec), repr(wall)])
    secs = [r[2] for r in results if not r[3]]
    if secs:
        logger.info("labeled %d cases, median %.4f s", len(secs), float(np.median(secs)))
    return EXIT_FAILURES if errors else EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _read_timings(pred_dir):
    path = os.path.join(pred_dir, "timings.csv")
    if not os.path.isfile(path):
        return {}
    with open(path, encoding="utf-8") as f:
        return {r["case_id"]: float(r["processing_seconds"]) for r in csv.DictReader(f)}


def cmd_eval(rc: RunConfig) -> int:
    schema = _schema(rc.schema_path)
    o = rc.options
    manifest = _load_manifest(o.get("data"))
    entries = _split_cases(manifest, o.get("split") or "test")
    preds = list(o.get("pred") or [])
    if o.get("self_check"):
        preds.insert(0, None)
    if not preds:
        raise UsageError("eval needs at least one --pred directory or --self-check")
    names = list(o.get("methods") or [])
    for p in preds:
        if p is not None:
            _require_dir(p, "prediction directory")

    truths = {e["case_id"]: build_graph(read_centerlines(os.path.join(o["data"], e["file"]), schema))
              for e in entries}
    out = o["out"]
    os.makedirs(out, exist_ok=True)
    all_scans, summaries, report = [], [], {"methods": [], "seed": manifest.get("seed")}
    failures = 0
    for mi, pdir in enumerate(preds):
        if pdir is None:
            method = "truth"
            run = {"cases": [{"case_id": e["case_id"]} for e in entries]}
        else:
            rpath = os.path.join(pdir, "run.json")
            run = load_json(rpath) if os.path.isfile(rpath) else {"cases": []}
            method = run.get("method", os.path.basename(os.path.normpath(pdir)))
        offset = mi - (1 if o.get("self_check") else 0)
        if pdir is not None and 0 <= offset < len(names):
            method = names[offset]
        listed = {c["case_id"] for c in run.get("cases", [])}
        unknown = sorted(listed - set(truths))
        if unknown:
            logger.error("%s: predictions for cases not in the manifest split: %s", method, ", ".join(unknown))
            failures += 1
        timings = _read_timings(pdir) if pdir else {}
        scans, skipped, p_nodes, t_nodes, excl = [], [], [], [], []
        for e in entries:
            cid = e["case_id"]
            g = truths[cid]
            if pdir is None:
                pn, pe = g.node_gt, g.edge_gt
            else:
                lpath = os.path.join(pdir, "labels", f"{cid}.json")
                if not os.path.isfile(lpath):
                    skipped.append(cid)
                    continue
                d = load_json(lpath)
                try:
                    pn = [schema.node_id(n["label"]) for n in d["nodes"]]
                    pe = [schema.edge_id(x["label"]) for x in d["edges"]]
                except KeyError as exc:
                    logger.error("%s/%s: %s", method, cid, exc)
                    failures += 1
                    continue
            try:
                sm = score_scan(pn, pe, g, schema, default_exclusion, timings.get(cid, 0.0), method)
            except InputError as exc:
                logger.error("%s: %s", method, exc)
                failures += 1
                continue
            scans.append(sm)
            p_nodes.append(pn)
            t_nodes.append(g.node_gt)
            excl.append(default_exclusion(g, schema))
        if skipped:
            logger.warning("%s: %d scans skipped (no prediction)", method, len(skipped))
        entry = {"method": method, "n_scored": len(scans), "skipped": skipped, "n_skipped": len(skipped)}
        if scans:
            row = aggregate(scans, method)
            summaries.append(row)
            bif = bifurcation_report(p_nodes, t_nodes, schema.bifurcation_groups, excl)
            fname = f"bifurcation_{_slug(method)}.csv"
            with open(os.path.join(out, fname), "w", encoding="utf-8") as f:
                f.write(bifurcation_csv(bif))
            entry["bifurcation_file"] = fname
            entry["bifurcation_mean"] = {a: bif.mean(a) for a in ("accuracy", "precision", "recall")}
        all_scans.extend(scans)
        report["methods"].append(entry)

    with open(os.path.join(out, "scans.csv"), "w", encoding="utf-8") as f:
        f.write(scans_csv(all_scans))
    with open(os.path.join(out, "summary.csv"), "w", encoding="utf-8") as f:
        f.write(summary_csv(summaries))
    with open(os.path.join(out, "summary.txt"), "w", encoding="utf-8") as f:
        f.write(summary_table(summaries))
    dump_json(report, os.path.join(out, "report.json"), indent=1)
    sys.stdout.write(summary_table(summaries))
    return EXIT_FAILURES if failures else EXIT_OK


def _slug(s: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in s).strip("_") or "method"


# ---------------------------------------------------------------------------
# inspect


def cmd_inspect(rc: RunConfig) -> int:
    schema = _schema(rc.schema_path)
    path = rc.options["path"]
    if not os.path.isfile(path):
        raise UsageError(f"file not found: {path}")
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    try:
        head = json.loads(first)
    except json.JSONDecodeError:
        head = None
    if isinstance(head, dict) and head.get("record") == "header":
        g = build_graph(read_centerlines(path, schema))
        _print_graph(graph_to_dict(g, schema if g.labeled else None))
        return EXIT_OK
    d = load_json(path)
    fmt = d.get("format")
    if fmt == "artlabel-graph":
        _print_graph(d)
    elif fmt == LABELS_FORMAT:
        print(f"case {d.get('case_id')}  method {d.get('method', '?')}")
        for n in d["nodes"]:
            if n["label"] != "Non_Type":
                print(f"  node {n['index']:3d}  {n['label']:16s} {n['provenance']:18s} p={n.get('probability', float('nan')):.3f}")
        for r in d.get("reinserted", []):
            print(f"  reinserted {r['label']} on edge {r['edge']} point {r['point']}")
        for w in d.get("warnings", []):
            print(f"  warning: {w}")
    elif fmt == "artlabel-checkpoint":
        cfg = d["config"]
        n_par = sum(int(np.prod(w["shape"])) for w in d["weights"].values())
        print(f"checkpoint: {n_par} parameters, latent {cfg['latent_dim']}, rounds {cfg['rounds']}, "
              f"direction features {'on' if cfg['use_direction'] else 'off'}")
        print(f"  schema {d.get('schema_version')}  seed {d.get('seed')}  best epoch {d.get('best_epoch')}")
        print(f"  refinement threshold {d.get('hr', {}).get('thres')}")
        for t, s in sorted(d.get("distance_stats", {}).items(), key=lambda kv: int(kv[0])):
            print(f"  {schema.edge_names[int(t)]:8s} n={s['count']:4d} mean={s['mean']:.2f} std={s['std']:.2f}")
    elif fmt == MANIFEST_FORMAT:
        counts = {}
        for c in d["cases"]:
            counts[c["split"]] = counts.get(c["split"], 0) + 1
        print(f"dataset seed {d.get('seed')}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    else:
        print(json.dumps(d, indent=1, sort_keys=True))
    return EXIT_OK


def _print_graph(d):
    print(f"case {d.get('case_id')}: {len(d['nodes'])} nodes, {len(d['edges'])} edges")
    for n in d["nodes"]:
        pos = ", ".join(f"{v:7.2f}" for v in n["position"])
        print(f"  node {n['index']:3d} deg {n['degree']}  ({pos})  r={n['radius']:.2f}  {n.get('label', '')}")
    for e in d["edges"]:
        print(f"  edge {e['index']:3d} {e['r']:3d}-{e['s']:<3d} d={e['distance']:6.2f}  {e.get('label', '')}")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="artlabel", description="Label intracranial artery centerline graphs.")
    p.add_argument("--version", action="version", version=f"artlabel {__version__}")
    p.add_argument("--schema", help="anatomy schema JSON (default: $ARTLABEL_SCHEMA or the bundled schema)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="subcommand", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--count", type=int, help="total number of cases")
    g.add_argument("--test-fraction", type=float, dest="test_fraction")
    g.add_argument("--config", help="JSON file of generator options")
    g.set_defaults(func=cmd_generate, file_keys=_SYNTH_FIELDS | {"count", "test_fraction"})

    t = sub.add_parser("train", help="train a model on a dataset's train split")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--learning-rate", type=float, dest="learning_rate")
    t.add_argument("--no-direction-features", action="store_true", default=None, dest="no_direction_features")
    t.add_argument("--thres", type=float, help="fix the refinement threshold instead of selecting it")
    t.add_argument("--config", help="JSON file of training options")
    t.set_defaults(func=cmd_train, file_keys=_TRAIN_FIELDS | _MODEL_FIELDS |
                   {"no_direction_features", "thres", "distance_sigma_mult"})

    la = sub.add_parser("label", help="label centerline files with a trained checkpoint")
    la.add_argument("inputs", nargs="*", help="centerline files (default: dataset split)")
    la.add_argument("--checkpoint", required=True)
    la.add_argument("--data")
    la.add_argument("--split")
    la.add_argument("--out", required=True)
    la.add_argument("--no-hr", action="store_true", default=None, dest="no_hr")
    la.add_argument("--thres", type=float)
    la.add_argument("--distance-sigma-mult", type=float, dest="distance_sigma_mult")
    la.add_argument("--method")
    la.add_argument("--workers", type=int)
    la.add_argument("--config", help="JSON file of labeling options")
    la.set_defaults(func=cmd_label, file_keys={"no_hr", "thres", "distance_sigma_mult", "method", "workers", "split"})

    e = sub.add_parser("eval", help="score predictions against dataset ground truth")
    e.add_argument("--data", required=True)
    e.add_argument("--pred", action="append", help="label output directory (repeatable)")
    e.add_argument("--method", action="append", dest="methods", help="method name per --pred")
    e.add_argument("--self-check", action="store_true", default=None, dest="self_check",
                   help="also score ground truth against itself")
    e.add_argument("--split")
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval, file_keys={"split", "methods"})

    i = sub.add_parser("inspect", help="pretty-print a centerline, graph, label, checkpoint or manifest file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect, file_keys=set())
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        opts = _merge_config(args, args.file_keys)
        opts.pop("file_keys", None)
        rc = RunConfig(args.subcommand, opts, opts.pop("schema", None), opts.get("seed"))
        return args.func(rc)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"artlabel: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArtLabelError as exc:
        logger.error("%s", exc)
        return EXIT_FAILURES


if __name__ == "__main__":
    sys.exit(main())
