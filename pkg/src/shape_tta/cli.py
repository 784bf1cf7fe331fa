"""Command-line entry point: synth, pretrain, adapt, evaluate and bench.

Every subcommand takes an optional ``--config`` JSON file (see
docs/config.schema.json).  Missing keys fall back to :data:`DEFAULT_CONFIG`,
which is the pinned synthetic benchmark.  Artifacts go under ``--out-dir``
together with a ``manifest.json`` recording the resolved config, its hash,
the seeds and the library versions.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, data, engine, losses, metrics, priors, segnet

log = logging.getLogger("shape_tta")

METHODS = ("NoAdap", "Tent", "TTAS_R", "TTAS_RC", "TTAS_RD")
TRACE_FIELDS = ("epoch", "entropy_term", "kl_term", "penalty_term", "total", "lr")


class CLIError(Exception):
    """User-facing failure; printed as one line and mapped to exit code 2."""


DEFAULT_CONFIG = {
    "seed": 7,
    "precision": "float32",
    "network": {"in_channels": 1, "num_classes": 4, "base_width": 8, "depth": 3},
    "phantom": {
        "family": "cardiac",
        "size": 64,
        "num_slices": 16,
        "palette": [0.1, 0.9, 0.3, 0.6],
        "source_noise": 0.02,
        "target_gamma": 0.5,
        "target_noise": 0.25,
        "target_blur": 0.0,
        "inverted_class": 2,
    },
    "data": {"n_source": 10, "n_target": 6},
    "pretrain": {"epochs": 20, "lr": 3e-3, "decay": 0.9, "decay_every": 20, "weight_decay": 1e-4, "batch_size": 16, "augment": True},
    "adapt": {"epochs_init": 30, "epochs_shape": 40, "lr": 5e-3, "decay": 0.9, "decay_every": 20, "weight_decay": 1e-4, "max_batch": 22},
    "loss": {"lam": 1e-4, "kl_weight": 1.0, "band": 0.1, "nu": None, "printed_penalty": False},
    "prior": {"ratio": None, "spread": 0.2, "use_tags": True},
    "modes": list(METHODS),
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_count = {"type": "integer", "minimum": 0}
_pair = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "shape_tta run configuration",
    **_obj(
        {
            "seed": {"type": "integer", "minimum": 0},
            "precision": {"enum": ["float32", "float64"]},
            "network": _obj(
                {
                    "in_channels": {"type": "integer", "minimum": 1},
                    "num_classes": {"type": "integer", "minimum": 2},
                    "base_width": {"type": "integer", "minimum": 1},
                    "depth": {"type": "integer", "minimum": 1},
                }
            ),
            "phantom": _obj(
                {
                    "family": {"enum": ["cardiac", "prostate"]},
                    "size": {"type": "integer", "minimum": 8},
                    "num_slices": {"type": "integer", "minimum": 1},
                    "lv_radius": _pair,
                    "myo_thickness": _pair,
                    "ellipticity": _pair,
                    "center_jitter": _nonneg,
                    "aa_radius": _pair,
                    "aa_gap": _pair,
                    "aa_first_slice": _pair,
                    "blob_radius": _pair,
                    "palette": {"type": "array", "items": _num, "minItems": 2},
                    "source_noise": _nonneg,
                    "target_gamma": _pos,
                    "target_noise": _nonneg,
                    "target_blur": _nonneg,
                    "inverted_class": {"type": "integer"},
                }
            ),
            "data": _obj({"n_source": {"type": "integer", "minimum": 1}, "n_target": {"type": "integer", "minimum": 1}}),
            "pretrain": _obj(
                {
                    "epochs": _count,
                    "lr": _pos,
                    "decay": _pos,
                    "decay_every": {"type": "integer", "minimum": 1},
                    "weight_decay": _nonneg,
                    "batch_size": {"type": "integer", "minimum": 2},
                    "augment": {"type": "boolean"},
                }
            ),
            "adapt": _obj(
                {
                    "epochs_init": _count,
                    "epochs_shape": _count,
                    "lr": _nonneg,
                    "decay": _pos,
                    "decay_every": {"type": "integer", "minimum": 1},
                    "weight_decay": _nonneg,
                    "max_batch": {"type": "integer", "minimum": 1},
                }
            ),
            "loss": _obj(
                {
                    "lam": _nonneg,
                    "kl_weight": _nonneg,
                    "band": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "nu": {"oneOf": [{"type": "null"}, {"type": "array", "items": _nonneg, "minItems": 2}]},
                    "printed_penalty": {"type": "boolean"},
                }
            ),
            "prior": _obj(
                {
                    "ratio": {"oneOf": [{"type": "null"}, {"type": "array", "items": _nonneg, "minItems": 2}]},
                    "spread": {"type": "number", "minimum": 0, "maximum": 1},
                    "use_tags": {"type": "boolean"},
                    "tag_file": {"type": ["string", "null"]},
                }
            ),
            "modes": {"type": "array", "items": {"enum": list(METHODS)}, "uniqueItems": True, "minItems": 1},
        }
    ),
}


# -- configuration ---------------------------------------------------------------
def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate_config(doc):
    """Raise CLIError listing every schema violation (unknown keys included)."""
    errors = sorted(jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.path) or "<root>"
            lines.append(f"  {where}: {e.message}")
        raise CLIError("config schema violation:\n" + "\n".join(lines))


def load_config(path=None, overrides=None):
    doc = {}
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise CLIError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CLIError(f"config file {path} is not valid JSON: {exc}") from None
    validate_config(doc)
    cfg = _merge(DEFAULT_CONFIG, doc)
    cfg = _merge(cfg, overrides or {})
    validate_config(cfg)
    return cfg


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def derived_seeds(seed):
    """Independent integer seeds for every stochastic stage, all from one root."""
    return {
        "network": seed,
        "source": seed * 1000 + 1,
        "target": seed * 1000 + 2,
        "prior": seed * 1000 + 3,
        "pretrain": seed,
        "adapt": seed,
    }


def phantom_spec(cfg):
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["phantom"].items()}
    try:
        return data.PhantomSpec(**kw)
    except ValueError as exc:
        raise CLIError(f"phantom: {exc}") from None


def network_config(cfg):
    return segnet.NetworkConfig(**cfg["network"], seed=derived_seeds(cfg["seed"])["network"])


def pretrain_config(cfg):
    return engine.PretrainConfig(**cfg["pretrain"], seed=derived_seeds(cfg["seed"])["pretrain"], precision=cfg["precision"])


def adapt_config(cfg):
    loss = dict(cfg["loss"])
    if loss["nu"] is not None:
        loss["nu"] = tuple(loss["nu"])
    try:
        weights = losses.LossWeights(**loss)
    except ValueError as exc:
        raise CLIError(f"loss: {exc}") from None
    return engine.AdaptConfig(
        **cfg["adapt"], seed=derived_seeds(cfg["seed"])["adapt"], precision=cfg["precision"], weights=weights
    )


def ratio_prior(cfg, spec):
    r = cfg["prior"]["ratio"]
    if r is None:
        return data.coarse_ratio_prior(spec, derived_seeds(cfg["seed"])["prior"], cfg["prior"]["spread"])
    if len(r) != spec.num_classes:
        raise CLIError(f"prior.ratio has {len(r)} entries, expected {spec.num_classes}")
    return np.asarray(r, dtype=np.float64)


def worker_count(n_jobs):
    cap = os.environ.get("SHAPE_TTA_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise CLIError(f"SHAPE_TTA_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(n, n_jobs))


# -- artifact helpers -------------------------------------------------------------
def write_manifest(out_dir, cfg, command, extra=None):
    manifest = {
        "command": command,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seeds": derived_seeds(cfg["seed"]),
        "versions": {
            "shape_tta": __version__,
            "numpy": metadata.version("numpy"),
            "scipy": metadata.version("scipy"),
            "jsonschema": metadata.version("jsonschema"),
            "python": platform.python_version(),
        },
    }
    if extra:
        manifest.update(extra)
    with open(Path(out_dir) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for row in trace:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in TRACE_FIELDS[1:]])


def _volumes(directory):
    paths = sorted(Path(directory).glob("*.vol"))
    if not paths:
        raise CLIError(f"no .vol files in {directory}")
    return paths


def _load_tags(cfg, subject_id, n_slices, K, tag_file):
    if not cfg["prior"]["use_tags"] or tag_file is None:
        return None
    if not Path(tag_file).exists():
        raise CLIError(f"tag file not found: {tag_file}")
    return priors.read_tag_file(tag_file, subject_id, n_slices, K)


# -- subcommands ----------------------------------------------------------------------
def cmd_synth(cfg, args):
    """Write source volumes (with labels), target images, target labels and a tag file."""
    out = Path(args.out_dir)
    spec = phantom_spec(cfg)
    seeds = derived_seeds(cfg["seed"])
    for sub in ("source", "target", "target_labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for v in data.generate(spec, cfg["data"]["n_source"], "source", seeds["source"]):
        data.write_volume(v, out / "source" / f"{v.subject_id}.vol")
    targets = data.generate(spec, cfg["data"]["n_target"], "target", seeds["target"])
    for v in targets:
        data.write_volume(v.without_labels(), out / "target" / f"{v.subject_id}.vol")
        data.write_volume(v, out / "target_labels" / f"{v.subject_id}.vol")
    priors.write_tag_file(out / "tags.json", {v.subject_id: priors.tags_from_labels(v.labels, spec.num_classes) for v in targets})
    write_manifest(out, cfg, "synth", {"phantom": data.spec_to_dict(spec)})
    print(f"wrote {cfg['data']['n_source']} source and {len(targets)} target subjects to {out}")


def cmd_pretrain(cfg, args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    subjects = [data.read_volume(p) for p in _volumes(Path(args.data_dir) / "source")]
    store, trace = engine.pretrain(subjects, pretrain_config(cfg), network_config(cfg))
    segnet.save_checkpoint(store, out / "model.ckpt", extra={"config_sha256": config_hash(cfg)})
    with open(out / "pretrain_trace.csv", "w") as fh:
        fh.write("epoch,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(trace))
    write_manifest(out, cfg, "pretrain")
    print(f"checkpoint {out / 'model.ckpt'}  final loss {trace[-1]:.4f}" if trace else f"checkpoint {out / 'model.ckpt'}")


def _method_name(mode):
    return {"tent": "Tent", "R_only": "TTAS_R", "RC": "TTAS_RC", "RD": "TTAS_RD"}[mode]


def cmd_adapt(cfg, args):
    if not Path(args.checkpoint).exists():
        raise CLIError(f"checkpoint not found: {args.checkpoint}")
    try:
        store = segnet.load_checkpoint(args.checkpoint)
    except segnet.CheckpointError as exc:
        raise CLIError(str(exc)) from None
    mode = args.mode or "RC"
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [Path(args.volume)] if args.volume else _volumes(Path(args.data_dir) / "target")
    spec = phantom_spec(cfg)
    prior = ratio_prior(cfg, spec)
    tag_file = cfg["prior"].get("tag_file") or (Path(args.data_dir) / "tags.json" if args.data_dir else None)
    if tag_file is not None and not Path(tag_file).exists():
        tag_file = None
    acfg = adapt_config(cfg)
    method = _method_name(mode)
    for p in paths:
        vol = data.read_volume(p, load_labels=False)
        K = store.config.num_classes
        tags = _load_tags(cfg, vol.subject_id, vol.num_slices, K, tag_file)
        res = engine.adapt_subject(store, vol, mode, prior, acfg, tags)
        stem = f"{vol.subject_id}_{method}"
        segnet.save_checkpoint(res.store, out / f"{stem}.ckpt")
        pred = data.SubjectVolume(vol.intensities, res.prediction, vol.subject_id, vol.domain, vol.seed, vol.spacing)
        data.write_volume(pred, out / f"{stem}.pred.vol")
        write_trace(out / f"{stem}.trace.csv", res.trace)
        print(f"{vol.subject_id}: {mode} done ({len(res.trace)} epochs)")
    write_manifest(out, cfg, "adapt", {"mode": mode})


def cmd_evaluate(cfg, args):
    """Compare ``*.pred.vol`` files against labelled volumes with the same subject id."""
    gts = {}
    for p in _volumes(args.label_dir):
        v = data.read_volume(p)
        if v.labels is None:
            raise CLIError(f"{p} has no labels")
        gts[v.subject_id] = v.labels
    K = cfg["network"]["num_classes"]
    reports = []
    for p in sorted(Path(args.pred_dir).glob("*.pred.vol")):
        v = data.read_volume(p)
        if v.subject_id not in gts:
            raise CLIError(f"no ground truth for subject {v.subject_id}")
        method = args.method or p.name[len(v.subject_id) + 1 :].split(".")[0]
        reports.append(metrics.evaluate(v.labels, gts[v.subject_id], range(1, K), method, v.subject_id))
    if not reports:
        raise CLIError(f"no *.pred.vol files in {args.pred_dir}")
    names = phantom_spec(cfg).names
    csv_text, text = metrics.tabulate(reports, class_names=names)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.csv").write_text(csv_text)
        (out / "results.txt").write_text(text)
    print(text, end="")


def _bench_subject(job):
    """Adapt one target subject with every requested method; returns (reports, traces)."""
    store, vol, cfg, tags = job
    spec = phantom_spec(cfg)
    prior = ratio_prior(cfg, spec)
    acfg = adapt_config(cfg)
    classes = range(1, spec.num_classes)
    modes = cfg["modes"]
    blind = vol.without_labels()
    preds, traces = {}, {}
    if "NoAdap" in modes:
        preds["NoAdap"] = engine.predict_noadap(store, blind)[0]
    if "Tent" in modes:
        run = engine.Adaptation(store, blind, prior, acfg, tags).run_init(mode="tent")
        preds["Tent"], traces["Tent"] = run.predict()[0], run.trace
    if {"TTAS_R", "TTAS_RC", "TTAS_RD"} & set(modes):
        shared = engine.Adaptation(store, blind, prior, acfg, tags).run_init(mode="R_only")
        for method, mode in (("TTAS_RC", "RC"), ("TTAS_RD", "RD")):
            if method in modes:
                run = shared.fork().run_shape(mode)
                preds[method], traces[method] = run.predict()[0], run.trace
        if "TTAS_R" in modes:
            preds["TTAS_R"], traces["TTAS_R"] = shared.predict()[0], shared.trace
    reports = [metrics.evaluate(preds[m], vol.labels, classes, m, vol.subject_id) for m in METHODS if m in preds]
    return vol.subject_id, reports, traces


def run_bench(cfg, out_dir):
    """Pretrain once, adapt every target subject with every method, write tables.

    Returns the list of per-subject MetricReports.
    """
    out = Path(out_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    spec = phantom_spec(cfg)
    seeds = derived_seeds(cfg["seed"])
    sources = data.generate(spec, cfg["data"]["n_source"], "source", seeds["source"])
    targets = data.generate(spec, cfg["data"]["n_target"], "target", seeds["target"])
    log.info("pretraining on %d source subjects", len(sources))
    store, pre_trace = engine.pretrain(sources, pretrain_config(cfg), network_config(cfg))
    segnet.save_checkpoint(store, out / "model.ckpt")
    with open(out / "pretrain_trace.csv", "w") as fh:
        fh.write("epoch,loss\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(pre_trace))

    tag_file = cfg["prior"].get("tag_file")
    if tag_file is None and cfg["prior"]["use_tags"]:
        # weak image-level tags, derived once from the generator and kept apart from the labels
        tag_file = out / "tags.json"
        priors.write_tag_file(tag_file, {v.subject_id: priors.tags_from_labels(v.labels, spec.num_classes) for v in targets})
    jobs = [
        (store, v, cfg, _load_tags(cfg, v.subject_id, v.num_slices, spec.num_classes, tag_file)) for v in targets
    ]
    workers = worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_bench_subject, jobs))
    else:
        results = [_bench_subject(j) for j in jobs]
    results.sort(key=lambda r: r[0])  # merge by subject id, whatever the completion order

    reports = []
    for subject, reps, traces in results:
        reports.extend(reps)
        for method, trace in traces.items():
            write_trace(out / "traces" / f"{subject}_{method}.csv", trace)
    methods = [m for m in METHODS if m in cfg["modes"]]
    csv_text, text = metrics.tabulate(reports, class_names=spec.names, methods=methods)
    (out / "results.csv").write_text(csv_text)
    (out / "results.txt").write_text(text)
    with open(out / "per_subject.csv", "w") as fh:
        metrics.write_csv(reports, fh, class_names=spec.names)
    write_manifest(out, cfg, "bench", {"workers": workers})
    return reports


def cmd_bench(cfg, args):
    run_bench(cfg, args.out_dir)
    print((Path(args.out_dir) / "results.txt").read_text(), end="")


# -- argument parsing ----------------------------------------------------------------
def build_parser():
    p = argparse.ArgumentParser(prog="shape-tta", description="Shape-guided test-time adaptation on synthetic phantoms.")
    p.add_argument("--log-level", default="WARNING", help="python logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="run-config JSON (see docs/config.schema.json)")
        sp.add_argument("--seed", type=int, help="root seed override")
        sp.add_argument("--out-dir", required=out_required, help="directory for all artifacts")

    def schedule(sp):
        sp.add_argument("--epochs-init", type=int, help="override adapt.epochs_init")
        sp.add_argument("--epochs-shape", type=int, help="override adapt.epochs_shape")

    sp = sub.add_parser("synth", help="generate source/target phantom volumes")
    common(sp)
    sp = sub.add_parser("pretrain", help="train the segmentation network on source volumes")
    common(sp)
    sp.add_argument("--data-dir", required=True, help="directory written by synth")
    sp = sub.add_parser("adapt", help="adapt a checkpoint on unlabelled target volumes")
    common(sp)
    schedule(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=losses.MODES, help="adaptation objective (default RC)")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--data-dir", help="directory written by synth (reads target/*.vol and tags.json)")
    src.add_argument("--volume", help="a single volume file")
    sp = sub.add_parser("evaluate", help="score prediction volumes against labelled volumes")
    common(sp, out_required=False)
    sp.add_argument("--pred-dir", required=True)
    sp.add_argument("--label-dir", required=True)
    sp.add_argument("--method", help="method name for every prediction (default: from file name)")
    sp = sub.add_parser("bench", help="full synthetic benchmark: NoAdap, Tent, TTAS_R, TTAS_RC, TTAS_RD")
    common(sp)
    schedule(sp)
    return p


def _overrides(args):
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    adapt = {}
    for flag, key in (("epochs_init", "epochs_init"), ("epochs_shape", "epochs_shape")):
        v = getattr(args, flag, None)
        if v is not None:
            adapt[key] = v
    if adapt:
        o["adapt"] = adapt
    return o


COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "adapt": cmd_adapt, "evaluate": cmd_evaluate, "bench": cmd_bench}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "mode", None) in ("tent", "R_only") and args.epochs_shape is not None:
            raise CLIError(f"--epochs-shape does not apply to mode {args.mode}: it has no shape phase")
        cfg = load_config(args.config, _overrides(args))
        COMMANDS[args.command](cfg, args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (data.VolumeFormatError, segnet.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
