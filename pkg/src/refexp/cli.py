"""Command-line entry point: ``refexp <command> ...``.

Every command accepts ``--seed``. Commands that write files also write the
effective configuration to ``config.resolved.json`` in the output directory.
Failures print one line, ``error: <category>: <message>``, to stderr and
exit with the code of their category (see ``EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .comprehension import evaluate_comprehension, load_detections
from .data import (Dataset, Subset, build_vocabulary, load_dataset, load_split, save_split, split_people_vs_objects,
                   split_per_object, whole)
from .errors import CheckpointIntegrityError, ParseError, RefexpError
from .metrics import DecodeConfig, evaluate_generation, generate_for_subset
from .synth import SynthConfig, generate
from .training import TrainConfig, holdout, load_model, save_model, train, write_log

log = logging.getLogger("refexp")

EXIT_CODES = {
    0: "success",
    1: "generic failure (I/O, domain or dimension error)",
    2: "usage error (unknown flag, bad argument or invalid config value)",
    3: "integrity failure (parse, annotation, feature, checkpoint, missing feature)",
    4: "numeric failure (non-finite loss during training)",
}


class UsageError(Exception):
    """Bad arguments that argparse itself cannot detect."""


class _Parser(argparse.ArgumentParser):
    """argparse with the one-line error format used everywhere else."""

    def error(self, message):
        self.exit(2, f"error: usage: {message} (see '{self.prog} --help')\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(_dump(obj), encoding="utf-8")


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return doc


def _resolved(out_dir: Path, command: str, settings: dict) -> None:
    _write_json(out_dir / "config.resolved.json", {"command": command, "version": __version__, **settings})


# --- data --------------------------------------------------------------------

def cmd_data_validate(args) -> int:
    ds = load_dataset(args.annotations, args.features)
    scenes, regions, exprs = ds.counts()
    referred = len(ds.referred_region_ids())
    print(f"ok: {scenes} scenes, {regions} regions ({referred} referred), {exprs} expressions, "
          f"feature dim {ds.feature_dim}")
    return 0


def _category_id(ds: Dataset, name: str) -> int:
    if name.isdigit():
        return int(name)
    for cid, cname in ds.categories.items():
        if cname == name:
            return cid
    raise UsageError(f"unknown category {name!r}")


def cmd_data_split(args) -> int:
    ds = load_dataset(args.annotations, args.features)
    out = Path(args.out)
    seed = 0 if args.seed is None else args.seed
    if args.mode == "per-object":
        parts = split_per_object(ds, args.ratio, seed)
        meta = {"mode": args.mode, "ratio": args.ratio, "seed": seed}
    else:
        person = _category_id(ds, args.person_category)
        parts = split_people_vs_objects(ds, person, args.test_fraction, seed)
        meta = {"mode": args.mode, "person_category": person, "test_fraction": args.test_fraction,
                "seed": seed}
    save_split(out, parts, meta)
    _resolved(out.parent, "data split", {**meta, "annotations": str(args.annotations),
                                         "features": str(args.features), "out": str(out)})
    for s in parts:
        print(f"{s.name}: {len(s.scene_ids)} scenes, {len(s.region_ids)} regions")
    return 0


# --- synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    settings = _read_config(args.config)
    if args.num_scenes is not None:
        settings["num_scenes"] = args.num_scenes
    if args.seed is not None:
        settings["seed"] = args.seed
    cfg = SynthConfig.from_json(settings)
    out_dir = Path(args.out_dir)
    ann, feat = generate(cfg).write(out_dir, args.stem)
    _resolved(out_dir, "synth", {"synth": cfg.to_json()})
    print(f"wrote {ann} and {feat}")
    return 0


# --- shared model/data plumbing ------------------------------------------------

def _subset(ds: Dataset, split_file, name: str | None, model_cfg: TrainConfig | None = None) -> Subset:
    if split_file is None:
        if name not in (None, "all"):
            raise UsageError("--split needs --split-file")
        return whole(ds)
    splits = load_split(split_file)
    if name == "test" and "test" not in splits and {"testA", "testB"} <= set(splits):
        a, b = splits["testA"], splits["testB"]
        return Subset("test", a.region_ids | b.region_ids, a.scene_ids | b.scene_ids)
    if name in ("val", "train") and model_cfg is not None and "train" in splits:
        # the validation scenes a model held out, recomputed from its own config
        tr = splits["train"]
        rest, val = holdout(tr.scene_ids, model_cfg.val_fraction, model_cfg.seed)
        keep = set(val if name == "val" else rest)
        rids = frozenset(r for r in tr.region_ids if ds.regions[r].scene_id in keep)
        return Subset(name, rids, frozenset(keep))
    if name not in splits:
        raise UsageError(f"split {name!r} not in {split_file} (have {sorted(splits)})")
    return splits[name]


def _model_dir(path) -> Path:
    p = Path(path)
    return p.parent if p.is_file() else p


# --- train -------------------------------------------------------------------

_TRAIN_FLAGS = ("objective", "epochs", "learning_rate", "mmi_weight", "batch_scenes", "seed")


def cmd_train(args) -> int:
    settings = _read_config(args.config)
    for key in _TRAIN_FLAGS:
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    if args.tied is not None:
        settings["tied"] = args.tied
    cfg = TrainConfig.from_json(settings)
    ds = load_dataset(args.annotations, args.features)
    subset = _subset(ds, args.split_file, args.split if args.split_file else None)
    out_dir = Path(args.out_dir)

    def progress(e):
        log.info("epoch %d loss %.4f val_acc %.4f", e.epoch, e.loss, e.val_acc)

    result = train(ds, subset, cfg, progress=progress)
    save_model(out_dir, result)
    write_log(out_dir / "train_log.csv", result.log)
    _resolved(out_dir, "train", {"train": cfg.to_json(), "annotations": str(args.annotations),
                                 "features": str(args.features),
                                 "split_file": None if args.split_file is None else str(args.split_file),
                                 "split": subset.name})
    print(f"best epoch {result.best_epoch}; model written to {out_dir}")
    return 0


# --- comprehend / generate / eval ----------------------------------------------

def _load_for_eval(args):
    """Load the model and check its vocabulary against the one the dataset implies.

    The expected vocabulary is rebuilt from the split file's ``train`` split
    (the whole dataset without a split file) using the model's own min_count.
    """
    ds = load_dataset(args.annotations, args.features)
    model = load_model(_model_dir(args.checkpoint))
    source = whole(ds)
    if args.split_file is not None:
        splits = load_split(args.split_file)
        source = splits.get("train", source)
    expected = build_vocabulary(source.expressions(ds), model.config.min_count)
    if expected.digest() != model.vocab.digest():
        raise CheckpointIntegrityError("checkpoint vocabulary hash differs from the dataset vocabulary")
    return model, ds


def _comprehension_json(args, model, ds, split_names) -> dict:
    dets = None
    if args.candidates != "gt":
        if args.detection_features is None:
            raise UsageError("--candidates <detections.json> needs --detection-features")
        dets = load_detections(args.candidates, args.detection_features)
    fcfg = model.config.features()
    splits = {}
    for name in split_names:
        sub = _subset(ds, args.split_file, name, model.config)
        res = evaluate_comprehension(ds, sub, model.params, model.vocab, fcfg, dets, workers=args.workers)
        splits[name] = {**res.to_json(), "predictions": {str(k): v for k, v in res.predictions.items()}}
    return splits


def cmd_comprehend(args) -> int:
    model, ds = _load_for_eval(args)
    splits = _comprehension_json(args, model, ds, [args.split])
    out = Path(args.out)
    doc = {"task": "comprehension", "candidates": args.candidates, "split": args.split, **splits[args.split]}
    _write_json(out, doc)
    _resolved(out.parent, "comprehend", _eval_settings(args, model))
    print(f"{args.split}: accuracy {doc['accuracy']:.4f} ({doc['correct']}/{doc['total']})")
    return 0


def _decode_config(args, model) -> DecodeConfig:
    return DecodeConfig(args.mode, bool(args.tied), args.max_len or model.config.max_len, args.beam_size)


def cmd_generate(args) -> int:
    model, ds = _load_for_eval(args)
    sub = _subset(ds, args.split_file, args.split, model.config)
    dcfg = _decode_config(args, model)
    generated, _ = generate_for_subset(ds, sub, model.params, model.vocab, model.config.features(), dcfg)
    out = Path(args.out)
    _write_json(out, {str(r): " ".join(w) for r, w in sorted(generated.items())})
    _resolved(out.parent, "generate", {**_eval_settings(args, model), "decode": vars(dcfg)})
    print(f"generated {len(generated)} expressions")
    return 0


def _eval_settings(args, model) -> dict:
    keep = ("checkpoint", "annotations", "features", "split_file", "split", "splits", "candidates",
            "detection_features", "task", "mode", "tied", "max_len", "beam_size", "workers", "seed", "label")
    d = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k in keep}
    d["model_config"] = model.config.to_json()
    return d


def cmd_eval(args) -> int:
    model, ds = _load_for_eval(args)
    names = [s for s in args.splits.split(",") if s]
    label = args.label or _model_dir(args.checkpoint).name
    report = {"task": args.task, "label": label}
    if args.task == "comprehension":
        splits = _comprehension_json(args, model, ds, names)
        for v in splits.values():
            v.pop("predictions")
        correct = sum(v["correct"] for v in splits.values())
        total = sum(v["total"] for v in splits.values())
        report["metrics"] = {"accuracy": correct / total if total else 0.0}
        report["candidates"] = args.candidates
    else:
        dcfg = _decode_config(args, model)
        report["decode"] = vars(dcfg)
        splits = {}
        for name in names:
            sub = _subset(ds, args.split_file, name, model.config)
            table = evaluate_generation(ds, sub, model.params, model.vocab, model.config.features(), dcfg,
                                        workers=args.workers)
            table.pop("generated")
            splits[name] = table
        union = [_subset(ds, args.split_file, n, model.config) for n in names]
        merged = Subset("+".join(names), frozenset().union(*(u.region_ids for u in union)),
                        frozenset().union(*(u.scene_ids for u in union)))
        overall = evaluate_generation(ds, merged, model.params, model.vocab, model.config.features(), dcfg,
                                      workers=args.workers)
        overall.pop("generated")
        report["metrics"] = overall
    report["splits"] = splits
    out = Path(args.out)
    _write_json(out, report)
    _resolved(out.parent, "eval", _eval_settings(args, model))
    print(_dump(report["metrics"]), end="")
    return 0


# --- report --------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{100 * v:.2f}" if v <= 1.0 else f"{v:.4f}"
    return str(v)


def _table(title: str, header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[k]) for r in [header] + rows) for k in range(len(header))]
    line = lambda r: "  ".join(c.ljust(w) if k == 0 else c.rjust(w) for k, (c, w) in enumerate(zip(r, widths)))
    rule = "-" * len(line(header))
    return "\n".join([title, rule, line(header), rule] + [line(r) for r in rows] + [rule, ""])


GEN_COLUMNS = ("bleu1", "bleu2", "rouge_l", "meteor", "duplicate_rate")


def render_report(reports: list[dict]) -> tuple[str, str]:
    """(aligned text, CSV) for a set of eval reports. Scores print as percentages."""
    text, rows_csv = [], [["task", "label", "split", "metric", "value"]]
    comp = [r for r in reports if r.get("task") == "comprehension"]
    gen = [r for r in reports if r.get("task") == "generation"]
    if comp:
        splits = sorted({s for r in comp for s in r["splits"]})
        header = ["model"] + splits + ["all"]
        rows = []
        for r in comp:
            label = f"{r['label']} ({r.get('candidates', 'gt')})"
            rows.append([label] + [_fmt(r["splits"].get(s, {}).get("accuracy")) for s in splits]
                        + [_fmt(r["metrics"]["accuracy"])])
            for s in splits:
                if s in r["splits"]:
                    rows_csv.append(["comprehension", label, s, "accuracy", repr(r["splits"][s]["accuracy"])])
            rows_csv.append(["comprehension", label, "all", "accuracy", repr(r["metrics"]["accuracy"])])
        text.append(_table("Comprehension accuracy (%)", header, rows))
    if gen:
        splits = sorted({s for r in gen for s in r["splits"]})
        for s in splits + ["all"]:
            rows = []
            for r in gen:
                d = r["metrics"] if s == "all" else r["splits"].get(s)
                if d is None:
                    continue
                rows.append([r["label"]] + [_fmt(d.get(c)) for c in GEN_COLUMNS])
                for c in GEN_COLUMNS:
                    rows_csv.append(["generation", r["label"], s, c, "" if d.get(c) is None else repr(d[c])])
            text.append(_table(f"Generation on {s} (%)", ["model", "BLEU-1", "BLEU-2", "ROUGE-L", "METEOR",
                                                         "duplicates"], rows))
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows_csv)
    return "\n".join(text), buf.getvalue()


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        try:
            reports.append(json.loads(Path(path).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: {exc}") from None
    for r in reports:
        if r.get("task") not in ("comprehension", "generation") or "metrics" not in r or "splits" not in r:
                raise ParseError("not an eval report (need task, metrics and splits)")
    text, table = render_report(reports)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "report.csv").write_text(table, encoding="utf-8")
        _resolved(out, "report", {"reports": [str(p) for p in args.reports], "seed": args.seed})
    print(text, end="")
    return 0


# --- parser --------------------------------------------------------------------

def _bool_flag(p, name: str, help: str) -> None:
    p.add_argument(f"--{name}", dest=name.replace("-", "_"), action="store_true", default=None, help=help)
    p.add_argument(f"--no-{name}", dest=name.replace("-", "_"), action="store_false")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides config files)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    data_args = _Parser(add_help=False)
    data_args.add_argument("--annotations", required=True, type=Path, help="annotation JSON")
    data_args.add_argument("--features", required=True, type=Path, help="RFEA feature file")

    model_args = _Parser(add_help=False, parents=[data_args])
    model_args.add_argument("--checkpoint", required=True, help="model directory or its model.rexp")
    model_args.add_argument("--split-file", type=Path, default=None)
    model_args.add_argument("--workers", type=int, default=1, help="threads for scene-parallel evaluation")

    decode_args = _Parser(add_help=False)
    decode_args.add_argument("--mode", choices=("greedy", "beam"), default="greedy")
    decode_args.add_argument("--beam-size", type=int, default=3)
    decode_args.add_argument("--max-len", type=int, default=None)
    _bool_flag(decode_args, "tied", "decode same-category objects jointly")

    cand_args = _Parser(add_help=False)
    cand_args.add_argument("--candidates", default="gt", help="'gt' or a detections JSON")
    cand_args.add_argument("--detection-features", type=Path, default=None)

    parser = _Parser(prog="refexp", description="Referring-expression speaker toolkit.",
                                     epilog="exit codes: " + "; ".join(f"{k} {v}" for k, v in EXIT_CODES.items()))
    parser.add_argument("--version", action="version", version=f"refexp {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    data = sub.add_parser("data", help="validate or split a dataset")
    dsub = data.add_subparsers(dest="data_command", metavar="action", required=True)
    p = dsub.add_parser("validate", parents=[common], help="load and check a dataset")
    p.add_argument("annotations", type=Path)
    p.add_argument("features", type=Path)
    p.set_defaults(func=cmd_data_validate)
    p = dsub.add_parser("split", parents=[common], help="write a split file")
    p.add_argument("annotations", type=Path)
    p.add_argument("features", type=Path)
    p.add_argument("--mode", choices=("per-object", "people-vs-objects"), required=True)
    p.add_argument("--ratio", type=float, default=0.8, help="per-object train share")
    p.add_argument("--test-fraction", type=float, default=0.15, help="people-vs-objects eligible share")
    p.add_argument("--person-category", default="person", help="category name or id")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_data_split)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--num-scenes", type=int, default=None)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--stem", default="synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, data_args], help="train a speaker")
    p.add_argument("--config", type=Path, default=None, help="JSON with training config keys")
    p.add_argument("--split-file", type=Path, default=None)
    p.add_argument("--split", default="train")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--objective", choices=("mle", "mmi"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--mmi-weight", type=float, default=None)
    p.add_argument("--batch-scenes", type=int, default=None)
    _bool_flag(p, "tied", "train with tied same-category groups")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("comprehend", parents=[common, model_args, cand_args], help="resolve expressions")
    p.add_argument("--split", default="test", help="testA, testB, test, val, ...")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_comprehend)

    p = sub.add_parser("generate", parents=[common, model_args, decode_args], help="generate expressions")
    p.add_argument("--split", default="test")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", parents=[common, model_args, decode_args, cand_args], help="score a model")
    p.add_argument("--task", choices=("generation", "comprehension"), required=True)
    p.add_argument("--splits", default="testA,testB", help="comma-separated split names")
    p.add_argument("--label", default=None, help="row name in reports (default: model directory name)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="render eval reports as tables and CSV")
    p.add_argument("reports", nargs="+", type=Path)
    p.add_argument("--out-dir", type=Path, default=None)
    p.set_defaults(func=cmd_report)
    return parser


def _fail(category: str, message: str, code: int) -> int:
    print(f"error: {category}: {message}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:       # --help / --version exit 0, bad usage exits 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if getattr(args, "workers", 1) < 1:
        return _fail("usage", "--workers must be >= 1", 2)
    try:
        return args.func(args)
    except RefexpError as exc:
        return _fail(exc.category, str(exc), exc.exit_code)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except ValueError as exc:       # config values rejected by the dataclasses
        return _fail("config", str(exc), 2)
    except OSError as exc:
        return _fail("io", f"{exc.strerror or exc}: {exc.filename}" if exc.filename else str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
