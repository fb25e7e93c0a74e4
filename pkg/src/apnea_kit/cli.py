"""Command-line entry point: ``apnea-kit <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .autolabel import RULE3, RULE4, hypopnea_index, relabel
from .config import Flavor, RunConfig
from .errors import ApneaKitError, ConfigError, DataError, MissingSignal
from .featurize import ANCHOR_S, build_bank, gather, registry_hash, registry_names, save_matrix, window_starts_for
from .forest import Spo2OnlyModel, load_model, predict_proba, spo2_drop_scores
from .metrics import categorize_ahi, pearson_r
from .pipeline import (
    load_cohort,
    load_folds,
    postprocess,
    predicted_ahi,
    run_pipeline,
    specs_for,
    spo2_scores,
    timeline,
    write_json,
)
from .recording import find_bundles, load_bundle, write_annotations
from .synth import SynthSpec, write_cohort

logger = logging.getLogger("apnea_kit")

DATA_ENV = "APNEA_KIT_DATA"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are user errors (exit 1)
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(args, doc: dict, text: str | None = None) -> None:
    if args.json:
        print(json.dumps(doc, sort_keys=True))
    elif text is not None:
        print(text)


def _data_dir(args) -> Path:
    d = args.data or os.environ.get(DATA_ENV)
    if not d:
        raise ConfigError(f"no data directory: pass --data or set {DATA_ENV}")
    return Path(d)


def _load_config(args, **overrides) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(Path(args.config))
    else:
        cfg = RunConfig()
    changes = {k: v for k, v in overrides.items() if v is not None}
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.with_(**changes) if changes else cfg


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    spec_doc = {}
    if args.spec:
        spec_doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
    for key in ("n_subjects", "nights_per_subject", "hours", "wake_fraction"):
        v = getattr(args, key)
        if v is not None:
            spec_doc[key] = v
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(spec_doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad synth spec: {exc}") from None
    records = write_cohort(spec, Path(args.out))
    doc = {"out": str(args.out), "recordings": len(records), "events": sum(r.n_events for r in records)}
    _emit(args, doc, f"wrote {len(records)} recordings ({doc['events']} events) to {args.out}")
    return 0


def cmd_autolabel(args) -> int:
    data = _data_dir(args)
    rules = {"3": [RULE3], "4": [RULE4], "both": [RULE3, RULE4]}[args.rule]
    rows, bad = [], []
    for d in find_bundles(data):
        try:
            bundle = load_bundle(d)
            out = {}
            for rule in rules:
                events = relabel(bundle, rule)
                pct = int(rule.desat_threshold_pct)
                write_annotations(d / f"annotations.auto{pct}.json", events)
                out[pct] = hypopnea_index(events, bundle.hypnogram)
            rows.append(
                {"recording_id": bundle.recording_id, "hi_expert": hypopnea_index(bundle.annotations, bundle.hypnogram),
                 **{f"hi_auto{k}": v for k, v in out.items()}}
            )
        except DataError as exc:
            bad.append((str(d), str(exc)))
    for path, msg in bad:
        print(f"skipped {path}: {msg}", file=sys.stderr)
    report = {"recordings": rows, "skipped": [p for p, _ in bad]}
    for key in ("hi_auto3", "hi_auto4"):
        vals = [(r["hi_expert"], r[key]) for r in rows if key in r]
        if len(vals) >= 2:
            try:
                report[f"pearson_expert_vs_{key}"] = pearson_r([a for a, _ in vals], [b for _, b in vals])
            except DataError:
                report[f"pearson_expert_vs_{key}"] = None
    write_json(data / "autolabel_report.json", report)
    _emit(args, report, f"relabelled {len(rows)} recording(s), skipped {len(bad)}")
    if bad and not args.skip_bad:
        return 1
    return 0


def cmd_extract(args) -> int:
    data = _data_dir(args)
    flavor = Flavor(args.flavor)
    if flavor is Flavor.SPO2_ONLY:
        raise ConfigError("Spo2Only has no feature registry to extract")
    registry = flavor.registry()
    names = registry_names(registry)
    out = Path(args.out)
    done = []
    for d in find_bundles(data):
        try:
            bundle = load_bundle(d)
            if flavor.needs_spo2 and bundle.spo2 is None:
                raise MissingSignal(f"flavor {flavor.value} needs an SpO2 trace")
            fm = gather(build_bank(bundle, registry), registry)
        except DataError as exc:
            raise type(exc)(f"{d}: {exc}") from None
        save_matrix(fm, out / bundle.recording_id)
        done.append(bundle.recording_id)
    manifest = {"flavor": flavor.value, "registry": list(names), "registry_hash": registry_hash(names),
                "registry_size": len(names), "recordings": done}
    write_json(out / "manifest.json", manifest)
    _emit(args, manifest, f"extracted {len(done)} recording(s), {len(names)} features (hash {manifest['registry_hash']})")
    return 0


def cmd_select(args) -> int:
    from .pipeline import feature_sets, make_folds

    cfg = _load_config(args, data_dir=args.data or os.environ.get(DATA_ENV), output_dir=args.out)
    cfg = cfg.with_(selection=type(cfg.selection)(**{**asdict(cfg.selection), "enabled": True}))
    cohort = load_cohort(cfg, args.jobs)
    folds = make_folds([i.subject_id for i in cohort], cfg.k_folds, cfg.seed)
    out = {}
    for flavor in cfg.flavor_list:
        if flavor.uses_forest:
            sets = feature_sets(cfg, flavor, folds, cohort, cfg.run_dir)
            out[flavor.value] = {str(k): len(v) for k, v in sets.items()}
    _emit(args, {"run_dir": str(cfg.run_dir), "selected_sizes": out}, f"selection written under {cfg.run_dir / 'selection'}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args, data_dir=args.data or None, output_dir=args.out)
    if not args.config and not args.data and os.environ.get(DATA_ENV):
        cfg = cfg.with_(data_dir=os.environ[DATA_ENV])
    run_dir = run_pipeline(cfg, args.jobs)
    from .report import format_table

    summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    _emit(args, {"run_dir": str(run_dir), "summary": summary}, f"run directory: {run_dir}\n" + format_table(summary))
    return 0


def cmd_report(args) -> int:
    from .report import build_reports, format_table

    run_dir = Path(args.run)
    prov = json.loads((run_dir / "provenance.json").read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(prov["config"])
    if args.data:
        cfg = cfg.with_(data_dir=args.data)
    cohort = load_cohort(cfg, args.jobs)
    load_folds(run_dir)
    summary = build_reports(run_dir, cohort, cfg)
    _emit(args, summary, format_table(summary))
    return 0


def predict_bundle(model, bundle, wake_mode: str = "majority") -> dict:
    """Score one recording with a saved model; returns events and AHI."""
    n_seconds = int(math.floor(bundle.respiration.end_s))
    if isinstance(model, Spo2OnlyModel):
        if bundle.spo2 is None:
            raise MissingSignal("flavor Spo2Only needs an SpO2 trace")
        starts = window_starts_for(bundle.respiration)
        anchors = starts + ANCHOR_S
        scores = timeline(n_seconds, int(anchors[0]), spo2_drop_scores(bundle.spo2, anchors), math.nan)
        thr, i = model.desat_threshold_pct, model.i_positive_predictions
    else:
        specs = specs_for(model.registry)
        if any(s.uses_spo2 for s in specs) and bundle.spo2 is None:
            raise MissingSignal(f"model flavor {model.flavor or 'with SpO2'} needs an SpO2 trace")
        bank = build_bank(bundle, specs)
        proba = predict_proba(model, gather(bank, specs))
        scores = timeline(n_seconds, bank.first_s + ANCHOR_S, proba, math.nan)
        thr, i = model.decision_threshold, model.i_positive_predictions
    pp = postprocess(np.nan_to_num(scores, nan=-np.inf), thr, i, bundle.hypnogram, wake_mode)
    ahi = predicted_ahi(pp.events, bundle.hypnogram)
    return {
        "recording_id": bundle.recording_id,
        "n_events": len(pp.events),
        "ahi": ahi,
        "category": categorize_ahi(ahi).value,
        "hypnogram_assumed": bundle.hypnogram.assumed,
        "events": [e.to_json() for e in pp.events],
        "scores": scores,
    }


def cmd_predict(args) -> int:
    model = load_model(Path(args.model))
    bundle_dir = Path(args.bundle)
    bundle = load_bundle(bundle_dir)
    res = predict_bundle(model, bundle)
    out = Path(args.out) if args.out else bundle_dir / "events.pred.json"
    doc = {k: v for k, v in res.items() if k != "scores"}
    write_json(out, doc)
    _emit(
        args,
        {k: v for k, v in doc.items() if k != "events"} | {"events_file": str(out)},
        f"{bundle.recording_id}: {doc['n_events']} events, AHI {doc['ahi']:.1f} ({doc['category']}) -> {out}",
    )
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # Subcommands accept the global flags too; SUPPRESS keeps their
        # defaults from overwriting values given before the subcommand.
        g = argparse.ArgumentParser(add_help=False)
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g.add_argument("--seed", type=int, default=d(None), help="random seed (overrides config)")
        g.add_argument("--jobs", type=int, default=d(1), help="parallel worker processes")
        g.add_argument("--config", default=d(None), help="run configuration JSON")
        g.add_argument("--json", action="store_true", default=d(False), help="machine-readable output on stdout")
        g.add_argument("-v", "--verbose", action="count", default=d(0))
        return g

    common = global_flags(suppress=True)
    p = _Parser(
        prog="apnea-kit", description="Sleep-apnea event detection from respiratory effort.", parents=[global_flags(False)]
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    s.add_argument("--out", required=True)
    s.add_argument("--spec", help="JSON file with generator settings")
    s.add_argument("--subjects", dest="n_subjects", type=int)
    s.add_argument("--nights", dest="nights_per_subject", type=int)
    s.add_argument("--hours", type=float)
    s.add_argument("--wake-fraction", dest="wake_fraction", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("autolabel", parents=[common], help="score hypopneas with the 3%%/4%% rules")
    s.add_argument("--data")
    s.add_argument("--rule", choices=["3", "4", "both"], default="both")
    s.add_argument("--skip-bad", action="store_true", help="exit 0 even if some bundles were skipped")
    s.set_defaults(func=cmd_autolabel)

    s = sub.add_parser("extract", parents=[common], help="write per-recording feature matrices")
    s.add_argument("--data")
    s.add_argument("--flavor", choices=[f.value for f in Flavor if f.uses_forest], default=Flavor.RESP_SPO2.value)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("select", parents=[common], help="run feature selection only")
    s.add_argument("--data")
    s.add_argument("--out", default=None, help="output root (default from config)")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("run", parents=[common], help="full cross-validated run")
    s.add_argument("--data")
    s.add_argument("--out", default=None, help="output root (default from config)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("predict", parents=[common], help="score one recording with a saved model")
    s.add_argument("--model", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("report", parents=[common], help="rebuild reports of a run directory")
    s.add_argument("--run", required=True)
    s.add_argument("--data", help="override the data directory recorded in the run")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return exc.exit_code
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ApneaKitError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
