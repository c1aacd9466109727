"""Command-line entry point: ``harenctc <command> [flags]``.

Configuration is merged as defaults < JSON file (``--config``) < flags, and
the effective configuration is written to ``config.json`` in the output
directory. The output directory comes from ``--out``, else the
``HARENCTC_OUT`` environment variable, else the config file, else
``harenctc_out``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import ctclab
from . import numkernel as nk
from .analysis import AnalysisConfig, null_false_positive_rate, sample_recordings, significance_report, usage_stats
from .dataio import Manifest, SyntheticSpec, generate_synthetic
from .gradcheck import model_suite
from .model import ModelConfig, init_params
from .objective import LossConfig
from .pipeline import (
    TrainConfig,
    evaluate_subjects,
    fit_codebook,
    load_segments,
    mean_sd,
    roc_points,
    run_scenario,
)

log = logging.getLogger("harenctc")

OUT_ENV = "HARENCTC_OUT"
DEFAULT_OUT = "harenctc_out"
ABLATIONS = ("full", "no-haren", "no-ctc")
COMMANDS = ("synth", "gen-labels", "train", "eval", "crossval", "layer-sweep", "analyze", "gradcheck")

# output file names
CONFIG_FILE = "config.json"
REPORT_FILE = "report.txt"
SUMMARY_FILE = "summary.json"
CONFUSION_FILE = "confusion.csv"
ROC_FILE = "roc.csv"
HISTORY_FILE = "history.csv"
PARAMS_FILE = "params.npz"
CODEBOOK_FILE = "codebook.bin"
TARGETS_FILE = "targets.json"
SWEEP_FILE = "layer_sweep.csv"
USAGE_FILE = "centroid_usage.csv"
GRADCHECK_FILE = "gradcheck.csv"


class CliError(Exception):
    pass


def _section(cls, drop=("seed",)) -> dict:
    return {f.name: getattr(cls(), f.name) for f in fields(cls) if f.name not in drop}


def default_config() -> dict:
    return {
        "seed": 0,
        "out": None,
        "precision": 64,
        "manifest": None,
        "ablation": "full",
        "params": None,
        "split": "dev",
        "targets": None,
        "null_trials": 0,
        "synth": _section(SyntheticSpec),
        "model": _section(ModelConfig, drop=()),
        "train": _section(TrainConfig, drop=("seed", "loss")),
        "loss": _section(LossConfig, drop=()),
        "analysis": _section(AnalysisConfig),
    }


def merge_config(base: dict, update: dict, where: str = "") -> dict:
    """Recursive merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise CliError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliError(f"config key {where + key!r} must be an object")
            out[key] = merge_config(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _subjects(text: str) -> tuple[int, int]:
    try:
        n, d = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CONTROLxDEPRESSED such as 8x8, got {text!r}") from None
    return n, d


# flag dest -> config path; flags default to None so only given ones apply
_FLAG_PATHS = {
    "seed": ("seed",),
    "out": ("out",),
    "precision": ("precision",),
    "manifest": ("manifest",),
    "ablation": ("ablation",),
    "params": ("params",),
    "split": ("split",),
    "targets": ("targets",),
    "null_trials": ("null_trials",),
    "frames": ("synth", "n_frames"),
    "segments": ("synth", "segments_per_subject"),
    "layers": ("synth", "n_layers"),
    "dim": ("synth", "dim"),
    "tok_dim": ("synth", "tok_dim"),
    "density": ("synth", "marker_density"),
    "strength": ("synth", "marker_strength"),
    "layout": ("synth", "marker_layout"),
    "k": ("model", "k"),
    "layer": ("model", "baseline_layer"),
    "heads": ("model", "n_heads"),
    "scenario": ("train", "scenario"),
    "folds": ("train", "folds"),
    "epochs": ("train", "epochs"),
    "lr": ("train", "lr"),
    "batch_size": ("train", "batch_size"),
    "crop_frames": ("train", "crop_frames"),
    "ctc_weight": ("loss", "ctc_weight"),
    "alpha": ("analysis", "alpha"),
    "bonferroni": ("analysis", "bonferroni"),
    "sample_size": ("analysis", "sample_size"),
}


def _flags_to_update(args: argparse.Namespace) -> dict:
    update: dict = {}
    for dest, path in _FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = update
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    if getattr(args, "subjects", None) is not None:
        n, d = args.subjects
        update.setdefault("synth", {}).update(n_control=n, n_depressed=d)
    return update


def resolve_config(args: argparse.Namespace, defaults: dict | None = None) -> dict:
    cfg = defaults or default_config()
    if args.config:
        try:
            from_file = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise CliError("config file must hold a JSON object")
        cfg = merge_config(cfg, from_file)
    cfg = merge_config(cfg, _flags_to_update(args))
    out = args.out or os.environ.get(OUT_ENV) or cfg["out"] or DEFAULT_OUT
    cfg["out"] = str(out)
    if cfg["precision"] not in (32, 64):
        raise CliError(f"precision must be 32 or 64, got {cfg['precision']}")
    if cfg["ablation"] not in ABLATIONS:
        raise CliError(f"ablation must be one of {ABLATIONS}, got {cfg['ablation']!r}")
    return cfg


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / CONFIG_FILE, cfg)
    return out


# -- config -> library objects ----------------------------------------------


def _manifest(cfg: dict) -> Manifest:
    if not cfg["manifest"]:
        raise CliError("no manifest given; pass --manifest or set 'manifest' in the config")
    return Manifest.load(cfg["manifest"])


def _model_config(cfg: dict, segments) -> ModelConfig:
    model = dict(cfg["model"])
    m, _, d = segments[0].layers.shape
    # layer count and width always follow the data
    model["n_layers"], model["dim"] = int(m), int(d)
    if cfg["ablation"] == "no-haren":
        model["architecture"] = "single-layer"
    cfg["model"] = model
    return ModelConfig(**model)


def _train_config(cfg: dict) -> TrainConfig:
    loss = dict(cfg["loss"])
    if cfg["ablation"] == "no-ctc":
        loss["ctc_weight"] = 0.0
    train = {**cfg["train"], "k": cfg["model"]["k"]}
    return TrainConfig(seed=cfg["seed"], loss=LossConfig(**loss), **train)


# -- report writers ---------------------------------------------------------


def write_reports(out: Path, result, scenario: str, extra: dict | None = None) -> None:
    report = result.report
    summary = {"scenario": scenario, "report": report.to_dict(), "n_subjects": len(result.labels)}
    summary.update(extra or {})
    summary["history"] = [
        {"epoch_focal": h.epoch_focal, "epoch_ctc": h.epoch_ctc, "ctc_excluded": h.ctc_excluded, "eval_f1": h.eval_f1}
        for h in result.histories
    ]
    _write_json(out / SUMMARY_FILE, summary)
    _write_report_txt(out / REPORT_FILE, report, scenario, extra)
    _write_confusion(out / CONFUSION_FILE, report.confusion)
    ids = sorted(result.labels)
    _write_roc(out / ROC_FILE, [report.subject_probs[s] for s in ids], [result.labels[s] for s in ids])
    with (out / HISTORY_FILE).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fold", "epoch", "focal", "ctc", "eval_f1"])
        for fold, h in enumerate(result.histories):
            for e, focal in enumerate(h.epoch_focal):
                ctc = h.epoch_ctc[e]
                f1 = h.eval_f1[e] if e < len(h.eval_f1) else ""
                w.writerow([fold, e + 1, repr(focal), "" if math.isnan(ctc) else repr(ctc), f1])


def _write_report_txt(path: Path, report, scenario: str, extra: dict | None) -> None:
    lines = [f"scenario: {scenario}"]
    for key, value in (extra or {}).items():
        if not isinstance(value, (dict, list)):
            lines.append(f"{key}: {value}")
    for key in ("macro_f1", "macro_recall", "macro_precision"):
        lines.append(f"{key}: {getattr(report, key):.4f}")
    if report.best_epoch is not None:
        lines.append(f"best_epoch: {report.best_epoch}")
    (tn, fp), (fn, tp) = report.confusion
    lines.append(f"confusion: tn={tn} fp={fp} fn={fn} tp={tp}")
    if report.per_fold:
        lines.append("")
        lines.append("fold  macro_f1  macro_recall  macro_precision")
        for row in report.per_fold:
            lines.append(
                f"{row['fold']:>4}  {row['macro_f1']:8.4f}  {row['macro_recall']:12.4f}  {row['macro_precision']:15.4f}"
            )
    if report.mean:
        lines.append("")
        for key in ("macro_f1", "macro_recall", "macro_precision"):
            lines.append(f"{key} mean +- sd: {report.mean[key]:.4f} +- {report.sd[key]:.4f}")
    path.write_text("\n".join(lines) + "\n")


def _write_confusion(path: Path, confusion) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true", "pred_0", "pred_1"])
        for label, row in enumerate(confusion):
            w.writerow([label, *row])


def _write_roc(path: Path, probs, labels) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in roc_points(probs, labels):
            w.writerow([repr(thr), repr(fpr), repr(tpr)])


# -- commands ---------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    spec = SyntheticSpec(seed=cfg["seed"], **cfg["synth"])
    out = _out_dir(cfg)
    path = generate_synthetic(spec, out)
    print(path)
    return 0


def cmd_gen_labels(cfg: dict) -> int:
    manifest = _manifest(cfg)
    segments = load_segments(manifest)
    k = cfg["model"]["k"]
    tags = {r.split for r in manifest.records}
    fit_on = [s for s, r in zip(segments, manifest.records) if r.split == "train"] if "train" in tags else segments
    train = cfg["train"]
    codebook = fit_codebook(fit_on, k, cfg["seed"], train["kmeans_iter"], train["kmeans_max_frames"])
    out = _out_dir(cfg)
    codebook.save(out / CODEBOOK_FILE)
    stride = cfg["model"]["ctc_pool_stride"]
    entries = []
    for seg, ref in zip(segments, manifest.records):
        raw = ctclab.tokenize(seg.tok, codebook)
        reindexed = ctclab.collapse(ctclab.reindex_tokens(raw, seg.label, k))
        input_length = -(-len(raw) // stride)
        entries.append(
            {
                "segment_id": seg.segment_id,
                "subject_id": seg.subject_id,
                "label": seg.label,
                "split": ref.split,
                "raw_tokens": raw.tolist(),
                "tokens": reindexed,
                "input_length": input_length,
                "feasible": ctclab.required_frames(reindexed) <= input_length,
            }
        )
    cache = {
        "k": k,
        "vocab_size": ctclab.vocab_size(k),
        "blank": ctclab.BLANK,
        "codebook_seed": cfg["seed"],
        "fit_population": "train" if "train" in tags else "all",
        "segments": entries,
    }
    (out / TARGETS_FILE).write_text(json.dumps(cache, sort_keys=True) + "\n")
    n_bad = sum(not e["feasible"] for e in entries)
    print(f"codebook k={k} (vocab {cache['vocab_size']}), {len(entries)} segments, {n_bad} infeasible")
    return 0


def _scenario_command(cfg: dict, default_scenario: str) -> int:
    manifest = _manifest(cfg)
    segments = load_segments(manifest)
    model_cfg = _model_config(cfg, segments)
    if cfg["train"]["scenario"] is None:
        cfg["train"]["scenario"] = default_scenario
    train_cfg = _train_config(cfg)
    out = _out_dir(cfg)
    result = run_scenario(manifest, model_cfg, train_cfg, segments)
    write_reports(out, result, train_cfg.scenario, {"ablation": cfg["ablation"]})
    if train_cfg.scenario == "upper-bound":
        np.savez(out / PARAMS_FILE, **result.params[0].state_dict())
        if result.codebooks:
            result.codebooks[0].save(out / CODEBOOK_FILE)
    print((out / REPORT_FILE).read_text(), end="")
    return 0


def cmd_train(cfg: dict) -> int:
    return _scenario_command(cfg, "upper-bound")


def cmd_crossval(cfg: dict) -> int:
    return _scenario_command(cfg, "generalization")


def cmd_eval(cfg: dict) -> int:
    if not cfg["params"]:
        raise CliError("eval needs --params pointing at a saved params.npz")
    manifest = _manifest(cfg)
    if cfg["split"] != "all":
        manifest = manifest.split(cfg["split"])
    segments = load_segments(manifest)
    model_cfg = _model_config(cfg, segments)
    params = init_params(model_cfg, seed=cfg["seed"])
    with np.load(cfg["params"]) as blob:
        params.load_state_dict({k: blob[k] for k in blob.files})
    out = _out_dir(cfg)
    report, labels = evaluate_subjects(segments, params, model_cfg)
    from .pipeline import ScenarioResult

    write_reports(out, ScenarioResult(report, [], labels), "eval", {"split": cfg["split"], "ablation": cfg["ablation"]})
    print((out / REPORT_FILE).read_text(), end="")
    return 0


def cmd_layer_sweep(cfg: dict) -> int:
    cfg["ablation"] = "no-haren"
    manifest = _manifest(cfg)
    segments = load_segments(manifest)
    if cfg["train"]["scenario"] is None:
        cfg["train"]["scenario"] = "generalization"
    base = _model_config(cfg, segments)
    train_cfg = _train_config(cfg)
    out = _out_dir(cfg)
    rows = []
    for layer in range(base.n_layers):
        model_cfg = ModelConfig(**{**asdict(base), "baseline_layer": layer})
        report = run_scenario(manifest, model_cfg, train_cfg, segments).report
        rows.append({"layer": layer, "macro_f1": report.macro_f1, "macro_recall": report.macro_recall,
                     "macro_precision": report.macro_precision, "fold_f1_mean": report.mean.get("macro_f1"),
                     "fold_f1_sd": report.sd.get("macro_f1")})
        log.info("layer %d macro F1 %.4f", layer, report.macro_f1)
    f1s = [r["macro_f1"] for r in rows]
    with (out / SWEEP_FILE).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])
    spread = max(f1s) - min(f1s)
    mu, sd = mean_sd(f1s)
    _write_json(out / SUMMARY_FILE, {"layers": rows, "spread": spread, "mean": mu, "sd": sd})
    lines = ["layer  macro_f1"] + [f"{r['layer']:>5}  {r['macro_f1']:.4f}" for r in rows]
    lines += ["", f"spread (max - min): {spread:.4f}", f"mean +- sd: {mu:.4f} +- {sd:.4f}"]
    (out / REPORT_FILE).write_text("\n".join(lines) + "\n")
    print((out / REPORT_FILE).read_text(), end="")
    return 0


def cmd_analyze(cfg: dict) -> int:
    if not cfg["targets"]:
        raise CliError("analyze needs --targets pointing at a targets.json cache")
    cache = json.loads(Path(cfg["targets"]).read_text())
    acfg = AnalysisConfig(seed=cfg["seed"], **cfg["analysis"])
    chosen = sample_recordings(cache["segments"], acfg)
    groups: dict[int, list] = {}
    for entry in chosen:
        groups.setdefault(int(entry["label"]), []).append(entry["raw_tokens"])
    usage = usage_stats(groups, k=cache["k"])
    out = _out_dir(cfg)
    rows = significance_report(usage, acfg.alpha, acfg.bonferroni, out / USAGE_FILE)
    summary = {
        "k": usage.k,
        "alpha": acfg.alpha,
        "bonferroni": acfg.bonferroni,
        "recordings": len(chosen),
        "frames": {"ND": int(usage.counts[0].sum()), "D": int(usage.counts[1].sum())},
        "frequencies": {"ND": usage.frequencies[0].tolist(), "D": usage.frequencies[1].tolist()},
        "low_expected_centroids": usage.low_expected,
        "rows": rows,
        "n_flagged": sum(r["flag"] for r in rows),
    }
    if cfg["null_trials"]:
        summary["null_false_positive_rate"] = null_false_positive_rate(
            cfg["null_trials"], k=usage.k, alpha=acfg.alpha, seed=cfg["seed"]
        )
    _write_json(out / SUMMARY_FILE, summary)
    lines = ["id  diff      chi2      p         flag"]
    for r in rows:
        chi2 = "n/a" if r["chi2"] is None else f"{r['chi2']:.3f}"
        p = "n/a" if r["p"] is None else f"{r['p']:.4g}"
        lines.append(f"{r['id']:>2}  {r['diff']:+.4f}  {chi2:>8}  {p:>8}  {'*' if r['flag'] else ''}")
    if usage.low_expected:
        lines.append(f"warning: expected count < 5 for centroids {usage.low_expected}")
    if "null_false_positive_rate" in summary:
        lines.append(f"null false-positive rate: {summary['null_false_positive_rate']:.4f}")
    (out / REPORT_FILE).write_text("\n".join(lines) + "\n")
    print((out / REPORT_FILE).read_text(), end="")
    return 0


def cmd_gradcheck(cfg: dict) -> int:
    rows = model_suite(seed=cfg["seed"])
    out = _out_dir(cfg)
    with (out / GRADCHECK_FILE).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "max_rel_err", "entries", "passed"])
        for r in rows:
            w.writerow([r.group, repr(r.max_rel_err), r.n_entries, r.passed])
    width = max(len(r.group) for r in rows)
    print(f"{'group':<{width}}  max_rel_err  entries  status")
    for r in rows:
        print(f"{r.group:<{width}}  {r.max_rel_err:11.3e}  {r.n_entries:7d}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.group for r in rows if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}")
        return 1
    print(f"all {len(rows)} groups within {rows[0].tol:g}")
    return 0


HANDLERS = {
    "synth": cmd_synth,
    "gen-labels": cmd_gen_labels,
    "train": cmd_train,
    "eval": cmd_eval,
    "crossval": cmd_crossval,
    "layer-sweep": cmd_layer_sweep,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else config, else {DEFAULT_OUT})")
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest")
    data.add_argument("--k", type=int, help="centroid count")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--ablation", choices=ABLATIONS)
    run.add_argument("--scenario", choices=("upper-bound", "generalization"))
    run.add_argument("--folds", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--lr", type=float)
    run.add_argument("--batch-size", type=int)
    run.add_argument("--crop-frames", type=int)
    run.add_argument("--ctc-weight", type=float)
    run.add_argument("--layer", type=int, help="layer used by the no-haren baseline")
    run.add_argument("--heads", type=int)

    parser = argparse.ArgumentParser(prog="harenctc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--subjects", type=_subjects, help="CONTROLxDEPRESSED, e.g. 8x8")
    p.add_argument("--frames", type=int)
    p.add_argument("--segments", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--tok-dim", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--strength", type=float)
    p.add_argument("--layout", choices=("both", "split", "shallow", "deep"))

    sub.add_parser("gen-labels", parents=[common, data], help="fit the codebook and cache CTC targets")
    sub.add_parser("train", parents=[common, data, run], help="train (upper-bound scenario by default)")
    p = sub.add_parser("eval", parents=[common, data, run], help="score saved params on a split")
    p.add_argument("--params", help="params.npz written by train")
    p.add_argument("--split", help="split tag to score, or 'all'")
    sub.add_parser("crossval", parents=[common, data, run], help="stratified k-fold cross-validation")
    sub.add_parser("layer-sweep", parents=[common, data, run], help="no-haren baseline once per layer")
    p = sub.add_parser("analyze", parents=[common], help="centroid usage chi-square report")
    p.add_argument("--targets", help="targets.json written by gen-labels")
    p.add_argument("--alpha", type=float)
    p.add_argument("--bonferroni", action="store_true", default=None)
    p.add_argument("--sample-size", type=int)
    p.add_argument("--null-trials", type=int, help="also estimate the null false-positive rate")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    defaults = default_config()
    defaults["train"]["scenario"] = None  # each command picks its own default
    try:
        cfg = resolve_config(args, defaults)
        nk.set_precision(cfg["precision"])
        return HANDLERS[args.command](cfg)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        nk.set_precision(64)


if __name__ == "__main__":
    sys.exit(main())
