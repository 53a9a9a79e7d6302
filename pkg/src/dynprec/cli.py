"""Command-line entry point: gen, decode, calibrate, sweep, report.

Every option can also come from a JSON object passed with ``--config``
(keys are option names, dashes or underscores); flags on the command line
win over the file.  The merged options are written to ``config.json`` in the
output directory.

Exit codes: 0 ok, 1 usage, 2 validation, 3 decode failure, 4 I/O.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import plotting
from .controller import ControllerConfig, percentile_threshold
from .cost import CalibrationTargets, CostLedger, HwConfig, calibrate, hw_from_json, system_rollup
from .io import FormatError, ManifestEntry, read_features, read_manifest, read_model, write_features, \
    write_manifest, write_model
from .pipeline import CorpusReport, Experiment, RunConfig, RunMode
from .synth import TaskParams, Utterance, generate_task
from .wfst import EPSILON, BeamConfig, WfstError, parse_wfst, read_symbols, serialize_wfst, write_symbols

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DECODE, EXIT_IO = 0, 1, 2, 3, 4
CSV_SCHEMA_VERSION = 1


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# --- option tables -----------------------------------------------------------
# name -> (type, default, help); bool options are switches

_TP = {f.name: f.default for f in dataclasses.fields(TaskParams)}

GEN_OPTS = {
    "seed": (int, _TP["seed"], "random seed"),
    "senones": (int, _TP["senones"], "number of senones (K)"),
    "dim": (int, _TP["dim"], "feature dimension (D)"),
    "noise": (float, _TP["noise"], "feature noise standard deviation"),
    "vocab": (int, _TP["vocab"], "vocabulary size"),
    "avg_word_len": (float, _TP["avg_word_len"], "mean senones per word"),
    "utterances": (int, _TP["utterances"], "corpus size"),
    "min_words": (int, _TP["min_words"], "shortest utterance in words"),
    "max_words": (int, _TP["max_words"], "longest utterance in words"),
    "successors": (int, _TP["successors"], "grammar successors per word"),
    "p_stay": (float, _TP["p_stay"], "HMM self-loop probability"),
    "context": (int, _TP["context"], "frames of context on each side"),
    "prototype_df": (float, _TP["prototype_df"], "Student-t dof of senone prototypes, 0 = Gaussian"),
    "beam": (float, 12.0, "beam used to seed the initial threshold"),
}
CORPUS_OPTS = {
    "task": (str, None, "task directory written by gen (supplies the four paths below)"),
    "model": (str, None, "model file"),
    "graph": (str, None, "decoding graph in text form"),
    "words": (str, None, "word symbol table"),
    "manifest": (str, None, "corpus manifest"),
}
SEARCH_OPTS = {
    "beam": (float, 12.0, "beam width"),
    "max_active": (int, None, "cap on surviving tokens per frame"),
    "acoustic_scale": (float, 1.0, "weight of acoustic scores"),
}
CONTROL_OPTS = {
    "target": (float, 0.5, "target share of half-precision frames"),
    "delta": (int, 1, "threshold step"),
    "window": (int, 512, "frames in the local balance window"),
    "update_period": (int, 128, "frames between threshold updates"),
    "initial_threshold": (float, None, "starting threshold (default: task.json, else 1000)"),
    "per_utterance": (bool, False, "reset the controller at every utterance"),
    "calibration": (str, None, "hardware calibration file from the calibrate command"),
}
DECODE_OPTS = {
    "mode": (str, "dynamic", "precision policy"),
    "seed": (int, 0, "seed for the random-ablation policy"),
    "baseline": (str, None, "output directory of an earlier fixed-base decode"),
}
SWEEP_OPTS = {
    "targets": (str, "0,0.25,0.5,0.75,1", "comma-separated half-precision targets"),
    "no_warm_start": (bool, False, "start every target from the same initial threshold"),
}
CALIB_OPTS = {
    "model_bytes": (int, HwConfig.model_bytes, "base-precision weight bytes per frame"),
    "dram_efficiency": (float, HwConfig.dram_efficiency, "sustained share of peak DRAM bandwidth"),
    "percentile": (float, 50.0, "token-count percentile for the initial threshold"),
}
REPORT_OPTS = {
    "run": (str, None, "decode output directory to summarize"),
    "base": (str, None, "fixed-base decode output directory (token distribution)"),
    "half": (str, None, "fixed-half decode output directory (token distribution)"),
    "sweep": (str, None, "sweep.csv (or the sweep output directory) to plot"),
    "percentiles": (str, "30,50,70", "percentiles for the fixed-threshold check"),
}
OUT_OPT = {"out": (str, None, "output directory")}
MODES = [m.value for m in RunMode]

COMMANDS = {
    "gen": (GEN_OPTS, "generate a synthetic task"),
    "decode": ({**CORPUS_OPTS, **SEARCH_OPTS, **CONTROL_OPTS, **DECODE_OPTS}, "decode a corpus"),
    "calibrate": ({**CORPUS_OPTS, **SEARCH_OPTS, **CALIB_OPTS}, "fit cost constants to a corpus"),
    "sweep": ({**CORPUS_OPTS, **SEARCH_OPTS, **CONTROL_OPTS, **SWEEP_OPTS}, "sensitivity sweep over targets"),
    "report": (REPORT_OPTS, "figure data and plots from decode outputs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dynprec", description="Dynamic-precision acoustic scoring simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (opts, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON file of option values")
        for key, (typ, default, text) in {**opts, **OUT_OPT}.items():
            flag = "--" + key.replace("_", "-")
            shown = f"{text} (default: {default})" if default is not None else text
            if typ is bool:
                p.add_argument(flag, action="store_true", help=text)
            elif key == "mode":
                p.add_argument(flag, choices=MODES, help=shown)
            else:
                p.add_argument(flag, type=typ, help=shown)
    return parser


def merge_options(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    opts = {**COMMANDS[command][0], **OUT_OPT}
    merged = {k: spec[1] for k, spec in opts.items()}
    explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    if getattr(ns, "config", None):
        try:
            data = json.loads(Path(ns.config).read_text())
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_VALIDATION, f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise CliError(EXIT_VALIDATION, "config must be a JSON object")
        for raw, value in data.items():
            key = raw.replace("-", "_")
            if key not in opts:
                raise CliError(EXIT_VALIDATION, f"unknown config key {raw!r} for {command}")
            merged[key] = _coerce(key, opts[key][0], value)
    merged.update(explicit)
    if merged["out"] is None:
        raise CliError(EXIT_USAGE, "--out is required")
    if command == "decode" and merged["mode"] not in MODES:
        raise CliError(EXIT_VALIDATION, f"mode must be one of {MODES}")
    return merged


def _coerce(key, typ, value):
    if value is None:
        return None
    if typ is bool:
        if not isinstance(value, bool):
            raise CliError(EXIT_VALIDATION, f"{key} must be true or false")
        return value
    try:
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return typ(value)
    except (TypeError, ValueError):
        raise CliError(EXIT_VALIDATION, f"{key}: cannot interpret {value!r} as {typ.__name__}") from None


# --- file helpers ------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(v)
    if v is None:
        return ""
    return v


def write_csv(path: Path, fields: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in fields})


def read_csv(path: Path) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None


def write_json(path: Path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(opts) -> Path:
    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc}") from None
    write_json(out / "config.json", {"csv_schema": CSV_SCHEMA_VERSION, **opts})
    return out


# --- gen ---------------------------------------------------------------------

def cmd_gen(opts) -> int:
    params = {k: opts[k] for k in GEN_OPTS if k != "beam"}
    try:
        task = generate_task(TaskParams(**params))
        beam = BeamConfig(beam_width=opts["beam"])
    except ValueError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None
    out = _out_dir(opts)
    feats = out / "feats"
    feats.mkdir(exist_ok=True)
    entries = []
    for u in task.corpus:
        rel = Path("feats") / f"{u.name}.feat"
        write_features(out / rel, u.features)
        entries.append(ManifestEntry(u.name, rel, u.reference))
    write_manifest(out / "manifest.tsv", entries)
    write_model(out / "model.bin", task.model)
    (out / "graph.wfst").write_text(serialize_wfst(task.graph), encoding="utf-8")
    (out / "words.txt").write_text(write_symbols({EPSILON: "<eps>", **task.words}), encoding="utf-8")

    # seed the threshold from held-out speech, not the test corpus
    held_out = Experiment(task.calibration, task.model, task.graph, task.words)
    counts = held_out.baseline(RunConfig(beam=beam)).token_counts
    write_json(out / "task.json", {
        "params": dataclasses.asdict(task.params),
        "initial_threshold": percentile_threshold(counts, 50),
        "calibration_mean_tokens": float(counts.mean()),
        "frames": int(sum(u.num_frames for u in task.corpus)),
    })
    print(f"wrote {len(task.corpus)} utterances to {out}")
    return EXIT_OK


# --- corpus loading ----------------------------------------------------------

def _paths(opts) -> dict[str, Path]:
    names = {"model": "model.bin", "graph": "graph.wfst", "words": "words.txt", "manifest": "manifest.tsv"}
    paths = {}
    for key, fname in names.items():
        if opts.get(key):
            paths[key] = Path(opts[key])
        elif opts.get("task"):
            paths[key] = Path(opts["task"]) / fname
        else:
            raise CliError(EXIT_USAGE, f"--{key} or --task is required")
    return paths


def load_experiment(opts) -> Experiment:
    paths = _paths(opts)
    try:
        model = read_model(paths["model"])
        graph = parse_wfst(paths["graph"].read_text(encoding="utf-8"))
        words = read_symbols(paths["words"].read_text(encoding="utf-8"))
        corpus = [Utterance(e.name, read_features(e.feature_path), e.reference)
                  for e in read_manifest(paths["manifest"])]
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"missing input: {exc.filename}") from None
    except (FormatError, WfstError, ValueError) as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None
    except OSError as exc:
        raise CliError(EXIT_IO, str(exc)) from None
    missing = {int(o) for o in np.unique(graph.olabel) if o != EPSILON} - set(words)
    if missing:
        raise CliError(EXIT_VALIDATION, f"graph output labels missing from word table: {sorted(missing)[:5]}")
    if not corpus:
        raise CliError(EXIT_VALIDATION, "manifest lists no utterances")
    width = model.feature_dim
    for u in corpus:
        if u.features.shape[1] != width:
            raise CliError(EXIT_VALIDATION, f"{u.name}: feature dim {u.features.shape[1]}, model expects {width}")
    try:
        return Experiment(corpus, model, graph, words)
    except ValueError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None


def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_VALIDATION, f"{path}: invalid JSON: {exc}") from None


def run_config(opts, mode: str = "dynamic") -> RunConfig:
    """RunConfig from merged options.  The initial threshold comes from the
    options, else the calibration file, else the task's task.json."""
    hw = None
    threshold = opts.get("initial_threshold")
    if opts.get("calibration"):
        data = _read_json(Path(opts["calibration"]))
        if isinstance(data, dict):
            data = dict(data)
            from_file = data.pop("initial_threshold", None)
            threshold = threshold if threshold is not None else from_file
        try:
            hw = hw_from_json(data)
        except ValueError as exc:
            raise CliError(EXIT_VALIDATION, f"calibration: {exc}") from None
    if threshold is None and opts.get("task"):
        meta = Path(opts["task"]) / "task.json"
        if meta.exists():
            threshold = _read_json(meta).get("initial_threshold")
    try:
        beam = BeamConfig(opts["beam"], opts["max_active"], opts["acoustic_scale"])
        ctl = ControllerConfig(target_ratio=opts["target"], delta=opts["delta"], window=opts["window"],
                               update_period=opts["update_period"], per_utterance=opts["per_utterance"],
                               **({} if threshold is None else {"initial_threshold": threshold}))
        return RunConfig(mode=RunMode(mode), beam=beam, controller=ctl, hw=hw or HwConfig.default(),
                         seed=opts.get("seed", 0), random_ratio=opts["target"])
    except ValueError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None


# --- decode ------------------------------------------------------------------

LEDGER_FIELDS = list(CostLedger().to_row())
UTTERANCE_FIELDS = ["utterance", "status", "reached_final", "ref_words", "hyp_words", "substitutions",
                    "deletions", "insertions", "wer", "half_ratio"] + LEDGER_FIELDS
SHARE_FIELDS = ["am_energy", "ivector_energy", "feature_energy", "beam_energy", "am_time",
                "frontend_time", "beam_time", "dram_within_am"]
SAVING_FIELDS = ["am_energy_saving", "am_time_saving", "sys_energy_saving", "sys_time_saving"]
ROLLUP_FIELDS = ["mode", "utterances", "failed", "frames", "half_ratio", "ref_words", "substitutions",
                 "deletions", "insertions", "wer", "energy_j", "time_s", "energy_per_frame_j"] \
    + SHARE_FIELDS + SAVING_FIELDS + ["best_utterance", "worst_utterance"]
SAVINGS_FIELDS = ["utterance", "half_ratio"] + SAVING_FIELDS
TRACE_FIELDS = ["utterance", "frame", "utt_frame", "token_count", "threshold", "decision"]
ABLATION_FIELDS = ["policy", "seed", "target", "half_ratio", "wer"]
SWEEP_FIELDS = ["target", "achieved_ratio", "wer", "am_time_saving", "am_energy_saving",
                "sys_time_saving", "sys_energy_saving"]


def _utterance_rows(report: CorpusReport):
    for r in report.results:
        yield {"utterance": r.name, "status": "ok" if r.ok else f"failed: {r.error}",
               "reached_final": int(r.reached_final), "ref_words": len(r.reference),
               "hyp_words": len(r.hypothesis), "substitutions": r.wer.substitutions,
               "deletions": r.wer.deletions, "insertions": r.wer.insertions, "wer": r.wer.rate,
               "half_ratio": r.half_ratio, **r.ledger.to_row()}


def _load_baseline(path: Path) -> dict[str, CostLedger]:
    rows = read_csv(path / "utterances.csv")
    try:
        return {row["utterance"]: CostLedger.from_row(row) for row in rows}
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_VALIDATION, f"{path}: unreadable baseline ledger ({exc})") from None


def cmd_decode(opts) -> int:
    exp = load_experiment(opts)
    cfg = run_config(opts, opts["mode"])
    out = _out_dir(opts)
    report = exp.run(cfg)

    if opts["baseline"]:
        base_ledgers = _load_baseline(Path(opts["baseline"]))
    elif cfg.mode is RunMode.FIXED_BASE:
        base_ledgers = report.ledgers
    else:
        base_ledgers = exp.baseline(cfg).ledgers
    roll = system_rollup(base_ledgers, report.ledgers)

    (out / "transcripts.txt").write_text(
        "".join(f"{r.name}\t{' '.join(r.hypothesis)}\n" for r in report.results), encoding="utf-8")
    write_csv(out / "utterances.csv", UTTERANCE_FIELDS, _utterance_rows(report))
    write_csv(out / "trace.csv", TRACE_FIELDS, report.trace_rows())
    write_csv(out / "savings.csv", SAVINGS_FIELDS,
              [{"utterance": n, "half_ratio": v[0], **dict(zip(SAVING_FIELDS, v[1:]))}
               for n, v in roll.per_utterance.items()]
              + [{"utterance": "ALL", "half_ratio": report.half_ratio,
                  **{k: getattr(roll, k) for k in SAVING_FIELDS}}])
    led, w = report.ledger, report.wer
    rollup = {"mode": cfg.mode.value, "utterances": len(report.results), "failed": len(report.failures),
              "frames": led.frames, "half_ratio": led.half_ratio, "ref_words": w.ref_len,
              "substitutions": w.substitutions, "deletions": w.deletions, "insertions": w.insertions,
              "wer": w.rate, "energy_j": led.total_energy, "time_s": led.total_time,
              "energy_per_frame_j": led.total_energy / max(led.frames, 1),
              **(led.shares() if led.frames else dict.fromkeys(SHARE_FIELDS, math.nan)),
              **{k: getattr(roll, k) for k in SAVING_FIELDS},
              "best_utterance": roll.best, "worst_utterance": roll.worst}
    write_csv(out / "rollup.csv", ROLLUP_FIELDS, [rollup])
    write_json(out / "summary.json", {
        "mode": cfg.mode.value, "wer": w.rate, "substitutions": w.substitutions, "deletions": w.deletions,
        "insertions": w.insertions, "reference_words": w.ref_len, "half_ratio": led.half_ratio,
        "failed_utterances": report.failures,
        "unfinished_utterances": [r.name for r in report.results if r.ok and not r.reached_final]})

    if cfg.mode is RunMode.RANDOM:
        dyn = exp.run(replace(cfg, mode=RunMode.DYNAMIC))
        write_csv(out / "ablation.csv", ABLATION_FIELDS, [
            {"policy": "token-count", "seed": "", "target": opts["target"], "half_ratio": dyn.half_ratio,
             "wer": dyn.wer.rate},
            {"policy": "random", "seed": cfg.seed, "target": opts["target"], "half_ratio": report.half_ratio,
             "wer": w.rate}])

    print(f"{cfg.mode.value}: WER {100 * w.rate:.2f}% over {w.ref_len} words, "
          f"half ratio {led.half_ratio:.3f}, AM energy saving {100 * roll.am_energy_saving:.1f}%")
    if report.failures:
        print(f"{len(report.failures)} utterance(s) failed: {', '.join(report.failures)}", file=sys.stderr)
        return EXIT_DECODE
    return EXIT_OK


# --- calibrate ---------------------------------------------------------------

def cmd_calibrate(opts) -> int:
    exp = load_experiment(opts)
    try:
        beam = BeamConfig(opts["beam"], opts["max_active"], opts["acoustic_scale"])
        base_hw = replace(HwConfig(), model_bytes=opts["model_bytes"], dram_efficiency=opts["dram_efficiency"])
    except ValueError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None
    out = _out_dir(opts)
    report = exp.baseline(RunConfig(beam=beam))
    if report.failures:
        print(f"{len(report.failures)} utterance(s) failed during calibration", file=sys.stderr)
        return EXIT_DECODE
    counts = report.token_counts
    try:
        targets = CalibrationTargets(nominal_tokens_per_frame=float(counts.mean()))
        hw = calibrate(targets, base_hw)
    except ValueError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from None
    # inputs plus targets; the derived constants are re-solved on load
    data = {**base_hw.to_dict(), "targets": dataclasses.asdict(targets),
            "initial_threshold": percentile_threshold(counts, opts["percentile"])}
    write_json(out / "calibration.json", data)
    check = exp.run(RunConfig(mode=RunMode.FIXED_BASE, beam=beam, hw=hw)).ledger.shares()
    write_csv(out / "shares.csv", ["share", "value"], [{"share": k, "value": check[k]} for k in SHARE_FIELDS])
    print(f"calibrated to {counts.mean():.1f} tokens/frame; AM energy share {100 * check['am_energy']:.1f}%")
    return EXIT_OK


# --- sweep -------------------------------------------------------------------

def _floats(text: str, name: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(EXIT_VALIDATION, f"{name} must be a comma-separated list of numbers") from None


def cmd_sweep(opts) -> int:
    targets = _floats(opts["targets"], "targets")
    if not targets or any(not 0 <= t <= 1 for t in targets):
        raise CliError(EXIT_VALIDATION, "targets must lie in [0, 1]")
    exp = load_experiment(opts)
    cfg = run_config(opts)
    out = _out_dir(opts)
    rows = exp.sensitivity_sweep(targets, cfg, warm_start=not opts["no_warm_start"])
    write_csv(out / "sweep.csv", SWEEP_FIELDS, rows)
    for r in rows:
        print(f"target {r['target']:.2f}: ratio {r['achieved_ratio']:.3f}  WER {100 * r['wer']:.2f}%  "
              f"AM energy saving {100 * r['am_energy_saving']:.1f}%")
    return EXIT_OK


# --- report ------------------------------------------------------------------

def _trace(run_dir: Path) -> dict[str, np.ndarray]:
    rows = read_csv(run_dir / "trace.csv")
    try:
        return {"utterance": np.array([r["utterance"] for r in rows]),
                "token_count": np.array([int(r["token_count"]) for r in rows], dtype=np.int64),
                "threshold": np.array([float(r["threshold"]) if r["threshold"] else math.nan for r in rows]),
                "decision": np.array([r["decision"] for r in rows])}
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_VALIDATION, f"{run_dir}/trace.csv: {exc}") from None


def _cdf(counts: np.ndarray):
    values, freq = np.unique(counts, return_counts=True)
    return values, np.cumsum(freq) / counts.size


def cmd_report(opts) -> int:
    if not (opts["run"] or opts["base"] or opts["half"]):
        raise CliError(EXIT_USAGE, "give at least one of --run, --base, --half")
    pcts = _floats(opts["percentiles"], "percentiles")
    traces = {k: _trace(Path(opts[k])) for k in ("run", "base", "half") if opts[k]}
    sweep_rows = None
    if opts["sweep"]:
        sweep_path = Path(opts["sweep"])
        sweep_rows = read_csv(sweep_path / "sweep.csv" if sweep_path.is_dir() else sweep_path)
    out = _out_dir(opts)
    stats = {}

    main = traces.get("run") or traces.get("base") or traces.get("half")
    first = main["utterance"] == main["utterance"][0] if main["utterance"].size else np.zeros(0, bool)
    frames = np.arange(main["token_count"].size)
    write_csv(out / "tokens_per_frame.csv", ["utterance", "frame", "token_count"],
              ({"utterance": u, "frame": int(i), "token_count": int(c)}
               for i, (u, c) in enumerate(zip(main["utterance"], main["token_count"]))))
    if first.any():
        plotting.tokens_per_frame(np.arange(first.sum()), main["token_count"][first], out / "tokens_per_frame.png",
                                  title=f"Active tokens per frame, {main['utterance'][0]}")

    # cumulative token-count distribution per run
    series = {}
    for label in ("base", "half", "run"):
        if label in traces and traces[label]["token_count"].size:
            series[label] = _cdf(traces[label]["token_count"])
    write_csv(out / "token_cdf.csv", ["series", "token_count", "cumulative_frequency"],
              ({"series": s, "token_count": int(x), "cumulative_frequency": float(y)}
               for s, (xs, ys) in series.items() for x, y in zip(xs, ys)))
    if series:
        plotting.token_cdf(series, out / "token_cdf.png")
    for label in series:
        stats[f"{label}_median_tokens"] = float(np.median(traces[label]["token_count"]))

    if "base" in traces and "half" in traces:
        # a threshold fixed from the base distribution selects fewer half frames
        # once half precision itself inflates the counts
        b, h = traces["base"]["token_count"], traces["half"]["token_count"]
        rows = []
        for p in pcts:
            th = percentile_threshold(b, p)
            rows.append({"percentile": p, "threshold": th, "base_share_below": float(np.mean(b < th)),
                         "half_share_below": float(np.mean(h < th))})
        write_csv(out / "percentile_threshold.csv",
                  ["percentile", "threshold", "base_share_below", "half_share_below"], rows)

    if "run" in traces:
        th = traces["run"]["threshold"]
        counts = traces["run"]["token_count"]
        write_csv(out / "threshold_trace.csv", ["frame", "token_count", "threshold"],
                  ({"frame": int(i), "token_count": int(c), "threshold": float(t)}
                   for i, (c, t) in enumerate(zip(counts, th))))
        finite = th[np.isfinite(th)]
        if finite.size:
            stats["threshold_peak_to_peak"] = float(finite.max() - finite.min())
            stats["token_count_range"] = int(counts.max() - counts.min())
            stats["token_count_p99"] = float(np.percentile(counts, 99))
            plotting.threshold_trace(frames, th, counts, out / "threshold_trace.png")

        run_dir = Path(opts["run"])
        ratios = np.array([float(r["half_ratio"]) for r in read_csv(run_dir / "utterances.csv")])
        hist, edges = np.histogram(ratios, bins=10, range=(0.0, 1.0))
        edges = np.round(edges, 6)
        write_csv(out / "half_ratio_hist.csv", ["bin_lo", "bin_hi", "utterances"],
                  ({"bin_lo": float(lo), "bin_hi": float(hi), "utterances": int(n)}
                   for lo, hi, n in zip(edges[:-1], edges[1:], hist)))
        plotting.half_ratio_histogram(edges, hist, out / "half_ratio_hist.png")

    if sweep_rows is not None:
        try:
            plotting.sweep_curve(sweep_rows, out / "sweep.png")
        except (KeyError, ValueError) as exc:
            raise CliError(EXIT_VALIDATION, f"sweep file: {exc}") from None
    write_json(out / "stats.json", stats)
    print(f"report written to {out}")
    return EXIT_OK


HANDLERS = {"gen": cmd_gen, "decode": cmd_decode, "calibrate": cmd_calibrate, "sweep": cmd_sweep,
            "report": cmd_report}


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        opts = merge_options(ns.command, ns)
        return HANDLERS[ns.command](opts)
    except CliError as exc:
        print(f"dynprec {ns.command}: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"dynprec {ns.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
