"""Command-line entry point: ``bfscnn <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data-format error, 3 numeric failure.
Every command writes a JSON manifest beside its outputs that is enough to
re-run it (``bfscnn rerun MANIFEST``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from . import eval as ev
from .formats import FormatError, read_bgs, read_bgs_csv, write_bfs_csv, write_bgs, write_bgs_csv
from .lcf import FitError, LmConfig, fit_distributed
from .model import (ArchitectureError, ArchitectureSpec, CheckpointError, TrainConfig, TrainingError,
                    infer_distributed, load_checkpoint, save_checkpoint, train)
from .nn import NumericError
from .spectra import (DistributedBgs, SimRanges, SpectrumError, SweepRange, make_attenuated_scenario,
                      make_step_scenario, make_training_batch)

log = logging.getLogger("bfscnn")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    argv: List[str]
    config: dict
    seed: int
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)
    version: str = __version__
    started: str = ""
    finished: str = ""
    exit_code: Optional[int] = None
    summary: dict = field(default_factory=dict)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True, default=str))


def manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def command_from_manifest(path) -> List[str]:
    """Argument vector that reproduces the run recorded in ``path``."""
    return list(json.loads(Path(path).read_text())["argv"])


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# flag helpers
# ---------------------------------------------------------------------------

def parse_range(text: str):
    """``"0.3"`` -> (0.3, 0.3); ``"0.1:0.5"`` -> (0.1, 0.5)."""
    parts = text.split(":")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"not a number or lo:hi range: {text!r}") from None
    if len(vals) == 1:
        return vals[0], vals[0]
    if len(vals) != 2 or vals[0] > vals[1]:
        raise UsageError(f"bad range {text!r}; expected lo:hi with lo <= hi")
    return vals[0], vals[1]


def parse_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise UsageError(f"bad value list {text!r}") from None


def parse_cells(text: Optional[str], n: int):
    if not text:
        return None
    if ":" in text:
        lo, hi = (int(v) for v in text.split(":"))
        cells = list(range(lo, hi))
    else:
        cells = [int(v) for v in text.split(",")]
    if any(c < 0 or c >= n for c in cells):
        raise UsageError(f"cell index outside [0, {n})")
    return cells


def _fixed(text: str, name: str) -> float:
    lo, hi = parse_range(text)
    if lo != hi:
        raise UsageError(f"--{name} must be a single value here, got a range")
    return lo


def _read_input(path: str) -> DistributedBgs:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input file not found: {p}")
    return read_bgs_csv(p) if p.suffix.lower() == ".csv" else read_bgs(p)


def _write_bgs(path: Path, data: DistributedBgs):
    if path.suffix.lower() == ".csv":
        write_bgs_csv(path, data)
    else:
        write_bgs(path, data)


def _extractors(args, want_lcf=True):
    out = []
    if want_lcf and not getattr(args, "no_lcf", False):
        out.append(ev.Extractor.lcf(_lm_config(args), args.threads))
    ck = getattr(args, "checkpoint", None)
    if ck:
        if not Path(ck).exists():
            raise UsageError(f"checkpoint not found: {ck}")
        out.append(ev.Extractor.cnn(load_checkpoint(ck), args.precision))
    if not out:
        raise UsageError("no extractor selected: pass --checkpoint for CNN rows or drop --no-lcf")
    return out


def _lm_config(args) -> LmConfig:
    return LmConfig(step_stop=args.step_stop, max_iter=args.max_iter, lambda_init=args.lambda_init)


def _data_rng(seed, *sub):
    return np.random.default_rng([seed, 0, *sub])


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(args, run: RunManifest):
    sweep = SweepRange(args.f_min, args.f_max, args.freq_points)
    rng = _data_rng(args.seed)
    if args.step_heated is not None:
        data, _ = make_step_scenario(_fixed(args.bfs, "bfs"), args.step_heated, args.step_start,
                                     args.traces, _fixed(args.sw, "sw"), _fixed(args.snr, "snr"),
                                     args.step_ramp, sweep, rng)
    elif args.snr_end is not None:
        data, _ = make_attenuated_scenario(_fixed(args.bfs, "bfs"), _fixed(args.sw, "sw"),
                                           _fixed(args.snr, "snr"), args.snr_end, args.traces,
                                           sweep, rng)
    else:
        ranges = SimRanges(*parse_range(args.bfs), *parse_range(args.sw), *parse_range(args.snr))
        data, _ = make_training_batch(args.traces, ranges, sweep, rng)
    out = Path(args.out)
    _write_bgs(out, data)
    run.outputs.append(str(out))
    run.summary = {"n_points": sweep.n_points, "n_traces": data.n_traces}
    return EXIT_OK


def _bfs_failures(trace) -> int:
    return len(trace.diagnostics.get("failures", {}))


def cmd_fit(args, run: RunManifest):
    data = _read_input(args.input)
    run.inputs.append(args.input)
    res = fit_distributed(data, _lm_config(args), args.threads)
    out = Path(args.out)
    write_bfs_csv(out, res)
    run.outputs.append(str(out))
    failed = _bfs_failures(res)
    run.summary = {"n_traces": len(res), "failed": failed,
                   "not_converged": res.diagnostics["not_converged"]}
    if failed:
        log.error("%d of %d columns failed to fit", failed, len(res))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_infer(args, run: RunManifest):
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    ckpt = load_checkpoint(args.checkpoint)
    data = _read_input(args.input)
    run.inputs += [args.checkpoint, args.input]
    res = infer_distributed(ckpt, data, args.chunk, args.precision)
    out = Path(args.out)
    write_bfs_csv(out, res)
    run.outputs.append(str(out))
    bad = int(np.count_nonzero(~np.isfinite(res.values)))
    run.summary = {"n_traces": len(res), "non_finite": bad}
    if bad:
        log.error("%d of %d outputs are not finite", bad, len(res))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_train(args, run: RunManifest):
    cfg = TrainConfig(epochs=args.epochs, updates_per_epoch=args.updates_per_epoch,
                      batch_size=args.batch, traces=args.traces, alpha0=args.lr, decay=args.decay,
                      decay_rule=args.decay_rule, seed=args.seed, corpus_batches=args.corpus_batches,
                      anneal_from=args.anneal_from, anneal_factor=args.anneal_factor,
                      precision=args.train_precision)
    ranges = SimRanges(*parse_range(args.bfs), *parse_range(args.sw), *parse_range(args.snr))
    spec = ArchitectureSpec.small() if args.arch == "small" else ArchitectureSpec()
    ckpt, losses = train(cfg, ranges, spec=spec, progress_every=args.progress)
    out = Path(args.out)
    save_checkpoint(out, ckpt)
    loss_path = Path(args.loss_csv) if args.loss_csv else out.with_name(out.stem + "_loss.csv")
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["update", "loss"])
        for t, v in enumerate(losses):
            w.writerow([t, repr(float(v))])
    run.outputs += [str(out), str(loss_path)]
    run.summary = {"updates": len(losses), "final_loss": float(losses[-1]) if losses else None}
    return EXIT_OK


def _grid_spec(args) -> ev.GridSpec:
    if args.axes == "table1":
        return ev.GridSpec.table1()
    if not (args.snr_values and args.bfs_values and args.sw_values):
        raise UsageError("--axes custom needs --snr-values, --bfs-values and --sw-values")
    return ev.GridSpec(tuple(parse_list(args.snr_values)), tuple(parse_list(args.bfs_values)),
                       tuple(parse_list(args.sw_values)))


def cmd_eval_grid(args, run: RunManifest):
    grid = _grid_spec(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = 4480 if args.full else args.n_per_cell
    cells = parse_cells(args.cells, grid.n_cells)
    if args.dry_run:
        names = (["LCF"] if not args.no_lcf else []) + (["CNN"] if args.checkpoint else [])
        res = ev.GridResult.skeleton(grid, names or ["LCF"], n, args.seed)
    else:
        res = ev.run_grid(_extractors(args), grid, n, SweepRange(), args.seed, cells,
                          progress=True)
    res.metadata = {"version": __version__}
    run.outputs += [str(p) for p in res.write(out)]
    run.summary = {"cells": grid.n_cells, "shape": list(grid.shape),
                   "ok": int(np.count_nonzero(res.status == "ok")),
                   "failed": int(np.count_nonzero(res.status == "failed"))}
    return EXIT_OK


def cmd_eval_uncertainty(args, run: RunManifest):
    extractors = _extractors(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    positions = np.arange(args.traces) * args.spacing
    bfs, sw = _fixed(args.bfs, "bfs"), _fixed(args.sw, "sw")
    traces = {e.name: [] for e in extractors}
    for r in range(args.repeats):
        data, _ = make_attenuated_scenario(bfs, sw, args.snr_start, args.snr_end, args.traces,
                                           SweepRange(), _data_rng(args.seed, r))
        for e in extractors:
            traces[e.name].append(e.extract(data))
    report = {}
    rows = {}
    for name, reps in traces.items():
        u = ev.uncertainty_trace(reps, positions)
        report[name] = {"coeffs": list(u.coeffs), "mean_sd": float(np.mean(u.sd))}
        rows[name] = u
    (out / "uncertainty.json").write_text(json.dumps(
        {"repeats": args.repeats, "bfs": bfs, "sw": sw, "snr_start": args.snr_start,
         "snr_end": args.snr_end, "spacing": args.spacing, "extractors": report},
        indent=1, sort_keys=True))
    with open(out / "uncertainty.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["position"] + [f"{n}_{k}" for n in rows for k in ("sd", "fit")])
        for i, z in enumerate(positions):
            w.writerow([repr(float(z))] + [repr(float(v)) for u in rows.values()
                                           for v in (u.sd[i], u.fitted[i])])
    run.outputs += [str(out / "uncertainty.json"), str(out / "uncertainty.csv")]
    run.summary = report
    return EXIT_OK


def cmd_eval_resolution(args, run: RunManifest):
    extractors = _extractors(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.input:
        data = _read_input(args.input)
        run.inputs.append(args.input)
    else:
        data, _ = make_step_scenario(_fixed(args.bfs, "bfs"), args.step_heated, args.step_start,
                                     args.traces, _fixed(args.sw, "sw"), _fixed(args.snr, "snr"),
                                     args.step_ramp, SweepRange(), _data_rng(args.seed))
    positions = np.arange(data.n_traces) * args.spacing
    widths = {}
    for e in extractors:
        widths[e.name] = ev.spatial_resolution(e.extract(data), positions, floor=args.floor)
        print(f"{e.name}\t{widths[e.name]:.6g}")
    if data.truth is not None:
        try:
            widths["truth"] = ev.spatial_resolution(data.truth, positions, floor=args.floor)
        except ev.EvalError:
            pass
    (out / "resolution.json").write_text(json.dumps({"spacing": args.spacing, "width_m": widths},
                                                    indent=1, sort_keys=True))
    run.outputs.append(str(out / "resolution.json"))
    run.summary = widths
    return EXIT_OK


def cmd_bench(args, run: RunManifest):
    extractors = _extractors(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.input:
        data = _read_input(args.input)
        run.inputs.append(args.input)
    else:
        data = ev.make_bench_set(args.traces, args.seed)
    reports = {e.name: ev.bench(e, data, args.repeats).to_dict() for e in extractors}
    doc = {"n_traces": data.n_traces, "repeats": args.repeats, "reports": reports,
           "reference_per_1000": ev.REFERENCE_TIMINGS,
           "reference_ratio": ev.REFERENCE_TIMINGS["LCF"] / ev.REFERENCE_TIMINGS["CNN"]}
    if {"CNN", "LCF"} <= set(reports):
        doc["ratio_lcf_over_cnn"] = reports["LCF"]["per_1000_median"] / reports["CNN"]["per_1000_median"]
    for name, r in reports.items():
        print(f"{name}\t{r['per_1000_median']:.4g} s per 1000 traces")
    if "ratio_lcf_over_cnn" in doc:
        print(f"ratio\t{doc['ratio_lcf_over_cnn']:.3g}")
    (out / "bench.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    run.outputs.append(str(out / "bench.json"))
    run.summary = {k: v["per_1000_median"] for k, v in reports.items()}
    return EXIT_OK


def cmd_rerun(args, run: RunManifest):
    argv = command_from_manifest(args.manifest)
    log.info("re-running: bfscnn %s", " ".join(argv))
    return main(argv)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0, help="root of all random streams")
    p.add_argument("--threads", type=int, default=1, help="worker cap; 1 is the reference path")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")


def _lm_flags(p):
    p.add_argument("--step-stop", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--lambda-init", type=float, default=1e-3)


def _cnn_flags(p, lcf=True):
    p.add_argument("--checkpoint", help="trained network; adds CNN rows")
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    if lcf:
        p.add_argument("--no-lcf", action="store_true", help="skip the curve-fitting rows")
        _lm_flags(p)


def _scenario_flags(p, traces=224):
    p.add_argument("--traces", type=int, default=traces)
    p.add_argument("--bfs", default="0.3", help="value or lo:hi (fraction of sweep)")
    p.add_argument("--sw", default="0.25", help="value or lo:hi (fraction of sweep)")
    p.add_argument("--snr", default="11", help="value or lo:hi in dB")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="bfscnn", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("simulate", help="write simulated spectra to a BGS file")
    _common(p)
    _scenario_flags(p)
    p.add_argument("--freq-points", type=int, default=151)
    p.add_argument("--f-min", type=float, default=0.0)
    p.add_argument("--f-max", type=float, default=1.0)
    p.add_argument("--step-heated", type=float, help="heated-section BFS; enables a step scenario")
    p.add_argument("--step-start", type=int, default=100, help="first position of the ramp")
    p.add_argument("--step-ramp", type=int, default=10, help="ramp length in samples")
    p.add_argument("--snr-end", type=float, help="SNR at the far end; enables an attenuated fiber")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="Lorentzian fit of every column")
    _common(p)
    _lm_flags(p)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("infer", help="CNN extraction of every column")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--precision", choices=("float32", "float64"), default="float32")
    p.add_argument("--chunk", type=int, default=2048)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train", help="train the network on simulated spectra")
    _common(p)
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--updates-per-epoch", type=int, default=d.updates_per_epoch)
    p.add_argument("--batch", type=int, default=d.batch_size)
    p.add_argument("--traces", type=int, default=d.traces)
    p.add_argument("--lr", type=float, default=d.alpha0)
    p.add_argument("--decay", type=float, default=d.decay)
    p.add_argument("--decay-rule", choices=("inverse", "linear"), default=d.decay_rule)
    p.add_argument("--corpus-batches", type=int, default=0, help="fixed corpus size; 0 = fresh draws")
    p.add_argument("--anneal-from", type=int, default=0, help="update at which the step drops; 0 = never")
    p.add_argument("--anneal-factor", type=float, default=0.1)
    p.add_argument("--precision", dest="train_precision", choices=("float32", "float64"),
                   default="float64", help="activation and gradient dtype")
    r = SimRanges()
    p.add_argument("--bfs", default=f"{r.bfs_lo}:{r.bfs_hi}")
    p.add_argument("--sw", default=f"{r.sw_lo}:{r.sw_hi}")
    p.add_argument("--snr", default=f"{r.snr_lo}:{r.snr_hi}")
    p.add_argument("--arch", choices=("default", "small"), default="default")
    p.add_argument("--progress", type=int, default=10, help="log every k updates")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluation reports")
    esub = p.add_subparsers(dest="eval_command", parser_class=_Parser, required=True)

    g = esub.add_parser("grid", help="RMSE/SD over a parameter grid")
    _common(g)
    _cnn_flags(g)
    g.add_argument("--axes", choices=("table1", "custom"), default="table1")
    g.add_argument("--snr-values")
    g.add_argument("--bfs-values")
    g.add_argument("--sw-values")
    g.add_argument("--n-per-cell", type=int, default=500)
    g.add_argument("--full", action="store_true", help="4480 spectra per cell")
    g.add_argument("--cells", help="subset as lo:hi or a comma list of flat indices")
    g.add_argument("--dry-run", action="store_true", help="write the empty report skeleton")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_eval_grid)

    u = esub.add_parser("uncertainty", help="SD along an attenuated fiber over repeats")
    _common(u)
    _cnn_flags(u)
    u.add_argument("--traces", type=int, default=200)
    u.add_argument("--bfs", default="0.3")
    u.add_argument("--sw", default="0.25")
    u.add_argument("--snr-start", type=float, default=20.0)
    u.add_argument("--snr-end", type=float, default=5.0)
    u.add_argument("--repeats", type=int, default=10)
    u.add_argument("--spacing", type=float, default=1.0, help="meters between positions")
    u.add_argument("--out-dir", required=True)
    u.set_defaults(func=cmd_eval_uncertainty)

    s = esub.add_parser("resolution", help="10-90 %% transition width")
    _common(s)
    _cnn_flags(s)
    s.add_argument("--in", dest="input", help="BGS file with a step; simulated when absent")
    _scenario_flags(s, traces=200)
    s.add_argument("--step-heated", type=float, default=0.6)
    s.add_argument("--step-start", type=int, default=100)
    s.add_argument("--step-ramp", type=int, default=10)
    s.add_argument("--spacing", type=float, default=1.0)
    s.add_argument("--floor", type=float, default=1e-3)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_eval_resolution)

    b = sub.add_parser("bench", help="seconds per 1000 spectra")
    _common(b)
    _cnn_flags(b)
    b.add_argument("--in", dest="input")
    b.add_argument("--traces", type=int, default=1000)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out-dir", required=True)
    b.set_defaults(func=cmd_bench)

    p = sub.add_parser("rerun", help="repeat the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun, seed=0, threads=1, verbose=False, quiet=False)
    return ap


def _primary_out(args) -> Optional[Path]:
    for attr in ("out", "out_dir"):
        v = getattr(args, attr, None)
        if v:
            return Path(v)
    return None


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if not logging.getLogger().handlers:
        logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.getLogger("bfscnn").setLevel(level)
    if args.threads < 1:
        print("bfscnn: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    name = args.command + (f" {args.eval_command}" if args.command == "eval" else "")
    config = {k: v for k, v in vars(args).items() if k != "func"}
    run = RunManifest(name, argv, config, args.seed, started=_now())
    code = EXIT_USAGE
    try:
        code = args.func(args, run)
    except UsageError as exc:
        log.error("%s", exc)
        code = EXIT_USAGE
    except (FormatError, CheckpointError) as exc:
        log.error("format error: %s", exc)
        code = EXIT_FORMAT
    except (NumericError, TrainingError, FitError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        code = EXIT_NUMERIC
    except (SpectrumError, ev.EvalError, ArchitectureError, ValueError, OSError) as exc:
        log.error("%s", exc)
        code = EXIT_USAGE
    run.finished = _now()
    run.exit_code = code
    out = _primary_out(args)
    if args.command != "rerun" and out is not None and (out.exists() or out.parent.exists()):
        try:
            run.write(manifest_path(out))
        except OSError as exc:
            log.error("could not write manifest: %s", exc)
    return code


if __name__ == "__main__":
    sys.exit(main())
