"""Command line front end.

Subcommands run one experiment each (focus, diffuser-focus, hologram,
aberration, classify), compare the two training algorithms against the
model-based baseline (compare), train that baseline alone (insilico), serve a
simulated bench over TCP (serve-sim), or re-render figures from saved
histories (report).

Every training run writes the same bundle into its output directory: the
resolved config.toml, a streamed metrics.csv, the final pattern as raw
float32 plus a PGM preview, summary.txt, and the standard figures. Runs are
deterministic: a rerun with the same config and a fresh local bench
reproduces metrics.csv byte for byte.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from dataclasses import fields as dataclass_fields
from dataclasses import replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:           # 3.10
    import tomli as tomllib

from . import blackbox, fileio, optics, report, rl, tasks
from .errors import ConfigError, FormatError, InstrumentError, ProtocolError

TRAINER_FIELDS = {f.name for f in dataclass_fields(rl.TrainerConfig)}

BENCH_KEYS = {"shape", "pitch_um", "wavelength_um", "distance_mm", "slm_bits",
              "seed", "noise", "diffuser", "aberration"}
NOISE_KEYS = {"photon_budget", "read_sigma"}
DIFFUSER_KEYS = {"seed", "correlation_px"}
ABERRATION_KEYS = {"defocus_rms", "astigmatism_rms", "coma_rms", "shift_px"}
OUTPUT_KEYS = {"snapshot_every", "plots"}

TASK_KEYS = {
    "focus": {"name", "target_region"},
    "diffuser-focus": {"name", "target_region"},
    "hologram": {"name", "target"},
    "aberration": {"name", "target", "insilico_steps", "insilico_lr"},
    "classify": {"name", "minibatch_size", "insilico_steps", "insilico_lr"},
}

# per-command trainer defaults on top of TrainerConfig's own
COMMAND_TRAINER_DEFAULTS = {
    "focus": {"measurement_budget": 20000},
    "diffuser-focus": {"measurement_budget": 20000},
    "hologram": {"measurement_budget": 20000},
    "aberration": {"measurement_budget": 10000},
    "classify": {"measurement_budget": 200000, "metric_every": 4},
}


# ---------------------------------------------------------------------------
# config plumbing

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _check_keys(table: dict, allowed: set, where: str) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: "
                          f"{', '.join(sorted(unknown))}")


def build_bench(raw: dict) -> optics.BenchConfig:
    table = dict(raw.get("bench", {}))
    _check_keys(table, BENCH_KEYS, "bench")
    noise = table.pop("noise", True)
    if noise is True:
        noise = optics.NoiseModel()
    elif noise is False:
        noise = None
    elif isinstance(noise, dict):
        _check_keys(noise, NOISE_KEYS, "bench.noise")
        noise = optics.NoiseModel(**noise)
    else:
        raise ConfigError(f"[bench] noise must be a table or false, got {noise!r}")
    diffuser = table.pop("diffuser", None)
    if diffuser is not None:
        _check_keys(diffuser, DIFFUSER_KEYS, "bench.diffuser")
        diffuser = optics.DiffuserSpec(**diffuser)
    aberration = table.pop("aberration", None)
    if aberration is not None:
        _check_keys(aberration, ABERRATION_KEYS, "bench.aberration")
        aberration = dict(aberration)
        if "shift_px" in aberration:
            aberration["shift_px"] = tuple(aberration["shift_px"])
        aberration = optics.AberrationSpec(**aberration)
    if "shape" in table:
        table["shape"] = tuple(table["shape"])
    try:
        return optics.BenchConfig(noise=noise, diffuser=diffuser,
                                  aberration=aberration, **table)
    except TypeError as exc:
        raise ConfigError(f"[bench]: {exc}") from None


def trainer_settings(raw: dict, command: str, args) -> dict:
    settings = dict(COMMAND_TRAINER_DEFAULTS.get(command, {}))
    table = dict(raw.get("trainer", {}))
    _check_keys(table, TRAINER_FIELDS, "trainer")
    settings.update(table)
    if getattr(args, "budget", None) is not None:
        settings["measurement_budget"] = args.budget
    settings.pop("seed", None)   # seeds come from --seed
    return settings


def parse_seeds(text: str) -> list:
    try:
        seeds = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"seeds must be a comma-separated list of ints, "
                          f"got {text!r}") from None
    if not seeds:
        raise ConfigError("at least one seed is required")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds in {text!r}")
    return seeds


# resolved-config serialisation (small subset of TOML: scalars, lists, tables)

def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, float):
        if math.isinf(value):
            return "-inf" if value < 0 else "inf"
        if math.isnan(value):
            return "nan"
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialise config value {value!r}")


def format_toml(tables: dict) -> str:
    chunks = []
    for name, table in tables.items():
        lines = [f"[{name}]"]
        lines.extend(f"{key} = {_toml_value(val)}" for key, val in table.items())
        chunks.append("\n".join(lines))
    return "\n\n".join(chunks) + "\n"


def bench_tables(bench: optics.BenchConfig) -> dict:
    tables = {"bench": {
        "shape": list(bench.shape),
        "pitch_um": float(bench.pitch_um),
        "wavelength_um": float(bench.wavelength_um),
        "distance_mm": float(bench.distance_mm),
        "slm_bits": bench.slm_bits,
        "seed": bench.seed,
    }}
    if bench.noise is None:
        tables["bench"]["noise"] = False
    else:
        tables["bench.noise"] = {"photon_budget": float(bench.noise.photon_budget),
                                 "read_sigma": float(bench.noise.read_sigma)}
    if bench.diffuser is not None:
        tables["bench.diffuser"] = {"seed": bench.diffuser.seed,
                                    "correlation_px": float(bench.diffuser.correlation_px)}
    if bench.aberration is not None:
        ab = bench.aberration
        tables["bench.aberration"] = {"defocus_rms": float(ab.defocus_rms),
                                      "astigmatism_rms": float(ab.astigmatism_rms),
                                      "coma_rms": float(ab.coma_rms),
                                      "shift_px": list(ab.shift_px)}
    return tables


def resolved_config(bench, tcfg: rl.TrainerConfig, task_table: dict,
                    output_table: dict) -> str:
    tables = bench_tables(bench)
    tables["trainer"] = {f.name: getattr(tcfg, f.name)
                         for f in dataclass_fields(rl.TrainerConfig)}
    tables["task"] = task_table
    tables["output"] = output_table
    return format_toml(tables)


# ---------------------------------------------------------------------------
# task assembly

def make_task(command: str, bench: optics.BenchConfig, raw_task: dict, args,
              initial_phase=None):
    """Build the task for a subcommand; returns (task, resolved task table)."""
    table = dict(raw_task)
    _check_keys(table, TASK_KEYS[command], f"task ({command})")
    declared = table.get("name")
    task_name = "focus" if command == "diffuser-focus" else command
    if declared is not None and declared != task_name:
        raise ConfigError(f"config is for task {declared!r}, command wants {task_name!r}")

    if command in ("focus", "diffuser-focus"):
        region = args.region if getattr(args, "region", None) is not None \
            else table.get("target_region", 2)
        task = tasks.FocusTask(bench, target_region=region)
        return task, {"name": task_name, "target_region": region}

    if command == "hologram":
        target_name = getattr(args, "target", None) or table.get("target", "grating")
        target = tasks.make_target(target_name, bench.shape)
        return tasks.HologramTask(bench, target), {"name": task_name,
                                                   "target": target_name}

    if command == "aberration":
        target_name = getattr(args, "target", None) or table.get("target", "boat")
        target = tasks.make_target(target_name, bench.shape)
        task = tasks.AberrationTask(bench, target, initial_phase)
        return task, {"name": task_name, "target": target_name,
                      "insilico_steps": _insilico_steps(table, args),
                      "insilico_lr": _insilico_lr(table, args)}

    if command == "classify":
        mb = getattr(args, "minibatch", None) or table.get("minibatch_size", 8)
        task = tasks.ClassifyTask(bench, tasks.load_bundled_digits("train"),
                                  tasks.load_bundled_digits("test"),
                                  minibatch_size=mb)
        return task, {"name": task_name, "minibatch_size": mb}

    raise ConfigError(f"unknown task command {command!r}")


def _insilico_steps(table, args) -> int:
    flag = getattr(args, "steps", None)
    return flag if flag is not None else table.get("insilico_steps", 400)


def _insilico_lr(table, args) -> float:
    flag = getattr(args, "lr", None)
    return flag if flag is not None else table.get("insilico_lr", 0.05)


def aberration_initial_phase(bench: optics.BenchConfig, target, steps: int,
                             lr: float):
    """Model-based solution on the idealised bench: the pattern you would
    install if the hardware matched its drawing."""
    ideal = bench.ideal()
    ref_task = tasks.HologramTask(ideal, target)
    result = rl.train_insilico(ideal, ref_task, steps=steps, lr=lr)
    return result.phase, result.metric


# ---------------------------------------------------------------------------
# run bundle

def _snapshot(run_dir: Path, stem: str, phase) -> None:
    fileio.write_raw(run_dir / f"{stem}.opb", phase)
    fileio.write_pgm(run_dir / f"{stem}.pgm", optics.wrap_phase(phase))


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.10g}"
    return str(value)


def write_summary(path: Path, entries: dict) -> None:
    with open(path, "w") as f:
        for key, value in entries.items():
            f.write(f"{key} = {_fmt_value(value)}\n")


def run_experiment(bench, task, tcfg: rl.TrainerConfig, algo: str,
                   run_dir: Path, task_table: dict, output_table: dict,
                   instrument: str | None):
    """One training run with its full output bundle. Returns the history."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(
        resolved_config(bench, tcfg, task_table, output_table))
    snap_every = output_table.get("snapshot_every", 0)

    env = blackbox.connect_instrument(bench, instrument)
    t0 = time.perf_counter()
    with open(run_dir / "metrics.csv", "w", newline="") as csv:
        csv.write(",".join(rl.HISTORY_CSV_FIELDS) + "\n")
        csv.flush()

        def on_round(rec, pol):
            csv.write(rl.format_record(rec) + "\n")
            csv.flush()
            if snap_every and rec.round and rec.round % snap_every == 0:
                _snapshot(run_dir, f"pattern_r{rec.round:05d}", pol.mean)

        train = rl.train_ppo if algo == "ppo" else rl.train_pg
        history = train(env, task, tcfg, on_round=on_round)
    env.close()
    wall = time.perf_counter() - t0

    final_phase = history.policy.mean
    _snapshot(run_dir, "pattern_final", final_phase)
    final_metric = task.metric(final_phase)
    metrics = [r.metric for r in history.records if not math.isnan(r.metric)]
    summary = {
        "task": task.name,
        "algo": algo,
        "seed": tcfg.seed,
        "measurement_budget": tcfg.measurement_budget,
        "measurements_used": history.records[-1].measurements,
        "rounds": history.records[-1].round,
        "final_metric": final_metric,
        "best_metric": max(metrics) if metrics else math.nan,
        "final_sigma": history.policy.sigma,
    }
    write_summary(run_dir / "summary.txt", summary)
    if output_table.get("plots", True):
        report.emit_plots(run_dir, {algo: history.records})
    print(f"[{task.name}/{algo} seed {tcfg.seed}] metric {final_metric:.6g} "
          f"after {summary['measurements_used']} measurements "
          f"({summary['rounds']} rounds, {wall:.1f}s wall)", flush=True)
    return history, final_metric


def _output_table(raw: dict, args) -> dict:
    table = dict(raw.get("output", {}))
    _check_keys(table, OUTPUT_KEYS, "output")
    resolved = {"snapshot_every": table.get("snapshot_every", 0),
                "plots": table.get("plots", True)}
    if getattr(args, "no_plots", False):
        resolved["plots"] = False
    return resolved


def _inject_hidden_parts(command: str, bench: optics.BenchConfig) -> optics.BenchConfig:
    if command == "diffuser-focus" and bench.diffuser is None:
        bench = replace(bench, diffuser=optics.DiffuserSpec())
    if command == "aberration" and bench.aberration is None:
        bench = replace(bench, aberration=optics.AberrationSpec(
            defocus_rms=0.5, astigmatism_rms=0.3, coma_rms=0.2, shift_px=(0, 2)))
    return bench


# ---------------------------------------------------------------------------
# subcommands

def cmd_run(args) -> int:
    command = args.command
    raw = _load_config(args.config)
    bench = _inject_hidden_parts(command, build_bench(raw))
    out = Path(args.out if args.out is not None else Path("runs") / command)
    out.mkdir(parents=True, exist_ok=True)
    seeds = parse_seeds(args.seed)
    settings = trainer_settings(raw, command, args)
    output_table = _output_table(raw, args)

    initial_phase = None
    if command == "aberration":
        table = dict(raw.get("task", {}))
        if args.init is not None:
            initial_phase = fileio.read_raw(args.init)
        else:
            target_name = args.target or table.get("target", "boat")
            target = tasks.make_target(target_name, bench.shape)
            initial_phase, ideal_metric = aberration_initial_phase(
                bench, target, _insilico_steps(table, args), _insilico_lr(table, args))
            _snapshot(out, "init_pattern", initial_phase)
            print(f"[aberration] ideal-bench model solution: "
                  f"metric {ideal_metric:.6g}", flush=True)

    task, task_table = make_task(command, bench, raw.get("task", {}), args,
                                 initial_phase)

    histories = {}
    finals = []
    for seed in seeds:
        run_dir = out if len(seeds) == 1 else out / f"seed{seed}"
        tcfg = rl.TrainerConfig(**settings, seed=seed)
        history, final_metric = run_experiment(bench, task, tcfg, args.algo,
                                               run_dir, task_table,
                                               output_table, args.instrument)
        histories[f"{args.algo} seed{seed}"] = history.records
        finals.append(final_metric)

    if len(seeds) > 1:
        if output_table["plots"]:
            report.emit_plots(out, histories)
        summary = {f"final_metric_seed{s}": m for s, m in zip(seeds, finals)}
        summary["median_final_metric"] = float(np.median(finals))
        write_summary(out / "summary.txt", summary)
    return 0


def cmd_compare(args) -> int:
    command = args.task
    raw = _load_config(args.config)
    bench = _inject_hidden_parts(command, build_bench(raw))
    out = Path(args.out if args.out is not None else Path("runs") / f"compare-{command}")
    out.mkdir(parents=True, exist_ok=True)
    seeds = parse_seeds(args.seed)
    settings = trainer_settings(raw, command, args)
    output_table = _output_table(raw, args)
    table = dict(raw.get("task", {}))

    initial_phase = None
    if command == "aberration":
        target = tasks.make_target(args.target or table.get("target", "boat"),
                                   bench.shape)
        initial_phase, _ = aberration_initial_phase(
            bench, target, _insilico_steps(table, args), _insilico_lr(table, args))
        _snapshot(out, "init_pattern", initial_phase)
    task, task_table = make_task(command, bench, table, args, initial_phase)

    # model-based reference on the noise-free bench sets the bar
    ins = rl.train_insilico(bench.noise_free(), task,
                            steps=_insilico_steps(table, args),
                            lr=_insilico_lr(table, args))
    ins_dir = out / "insilico"
    ins_dir.mkdir(exist_ok=True)
    _snapshot(ins_dir, "pattern_final", ins.phase)
    write_summary(ins_dir / "summary.txt",
                  {"task": task.name, "algo": "insilico",
                   "metric": ins.metric, "best_loss": ins.best_loss})
    threshold = args.threshold_frac * ins.metric
    print(f"[compare/{command}] insilico metric {ins.metric:.6g}, "
          f"threshold {threshold:.6g}", flush=True)

    histories = {}
    reached = {"ppo": [], "pg": []}
    for algo in ("ppo", "pg"):
        for seed in seeds:
            run_dir = out / f"{algo}_seed{seed}"
            tcfg = rl.TrainerConfig(**settings, seed=seed)
            history, _ = run_experiment(bench, task, tcfg, algo, run_dir,
                                        task_table, output_table,
                                        args.instrument)
            histories[f"{algo} seed{seed}"] = history.records
            reached[algo].append(history.measurements_to_reach(threshold))

    summary_text = (f"task = {task.name}\ninsilico_metric = {ins.metric:.10g}\n"
                    + report.speedup_summary(threshold, reached))
    (out / "summary.txt").write_text(summary_text)
    print(summary_text, end="", flush=True)
    if output_table["plots"]:
        report.emit_plots(out, histories)
    return 0


def cmd_insilico(args) -> int:
    command = args.task
    raw = _load_config(args.config)
    bench = _inject_hidden_parts(command, build_bench(raw)).noise_free()
    out = Path(args.out if args.out is not None else Path("runs") / f"insilico-{command}")
    out.mkdir(parents=True, exist_ok=True)
    table = dict(raw.get("task", {}))

    initial_phase = None
    if command == "aberration":
        target = tasks.make_target(args.target or table.get("target", "boat"),
                                   bench.shape)
        initial_phase, _ = aberration_initial_phase(
            bench, target, _insilico_steps(table, args), _insilico_lr(table, args))
    task, task_table = make_task(command, bench, table, args, initial_phase)

    t0 = time.perf_counter()
    result = rl.train_insilico(bench, task, steps=_insilico_steps(table, args),
                               lr=_insilico_lr(table, args), seed=args.train_seed)
    wall = time.perf_counter() - t0
    _snapshot(out, "pattern_final", result.phase)
    with open(out / "insilico.csv", "w", newline="") as f:
        f.write("step,loss,metric\n")
        for rec in result.records:
            f.write(f"{rec.step},{rec.loss:.10g},{rec.metric:.10g}\n")
    write_summary(out / "summary.txt",
                  {"task": task.name, "algo": "insilico",
                   "steps": _insilico_steps(table, args),
                   "metric": result.metric, "best_loss": result.best_loss})
    print(f"[insilico/{command}] metric {result.metric:.6g} "
          f"after {_insilico_steps(table, args)} steps ({wall:.1f}s wall)",
          flush=True)
    return 0


def cmd_serve_sim(args) -> int:
    bench = build_bench(_load_config(args.config))
    server = blackbox.serve_sim(bench, args.host, args.port)
    print(f"serving simulated bench on {server.address}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_report(args) -> int:
    histories = {}
    for text in args.histories:
        path = Path(text)
        label = path.parent.name if path.name == "metrics.csv" and path.parent.name \
            else path.stem
        histories[label] = report.read_history_csv(path)
    out = Path(args.out if args.out is not None else "runs/report")
    written = report.emit_plots(out, histories)
    for path in written:
        print(path, flush=True)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="insitu",
        description="Train phase patterns against a black-box optical bench.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", default="0",
                        help="training seed, or comma-separated list for "
                             "multi-seed runs (default 0)")
    common.add_argument("--budget", type=int,
                        help="measurement budget override")
    common.add_argument("--instrument", metavar="HOST:PORT",
                        help="train against a served bench instead of the "
                             "in-process one (INSITU_INSTRUMENT_ADDR works too)")
    common.add_argument("--no-plots", action="store_true",
                        help="skip figure rendering")

    algo = argparse.ArgumentParser(add_help=False)
    algo.add_argument("--algo", choices=("ppo", "pg"), default="ppo",
                      help="training algorithm (default ppo)")

    for name, extra in (
        ("focus", "steer the beam into one detector region"),
        ("diffuser-focus", "focus through a hidden diffuser"),
        ("hologram", "shape the sensor intensity into a target image"),
        ("aberration", "recover a pattern on an imperfect bench"),
        ("classify", "train an optical digit classifier"),
    ):
        p = sub.add_parser(name, parents=[common, algo], help=extra)
        if name in ("focus", "diffuser-focus"):
            p.add_argument("--region", type=int, help="target detector region")
        if name in ("hologram", "aberration"):
            p.add_argument("--target", choices=tasks.TARGET_NAMES,
                           help="target image")
        if name == "aberration":
            p.add_argument("--init", help="initial pattern (.opb) instead of "
                                          "solving the ideal bench")
            p.add_argument("--steps", type=int, help="ideal-bench solver steps")
            p.add_argument("--lr", type=float, help="ideal-bench solver rate")
        if name == "classify":
            p.add_argument("--minibatch", type=int,
                           help="digits measured per round")
        p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", parents=[common],
                       help="run ppo and pg against the model-based bar")
    p.add_argument("--task", choices=tuple(TASK_KEYS), default="classify")
    p.add_argument("--threshold-frac", type=float, default=0.85,
                   help="fraction of the insilico metric to chase (default 0.85)")
    p.add_argument("--target", choices=tasks.TARGET_NAMES)
    p.add_argument("--minibatch", type=int)
    p.add_argument("--region", type=int)
    p.add_argument("--steps", type=int, help="insilico solver steps")
    p.add_argument("--lr", type=float, help="insilico solver rate")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("insilico", parents=[common],
                       help="train the model-based baseline on the twin")
    p.add_argument("--task", choices=tuple(TASK_KEYS), default="focus")
    p.add_argument("--target", choices=tasks.TARGET_NAMES)
    p.add_argument("--minibatch", type=int)
    p.add_argument("--region", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--train-seed", type=int, default=0,
                   help="minibatch draw seed (classify)")
    p.set_defaults(func=cmd_insilico)

    p = sub.add_parser("serve-sim", help="serve the simulated bench over TCP")
    p.add_argument("--config", help="TOML config file ([bench] section)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7842)
    p.set_defaults(func=cmd_serve_sim)

    p = sub.add_parser("report", help="re-render figures from metrics.csv files")
    p.add_argument("histories", nargs="+", metavar="CSV")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InstrumentError, ProtocolError) as exc:
        print(f"instrument error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
