"""Command-line entry point.

Every subcommand writes its outputs plus a ``manifest.json`` (arguments,
seeds, code version, wall time) into ``--out``. Exit status is 0 on success,
2 for invalid input and 3 when a run fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("epiforge")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3


class InvalidInput(ValueError):
    pass


# --- argument helpers -------------------------------------------------------------------


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 10x10, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return h, w


def _lockdown(text: str) -> tuple[int, int]:
    try:
        start, length = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"lockdown must look like start:len, got {text!r}") from None
    return start, length


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("EPIFORGE_THREADS", "1")))
    except ValueError:
        return 1


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON configuration file")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("-v", "--verbose", action="store_true")


def _scenario_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--r0", type=float)
    g.add_argument("--r0-track", type=Path, help="JSON list of per-day values or a ramp object")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--lockdown", type=_lockdown, action="append", default=[], metavar="START:LEN")
    p.add_argument("--days", type=int)
    p.add_argument("--grid", type=_grid)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epiforge", description="Epidemic simulator and neural emulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the agent-based simulator")
    _common(p)
    _scenario_flags(p)

    p = sub.add_parser("gen-dataset", help="simulate a training corpus")
    _common(p)
    p.add_argument("--days", type=int)
    p.add_argument("--grid", type=_grid)

    p = sub.add_parser("train", help="train an emulator on a corpus")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="directory written by gen-dataset")
    p.add_argument("--tile", help="train on regions <rh>x<rw>:<sh>x<sw> of larger grids")

    for name, helptext in (("rollout", "autoregressive emulator rollout"),
                           ("tiled-rollout", "rollout on a larger grid by overlapping regions")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _scenario_flags(p)
        p.add_argument("--weights", type=Path, required=True)
        if name == "tiled-rollout":
            p.add_argument("--tile", required=True)

    p = sub.add_parser("calibrate", help="estimate R0 of an observed sequence")
    _common(p)
    p.add_argument("--observed", type=Path, required=True, help="HMS1 file of the observation")
    p.add_argument("--mode", choices=("sim", "emu", "both"), default="both")
    p.add_argument("--weights", type=Path)
    p.add_argument("--grid", type=_grid)

    p = sub.add_parser("scenario", help="compare simulator and emulator on one scenario")
    _common(p)
    _scenario_flags(p)
    p.add_argument("--mode", choices=("sim", "emu", "both"), default="both")
    p.add_argument("--weights", type=Path)

    p = sub.add_parser("bench", help="time simulator and emulator")
    _common(p)
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--tile", default="10x10:2x2")
    p.add_argument("--days", type=int)

    p = sub.add_parser("render", help="heatmap PNGs and CSV from an HMS1 file")
    _common(p)
    p.add_argument("input", type=Path)
    p.add_argument("--days", type=int, help="interval between rendered days (default 10)")
    return parser


# --- configuration ----------------------------------------------------------------------


def load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidInput(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise InvalidInput("config must be a JSON object")
    return cfg


def city_from(args, cfg: dict):
    from .city import CityConfig, generate_city

    data = dict(cfg.get("city", {}))
    data.setdefault("seed", args.seed)
    if getattr(args, "grid", None):
        data["grid_rows"], data["grid_cols"] = args.grid
    return generate_city(CityConfig.from_dict(data))


def r0_spec(args, cfg: dict):
    if getattr(args, "r0_track", None):
        try:
            spec = json.loads(Path(args.r0_track).read_text())
        except FileNotFoundError:
            raise InvalidInput(f"R0 track file {args.r0_track} not found") from None
        return tuple(spec) if isinstance(spec, list) and spec and spec[0] == "ramp" else spec
    if getattr(args, "r0", None) is not None:
        return args.r0
    return cfg.get("scenario", {}).get("r0", 2.0)


def scenario_from(args, cfg: dict, city_cfg=None):
    from .city import CityConfig
    from .scenario import Scenario

    sc = cfg.get("scenario", {})
    epi = cfg.get("epidemic", {})
    T = args.days or sc.get("days", 100)
    gamma = args.gamma if args.gamma is not None else sc.get("gamma", 0.0)
    lockdowns = tuple(args.lockdown) or tuple(tuple(w) for w in sc.get("lockdowns", ()))
    seeds = tuple(sc.get("seeds", [args.seed]))
    return Scenario(sc.get("name", args.command), city_cfg or CityConfig(), T, r0_spec(args, cfg), lockdowns, gamma,
                    seeds, epi.get("I0", 100), epi.get("transmission_scale"))


def _git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(out: Path, args, started: float, extra: dict) -> None:
    doc = {
        "command": args.command,
        "argv": sys.argv[1:],
        "arguments": {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()},
        "seed": args.seed,
        "code_version": _git_describe(),
        "wall_seconds": time.perf_counter() - started,
        **extra,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, default=str))


def _load_net(path: Path | None):
    from .emulator import load_weights

    if path is None:
        raise InvalidInput("--weights is required for emulator modes")
    if not Path(path).exists():
        raise InvalidInput(f"weights file {path} not found")
    return load_weights(path)


def _with_population(track, city, net):
    from .city import block_population_map

    if net.use_population:
        track.population = block_population_map(city).astype(np.float32)
    return track


# --- subcommands ------------------------------------------------------------------------


def cmd_simulate(args, cfg) -> dict:
    from .abm import EpidemicParams, run_simulation
    from .heatmap import save_sequence

    city = city_from(args, cfg)
    sc = scenario_from(args, cfg)
    track = sc.track()
    params = EpidemicParams(track.r0, sc.gamma, track.lockdown, sc.I0, args.seed, sc.transmission_scale)
    res = run_simulation(city, params)
    save_sequence(args.out / "simulation.hms", res.sequence, res.track, seed=args.seed,
                  city=city.fingerprint)
    return {"outputs": ["simulation.hms"], "track_digest": res.track.digest()}


def cmd_gen_dataset(args, cfg) -> dict:
    from .dataset import ParamPoint, generate_dataset, split_dataset
    from .heatmap import save_sequence
    from .scenario import lockdown_points, ramp_points

    city = city_from(args, cfg)
    ds = cfg.get("dataset", {})
    T = args.days or ds.get("days", 100)
    points = [ParamPoint(r0=float(r)) for r in ds.get("r0_values", [1.5, 2.0, 2.5, 3.0, 3.5])]
    if "lockdown" in ds:
        lk = ds["lockdown"]
        points += lockdown_points(lk.get("count", 20), lk.get("r0_values", [2.0, 2.5, 3.0]), lk.get("gamma", 0.9),
                                  args.seed, tuple(lk.get("length_range", (3, 45))), lk.get("start", 10),
                                  lk.get("random_start", False))
    if "ramp_peaks" in ds:
        points += ramp_points(ds["ramp_peaks"], T)
    samples = generate_dataset(city, points, ds.get("replicates", 10), args.seed, T=T,
                               I0=cfg.get("epidemic", {}).get("I0", 100), workers=args.threads)
    splits = split_dataset(samples, tuple(ds.get("ratios", (0.8, 0.1, 0.1))), args.seed)
    which = {}
    for name, part in zip(("train", "val", "test"), splits):
        for s in part:
            which[id(s)] = name
    index = []
    for i, s in enumerate(samples):
        fname = f"run_{i:04d}.hms"
        save_sequence(args.out / fname, s.sequence, s.track, point=s.point.key(), replicate=s.replicate,
                      seed=s.seed)
        index.append({"file": fname, "split": which[id(s)], "point": s.point.key(), "replicate": s.replicate,
                      "seed": s.seed})
    (args.out / "dataset.json").write_text(json.dumps({"days": T, "city": city.to_dict(), "runs": index}))
    return {"outputs": ["dataset.json"], "runs": len(index)}


def _load_corpus(path: Path) -> dict[str, list]:
    from .heatmap import load_sequence

    doc = json.loads((path / "dataset.json").read_text())
    parts: dict[str, list] = {"train": [], "val": [], "test": []}
    for run in doc["runs"]:
        seq, track, _ = load_sequence(path / run["file"])
        parts[run["split"]].append((seq, track))
    return parts


def cmd_train(args, cfg) -> dict:
    from .dataset import TrainSplit, WindowSet, fit_normalizer, make_windows
    from .emulator import ArchConfig, EmulatorNet, TrainSchedule, save_weights, train
    from .heatmap import CHANNELS
    from .tiling import TileSpec, extract_region_dataset

    if not (args.data / "dataset.json").exists():
        raise InvalidInput(f"{args.data} has no dataset.json")
    parts = _load_corpus(args.data)
    if not parts["train"] or not parts["val"]:
        raise InvalidInput("corpus needs nonempty train and val splits")
    em = dict(cfg.get("emulator", {}))
    use_pop = bool(em.pop("use_population", False))
    if "dilations" in em:
        em["dilations"] = tuple(em["dilations"])
    arch = ArchConfig(**{"n_params": 4 if use_pop else 3, **em})
    norm = fit_normalizer(TrainSplit(seq for seq, _ in parts["train"]))
    pop_scale = float(np.mean(parts["train"][0][1].population)) if use_pop else 1.0

    def windows(items):
        if args.tile:
            spec = TileSpec.parse(args.tile, items[0][0].grid)
            return extract_region_dataset(items, spec, arch.lookback, norm, use_pop, pop_scale)
        return WindowSet.concat([make_windows(s, t, arch.lookback, norm, use_pop, pop_scale) for s, t in items])

    net = EmulatorNet.build(arch, norm, CHANNELS, seed=args.seed, use_population=use_pop,
                            population_scale=pop_scale)
    schedule = TrainSchedule(**{"seed": args.seed, **cfg.get("train", {})})
    best, hist = train(net, windows(parts["train"]), windows(parts["val"]), schedule)
    save_weights(best, args.out / "weights.emw")
    doc = {"train_loss": hist.train_loss, "val_loss": hist.val_loss, "best_epoch": hist.best_epoch,
           "seconds": hist.seconds, "stopped": hist.stopped}
    (args.out / "history.json").write_text(json.dumps(doc))
    (args.out / "train_config.json").write_text(json.dumps(
        {"architecture": {**arch.__dict__, "use_population": use_pop}, "optimizer": schedule.__dict__,
         "seed": args.seed}, default=list))
    return {"outputs": ["weights.emw", "history.json", "train_config.json"], "train_seconds": hist.seconds}


def _seed_frames(city, sc, seed: int, H: int):
    from .abm import EpidemicParams, run_simulation

    track = sc.track()
    head = EpidemicParams(track.r0[:H], sc.gamma, track.lockdown[:H], sc.I0, seed, sc.transmission_scale)
    return run_simulation(city, head).sequence.values


def cmd_rollout(args, cfg) -> dict:
    from .heatmap import save_sequence
    from .tiling import TileSpec, tiled_rollout
    from .emulator import rollout

    net = _load_net(args.weights)
    city = city_from(args, cfg)
    sc = scenario_from(args, cfg)
    track = _with_population(sc.track(), city, net)
    seeds = _seed_frames(city, sc, args.seed, net.lookback)
    if args.command == "tiled-rollout":
        spec = TileSpec.parse(args.tile, city.shape)
        seq = tiled_rollout(net, seeds, track, sc.T, spec, threads=args.threads)
    else:
        seq = rollout(net, seeds, track, sc.T)
    save_sequence(args.out / "rollout.hms", seq, track, seed=args.seed)
    return {"outputs": ["rollout.hms"], "track_digest": track.digest()}


def cmd_calibrate(args, cfg) -> dict:
    from .calibration import CalibProblem, bayes_optimize
    from .heatmap import load_sequence

    if not args.observed.exists():
        raise InvalidInput(f"observation {args.observed} not found")
    observed, track, meta = load_sequence(args.observed)
    city = city_from(args, cfg)
    if city.shape != observed.grid:
        raise InvalidInput(f"city grid {city.shape} differs from observation grid {observed.grid}")
    cal = cfg.get("calibration", {})
    gamma = track.gamma if track is not None else 0.0
    lockdown = track.lockdown if track is not None else None
    modes = {"sim": ["simulator"], "emu": ["emulator"], "both": ["simulator", "emulator"]}[args.mode]
    net = _load_net(args.weights) if "emulator" in modes else None
    truth = cal.get("true_r0")
    if truth is None and track is not None and np.all(track.r0 == track.r0[0]):
        truth = float(track.r0[0])
    results = {}
    for inner in modes:
        start = time.perf_counter()
        problem = CalibProblem(observed, city, gamma, lockdown, tuple(cal.get("bounds", (1.0, 4.0))),
                               cal.get("budget", 15), inner, args.seed, net,
                               cfg.get("epidemic", {}).get("I0", 100),
                               cfg.get("epidemic", {}).get("transmission_scale"))
        est, hist = bayes_optimize(problem)
        results[inner] = {"estimate": est, "history": hist, "seconds": time.perf_counter() - start}
        if truth is not None:
            results[inner]["relative_error"] = abs(est - truth) / truth
    (args.out / "calibration.json").write_text(json.dumps({"true_r0": truth, "results": results}, indent=1))
    return {"outputs": ["calibration.json"]}


def cmd_scenario(args, cfg) -> dict:
    from .heatmap import save_sequence
    from .render import render_heatmap_images
    from .scenario import run_scenario

    mode = {"sim": "simulator", "emu": "emulator", "both": "both"}[args.mode]
    net = _load_net(args.weights) if mode != "simulator" else None
    city = city_from(args, cfg)
    sc = scenario_from(args, cfg, city.config)
    outcome = run_scenario(sc, mode, net, city=city)
    outputs = []
    for kind, seqs in (("simulated", outcome.simulated), ("emulated", outcome.emulated)):
        for seed, seq in zip(sc.seeds, seqs):
            name = f"{kind}_seed{seed}.hms"
            save_sequence(args.out / name, seq, outcome.track, seed=seed)
            outputs.append(name)
        if seqs:
            render_heatmap_images(seqs[0], outcome.metrics["snapshot_days"], args.out / f"{kind}_snapshots")
    (args.out / "metrics.json").write_text(json.dumps(outcome.metrics, indent=1))
    return {"outputs": outputs + ["metrics.json"], "track_digest": outcome.track.digest()}


def cmd_bench(args, cfg) -> dict:
    from .bench import run_benchmark

    net = _load_net(args.weights)
    b = cfg.get("bench", {})
    report = run_benchmark(net, train_seconds=b.get("train_seconds", 1.0),
                           populations=tuple(b.get("populations", (25_000, 50_000, 100_000, 200_000))),
                           sim_grid=tuple(b.get("sim_grid", (20, 20))),
                           sweep_grid=tuple(b.get("sweep_grid", (10, 10))),
                           T=args.days or b.get("days", 100), tile=args.tile, repeats=b.get("repeats", 5),
                           seed=args.seed, threads=args.threads, sim_population=b.get("sim_population"))
    (args.out / "bench.json").write_text(json.dumps(report.to_dict(), indent=1))
    return {"outputs": ["bench.json"]}


def cmd_render(args, cfg) -> dict:
    from .heatmap import load_sequence
    from .render import render_heatmap_images
    from .scenario import snapshot_days

    if not args.input.exists():
        raise InvalidInput(f"{args.input} not found")
    seq, _, _ = load_sequence(args.input)
    files = render_heatmap_images(seq, snapshot_days(seq.T, args.days or 10), args.out)
    return {"outputs": [str(f.relative_to(args.out)) for f in files]}


COMMANDS = {
    "simulate": cmd_simulate, "gen-dataset": cmd_gen_dataset, "train": cmd_train, "rollout": cmd_rollout,
    "tiled-rollout": cmd_rollout, "calibrate": cmd_calibrate, "scenario": cmd_scenario, "bench": cmd_bench,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        if args.threads < 1:
            raise InvalidInput("--threads must be >= 1")
        cfg = load_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, cfg)
        write_manifest(args.out, args, started, extra)
    except (InvalidInput, ValueError, KeyError, TypeError) as exc:
        print(f"epiforge: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a failed run
        log.debug("run failed", exc_info=True)
        print(f"epiforge: run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
