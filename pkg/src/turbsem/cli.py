"""Command-line entry point: ``turbsem <command> [--config FILE] [--out DIR] [--key value ...]``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import time
import types
import typing
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__

COMMANDS = ("gen", "train", "eval", "rollout", "stats", "expand", "selftest")

RUN_KEYS: dict[str, tuple[type, Any]] = {
    "data_dir": (str, ""),
    "train_seeds": (str, "0-7"),
    "test_seeds": (str, "100-101"),
    "checkpoint": (str, ""),
    "snapshot": (str, ""),
    "horizon": (int, 0),
    "factor": (int, 2),
    "model_preset": (str, ""),
}


class ConfigError(ValueError):
    pass


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# text config
# ---------------------------------------------------------------------------


def _schemas() -> dict[str, dict[str, tuple[Any, Any]]]:
    from .model import ModelConfig
    from .solver import SolverConfig
    from .training import TrainConfig

    out = {"run": dict(RUN_KEYS)}
    for name, cls in (("solver", SolverConfig), ("model", ModelConfig), ("train", TrainConfig)):
        hints = typing.get_type_hints(cls)
        out[name] = {f.name: (hints[f.name], f.default) for f in dataclasses.fields(cls)}
    return out


def _convert(text: str, tp) -> Any:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() in ("none", "null", ""):
            return None
        return _convert(text, args[0])
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        v = text.lower()
        if v in ("pi", "2pi"):
            return math.pi * (2 if v == "2pi" else 1)
        if v.endswith("pi") and v[:-2].replace(".", "", 1).isdigit():
            return float(v[:-2]) * math.pi
        if v.startswith("pi/"):
            return math.pi / float(v[3:])
        return float(text)
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, dict[str, tuple[Any, int]]]:
    """Parse ``key = value`` lines grouped by ``[section]`` into typed values with line numbers."""
    schemas = _schemas()
    section = "run"
    out: dict[str, dict[str, tuple[Any, int]]] = {k: {} for k in schemas}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source}:{no}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in schemas:
                raise ConfigError(f"{source}:{no}: unknown section [{section}]")
            continue
        if line.count("=") != 1:
            raise ConfigError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("="))
        if not key.isidentifier():
            raise ConfigError(f"{source}:{no}: invalid key {key!r}")
        if key not in schemas[section]:
            raise ConfigError(f"{source}:{no}: unknown key {key!r} in [{section}]")
        if key in out[section]:
            raise ConfigError(f"{source}:{no}: duplicate key {key!r} in [{section}]")
        try:
            out[section][key] = (_convert(value, schemas[section][key][0]), no)
        except ValueError as e:
            raise ConfigError(f"{source}:{no}: bad value for {key!r}: {e}") from None
    return out


def _apply_overrides(parsed, overrides: Sequence[tuple[str, str]]):
    schemas = _schemas()
    for key, value in overrides:
        if "." in key:
            section, name = key.split(".", 1)
            if section not in schemas or name not in schemas[section]:
                raise ConfigError(f"--{key}: unknown key")
            targets = [section]
        else:
            name = key.replace("-", "_")
            targets = [s for s in schemas if name in schemas[s]]
            if not targets:
                raise ConfigError(f"--{key}: unknown key")
            if len(targets) > 1:
                raise ConfigError(f"--{key} is ambiguous; use one of "
                                  + ", ".join(f"--{s}.{name}" for s in targets))
        s = targets[0]
        try:
            parsed[s][name] = (_convert(value, schemas[s][name][0]), 0)
        except ValueError as e:
            raise ConfigError(f"--{key}: bad value: {e}") from None
    return parsed


@dataclasses.dataclass
class EffectiveConfig:
    run: dict[str, Any]
    solver: Any
    model: Any
    train: Any

    def render(self) -> str:
        lines = ["[run]"] + [f"{k} = {v}" for k, v in self.run.items()]
        for name in ("solver", "model", "train"):
            lines.append(f"\n[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                v = getattr(getattr(self, name), f.name)
                lines.append(f"{f.name} = {'none' if v is None else repr(v) if isinstance(v, float) else v}")
        return "\n".join(lines) + "\n"


def parse_config(path: str | Path | None, overrides: Sequence[tuple[str, str]] = ()) -> EffectiveConfig:
    """File values, then ``--key value`` overrides, on top of the built-in defaults."""
    from .model import ModelConfig
    from .solver import SolverConfig
    from .training import TrainConfig

    text = Path(path).read_text(encoding="utf-8") if path else ""
    parsed = _apply_overrides(parse_config_text(text, str(path or "<defaults>")), overrides)
    vals = {s: {k: v for k, (v, _) in d.items()} for s, d in parsed.items()}
    run = {k: d for k, (_, d) in RUN_KEYS.items()}
    run.update(vals["run"])

    def build(factory, kw, section):
        try:
            return factory(**kw)
        except (TypeError, ValueError) as e:
            lines = ", ".join(f"{k} (line {parsed[section][k][1]})" for k in kw if parsed[section][k][1])
            raise ConfigError(f"[{section}] {e}" + (f"; set at {lines}" if lines else "")) from None

    kind = vals["solver"].get("kind", "kf4")
    solver = build(SolverConfig.iso if kind == "iso" else SolverConfig.kf4, vals["solver"], "solver")
    preset = run["model_preset"] or ("table7" if solver.ndim == 2 else "table8")
    if preset not in ("table7", "table8", "desk2d"):
        raise ConfigError(f"unknown model_preset {preset!r}")
    run["model_preset"] = preset
    mkw = dict(vals["model"])
    mkw.setdefault("length", solver.length)
    mkw.setdefault("ndim", solver.ndim)
    model = build(getattr(ModelConfig, preset), mkw, "model")
    train = build(TrainConfig, vals["train"], "train")
    return EffectiveConfig(run, solver, model, train)


def parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ConfigError(f"no seeds in {text!r}")
    return seeds


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="turbsem", description="Spectral-element transformer for turbulence.")
    p.add_argument("--version", action="version", version=f"turbsem {__version__}")
    p.add_argument("command", choices=COMMANDS, metavar="command", help="one of " + ", ".join(COMMANDS))
    p.add_argument("--config", "-c", help="text config file (key = value, [sections])")
    p.add_argument("--out", "-o", default="turbsem_out", help="output directory")
    p.add_argument("--verbose", "-v", action="count", default=0)
    p.add_argument("--suite", action="append", default=[], help="selftest: restrict to these suites")
    p.add_argument("files", nargs="*", help="stats: snapshot files")
    return p


def _split_overrides(argv: Sequence[str]) -> tuple[list[str], list[tuple[str, str]]]:
    known = {"--config", "-c", "--out", "-o", "--suite"}
    rest, overrides = [], []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a.startswith("--") and a not in known and a not in ("--verbose", "--version", "--help"):
            if "=" in a:
                k, v = a[2:].split("=", 1)
                i += 1
            else:
                if i + 1 >= len(argv):
                    raise UsageError(f"{a} needs a value")
                k, v = a[2:], argv[i + 1]
                i += 2
            overrides.append((k, v))
            continue
        rest.append(a)
        if a in known and i + 1 < len(argv):
            rest.append(argv[i + 1])
            i += 1
        i += 1
    return rest, overrides


def _echo(out: Path, cfg: EffectiveConfig, command: str, argv: Sequence[str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(cfg.render(), encoding="utf-8")
    info = {"command": command, "argv": list(argv), "version": __version__,
            "seed": {"solver": cfg.solver.seed, "train": cfg.train.seed},
            "time": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (out / "run.json").write_text(json.dumps(info, indent=1), encoding="utf-8")


def _data_dir(cfg: EffectiveConfig, out: Path) -> Path:
    return Path(cfg.run["data_dir"]) if cfg.run["data_dir"] else out / "data"


def _checkpoint(cfg: EffectiveConfig, out: Path) -> Path:
    return Path(cfg.run["checkpoint"]) if cfg.run["checkpoint"] else out / "checkpoint"


def cmd_gen(cfg, out, log):
    from .training import generate_dataset

    solver = cfg.solver
    coarse = cfg.train.coarse_resolution
    if solver.output_resolution is None and coarse < solver.resolution:
        solver = dataclasses.replace(solver, output_resolution=coarse)
    if solver.out_resolution != coarse:
        coarse = None
        log("output resolution differs from coarse_resolution: no coarse companions")
    d = _data_dir(cfg, out)
    for split, key in (("train", "train_seeds"), ("test", "test_seeds")):
        m = generate_dataset(solver, parse_seeds(cfg.run[key]), split, d, coarse, log=log)
        log(f"{split}: {len(m.trajectories)} trajectories -> {m.path}")


def _manifests(cfg, out):
    d = _data_dir(cfg, out)
    train = cfg.train.train_manifest or str(d / "train.txt")
    test = cfg.train.test_manifest or str(d / "test.txt")
    return train, test


def cmd_train(cfg, out, log):
    from .training import train

    tr_m, te_m = _manifests(cfg, out)
    tcfg = dataclasses.replace(cfg.train, train_manifest=tr_m,
                               test_manifest=te_m if Path(te_m).exists() else "")
    resume = cfg.run["checkpoint"] or None
    res = train(tcfg, cfg.model, out, resume=resume, log=log)
    if res.log:
        log(f"final loss {res.log[-1]['loss']:.5f} after {res.checkpoint.train_step} steps")


def cmd_eval(cfg, out, log):
    from .training import DatasetManifest, evaluate, load_checkpoint

    _, te_m = _manifests(cfg, out)
    ck = load_checkpoint(_checkpoint(cfg, out))
    res = evaluate(ck, DatasetManifest.read(te_m), out / "eval", horizon=cfg.run["horizon"] or None, log=log)
    log(f"hybrid rel_l2 at step 1: {res.hybrid['rel_l2'][1]:.5f}, coarse: {res.coarse['rel_l2'][1]:.5f}")
    if res.failures:
        log(f"{len(res.failures)} trajectories failed")


def _initial_snapshot(cfg, out):
    from .training import DatasetManifest, read_snapshot

    if cfg.run["snapshot"]:
        return read_snapshot(cfg.run["snapshot"]), None
    _, te_m = _manifests(cfg, out)
    rec = DatasetManifest.read(te_m).trajectories[0]
    return rec.snapshot(0), rec


def cmd_rollout(cfg, out, log):
    from .diagnostics import energy_balance, error_metrics, write_csv
    from .training import _coarse_config, hybrid_rollout, load_checkpoint, write_snapshot

    ck = load_checkpoint(_checkpoint(cfg, out))
    u0, rec = _initial_snapshot(cfg, out)
    solver = ck.solver_config or cfg.solver
    coarse = _coarse_config(solver, u0.shape[0])
    steps = cfg.run["horizon"] or 40
    mode = ck.train_config.mode if ck.train_config else "correction"
    params = ck.params
    dtype = params[next(iter(params))].dtype
    frames = hybrid_rollout(u0, steps, ck.model(), params, mode, coarse, dtype)
    for i, f in enumerate(frames):
        write_snapshot(out / "rollout" / f"snap_{i:05d}.edyf", f)
    bal = energy_balance(frames, coarse)
    rows = []
    for i, f in enumerate(frames):
        row = [i, f.time, float(bal.k[i]), float(bal.conserved[i])]
        if rec is not None and i < len(rec.files):
            m = error_metrics(rec.snapshot(i), f)
            row += [m["rel_l2"], m["correlation"], m["vrmse"]]
        rows.append(row)
    header = ["step", "time", "energy", "e_budget"] + (["rel_l2", "correlation", "vrmse"] if rec else [])
    write_csv(out / "rollout" / "metrics.csv", header, rows)
    log(f"{steps} steps written to {out / 'rollout'}")


def cmd_stats(cfg, out, log, files):
    from .diagnostics import energy_spectrum, flow_stats, structure_function_s3, write_csv
    from .training import read_snapshot

    if not files:
        raise UsageError("stats needs at least one snapshot file")
    snaps = [read_snapshot(f) for f in files]
    specs = [energy_spectrum(s) for s in snaps]
    n = max(len(s.energy) for s in specs)
    mean = np.zeros(n)
    for s in specs:
        mean[:len(s.energy)] += s.energy / len(specs)
    write_csv(out / "spectrum.csv", ["k", "E_k"], [[i, float(e)] for i, e in enumerate(mean)])
    h = snaps[0].spacing[0]
    r = [h * j for j in (1, 2, 4, 8, 16) if j < snaps[0].shape[0] // 2]
    sl = np.mean([structure_function_s3(s, r) for s in snaps], 0)
    write_csv(out / "structure.csv", ["r", "S_L"], [[float(a), float(b)] for a, b in zip(r, sl)])
    rows = []
    for f, s in zip(files, snaps):
        try:
            st = flow_stats(s, cfg.solver.nu)
            rows.append([str(f), st.energy, st.dissipation, st.u_rms, st.taylor_microscale,
                         st.kolmogorov_scale, st.re_lambda])
        except ValueError as e:
            log(f"{f}: {e}")
    write_csv(out / "flow_stats.csv", ["file", "energy", "dissipation", "u_rms", "taylor_microscale",
                                       "kolmogorov_scale", "re_lambda"], rows)
    log(f"spectrum slope {specs[0].slope:.3f} over shells {specs[0].fit_range}")


def tile(g, factor: int):
    from .basis import GridField

    D = g.ndim
    reps = (factor,) * D + (1,)
    return GridField(np.tile(g.values, reps), tuple(L * factor for L in g.lengths), time=g.time,
                     channels=g.channels)


def cmd_expand(cfg, out, log):
    """Run a checkpoint on a periodically tiled domain with a fixed attention window."""
    from .diagnostics import energy_spectrum, write_csv
    from .model import SpectralElementTransformer
    from .training import _coarse_config, hybrid_rollout, load_checkpoint, write_snapshot

    rho = cfg.run["factor"]
    if rho < 1:
        raise ConfigError("expansion factor must be >= 1")
    ck = load_checkpoint(_checkpoint(cfg, out))
    u0, _ = _initial_snapshot(cfg, out)
    solver = ck.solver_config or cfg.solver
    mode = ck.train_config.mode if ck.train_config else "correction"
    dtype = ck.params[next(iter(ck.params))].dtype
    steps = cfg.run["horizon"] or 1
    n = u0.shape[0]

    small_cfg = _coarse_config(solver, n)
    t0 = time.perf_counter()
    small = hybrid_rollout(u0, steps, ck.model(), ck.params, mode, small_cfg, dtype)
    t_small = time.perf_counter() - t0

    big_model_cfg = ck.model_config.tiled(rho)
    big_solver = dataclasses.replace(small_cfg, resolution=n * rho, output_resolution=n * rho,
                                     length=solver.length * rho)
    t0 = time.perf_counter()
    big = hybrid_rollout(tile(u0, rho), steps, SpectralElementTransformer(big_model_cfg), ck.params, mode,
                         big_solver, dtype)
    t_big = time.perf_counter() - t0

    dev = max(float(np.abs(b.values - tile(s, rho).values).max()) for s, b in zip(small, big))
    scale = max(float(np.abs(s.values).max()) for s in small)
    for i, f in enumerate(big):
        write_snapshot(out / "expand" / f"snap_{i:05d}.edyf", f)
    es, eb = energy_spectrum(small[-1]), energy_spectrum(big[-1])
    # physical wavenumbers: shell index times 2 pi / L
    rows = [[float(k * 2 * math.pi / big[-1].lengths[0]), float(e)] for k, e in zip(eb.k, eb.energy)]
    write_csv(out / "expand" / "spectrum_large.csv", ["k", "E_k"], rows)
    write_csv(out / "expand" / "spectrum_small.csv", ["k", "E_k"],
              [[float(k * 2 * math.pi / small[-1].lengths[0]), float(e)] for k, e in zip(es.k, es.energy)])
    report = {"factor": rho, "window": big_model_cfg.window, "steps": steps,
              "max_tiling_deviation": dev, "relative_deviation": dev / max(scale, 1e-300),
              "seconds_small": t_small, "seconds_large": t_big,
              "token_ratio": rho ** u0.ndim, "time_ratio": t_big / max(t_small, 1e-12)}
    (out / "expand" / "report.json").write_text(json.dumps(report, indent=1))
    log(f"factor {rho}: tiling deviation {dev:.3g}, time ratio {report['time_ratio']:.2f} "
        f"for {report['token_ratio']}x tokens")


def _tests_dir() -> Path | None:
    here = Path(__file__).resolve()
    for p in (here.parents[2] / "tests", Path.cwd() / "tests"):
        if p.is_dir():
            return p
    return None


def cmd_selftest(cfg, out, log, suites):
    """Run the property suites with pytest and list per-suite outcomes."""
    try:
        import pytest
    except ImportError:
        raise ConfigError("selftest needs pytest (pip install turbsem[test])") from None
    tests = _tests_dir()
    if tests is None:
        raise ConfigError("cannot locate the test suites")
    names = suites or sorted(p.stem[5:] for p in tests.glob("test_*.py") if p.stem != "test_acceptance")
    files = []
    for s in names:
        f = tests / f"test_{s}.py"
        if not f.exists():
            raise ConfigError(f"unknown suite {s!r}")
        files.append(f)

    class Collector:
        def __init__(self):
            self.counts: dict[str, dict[str, int]] = {}

        def pytest_runtest_logreport(self, report):
            if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
                suite = Path(report.fspath).stem[5:]
                c = self.counts.setdefault(suite, {"passed": 0, "failed": 0, "skipped": 0})
                c[report.outcome] = c.get(report.outcome, 0) + 1

    col = Collector()
    code = pytest.main(["-q", "-p", "no:cacheprovider", *map(str, files)], plugins=[col])
    lines = []
    for s in names:
        c = col.counts.get(s, {"passed": 0, "failed": 0, "skipped": 0})
        status = "ok" if c["failed"] == 0 and c["passed"] > 0 else "FAIL"
        lines.append(f"{s:<12} {status:<5} passed={c['passed']} failed={c['failed']} skipped={c['skipped']}")
    report = "\n".join(lines)
    out.mkdir(parents=True, exist_ok=True)
    (out / "selftest.txt").write_text(report + "\n")
    log(report)
    if code != 0:
        raise AssertionError("self-test failures")


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def dispatch(argv: Sequence[str] | None = None) -> int:
    from .model import DivergenceError
    from .solver import BlowUpError

    argv = list(sys.argv[1:] if argv is None else argv)
    threads = os.environ.get("TURBSEM_THREADS")
    if threads:
        import torch

        torch.set_num_threads(int(threads))
    try:
        rest, overrides = _split_overrides(argv)
        if not rest or rest[0] not in COMMANDS and not rest[0].startswith("-"):
            raise UsageError(f"unknown command {rest[0] if rest else ''!r}\n\n{_build_parser().format_usage()}")
        args = _build_parser().parse_intermixed_args(rest)
        cfg = parse_config(args.config, overrides)
        out = Path(args.out)

        def log(msg):
            print(msg, flush=True)

        _echo(out, cfg, args.command, argv)
        if args.command == "stats":
            cmd_stats(cfg, out, log, args.files)
        elif args.command == "selftest":
            cmd_selftest(cfg, out, log, args.suite)
        else:
            {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "rollout": cmd_rollout,
             "expand": cmd_expand}[args.command](cfg, out, log)
        return 0
    except (BlowUpError, DivergenceError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except AssertionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (UsageError, ConfigError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
