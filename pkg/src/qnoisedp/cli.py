"""Command-line experiment runners that write plot-ready CSV tables with JSON metadata.

Subcommands:
  train      train the classifier with and without error mitigation
  sweep-std  lower/upper gradient noise scale across shots or global error rate
  sweep-eps  composed privacy budget across shots or error rate and iterations
  pec-demo   Monte-Carlo check of mitigation bias and variance amplification
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__, privacy
from .data import DataError, iris_binary
from .measurement import Observable, exact_expectation, sample_pm1_means
from .pec import TermEvaluator, decompose_global, sample_exact_sum
from .qml import Ansatz, TrainConfig, TrainingDiverged, train
from .qsim import Circuit, GateOp, NoiseModel, Param, SimulationError, run_circuit

log = logging.getLogger("qnoisedp")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

COMMANDS = ("train", "sweep-std", "sweep-eps", "pec-demo")
AXES = ("shots", "pt", "both")
DEFAULT_SHOTS = (10, 50, 100, 500, 1000)
DEFAULT_PTS = (0.05, 0.1, 0.2, 0.3, 0.5)
DEFAULT_CHECKPOINTS = (10, 50, 100)
DEMO_RATES = (0.0, 0.05, 0.1, 0.2)
SWEEP_FIXED_PT = 0.1
SWEEP_FIXED_SHOTS = 10
SWEEP_QUBITS = 2
# training split size of the 100-example binary Iris task
SWEEP_BATCH = 80


class ConfigError(ValueError):
    pass


def _tuple(value, cast) -> tuple | None:
    if value is None:
        return None
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    elif not isinstance(value, (list, tuple)):
        value = [value]
    try:
        return tuple(cast(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot parse {value!r}: {exc}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    """Effective configuration of one command. Grid fields left as None take command defaults."""

    command: str
    shots: tuple[int, ...] | None = None
    pt: tuple[float, ...] | None = None
    iters: tuple[int, ...] | None = None
    p1: float = 0.05
    p2: float = 0.10
    lr: float = 0.01
    clip: float = 0.7
    delta: float = 0.01
    pec: str | None = None
    replicates: int = 10_000
    seed: int = 0
    axis: str = "both"
    out: str | None = None
    data_path: str | None = None
    workers: int = 4

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        for name, cast in (("shots", int), ("pt", float), ("iters", int)):
            object.__setattr__(self, name, _tuple(getattr(self, name), cast))
            if getattr(self, name) == ():
                raise ConfigError(f"--{name} grid is empty")
        if any(n < 1 for n in self.shots_grid):
            raise ConfigError("shots must be >= 1")
        if any(not 0.0 <= p <= 1.0 for p in self.pt_grid):
            raise ConfigError("pt values must lie in [0, 1]")
        if any(t < 0 for t in self.iters_grid):
            raise ConfigError("iteration counts must be >= 0")
        if not (0.0 <= self.p1 <= 1.0 and 0.0 <= self.p2 <= 1.0):
            raise ConfigError("p1 and p2 must lie in [0, 1]")
        if self.lr < 0 or self.clip <= 0:
            raise ConfigError("lr must be >= 0 and clip > 0")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if self.replicates < 2:
            raise ConfigError("replicates must be >= 2")
        if self.pec not in (None, "on", "off"):
            raise ConfigError("pec must be 'on' or 'off'")
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.command == "train" and (len(self.shots_grid) != 1 or len(self.iters_grid) != 1):
            raise ConfigError("train takes a single --shots and a single --iters value")

    @property
    def shots_grid(self) -> tuple[int, ...]:
        if self.shots is not None:
            return self.shots
        return {"train": (1000,), "pec-demo": (100,)}.get(self.command, DEFAULT_SHOTS)

    @property
    def pt_grid(self) -> tuple[float, ...]:
        if self.pt is not None:
            return self.pt
        return DEMO_RATES if self.command == "pec-demo" else DEFAULT_PTS

    @property
    def iters_grid(self) -> tuple[int, ...]:
        if self.iters is not None:
            return self.iters
        return (200,) if self.command == "train" else DEFAULT_CHECKPOINTS

    @property
    def out_path(self) -> Path:
        return Path(self.out or f"{self.command}.csv")

    def effective(self) -> dict:
        d = dataclasses.asdict(self)
        d.update(shots=list(self.shots_grid), pt=list(self.pt_grid), iters=list(self.iters_grid))
        return d

    def digest(self) -> str:
        blob = json.dumps(self.effective(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Result tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Row:
    coords: dict
    metric: str
    value: float
    stderr: float | None = None


@dataclass
class ResultTable:
    rows: list[Row] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, coords: dict, metric: str, value: float, stderr: float | None = None):
        self.rows.append(Row(dict(coords), metric, float(value), None if stderr is None else float(stderr)))

    @property
    def coord_names(self) -> list[str]:
        names: list[str] = []
        for r in self.rows:
            names += [k for k in r.coords if k not in names]
        return names

    def validate(self):
        if not self.rows:
            return
        names = set(self.rows[0].coords)
        for i, r in enumerate(self.rows):
            if set(r.coords) != names:
                raise ValueError(f"row {i} has coordinates {sorted(r.coords)}, expected {sorted(names)}")
            if not r.metric or not isinstance(r.metric, str):
                raise ValueError(f"row {i} has no metric name")
            if math.isnan(r.value):
                raise ValueError(f"row {i} ({r.metric}) has a NaN value")
            if r.stderr is not None and not r.stderr >= 0:
                raise ValueError(f"row {i} ({r.metric}) has invalid stderr {r.stderr}")
        for key in ("config_hash", "seed", "version"):
            if key not in self.metadata:
                raise ValueError(f"metadata lacks {key!r}")

    def to_csv(self) -> str:
        names = self.coord_names
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names + ["metric", "value", "stderr"])
        for r in self.rows:
            stderr = "" if r.stderr is None else repr(r.stderr)
            w.writerow([r.coords[k] for k in names] + [r.metric, repr(r.value), stderr])
        return buf.getvalue()

    def lookup(self, metric: str, **coords) -> list[Row]:
        return [r for r in self.rows if r.metric == metric and all(r.coords.get(k) == v for k, v in coords.items())]


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_table(table: ResultTable, path: Path) -> tuple[Path, Path]:
    """Validate, then write CSV and its JSON sidecar via write-then-rename."""
    table.validate()
    meta_path = path.with_suffix(".json")
    _atomic_write(path, table.to_csv())
    _atomic_write(meta_path, json.dumps(table.metadata, indent=2, sort_keys=True, default=str) + "\n")
    return path, meta_path


def _run_grid(fn: Callable, points: Sequence, seed: int, workers: int) -> list:
    """Evaluate ``fn(point, seed_sequence)`` over a grid; results come back in grid order."""
    seeds = np.random.SeedSequence(seed).spawn(len(points))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, points, seeds))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: ExperimentConfig) -> ResultTable:
    data = iris_binary(cfg.data_path, seed=cfg.seed)
    arms = [cfg.pec] if cfg.pec else ["on", "off"]
    noise = NoiseModel(cfg.p1, cfg.p2)

    def run(arm, _ss):
        tc = TrainConfig(
            learning_rate=cfg.lr, iterations=cfg.iters_grid[0], shots=cfg.shots_grid[0],
            clip=cfg.clip, noise=noise, pec=arm == "on", seed=cfg.seed, delta=cfg.delta,
        )
        return train(data, tc)

    results = _run_grid(run, arms, cfg.seed, min(cfg.workers, len(arms)))
    table = ResultTable()
    for arm, res in zip(arms, results):
        for r in res.history:
            c = {"pec": arm, "iteration": r.iteration}
            for metric in ("loss", "train_acc", "test_acc", "pt", "sigma_min", "sigma_max", "epsilon_total"):
                table.add(c, metric, getattr(r, metric))
    return table


def _sweep_points(cfg: ExperimentConfig) -> list[tuple[str, int, float]]:
    points = []
    if cfg.axis in ("shots", "both"):
        points += [("shots", n, SWEEP_FIXED_PT) for n in cfg.shots_grid]
    if cfg.axis in ("pt", "both"):
        points += [("pt", SWEEP_FIXED_SHOTS, p) for p in cfg.pt_grid]
    return points


def sweep_bounds(shots: int, pt: float) -> privacy.NoiseBounds:
    """Gradient noise bounds when the circuit error is one global depolarizing channel of rate pt."""
    return privacy.noise_bounds(pt, shots, decompose_global(pt, SWEEP_QUBITS).gamma_sq)


def cmd_sweep_std(cfg: ExperimentConfig) -> ResultTable:
    def point(p, _ss):
        return sweep_bounds(p[1], p[2])

    pts = _sweep_points(cfg)
    table = ResultTable()
    for (axis, n, pt), b in zip(pts, _run_grid(point, pts, cfg.seed, cfg.workers)):
        c = {"axis": axis, "shots": n, "pt": pt}
        table.add(c, "sigma_min", b.sigma_min)
        table.add(c, "sigma_max", b.sigma_max)
        table.add(c, "gamma_sq", b.gamma_sq)
    return table


def cmd_sweep_epsilon(cfg: ExperimentConfig) -> ResultTable:
    sens = privacy.SensitivitySpec(cfg.clip, SWEEP_BATCH)

    def point(p, _ss):
        sigma = privacy.equivalent_sigma([sweep_bounds(p[1], p[2])])
        eps = privacy.gaussian_epsilon(sigma, sens, cfg.delta)
        out = []
        for T in cfg.iters_grid:
            naive = privacy.compose((eps, cfg.delta), T, "naive")
            adv = privacy.compose((eps, cfg.delta), T, "advanced")
            out.append((T, eps, naive.epsilon, adv.epsilon))
        return out

    pts = _sweep_points(cfg)
    table = ResultTable()
    for (axis, n, pt), rows in zip(pts, _run_grid(point, pts, cfg.seed, cfg.workers)):
        for T, eps, naive, adv in rows:
            c = {"axis": axis, "shots": n, "pt": pt, "T": T}
            table.add(c, "epsilon_step", eps)
            table.add(c, "epsilon_naive", naive)
            table.add(c, "epsilon_advanced", adv)
    return table


def _variance_ratio(mitigated: np.ndarray, plain: np.ndarray) -> tuple[float, float]:
    r = mitigated.var(ddof=1) / plain.var(ddof=1)
    return r, r * math.sqrt(2.0 / (mitigated.size - 1) + 2.0 / (plain.size - 1))


def cmd_pec_demo(cfg: ExperimentConfig) -> ResultTable:
    shots, R = cfg.shots_grid[0], cfg.replicates
    z = Observable.from_label("Z")
    ry = Circuit(1, (GateOp("RY", (0,), Param(0)),), n_params=1)
    ansatz = Ansatz()

    def single_gate(p, ss):
        # RY(pi/2)|0> has zero expectation for every term, so term variances coincide
        rng = np.random.default_rng(ss)
        noise, theta = NoiseModel(p, 0.0), [math.pi / 2]
        ev = TermEvaluator(ry, noise, z)
        mit = sample_exact_sum(ev.term_means(theta, None)[0, 0], ev.etas, shots, rng, replicates=R)
        mu = exact_expectation(run_circuit(ry, theta, None, noise), z)
        plain = sample_pm1_means(np.array([mu]), shots, rng, size=R)[:, 0]
        return ev.gamma_sq, mit, plain, 0.0

    def ansatz_point(_p, ss):
        rng = np.random.default_rng(ss)
        noise = NoiseModel(cfg.p1, cfg.p2)
        theta, x = rng.uniform(-math.pi, math.pi, ansatz.n_params), rng.uniform(0, 1, 2)
        ev = TermEvaluator(ansatz.circuit, noise, ansatz.observable)
        mit = sample_exact_sum(ev.term_means(theta, x)[0, 0], ev.etas, shots, rng, replicates=R)
        mu = exact_expectation(run_circuit(ansatz.circuit, theta, x, noise), ansatz.observable)
        plain = sample_pm1_means(np.array([mu]), shots, rng, size=R)[:, 0]
        ideal = exact_expectation(run_circuit(ansatz.circuit, theta, x), ansatz.observable)
        return ev.gamma_sq, mit, plain, ideal

    jobs = [("single-gate", p) for p in cfg.pt_grid] + [("ansatz", None)]

    def job(j, ss):
        return single_gate(j[1], ss) if j[0] == "single-gate" else ansatz_point(None, ss)

    table = ResultTable()
    for (study, p), (gsq, mit, plain, ideal) in zip(jobs, _run_grid(job, jobs, cfg.seed, cfg.workers)):
        c = {"study": study, "p1": p if study == "single-gate" else cfg.p1, "p2": 0.0 if study == "single-gate" else cfg.p2}
        ratio, ratio_se = _variance_ratio(mit, plain)
        se = mit.std(ddof=1) / math.sqrt(R)
        table.add(c, "gamma_sq_predicted", gsq)
        table.add(c, "variance_ratio", ratio, ratio_se)
        table.add(c, "mitigated_mean", mit.mean(), se)
        table.add(c, "ideal", ideal)
        table.add(c, "bias", mit.mean() - ideal, se)
    return table


RUNNERS: dict[str, Callable[[ExperimentConfig], ResultTable]] = {
    "train": cmd_train,
    "sweep-std": cmd_sweep_std,
    "sweep-eps": cmd_sweep_epsilon,
    "pec-demo": cmd_pec_demo,
}


def run(cfg: ExperimentConfig) -> ResultTable:
    table = RUNNERS[cfg.command](cfg)
    table.metadata = {
        "command": cfg.command,
        "config": cfg.effective(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    return table


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


# flag name -> ExperimentConfig field
FLAGS = {
    "data_path": "data_path", "shots": "shots", "pt": "pt", "p1": "p1", "p2": "p2",
    "iters": "iters", "lr": "lr", "clip": "clip", "delta": "delta", "pec": "pec",
    "replicates": "replicates", "seed": "seed", "out": "out", "axis": "axis", "workers": "workers",
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    S = argparse.SUPPRESS
    common.add_argument("--data-path", default=S, help="Iris CSV (default: bundled copy)")
    common.add_argument("--shots", default=S, help="shot count, or comma-separated grid for sweeps")
    common.add_argument("--pt", default=S, help="comma-separated global error rates")
    common.add_argument("--p1", type=float, default=S, help="single-qubit gate depolarizing rate")
    common.add_argument("--p2", type=float, default=S, help="two-qubit gate depolarizing rate")
    common.add_argument("--iters", default=S, help="iterations, or comma-separated checkpoints for sweep-eps")
    common.add_argument("--lr", type=float, default=S)
    common.add_argument("--clip", type=float, default=S)
    common.add_argument("--delta", type=float, default=S)
    common.add_argument("--pec", choices=["on", "off"], default=S, help="train one arm only")
    common.add_argument("--replicates", type=int, default=S)
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("--axis", choices=AXES, default=S, help="sweep axis")
    common.add_argument("--workers", type=int, default=S)
    common.add_argument("--out", default=S, help="CSV output path; metadata goes next to it as .json")
    common.add_argument("--config", default=S, help="JSON file of defaults, keyed by flag name")
    parser = _Parser(prog="qnoisedp", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    out = {}
    for key, value in raw.items():
        name = key.replace("-", "_")
        if name not in FLAGS:
            raise ConfigError(f"unknown key {key!r} in config file {path}")
        out[FLAGS[name]] = value
    return out


def resolve_config(argv: Sequence[str] | None) -> tuple[ExperimentConfig, bool]:
    """Merge built-in defaults < config file < command-line flags."""
    ns = vars(build_parser().parse_args(argv))
    command, verbose = ns.pop("command"), ns.pop("verbose")
    merged = load_config_file(ns.pop("config")) if "config" in ns else {}
    merged.update({FLAGS[k]: v for k, v in ns.items()})
    try:
        return ExperimentConfig(command=command, **merged), verbose
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def main(argv: Sequence[str] | None = None) -> int:
    try:
        cfg, verbose = resolve_config(argv)
    except ConfigError as exc:
        print(f"qnoisedp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    try:
        table = run(cfg)
        csv_path, meta_path = write_table(table, cfg.out_path)
    except (SimulationError, DataError, TrainingDiverged, privacy.PrivacyError, OSError, ValueError) as exc:
        print(f"qnoisedp: {cfg.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {len(table.rows)} rows to {csv_path} (metadata: {meta_path})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
