"""Experiment orchestration: configs, datasets, estimator dispatch and exports.

A run is described by one YAML file (see ``configs/`` for complete examples)::

    seed: 0
    output_dir: runs/two_lengths
    model:
      dt: 0.01
      gravity: 9.81
      com_at_tip: true
      links:
        - {mass: 1.0, inertia: 1.0e-6, com_x: 0.0, com_y: 0.0, length: 1.5}
        - {mass: 1.0, inertia: 1.0e-6, com_x: 0.0, com_y: 0.0, length: 2.0}
      params:
        - {link: 0, name: length, min: 0.5, max: 5.0}
        - {link: 1, name: length, min: 0.5, max: 5.0}
    likelihood: {sigma_obs: 0.1, sigma_def: 0.1, num_windows: 5, combination: sum}
    data:
      synthetic:
        n_train: 10
        steps: 100
        start_states: [[1.5707963, 0.0, 0.0, 0.0]]
        distribution: {kind: gaussian, mean: [1.5, 2.0], cov: [[0.01, 0.006], [0.006, 0.01]]}
    estimator: {method: csvgd, iterations: 1000, particles: 100, lr: 0.03}

Instead of ``synthetic``, ``data`` may list CSV files under ``train`` (and
optionally ``test``). Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import baselines, svgd
from .diffsim import (DivergenceError, LinkParams, ParamSpec, PendulumModel, State, Trajectory,
                      TrajectorySet, make_trajectory)
from .likelihoods import LikelihoodConfig, ShootingProblem
from .metrics import MetricReport, evaluate_posterior, simulated_trajectories

STATE_COLUMNS = ("q0", "q1", "qd0", "qd1")
METHODS = ("svgd", "csvgd", "cem", "sgld", "stretch")
MAX_RESAMPLE = 100


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class SchemaError(ValueError):
    """A trajectory file does not follow the CSV schema."""


# -- configuration -----------------------------------------------------------------------------

def _build(cls, raw: Any, where: str):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ModelConfig:
    links: list = field(default_factory=lambda: [{}, {}])
    params: list = field(default_factory=list)
    gravity: float = 9.81
    dt: float = 0.01
    observed: list = field(default_factory=lambda: [0, 1, 2, 3])
    com_at_tip: bool = False

    def build(self) -> PendulumModel:
        if len(self.links) != 2:
            raise ConfigError("model.links: exactly two links are required")
        links = tuple(_build(LinkParams, l, f"model.links[{i}]") for i, l in enumerate(self.links))
        spec = tuple(_build(ParamSpec, p, f"model.params[{i}]") for i, p in enumerate(self.params))
        if not spec:
            raise ConfigError("model.params: at least one parameter must be estimated")
        labels = [p.label for p in spec]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"model.params: duplicate entries in {labels}")
        try:
            return PendulumModel(links, float(self.gravity), float(self.dt), spec,
                                 tuple(int(i) for i in self.observed), bool(self.com_at_tip))
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc


@dataclass
class DistributionConfig:
    kind: str = "point"                 # point | diagonal | gaussian
    value: list | None = None           # point
    mean: list | None = None            # diagonal, gaussian
    std: list | None = None             # diagonal
    cov: list | None = None             # gaussian

    def __post_init__(self):
        need = {"point": ("value",), "diagonal": ("mean", "std"), "gaussian": ("mean", "cov")}
        if self.kind not in need:
            raise ValueError(f"distribution kind must be one of {sorted(need)}")
        missing = [k for k in need[self.kind] if getattr(self, k) is None]
        if missing:
            raise ValueError(f"{self.kind} distribution needs {missing}")

    def sample(self, rng: np.random.Generator, dim: int) -> np.ndarray:
        if self.kind == "point":
            return _vector(self.value, dim, "value")
        mean = _vector(self.mean, dim, "mean")
        if self.kind == "diagonal":
            return mean + _vector(self.std, dim, "std") * rng.standard_normal(dim)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (dim, dim):
            raise ConfigError(f"distribution.cov must be {dim}x{dim}")
        return rng.multivariate_normal(mean, cov)


def _vector(v, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=float).reshape(-1)
    if arr.size != dim:
        raise ConfigError(f"distribution.{name} must have {dim} entries, got {arr.size}")
    return arr


@dataclass
class SyntheticConfig:
    n_train: int = 10
    n_test: int = 0
    steps: int = 100
    start_states: list = field(default_factory=lambda: [[math.pi / 2, 0.0, 0.0, 0.0]])
    distribution: Any = None
    noise: float = 0.0

    def __post_init__(self):
        self.distribution = _build(DistributionConfig, self.distribution,
                                   "data.synthetic.distribution")
        if self.n_train < 1 or self.n_test < 0 or self.steps < 1:
            raise ValueError("need n_train >= 1, n_test >= 0 and steps >= 1")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not self.start_states or any(len(s) != 4 for s in self.start_states):
            raise ValueError("start_states must be a list of [q0, q1, qd0, qd1]")


@dataclass
class DataConfig:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    synthetic: Any = None

    def __post_init__(self):
        if self.synthetic is not None:
            self.synthetic = _build(SyntheticConfig, self.synthetic, "data.synthetic")
        if bool(self.train) == (self.synthetic is not None):
            raise ValueError("give either train files or a synthetic block")


@dataclass
class EstimatorConfig:
    method: str = "csvgd"
    iterations: int = 1000
    particles: int = 100
    lr: float = 5e-3
    lr_decay: float = 1.0
    bandwidth_rule: str = "median"
    fixed_bandwidth: float | None = None
    mdmm: dict = field(default_factory=dict)
    step_eps: float = 1e-6              # sgld
    burn_in: float = 0.5                # sgld, stretch
    population: int = 64                # cem
    elite_fraction: float = 0.2         # cem
    stretch_a: float = 2.0              # stretch
    walkers: int | None = None          # stretch; defaults to max(particles, 2 * dim), even
    shooting_scale: float = 1.0         # samplers with multiple shooting
    shooting_init_std: float = 1e-3     # spread of initial shooting variables (cem, stretch)
    metrics_every: int = 0              # 0 disables metric-vs-iteration snapshots

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.iterations < 1 or self.particles < 1:
            raise ValueError("iterations and particles must be positive")
        if self.metrics_every < 0:
            raise ValueError("metrics_every must be non-negative")

    def mdmm_config(self) -> svgd.MdmmConfig:
        return _build(svgd.MdmmConfig, self.mdmm, "estimator.mdmm")

    def kernel_config(self) -> svgd.KernelConfig:
        return svgd.KernelConfig(self.bandwidth_rule, self.fixed_bandwidth)


@dataclass
class ExperimentConfig:
    seed: int
    model: ModelConfig
    likelihood: LikelihoodConfig
    data: DataConfig
    estimator: EstimatorConfig
    output_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, raw: dict, base: Path | None = None) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        allowed = {"seed", "model", "likelihood", "data", "estimator", "output_dir"}
        unknown = sorted(set(raw) - allowed)
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}")
        if "seed" not in raw or raw["seed"] is None:
            raise ConfigError("seed is mandatory")
        seed = raw["seed"]
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        lik = dict(raw.get("likelihood") or {})
        if lik.get("normalization") is not None:
            lik["normalization"] = tuple(lik["normalization"])
        cfg = cls(seed=seed,
                  model=_build(ModelConfig, raw.get("model"), "model"),
                  likelihood=_build(LikelihoodConfig, lik, "likelihood"),
                  data=_build(DataConfig, raw.get("data"), "data"),
                  estimator=_build(EstimatorConfig, raw.get("estimator"), "estimator"),
                  output_dir=str(raw.get("output_dir", "runs/default")))
        if base is not None:
            cfg._resolve_paths(base)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
        return cls.from_dict(raw, base=path.parent)

    def _resolve_paths(self, base: Path) -> None:
        def res(p):
            p = Path(p)
            return str(p if p.is_absolute() else (base / p).resolve())
        self.data.train = [res(p) for p in self.data.train]
        self.data.test = [res(p) for p in self.data.test]
        self.output_dir = res(self.output_dir)

    def validate(self) -> None:
        self.model.build()
        self.estimator.mdmm_config()
        self.estimator.kernel_config()
        paths = [Path(p).resolve() for p in self.data.train + self.data.test]
        paths.append(Path(self.output_dir).resolve())
        if len(set(paths)) != len(paths):
            raise ConfigError("dataset files and the output directory must all be distinct")

    def to_dict(self) -> dict:
        lik = dataclasses.asdict(self.likelihood)
        if lik.get("normalization") is not None:
            lik["normalization"] = list(lik["normalization"])
        data = dataclasses.asdict(self.data)
        return {"seed": self.seed, "output_dir": self.output_dir,
                "model": dataclasses.asdict(self.model), "likelihood": lik,
                "data": data, "estimator": dataclasses.asdict(self.estimator)}

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


# -- trajectory files ----------------------------------------------------------------------------

def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    """One CSV per trajectory: header ``t`` plus the observed state columns.

    The first row (t = 0) holds the start state; the following rows hold the
    observations after each step.
    """
    cols = [STATE_COLUMNS[i] for i in traj.observed]
    start = traj.start_state.as_array()[list(traj.observed)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", *cols])
        w.writerow(["0", *(repr(float(v)) for v in start)])
        for k, row in enumerate(traj.observations, start=1):
            w.writerow([repr(k * traj.dt), *(repr(float(v)) for v in row)])


def load_trajectory(path: str | Path, rtol: float = 1e-6) -> Trajectory:
    """Parse one trajectory CSV; unobserved start-state components are zero."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise SchemaError(f"{path}: empty file, expected a header 't,q0,q1,qd0,qd1' (or a subset)")
    header = [c.strip() for c in rows[0]]
    if header[0] != "t" or len(header) < 2:
        raise SchemaError(f"{path}:1: header must start with 't' followed by state columns")
    cols = header[1:]
    if any(c not in STATE_COLUMNS for c in cols) or len(set(cols)) != len(cols):
        raise SchemaError(f"{path}:1: unknown or repeated columns {cols}")
    observed = tuple(STATE_COLUMNS.index(c) for c in cols)
    if list(observed) != sorted(observed):
        raise SchemaError(f"{path}:1: state columns must follow the order {STATE_COLUMNS}")
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            nums = [float(c) for c in row]
        except ValueError:
            raise SchemaError(f"{path}:{lineno}: non-numeric field in {row}") from None
        if not all(math.isfinite(v) for v in nums):
            raise SchemaError(f"{path}:{lineno}: non-finite value")
        values.append(nums)
    if len(values) < 2:
        raise SchemaError(f"{path}: need a start row and at least one observation")
    arr = np.array(values)
    steps = np.diff(arr[:, 0])
    dt = float(steps[0])
    if dt <= 0 or not np.allclose(steps, dt, rtol=rtol, atol=0.0):
        raise SchemaError(f"{path}: time column is not uniformly increasing")
    # average spacing is the least rounding-sensitive estimate of a uniform step
    dt = float((arr[-1, 0] - arr[0, 0]) / (len(arr) - 1))
    start = np.zeros(4)
    start[list(observed)] = arr[0, 1:]
    return Trajectory(arr[1:, 1:], dt, State.from_array(start), observed)


def load_trajectories(paths) -> TrajectorySet:
    trajs = [load_trajectory(p) for p in paths]
    if not trajs:
        raise SchemaError("no trajectory files given")
    dts = [t.dt for t in trajs]
    if not np.allclose(dts, dts[0], rtol=1e-6, atol=0.0):
        raise SchemaError(f"trajectories disagree on the time step: {sorted(set(dts))}")
    obs = {t.observed for t in trajs}
    if len(obs) != 1:
        raise SchemaError("trajectories observe different state columns")
    return TrajectorySet(trajs)


def save_trajectories(trajs, directory: str | Path, prefix: str = "traj") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for i, t in enumerate(trajs):
        p = directory / f"{prefix}_{i:03d}.csv"
        save_trajectory(t, p)
        out.append(p)
    return out


def _write_table(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if not isinstance(v, (int, str)) else v for v in r])


def read_table(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty table")
    data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    return rows[0], data.reshape(-1, len(rows[0]))


# -- synthetic data ----------------------------------------------------------------------------

@dataclass
class SyntheticData:
    train: TrajectorySet
    train_params: np.ndarray
    test: TrajectorySet | None = None
    test_params: np.ndarray | None = None

    def write(self, directory: str | Path, labels: list[str]) -> None:
        directory = Path(directory)
        save_trajectories(self.train, directory / "train")
        _write_table(directory / "train_params.csv", labels, self.train_params)
        if self.test is not None:
            save_trajectories(self.test, directory / "test")
            _write_table(directory / "test_params.csv", labels, self.test_params)


def _draw_trajectories(model, syn: SyntheticConfig, rng, n: int, offset: int):
    trajs, params = [], []
    lo, hi = model.lower, model.upper
    for i in range(n):
        x0 = State.from_array(syn.start_states[(offset + i) % len(syn.start_states)])
        for _ in range(MAX_RESAMPLE):
            theta = syn.distribution.sample(rng, model.n_params)
            if np.any(theta < lo) or np.any(theta > hi):
                continue  # truncation to the limits
            try:
                traj = make_trajectory(model, theta, x0, syn.steps)
            except (FloatingPointError, np.linalg.LinAlgError):
                continue
            break
        else:
            raise DivergenceError(0, f"no admissible parameter sample after {MAX_RESAMPLE} "
                                     f"attempts for trajectory {offset + i}")
        if syn.noise > 0:
            traj.observations = traj.observations + syn.noise * rng.standard_normal(
                traj.observations.shape)
        trajs.append(traj)
        params.append(theta)
    return TrajectorySet(trajs), np.array(params)


def generate_synthetic(config: ExperimentConfig, seed: int | None = None) -> SyntheticData:
    """Draw parameters, roll out trajectories and optionally add observation noise.

    Test trajectories continue the cycle of start states after the training ones.
    """
    syn = config.data.synthetic
    if syn is None:
        raise ConfigError("config has no data.synthetic block")
    model = config.model.build()
    rng = np.random.default_rng(config.seed if seed is None else seed)
    train, train_p = _draw_trajectories(model, syn, rng, syn.n_train, 0)
    test = test_p = None
    if syn.n_test:
        test, test_p = _draw_trajectories(model, syn, rng, syn.n_test, syn.n_train)
    return SyntheticData(train, train_p, test, test_p)


def load_datasets(config: ExperimentConfig) -> tuple[TrajectorySet, TrajectorySet | None]:
    if config.data.synthetic is not None:
        syn = generate_synthetic(config)
        return syn.train, syn.test
    train = load_trajectories(config.data.train)
    test = load_trajectories(config.data.test) if config.data.test else None
    return train, test


# -- running -----------------------------------------------------------------------------------

@dataclass
class RunReport:
    method: str
    particles: np.ndarray               # (N, M) physical parameters
    labels: list[str]
    trace: list[float]                  # mean log-likelihood (or log-density) per iteration
    wall_clock: float
    metrics: MetricReport | None = None
    diagnostics: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)   # iteration -> MetricReport
    rollouts: list | None = None        # list of (particle, reference, Trajectory)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _write_table(d / "particles.csv", self.labels, self.particles)
        _write_table(d / "trace.csv", ["iteration", "mean_log_likelihood"],
                     [(i, v) for i, v in enumerate(self.trace)])
        dt = self.rollouts[0][2].dt if self.rollouts else None
        report = {"method": self.method, "wall_clock": self.wall_clock, "dt": dt,
                  "labels": self.labels,
                  "metrics": None if self.metrics is None else self.metrics.as_dict(),
                  "diagnostics": self.diagnostics,
                  "snapshots": {str(k): v.as_dict() for k, v in self.snapshots.items()}}
        (d / "report.json").write_text(json.dumps(report, indent=2, allow_nan=True))
        if self.rollouts:
            rows = []
            for p, r, tr in self.rollouts:
                for k, obs in enumerate(tr.observations, start=1):
                    rows.append((p, r, k, *obs))
            cols = [STATE_COLUMNS[i] for i in self.rollouts[0][2].observed]
            _write_table(d / "rollouts.csv", ["particle", "reference", "step", *cols], rows)

    @classmethod
    def load(cls, directory: str | Path) -> "RunReport":
        d = Path(directory)
        try:
            meta = json.loads((d / "report.json").read_text())
            labels, particles = read_table(d / "particles.csv")
            _, trace = read_table(d / "trace.csv")
        except OSError as exc:
            raise ConfigError(f"{d}: not a complete run directory ({exc})") from exc
        metrics = MetricReport(**meta["metrics"]) if meta.get("metrics") else None
        snaps = {int(k): MetricReport(**v) for k, v in meta.get("snapshots", {}).items()}
        rollouts = None
        if (d / "rollouts.csv").exists() and meta.get("dt"):
            header, rows = read_table(d / "rollouts.csv")
            observed = tuple(STATE_COLUMNS.index(c) for c in header[3:])
            rollouts = []
            for p, r in dict.fromkeys(map(tuple, rows[:, :2].astype(int).tolist())):
                sel = rows[(rows[:, 0] == p) & (rows[:, 1] == r)]
                obs = sel[np.argsort(sel[:, 2], kind="stable"), 3:]
                # start states are not stored with rollouts; only observations are exported
                rollouts.append((p, r, Trajectory(obs, meta["dt"], State.from_array(np.zeros(4)),
                                                  observed)))
        return cls(meta["method"], particles, labels, list(trace[:, 1]), meta["wall_clock"],
                   metrics, meta.get("diagnostics", {}), snaps, rollouts)


def _unit_init(problem: ShootingProblem, n: int) -> np.ndarray:
    return problem.to_unit(svgd.sobol_init(n, problem.limits.min, problem.limits.max))


def _sampler_init(target: svgd.PendulumTarget, problem: ShootingProblem, n: int,
                  rng: np.random.Generator | None = None, spread: float = 0.0) -> np.ndarray:
    u = _unit_init(problem, n)
    extra = np.broadcast_to(target.initial_extra(), (n, target.n_shoot)).copy()
    if rng is not None and spread > 0 and target.n_shoot:
        extra += spread * target.shooting_scale * rng.standard_normal(extra.shape)
    return np.concatenate([u, extra], axis=1)


def estimate(problem: ShootingProblem, est: EstimatorConfig, seed: int,
             callback=None) -> tuple[np.ndarray, list[float], dict]:
    """Run one estimator; returns physical particles, trace and diagnostics.

    ``callback(iteration, theta)`` receives physical parameters during the run.
    """
    M = problem.n_params
    rng = np.random.default_rng(seed)
    kernel = est.kernel_config()
    diag: dict[str, Any] = {}
    ms = problem.n_boundaries > 0

    def to_theta(x):
        return problem.from_unit(np.asarray(x)[:, :M])

    cb = None if callback is None else (lambda it, x: callback(it, to_theta(x)))

    if est.method == "csvgd" or (est.method == "svgd" and not ms):
        post = svgd.csvgd_estimate(problem, est.particles, est.iterations, est.lr,
                                   est.mdmm_config(), kernel, lr_decay=est.lr_decay,
                                   callback=callback)
        trace = post.history["mean_log_likelihood"]
        if post.defect_norms is not None:
            diag["max_defect_norm"] = float(np.max(post.defect_norms))
            diag["max_defect_history"] = post.history.get("max_defect_norm")
        diag["out_of_bounds"] = int(np.sum(post.out_of_bounds))
        return post.particles, trace, diag

    target = svgd.PendulumTarget(problem, shooting=ms, prior=est.method != "sgld",
                                 shooting_scale=est.shooting_scale)
    if est.method == "svgd":   # SVGD on the multiple-shooting density (shooting vars sampled)
        res = svgd.svgd_run(target, _sampler_init(target, problem, est.particles),
                            est.iterations, est.lr, kernel, kernel_dims=M, callback=cb)
        x, trace = res["x"], res["trace"]
    elif est.method == "sgld":
        res = baselines.sgld_run(target, _sampler_init(target, problem, est.particles),
                                 est.iterations, est.step_eps, n_keep=est.particles,
                                 seed=seed, burn_in=est.burn_in, callback=cb)
        x, trace = res.samples, res.trace
    elif est.method == "cem":
        init = _sampler_init(target, problem, 1)[0]
        std = np.concatenate([np.full(M, 0.5),
                              np.full(target.n_shoot, est.shooting_init_std * est.shooting_scale)])
        res = baselines.cem_run(target, est.iterations, est.population, est.elite_fraction,
                                init_mean=np.concatenate([np.full(M, 0.5), init[M:]]),
                                init_std=std, seed=seed, callback=cb)
        # the final population, best first
        order = np.argsort(-res.log_prob, kind="stable")
        x, trace = res.samples[order][:est.particles], res.trace
    else:  # stretch
        k = est.walkers or max(est.particles, 2 * target.dim)
        k += k % 2
        init = _sampler_init(target, problem, k, rng, est.shooting_init_std)
        res = baselines.stretch_move_run(target, init, est.iterations, est.stretch_a,
                                         n_keep=est.particles, seed=seed, burn_in=est.burn_in,
                                         callback=cb)
        x, trace = res.samples, res.trace
        diag["acceptance"] = res.acceptance
    theta = to_theta(np.clip(np.asarray(x)[:, :M], 0.0, 1.0) if est.method == "sgld" else x)
    diag["out_of_bounds"] = int(np.sum(np.any((theta < problem.limits.min)
                                              | (theta > problem.limits.max), axis=1)))
    return theta, list(trace), diag


def run_experiment(config: ExperimentConfig, train: TrajectorySet | None = None,
                   test: TrajectorySet | None = None, seed: int | None = None,
                   out_dir: str | Path | None = None) -> RunReport:
    """Load or generate data, run the configured estimator and score it.

    Metrics use the held-out set when one is available, the training set
    otherwise. With ``out_dir`` all artifacts and the resolved config are
    written there.
    """
    seed = config.seed if seed is None else seed
    if train is None:
        train, test = load_datasets(config)
    model = config.model.build()
    problem = ShootingProblem(model, train, config.likelihood)
    reference = test if test is not None else train
    est = config.estimator

    snapshots: dict[int, np.ndarray] = {}

    def snap(it, theta):
        if est.metrics_every and ((it + 1) % est.metrics_every == 0):
            snapshots[it + 1] = np.array(theta, copy=True)

    t0 = time.perf_counter()
    try:
        theta, trace, diag = estimate(problem, est, seed, snap if est.metrics_every else None)
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise type(exc)(f"{est.method} failed: {exc}") from exc
    wall = time.perf_counter() - t0

    metric_cfg = dataclasses.replace(config.likelihood, num_windows=1, window_length=None)
    metrics = _safe_metrics(theta, reference, model, metric_cfg)
    snaps = {it: m for it, th in sorted(snapshots.items())
             if (m := _safe_metrics(th, reference, model, metric_cfg)) is not None}
    labels = [p.label for p in model.param_spec]
    ref_problem = ShootingProblem(model, reference, metric_cfg)
    sims = simulated_trajectories(ref_problem, theta)
    rollouts = _pair_rollouts(sims, len(theta), len(reference))
    report = RunReport(est.method, theta, labels, trace, wall, metrics, diag, snaps, rollouts)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        resolved = dataclasses.replace(config, seed=seed, output_dir=str(out))
        resolved.dump(out / "config.yaml")
        report.save(out)
    return report


def _pair_rollouts(sims, n_particles, n_refs):
    # simulated_trajectories orders by reference, then particle, dropping diverged rollouts
    if len(sims) != n_particles * n_refs:
        return [(-1, -1, s) for s in sims]
    return [(p, r, sims[r * n_particles + p]) for r in range(n_refs) for p in range(n_particles)]


def _safe_metrics(theta, reference, model, cfg) -> MetricReport | None:
    try:
        return evaluate_posterior(theta, reference, model, cfg)
    except (ValueError, FloatingPointError):
        return None


def score_particles(config: ExperimentConfig, particles: np.ndarray) -> MetricReport:
    train, test = load_datasets(config)
    reference = test if test is not None else train
    cfg = dataclasses.replace(config.likelihood, num_windows=1, window_length=None)
    return evaluate_posterior(particles, reference, config.model.build(), cfg)


# -- plot data -----------------------------------------------------------------------------------

PLOT_FILES = {
    "plot_particles.csv": "one row per particle; columns are the parameter labels",
    "plot_trace.csv": "iteration, mean_log_likelihood",
    "plot_metrics.csv": "iteration, kl_real_sim, kl_sim_real, mmd, log_likelihood",
    "plot_rollouts.csv": "particle, reference, time, observed state columns",
}


def export_plot_data(report: RunReport, directory: str | Path, dt: float | None = None
                     ) -> list[Path]:
    """Write the tables behind particle scatter, trajectory density and metric plots.

    Columns are listed in :data:`PLOT_FILES`. Exporting twice gives identical files.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    p = d / "plot_particles.csv"
    _write_table(p, report.labels, report.particles)
    written.append(p)
    p = d / "plot_trace.csv"
    _write_table(p, ["iteration", "mean_log_likelihood"], enumerate(report.trace))
    written.append(p)
    p = d / "plot_metrics.csv"
    series = dict(report.snapshots)
    if report.metrics is not None:
        series.setdefault(len(report.trace), report.metrics)
    _write_table(p, ["iteration", "kl_real_sim", "kl_sim_real", "mmd", "log_likelihood"],
                 [(it, m.kl_real_sim, m.kl_sim_real, m.mmd, m.log_likelihood)
                  for it, m in sorted(series.items())])
    written.append(p)
    if report.rollouts:
        p = d / "plot_rollouts.csv"
        step = dt if dt is not None else report.rollouts[0][2].dt
        cols = [STATE_COLUMNS[i] for i in report.rollouts[0][2].observed]
        rows = [(pi, ri, k * step, *obs) for pi, ri, tr in report.rollouts
                for k, obs in enumerate(tr.observations, start=1)]
        _write_table(p, ["particle", "reference", "time", *cols], rows)
        written.append(p)
    return written
