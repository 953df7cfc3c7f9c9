"""Experiment driver: round loop, metrics, theory checks and run logs.

A run produces one metric row per global model ``p^1, ..., p^{R+1}``; row
``r`` also carries the drift and communication of the round launched from
``p^r`` (the final row has no round after it, so its drift is NaN and its
communication 0). Outputs are a CSV of metrics, a JSON manifest and, when
requested, an ``.npz`` file of per-round snapshots that
:func:`invariant_suite` can audit after the fact.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .datagen import (BatchSampler, FederatedDataset, GenConfig, generate_synthetic,
                      heterogeneous_label_split, load_csv, load_idx)
from .errors import ConfigError, InvalidArgumentError, MissingSnapshotsError, UnsupportedRegularizerError
from .fedalgo import ALGORITHMS, CompactState, HyperParams, compact_round, make_optimizer
from .objectives import (CompositeObjective, LogisticProblem, MlpProblem, estimate_smoothness,
                         fstar_estimate, gradient_mapping)
from .prox import Regularizer, prox, subgradient_bound

__all__ = [
    "CSV_COLUMNS",
    "RoundMetrics",
    "ExperimentConfig",
    "RunResult",
    "Verdict",
    "build_dataset",
    "build_objective",
    "run_experiment",
    "load_run",
    "omega_value",
    "lambda_deviation",
    "drift_bound",
    "descent_slack",
    "theorem_bounds",
    "empirical_batch_variance",
    "invariant_suite",
]

CSV_COLUMNS = ("round", "optimality", "F", "grad_map_norm", "drift", "omega", "comm_scalars", "wall_ms")

# Tolerances of the structural identities.
CORRECTION_SUM_TOL = 1e-12
EQUIVALENCE_TOL = 1e-9
SERVER_IDENTITY_TOL = 1e-12
# The descent and drift checks compare quantities computed in floating point;
# allow rounding-level slack relative to the magnitudes involved.
CHECK_RTOL = 1e-10


@dataclass
class RoundMetrics:
    r: int
    optimality: float
    F_value: float
    grad_map_norm: float
    drift: float
    omega: float
    comm_scalars: int
    wall_ms: Optional[float] = None
    sigma2: float = 0.0

    def csv_row(self):
        wall = "" if self.wall_ms is None else f"{self.wall_ms:.3f}"
        return [self.r, repr(self.optimality), repr(self.F_value), repr(self.grad_map_norm),
                repr(self.drift), repr(self.omega), self.comm_scalars, wall]


_DATASET_DEFAULT = {"kind": "synthetic", "alpha": 50.0, "beta": 50.0, "n": 30, "d": 20, "m": 100,
                    "feature_scale": 1.0}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run.

    ``dataset`` is a mapping with ``kind`` one of ``synthetic`` (keys of
    :class:`~compfl.datagen.GenConfig`), ``label_skew`` (a pooled multiclass
    ``source`` generator split with ``n`` and ``uniform_fraction``) or
    ``files`` (``features`` and ``labels`` paths in IDX or CSV, split the same
    way). ``problem`` holds ``kind`` (``logistic`` or ``mlp``) plus MLP
    options ``hidden``, ``smoothness`` and ``init_scale``. ``regularizer`` is
    the dict form of :class:`~compfl.prox.Regularizer`.

    ``metric_step`` is the step of the gradient mapping used for the
    optimality metric (default: the run's ``eta_tilde``). ``cadence`` is the
    metric interval (default 1 for ``R <= 1000``, else ``ceil(R/1000)``).
    """

    name: str = "experiment"
    algorithm: str = "proposed"
    dataset: dict = field(default_factory=lambda: dict(_DATASET_DEFAULT))
    problem: dict = field(default_factory=lambda: {"kind": "logistic"})
    regularizer: dict = field(default_factory=lambda: {"kind": "l1", "strength": 0.003})
    eta: float = 4.0
    eta_g: float = 15.0
    tau: int = 10
    rounds: int = 500
    batch_size: Optional[int] = None
    seed: int = 42
    algo_options: dict = field(default_factory=dict)
    metric_step: Optional[float] = None
    cadence: Optional[int] = None
    fstar_iterations: int = 2000
    sigma_every: int = 10
    sigma_draws: int = 64
    threads: int = 1
    snapshots: bool = False
    timing: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        def need(name, ok, expected):
            if not ok:
                raise ConfigError(name, expected, getattr(self, name))

        def is_int(v):
            return isinstance(v, (int, np.integer)) and not isinstance(v, bool)

        def is_num(v):
            return isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool)

        need("name", isinstance(self.name, str), "string")
        need("algorithm", self.algorithm in ALGORITHMS, f"one of {sorted(ALGORITHMS)}")
        need("eta", is_num(self.eta) and self.eta > 0, "positive number")
        need("eta_g", is_num(self.eta_g) and self.eta_g > 0, "positive number")
        need("tau", is_int(self.tau) and self.tau >= 1, "integer >= 1")
        need("rounds", is_int(self.rounds) and self.rounds >= 0, "integer >= 0")
        need("batch_size", self.batch_size is None or (is_int(self.batch_size) and self.batch_size >= 1),
             "null or integer >= 1")
        need("seed", is_int(self.seed) and self.seed >= 0, "nonnegative integer")
        need("metric_step", self.metric_step is None or (is_num(self.metric_step) and self.metric_step > 0),
             "null or positive number")
        need("cadence", self.cadence is None or (is_int(self.cadence) and self.cadence >= 1),
             "null or integer >= 1")
        need("fstar_iterations", is_int(self.fstar_iterations) and self.fstar_iterations >= 0, "integer >= 0")
        need("sigma_every", is_int(self.sigma_every) and self.sigma_every >= 1, "integer >= 1")
        need("sigma_draws", is_int(self.sigma_draws) and self.sigma_draws >= 2, "integer >= 2")
        need("threads", is_int(self.threads) and self.threads >= 1, "integer >= 1")
        need("snapshots", isinstance(self.snapshots, bool), "boolean")
        need("timing", isinstance(self.timing, bool), "boolean")
        for name in ("dataset", "problem", "regularizer", "algo_options"):
            need(name, isinstance(getattr(self, name), dict), "mapping")
        need("dataset", self.dataset.get("kind") in ("synthetic", "label_skew", "files"),
             "kind synthetic, label_skew or files")
        need("problem", self.problem.get("kind") in ("logistic", "mlp"), "kind logistic or mlp")
        need("regularizer", self.regularizer.get("kind") in ("zero", "l1", "box"), "kind zero, l1 or box")
        try:
            Regularizer.from_dict(self.regularizer)
        except (InvalidArgumentError, KeyError, TypeError) as exc:
            raise ConfigError("regularizer", "valid regularizer spec", self.regularizer) from exc
        allowed = {"gamma0", "weighted", "decay"} if self.algorithm == "fastfedda" else set()
        unknown = set(self.algo_options) - allowed
        need("algo_options", not unknown, f"only {sorted(allowed)} for {self.algorithm}")

    @property
    def hyper(self) -> HyperParams:
        return HyperParams(float(self.eta), float(self.eta_g), int(self.tau), int(self.rounds),
                           None if self.batch_size is None else int(self.batch_size), int(self.seed))

    @property
    def effective_cadence(self) -> int:
        if self.cadence is not None:
            return self.cadence
        return 1 if self.rounds <= 1000 else math.ceil(self.rounds / 1000)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "mapping", data)
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "a known config field", data[key])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def with_overrides(self, **kv) -> "ExperimentConfig":
        data = self.to_dict()
        data.update({k: v for k, v in kv.items() if v is not None})
        return type(self).from_dict(data)


def _gen_config(spec: dict, seed: int, **defaults) -> GenConfig:
    params = {k: v for k, v in spec.items() if k != "kind"}
    params.setdefault("seed", seed)
    for k, v in defaults.items():
        params.setdefault(k, v)
    try:
        return GenConfig(**params)
    except TypeError as exc:
        raise ConfigError("dataset", "GenConfig keys", spec) from exc


def build_dataset(cfg: ExperimentConfig) -> FederatedDataset:
    spec = cfg.dataset
    kind = spec["kind"]
    if kind == "synthetic":
        return generate_synthetic(_gen_config(spec, cfg.seed))
    n = spec.get("n")
    frac = spec.get("uniform_fraction", 0.5)
    if kind == "label_skew":
        source = dict(spec.get("source", {}))
        source.setdefault("n", 1)
        pool = generate_synthetic(_gen_config(source, cfg.seed, label_model="multiclass"))
        return heterogeneous_label_split(pool, n, frac, cfg.seed)
    X = _load_matrix(spec["features"])
    y = _load_matrix(spec["labels"]).ravel()
    ds = heterogeneous_label_split((X, y), n, frac, cfg.seed)
    ds.provenance["files"] = {"features": str(spec["features"]), "labels": str(spec["labels"])}
    return ds


def _load_matrix(path):
    path = str(path)
    return load_csv(path) if path.lower().endswith(".csv") else load_idx(path)


def build_objective(cfg: ExperimentConfig, dataset: Optional[FederatedDataset] = None):
    """Return ``(objective, x0)`` for a config."""
    dataset = build_dataset(cfg) if dataset is None else dataset
    reg = Regularizer.from_dict(cfg.regularizer)
    spec = cfg.problem
    if spec["kind"] == "logistic":
        problem = LogisticProblem.from_dataset(dataset)
        x0 = np.zeros(problem.d)
    else:
        problem = MlpProblem.from_dataset(dataset, hidden=spec.get("hidden", 16),
                                          smoothness=spec.get("smoothness"))
        x0 = problem.init_params(cfg.seed, spec.get("init_scale", 0.1))
    return CompositeObjective(problem, reg), x0


def _smoothness(problem):
    try:
        return estimate_smoothness(problem)
    except InvalidArgumentError:
        return None


def _bg(reg: Regularizer, d: int):
    try:
        return subgradient_bound(reg, d)
    except UnsupportedRegularizerError:
        return None


def lambda_deviation(problem, p, prev_grad_sums, eta: float, tau: int) -> float:
    """``sum_i ||Lambda_i - mean Lambda||^2`` with
    ``Lambda_i = eta (tau grad f_i(p) + mean_j S_j - S_i)`` and ``S`` the
    previous round's per-client gradient sums."""
    prev = np.asarray(prev_grad_sums, dtype=float)
    Lam = eta * (tau * problem.client_grads(p) + prev.mean(axis=0) - prev)
    dev = Lam - Lam.mean(axis=0)
    return float(np.sum(dev * dev))


def omega_value(obj: CompositeObjective, p, prev_grad_sums, hp: HyperParams, fstar: Optional[float]) -> float:
    """Auxiliary function ``F(p) - F* + ||Lambda - mean Lambda||^2 / (n eta_tilde)``.

    ``prev_grad_sums`` (shape ``(n, d)``) is required: it is the previous
    round's gradient log (zeros before the first round).
    """
    if prev_grad_sums is None:
        raise InvalidArgumentError("omega needs the previous round's per-client gradient sums")
    n = obj.problem.n
    dev = lambda_deviation(obj.problem, p, prev_grad_sums, hp.eta, hp.tau)
    return obj.value(p) - (fstar or 0.0) + dev / (n * hp.eta_tilde)


def drift_bound(n: int, hp: HyperParams, B_g: float, gmap_norm: float, lambda_dev: float,
                batch_var: float) -> float:
    """Right-hand side of the local drift bound.

    ``5 tau^3 eta^2 n 4 B_g^2 + 5 n tau^3 eta^2 ||G||^2 + 5 tau ||Lambda - mean||^2
    + 10 n tau^2 eta^2 batch_var``, where ``batch_var`` stands in for
    ``sigma^2 / b``.
    """
    tau, eta = hp.tau, hp.eta
    return (5 * tau**3 * eta**2 * n * 4 * B_g**2
            + 5 * n * tau**3 * eta**2 * gmap_norm**2
            + 5 * tau * lambda_dev
            + 10 * n * tau**2 * eta**2 * batch_var)


def descent_slack(L: float, hp: HyperParams, B_g: float, gmap_norm: float) -> float:
    """Allowed change of the auxiliary function in one full-gradient round,
    ``56 L^2 eta_tilde^3 B_g^2 / eta_g^2 - 0.3 eta_tilde ||G||^2``."""
    et = hp.eta_tilde
    return 2.8 * 20 * L**2 * et**3 * B_g**2 / hp.eta_g**2 - 0.3 * et * gmap_norm**2


def theorem_bounds(hp: HyperParams, n: int, L: float, B_g: float, sigma2: float, omega1: float,
                   mu_grid=(1e-3, 1e-2, 1e-1), measured_mean_gmap_sq: Optional[float] = None,
                   measured_final_omega: Optional[float] = None) -> dict:
    """Evaluate the sublinear and linear-rate residual bounds.

    ``sigma2`` is the empirical variance of a size-``b`` mini-batch gradient,
    i.e. it stands in for ``sigma^2 / b``. The report is marked advisory when
    the step rule the bounds assume is violated.
    """
    et, tau, eg, R = hp.eta_tilde, hp.tau, hp.eta_g, hp.rounds
    thm1_terms = {
        "initial": omega1 / (0.3 * et * R) if R > 0 else float("inf"),
        "variance": 20.0 * sigma2 / (n * tau),
        "nonsmooth": 187.0 * L**2 * et**2 * B_g**2 / eg**2,
    }
    thm2 = []
    for mu in mu_grid:
        base = 1.0 - mu * et / 3.0
        residual = 18.0 * sigma2 / (mu * n * tau) + 168.0 * L**2 * et**2 * B_g**2 / (mu * eg**2)
        if 0.0 <= base <= 1.0:
            contraction = base**R
            bound = contraction * omega1 + residual
        else:
            # mu * eta_tilde > 3: the rate statement has no meaning at this step size
            contraction, bound = None, None
        thm2.append({"mu": float(mu), "bound": bound, "contraction": contraction, "residual": residual})
    violations = hp.step_rule_violations(L, n)
    return {
        "theorem1": {"bound": sum(thm1_terms.values()), "terms": thm1_terms,
                     "measured_mean_gmap_sq": measured_mean_gmap_sq},
        "theorem2": {"grid": thm2, "measured_final_omega": measured_final_omega},
        "advisory": bool(violations),
        "step_rule_violations": violations,
    }


def empirical_batch_variance(problem, x, b: int, draws: int, seed: int, r: int) -> float:
    """Largest over clients of the trace variance of a size-``b`` batch gradient at ``x``."""
    worst = 0.0
    for i in range(problem.n):
        m = problem.sizes[i]
        if b >= m:
            continue
        rng = np.random.default_rng([seed, i, r, 0x5157])
        if hasattr(problem, "sample_grads"):
            S = problem.sample_grads(i, x)
            G = np.stack([S[rng.choice(m, b, replace=False)].mean(axis=0) for _ in range(draws)])
        else:
            G = np.stack([problem.minibatch_grad(i, x, rng.choice(m, b, replace=False)) for _ in range(draws)])
        worst = max(worst, float(np.sum(G.var(axis=0, ddof=1))))
    return worst


@dataclass
class RunResult:
    config: ExperimentConfig
    metrics: list
    model: np.ndarray
    manifest: dict
    snapshots: Optional[dict] = None
    out_dir: Optional[Path] = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.metrics], dtype=float)

    @property
    def optimality(self) -> np.ndarray:
        return self.column("optimality")

    def csv_text(self) -> str:
        return metrics_csv(self.metrics)


def metrics_csv(metrics) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for m in metrics:
        writer.writerow(m.csv_row())
    return buf.getvalue()


def _ratio(g, g1):
    if g1 > 0:
        return g / g1
    return 1.0 if g == 0 else float("inf")


def run_experiment(cfg: ExperimentConfig, out_dir=None, dataset: Optional[FederatedDataset] = None,
                   x0=None) -> RunResult:
    """Execute a configured run, optionally writing CSV/JSON/NPZ to ``out_dir``.

    ``x0`` overrides the initial (pre-proximal) global model.
    """
    cfg.validate()
    dataset = build_dataset(cfg) if dataset is None else dataset
    obj, default_x0 = build_objective(cfg, dataset)
    x0 = default_x0 if x0 is None else np.asarray(x0, dtype=float)
    problem = obj.problem
    hp = cfg.hyper
    n, d = problem.n, obj.d
    if hp.batch_size is not None and hp.batch_size > min(problem.sizes):
        raise ConfigError("batch_size", f"at most the smallest shard ({min(problem.sizes)})", hp.batch_size)
    L = _smoothness(problem)
    B_g = _bg(obj.reg, d)
    step_ok = None if L is None else hp.satisfies_step_rule(L, n)
    if L is not None:
        hp.check_step_rule(L, n)
    fstar = None
    if cfg.fstar_iterations > 0 and L is not None:
        fstar = fstar_estimate(obj, 1.0 / L, cfg.fstar_iterations)

    opt = make_optimizer(cfg.algorithm, obj, hp, BatchSampler(cfg.seed), x0, cfg.threads, **cfg.algo_options)
    proposed = cfg.algorithm == "proposed"
    step = hp.eta_tilde if cfg.metric_step is None else float(cfg.metric_step)
    cadence = cfg.effective_cadence
    R = hp.rounds
    snaps = _SnapshotLog(proposed) if cfg.snapshots else None
    metrics = []
    g1 = None
    sigma2 = 0.0
    t0 = time.perf_counter()
    for r in range(1, R + 2):
        p = opt.model.copy()
        due = r == 1 or r == R + 1 or (r - 1) % cadence == 0
        if hp.batch_size is not None and (r - 1) % cfg.sigma_every == 0 and (due or snaps):
            sigma2 = empirical_batch_variance(problem, p, hp.batch_size, cfg.sigma_draws, cfg.seed, r)
        prev_sums = opt.grad_sums if proposed else None
        if due or snaps:
            gnorm = float(np.linalg.norm(gradient_mapping(obj, p, step)))
            g1 = gnorm if g1 is None else g1
            F = obj.value(p)
            lam_dev = lambda_deviation(problem, p, prev_sums, hp.eta, hp.tau) if proposed else float("nan")
            omega = F - (fstar or 0.0) + lam_dev / (n * hp.eta_tilde) if proposed else float("nan")
        if snaps is not None:
            gt = gnorm if step == hp.eta_tilde else float(np.linalg.norm(gradient_mapping(obj, p, hp.eta_tilde)))
            snaps.before_round(opt, p, F, gt, lam_dev, sigma2)
        if r <= R:
            trace = opt.run_round(r)
            drift, comm = trace.drift, opt.comm_per_round
            if snaps is not None:
                snaps.after_round(trace, drift)
        else:
            drift, comm = float("nan"), 0
        if due:
            wall = (time.perf_counter() - t0) * 1e3 if cfg.timing else None
            metrics.append(RoundMetrics(r, _ratio(gnorm, g1), F, gnorm, drift, omega, comm, wall, sigma2))

    snapshot_arrays = snaps.arrays() if snaps is not None else None
    omegas = [m.omega for m in metrics]
    mean_g2 = float(np.mean([m.grad_map_norm**2 for m in metrics[:-1]])) if R > 0 else None
    manifest = {
        "library": "compfl",
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "provenance": _jsonable(dataset.provenance),
        "algorithm": {"name": cfg.algorithm, "reconstructed": ALGORITHMS[cfg.algorithm].reconstructed},
        "n": n,
        "d": d,
        "smoothness": L,
        "subgradient_bound": B_g,
        "fstar": fstar,
        "eta_tilde": hp.eta_tilde,
        "metric_step": step,
        "cadence": cadence,
        "step_rule": {"satisfied": step_ok,
                      "violations": [] if L is None else hp.step_rule_violations(L, n)},
        "comm_per_round": opt.comm_per_round,
        "sigma2_final": sigma2,
        "theorem_bounds": None,
        "invariants": None,
    }
    if proposed and L is not None and B_g is not None and R > 0:
        manifest["theorem_bounds"] = theorem_bounds(hp, n, L, B_g, max(m.sigma2 for m in metrics), omegas[0],
                                                    measured_mean_gmap_sq=mean_g2,
                                                    measured_final_omega=omegas[-1])
    result = RunResult(cfg, metrics, opt.model.copy(), manifest, snapshot_arrays)
    if snapshot_arrays is not None:
        result.manifest["invariants"] = [v.to_dict() for v in invariant_suite(result, dataset=dataset)]
    if out_dir is not None:
        _write_outputs(result, Path(out_dir))
    return result


class _SnapshotLog:
    def __init__(self, proposed: bool):
        self.proposed = proposed
        self.rows = {k: [] for k in ("p_x", "x_bar", "c", "grad_sums", "F", "gmap_tilde", "lambda_dev",
                                      "sigma2", "Z", "Zhat", "grads", "batches", "drift")}

    def before_round(self, opt, p, F, gt, lam_dev, sigma2):
        rows = self.rows
        rows["p_x"].append(p)
        rows["F"].append(F)
        rows["gmap_tilde"].append(gt)
        rows["lambda_dev"].append(lam_dev)
        rows["sigma2"].append(sigma2)
        if self.proposed:
            rows["x_bar"].append(opt.server.x_bar.copy())
            rows["c"].append(opt.corrections)
            rows["grad_sums"].append(opt.grad_sums)

    def after_round(self, trace, drift):
        rows = self.rows
        rows["Z"].append(trace.Z)
        rows["grads"].append(trace.grads)
        rows["drift"].append(drift)
        if trace.Zhat is not None:
            rows["Zhat"].append(trace.Zhat)
        if trace.batches and trace.batches[0] and trace.batches[0][0] is not None:
            rows["batches"].append(np.array(trace.batches, dtype=np.int64))

    def arrays(self) -> dict:
        out = {}
        for key, vals in self.rows.items():
            if vals:
                out[key] = np.array(vals)
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _write_outputs(result: RunResult, out: Path):
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(result.csv_text())
        (out / "config.json").write_text(result.config.to_json() + "\n")
        (out / "manifest.json").write_text(json.dumps(_jsonable(result.manifest), indent=2, sort_keys=True) + "\n")
        if result.snapshots is not None:
            np.savez_compressed(out / "snapshots.npz", **result.snapshots)
    except OSError as exc:
        raise InvalidArgumentError(f"cannot write run outputs to {out}: {exc}") from exc
    result.out_dir = out


def _read_metrics(path: Path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(RoundMetrics(int(row["round"]), float(row["optimality"]), float(row["F"]),
                                    float(row["grad_map_norm"]), float(row["drift"]), float(row["omega"]),
                                    int(row["comm_scalars"]),
                                    float(row["wall_ms"]) if row["wall_ms"] else None))
    return out


def load_run(run_dir) -> RunResult:
    """Re-open a run directory written by :func:`run_experiment`."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise InvalidArgumentError(f"{run_dir} has no manifest.json; is it a run directory?")
    manifest = json.loads(manifest_path.read_text())
    cfg = ExperimentConfig.from_dict(manifest["config"])
    snap_path = run_dir / "snapshots.npz"
    snaps = None
    if snap_path.exists():
        with np.load(snap_path) as data:
            snaps = {k: data[k] for k in data.files}
    metrics = _read_metrics(run_dir / "metrics.csv")
    model = np.asarray(snaps["p_x"][-1]) if snaps is not None else None
    return RunResult(cfg, metrics, model, manifest, snaps, run_dir)


@dataclass
class Verdict:
    name: str
    status: str  # "pass", "fail" or "n/a"
    max_violation: float = 0.0
    round: Optional[int] = None
    detail: str = ""

    def to_dict(self):
        return asdict(self)

    @property
    def ok(self) -> bool:
        return self.status != "fail"


def _verdict(name, worst, worst_round, tol, detail):
    status = "pass" if worst <= tol else "fail"
    return Verdict(name, status, float(worst), worst_round if status == "fail" else None, detail)


def invariant_suite(run: RunResult, dataset: Optional[FederatedDataset] = None) -> list:
    """Audit a logged run and return one :class:`Verdict` per invariant.

    Checks the correction-sum identity, per-client vs compact-form
    equivalence, the server recursion identity, communication accounting,
    the metric normalisation, and (on runs whose step sizes satisfy the
    analysed rule) the drift bound and the one-round descent of the
    auxiliary function. Checks specific to the proposed method are reported
    ``n/a`` for baselines.
    """
    snaps = run.snapshots
    if snaps is None or "p_x" not in snaps:
        raise MissingSnapshotsError(
            "run has no snapshots; re-run with snapshots enabled (--snapshots or \"snapshots\": true)"
        )
    cfg = run.config
    hp = cfg.hyper
    R = hp.rounds
    obj, _ = build_objective(cfg, dataset)
    problem, reg = obj.problem, obj.reg
    n = problem.n
    proposed = cfg.algorithm == "proposed" and "c" in snaps
    man = run.manifest
    verdicts = []

    # Metric normalisation and communication accounting need only the CSV.
    first = run.metrics[0]
    verdicts.append(_verdict("optimality(1) = 1", abs(first.optimality - 1.0), 1, 0.0,
                             "first metric row is normalised to 1"))
    expected = man.get("comm_per_round")
    worst, worst_r = 0.0, None
    for m in run.metrics:
        want = expected if m.r <= R else 0
        if m.comm_scalars != want and abs(m.comm_scalars - want) > worst:
            worst, worst_r = float(abs(m.comm_scalars - want)), m.r
    verdicts.append(_verdict("communication accounting", worst, worst_r, 0.0,
                             f"{expected} scalars per round"))

    names = ("correction-sum zero", "per-client/compact equivalence", "server recursion identity",
             "drift bound", "auxiliary-function descent")
    if not proposed:
        verdicts.extend(Verdict(name, "n/a", detail="proposed method only") for name in names)
        return verdicts

    C = snaps["c"]
    worst, worst_r = 0.0, None
    for r in range(C.shape[0]):
        mean_norm = np.linalg.norm(C[r].mean(axis=0))
        scale = 1.0 + np.max(np.linalg.norm(C[r], axis=1))
        ratio = mean_norm / scale
        if ratio > worst:
            worst, worst_r = ratio, r + 1
    verdicts.append(_verdict(names[0], worst, worst_r, CORRECTION_SUM_TOL,
                             "||mean_i c_i|| / (1 + max_i ||c_i||)"))

    batches = snaps.get("batches")
    worst, worst_r = 0.0, None
    for r in range(R):
        schedule = [[None if batches is None else batches[r, i, t] for t in range(hp.tau)] for i in range(n)]
        state = CompactState(snaps["x_bar"][r], snaps["grad_sums"][r])
        new, Z, Zhat = compact_round(state, hp, obj, schedule)
        for ref, got in ((snaps["Z"][r], Z), (snaps["Zhat"][r], Zhat), (snaps["x_bar"][r + 1], new.x_bar)):
            err = np.max(np.abs(ref - got)) / max(1.0, np.max(np.abs(ref)))
            if err > worst:
                worst, worst_r = err, r + 1
    verdicts.append(_verdict(names[1], worst, worst_r, EQUIVALENCE_TOL,
                             "compact form replayed from logged state and batches"))

    worst, worst_r = 0.0, None
    for r in range(R):
        p = snaps["p_x"][r]
        v = np.zeros_like(p)
        for i in range(n):
            for t in range(hp.tau):
                batch = None if batches is None else batches[r, i, t]
                v += problem.grad_at(i, snaps["Z"][r, i, t], batch)
        v /= n * hp.tau
        want = prox(reg, hp.eta_tilde, p - hp.eta_tilde * v)
        err = np.max(np.abs(snaps["p_x"][r + 1] - want)) / max(1.0, np.max(np.abs(want)))
        if err > worst:
            worst, worst_r = err, r + 1
    verdicts.append(_verdict(names[2], worst, worst_r, SERVER_IDENTITY_TOL,
                             "gradients recomputed from logged iterates and batches"))

    L, B_g = man.get("smoothness"), man.get("subgradient_bound")
    step_ok = man.get("step_rule", {}).get("satisfied")
    if not step_ok or L is None or B_g is None or R == 0:
        why = "step sizes outside the analysed rule" if step_ok is False else "needs L, B_g and at least one round"
        verdicts.append(Verdict(names[3], "n/a", detail=why))
        verdicts.append(Verdict(names[4], "n/a", detail=why))
        return verdicts

    # Margins start at -inf so a passing verdict reports the closest approach (negative).
    worst, worst_r = -np.inf, None
    for r in range(R):
        rhs = drift_bound(n, hp, B_g, snaps["gmap_tilde"][r], snaps["lambda_dev"][r], snaps["sigma2"][r])
        excess = (snaps["drift"][r] - rhs) / max(rhs, 1e-300)
        if excess > worst:
            worst, worst_r = excess, r + 1
    verdicts.append(_verdict(names[3], worst, worst_r, CHECK_RTOL,
                             "relative excess of measured drift over the bound"))

    if hp.batch_size is not None:
        verdicts.append(Verdict(names[4], "n/a", detail="deterministic check needs full gradients"))
        return verdicts
    omega = snaps["F"] + snaps["lambda_dev"] / (n * hp.eta_tilde)  # F* cancels in differences
    worst, worst_r = -np.inf, None
    for r in range(R):
        allowed = omega[r] + descent_slack(L, hp, B_g, snaps["gmap_tilde"][r])
        excess = (omega[r + 1] - allowed) / (1.0 + abs(omega[r]))
        if excess > worst:
            worst, worst_r = excess, r + 1
    verdicts.append(_verdict(names[4], worst, worst_r, CHECK_RTOL,
                             "Omega^{r+1} - Omega^r - 56 L^2 eta~^3 B_g^2/eta_g^2 + 0.3 eta~ ||G||^2"))
    return verdicts


def default_output_root() -> Path:
    return Path(os.environ.get("COMPFL_OUTPUT_ROOT", "runs"))
