"""Coupled-grid convergence studies, rate fits and experiment output.

A study runs one fine reference trajectory per path and, in the same sweep,
every coarse rung of the ladder on coarsened increments of the same noise.
Per-path norms are kept in path order and reduced at the end, so results do
not depend on how paths are batched or distributed over worker processes.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fem import Mesh1D, assemble, prolongation
from .noise import PairwiseSum, TimeGrid, standard_normals
from .problem import ConfigError, ProblemSpec, build_problem
from .residual import lp_estimate, lp_max, two_sided_ratio
from .scheme import Discretization, SchemeConfig, Variant

log = logging.getLogger(__name__)

STUDIES = ("temporal", "spatial", "truncation", "two-sided", "regularity")
CSV_COLUMNS = ("study", "rung_param", "error", "stderr", "residual_norm", "ratio",
               "n_paths", "seed")


class ResourceError(MemoryError):
    def __init__(self, required: int, budget: int):
        super().__init__(f"batch needs about {required} bytes, budget is {budget} bytes")
        self.required = required
        self.budget = budget


class LockedError(RuntimeError):
    pass


# --- rate fitting ----------------------------------------------------------------

@dataclass
class RateReport:
    params: list
    errors: list
    stderrs: list
    slope: float
    intercept: float
    r2: float
    dropped: list = field(default_factory=list)
    residuals: list | None = None
    ratios: list | None = None

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, np.floating) else v) for k, v in asdict(self).items()}


def _linfit(x, y, w=None):
    A = np.vstack([x, np.ones_like(x)]).T
    if w is not None:
        sw = np.sqrt(w)
        coef, *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
    else:
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


def fit_rate(params, errors, stderrs=None, weighted: bool = False, min_r2: float = 0.98,
             drop_coarse: bool = True) -> RateReport:
    """Least-squares slope of ``log error`` against ``log param``.

    If ``R^2 < min_r2`` the coarsest rung (largest ``|log param|`` deviation
    towards the coarse end, i.e. the first entry after sorting by error size)
    is dropped once and the fit repeated; dropped rungs are listed.
    """
    params = np.asarray(params, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if params.size < 3:
        raise ValueError(f"need at least 3 points, got {params.size}")
    if np.any(params <= 0) or np.any(errors <= 0) or not np.all(np.isfinite(errors)):
        raise ValueError("parameters and errors must be positive and finite")
    se = np.zeros_like(errors) if stderrs is None else np.asarray(stderrs, dtype=float)
    x, y = np.log(params), np.log(errors)
    w = None
    if weighted:
        rel = np.maximum(se / errors, 1e-12)
        w = 1.0 / rel ** 2
    slope, icpt, r2 = _linfit(x, y, w)
    dropped = []
    if drop_coarse and r2 < min_r2 and params.size > 3:
        # the coarsest rung is the one with the largest error
        i = int(np.argmax(errors))
        dropped.append(float(params[i]))
        keep = np.arange(params.size) != i
        slope, icpt, r2 = _linfit(x[keep], y[keep], None if w is None else w[keep])
    return RateReport(params.tolist(), errors.tolist(), se.tolist(), slope, icpt, r2, dropped)


# --- experiment plan -------------------------------------------------------------------

@dataclass
class ExperimentPlan:
    """Declarative study description.

    ``ladder`` holds time steps (temporal, two-sided), cell counts (spatial)
    or mode counts ``J`` (truncation).  The reference is refined by
    ``ref_time_factor`` in time relative to the finest time step and by
    ``ref_space_factor`` in space relative to the finest mesh.
    """

    study: str = "temporal"
    ladder: list = field(default_factory=lambda: [2.0 ** -m for m in range(4, 9)])
    variant: str = "milstein"
    J: int | None = None
    k: float = 2.0 ** -10
    n_cells: int = 256
    ref_time_factor: int = 16
    ref_space_factor: int = 4
    n_paths: int = 2000
    p: float = 2.0
    seed: int = 0
    batch_size: int = 250
    workers: int = 1
    weighted: bool = False
    memory_budget: int = 2 * 1024 ** 3
    problem: dict = field(default_factory=dict)
    out: str | None = None

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ConfigError(f"unknown study {self.study!r}; expected one of {STUDIES}")
        try:
            self.variant = Variant(self.variant).value
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}") from None
        if self.n_paths < 2 or self.batch_size < 1 or self.workers < 1:
            raise ConfigError("n_paths must be >= 2; batch_size and workers >= 1")
        if self.p < 2:
            raise ConfigError(f"p must be >= 2, got {self.p}")
        if self.study != "regularity":
            if len(self.ladder) < 1:
                raise ConfigError("ladder must not be empty")
            self.ladder = sorted(self.ladder, reverse=self.study in ("temporal", "two-sided"))
            ratios = [a / b for a, b in zip(self.ladder[:-1], self.ladder[1:])]
            if self.study in ("temporal", "two-sided"):
                if not all(abs(r - round(r)) < 1e-9 and round(r) >= 2 for r in ratios):
                    raise ConfigError("temporal ladder must be dyadically nested")
            else:
                if not all(abs(1 / r - round(1 / r)) < 1e-9 for r in ratios):
                    raise ConfigError(f"{self.study} ladder must be nested")
        if self.ref_time_factor < 1 or self.ref_space_factor < 1:
            raise ConfigError("reference refinement factors must be >= 1")

    @classmethod
    def for_study(cls, study: str, **overrides) -> "ExperimentPlan":
        """Plan with the study's default ladder and grids, then ``overrides``."""
        base = dict(STUDY_DEFAULTS.get(study, {}))
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict({"study": study, **base})

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def build_problem(self) -> ProblemSpec:
        return build_problem(**self.problem)


STUDY_DEFAULTS = {
    "temporal": {"ladder": [2.0 ** -m for m in range(4, 9)], "n_cells": 256,
                 "ref_time_factor": 16, "n_paths": 2000},
    "two-sided": {"ladder": [2.0 ** -m for m in range(4, 9)], "n_cells": 256,
                  "ref_time_factor": 16, "n_paths": 2000},
    "spatial": {"ladder": [8, 16, 32, 64], "k": 2.0 ** -10, "ref_space_factor": 4,
                "n_paths": 1000},
    "truncation": {"ladder": [2, 4, 8, 16], "k": 2.0 ** -8, "n_cells": 64,
                   "variant": "truncated", "n_paths": 500},
    "regularity": {"k": 2.0 ** -10, "n_cells": 64, "n_paths": 200},
}


# --- noise blocks ------------------------------------------------------------------------

def noise_block(seed: int, path_indices, step_start: int, n_steps: int, n_modes: int,
                k: float) -> np.ndarray:
    """Increments ``(paths, steps, modes)`` for the given paths and step window."""
    out = np.empty((len(path_indices), n_steps, n_modes))
    for i, pi in enumerate(path_indices):
        out[i] = standard_normals(seed, int(pi), step_start, n_steps, n_modes)
    out *= np.sqrt(k)
    return out


# --- the coupled sweep ------------------------------------------------------------------

@dataclass
class Rung:
    """One coarse discretisation evaluated against the reference."""

    label: str
    param: float
    disc: Discretization
    factor: int
    residual: bool = False

    def __post_init__(self):
        self.prolong = None

    @property
    def n_steps(self) -> int:
        return self.disc.config.grid.n_steps


@dataclass
class SweepResult:
    """Per-path H-norms: ``errors[label]`` and ``spijker[label]`` are ``(paths, nodes)``."""

    errors: dict
    spijker: dict
    ref_norms: np.ndarray
    recorded: np.ndarray | None = None


def _estimate_bytes(n_batch: int, ref: Discretization, rungs, block: int, record: int) -> int:
    n_modes = ref.problem.n_modes
    Q = ref.quad.size
    per = n_batch * 8
    total = per * block * n_modes                     # noise block
    total += per * Q * 6                              # fields and products
    total += per * ref.ops.n * (4 + 3 * len(rungs))
    total += sum(per * (r.n_steps + 1) * 2 for r in rungs)
    total += per * record * ref.ops.n
    return int(total)


def coupled_sweep(ref: Discretization, rungs: list[Rung], path_indices, seed: int,
                  block: int = 64, record_every: int | None = None,
                  memory_budget: int | None = None) -> SweepResult:
    """Run the reference and all rungs on the same noise for ``path_indices``."""
    path_indices = np.asarray(path_indices)
    P = path_indices.size
    n_modes = ref.problem.n_modes
    kf = ref.k
    N = ref.config.grid.n_steps
    ref_ops = ref.ops
    n_rec = 0 if record_every is None else N // record_every + 1
    if memory_budget is not None:
        need = _estimate_bytes(P, ref, rungs, block, n_rec)
        if need > memory_budget:
            raise ResourceError(need, memory_budget)
    for r in rungs:
        if N % r.factor:
            raise ValueError(f"rung {r.label}: factor {r.factor} does not divide {N}")
        if r.disc.config.mesh != ref.config.mesh:
            r.prolong = prolongation(r.disc.config.mesh, ref.config.mesh)
        if r.residual and r.prolong is not None:
            raise ValueError("residuals need the rung to share the reference mesh")

    def embed(r: Rung, c):
        return c if r.prolong is None else (r.prolong @ c.T).T

    X = np.broadcast_to(ref.xi, (P, ref_ops.n)).copy()
    state = {r.label: np.broadcast_to(r.disc.xi, (P, r.disc.ops.n)).copy() for r in rungs}
    # increments and (when the rung shares the reference rule and mode set) noise
    # fields accumulated over each coarse step; the fields are linear in dW
    factors = sorted({r.factor for r in rungs})
    acc = {f: PairwiseSum(f) for f in factors}
    shares = {r.label: r.disc.quad.size == ref.quad.size and r.disc.j_euler == ref.j_euler
              for r in rungs}
    wacc = {f: np.zeros((P, ref.quad.size)) for f in factors
            if any(shares[r.label] and r.factor == f for r in rungs)}
    prev_ref = {r.label: X.copy() for r in rungs}
    spij = {r.label: np.zeros((P, r.disc.ops.n)) for r in rungs}
    err = {r.label: np.zeros((P, r.n_steps + 1)) for r in rungs}
    res = {r.label: np.zeros((P, r.n_steps + 1)) for r in rungs if r.residual}
    for r in rungs:
        err[r.label][:, 0] = ref_ops.h_norm(embed(r, state[r.label]) - X)
    ref_norms = np.zeros((P, N + 1))
    ref_norms[:, 0] = ref_ops.h_norm(X)
    recorded = None
    if n_rec:
        recorded = np.empty((P, n_rec, ref_ops.n))
        recorded[:, 0] = X

    for start in range(0, N, block):
        nb = min(block, N - start)
        dW = noise_block(seed, path_indices, start, nb, n_modes, kf)
        for i in range(nb):
            m = start + i
            d = dW[:, i]
            fields = ref.noise_fields(d)
            X = ref.advance(X, d, fields=fields)
            if not np.all(np.isfinite(X)):
                from .scheme import NumericalBlowUp
                raise NumericalBlowUp(m + 1, "reference")
            ref_norms[:, m + 1] = ref_ops.h_norm(X)
            if recorded is not None and (m + 1) % record_every == 0:
                recorded[:, (m + 1) // record_every] = X
            for f in factors:
                acc[f].push(d)
                if f in wacc:
                    wacc[f] += fields[0]
            cache = {}
            for r in rungs:
                if (m + 1) % r.factor:
                    continue
                n = (m + 1) // r.factor
                disc = r.disc
                a = acc[r.factor].value
                if shares[r.label]:
                    w = wacc[r.factor]
                    if disc.j_mil in (0, disc.j_euler):
                        f = (w, w if disc.j_mil else None)
                    else:
                        f = (w, a[:, : disc.j_mil] @ disc.modal[: disc.j_mil])
                else:
                    key = (r.factor, disc.quad.size, disc.j_euler, disc.j_mil)
                    f = cache.get(key)
                    if f is None:
                        f = cache[key] = disc.noise_fields(a)
                Y = disc.advance(state[r.label], a, fields=f)
                if not np.all(np.isfinite(Y)):
                    from .scheme import NumericalBlowUp
                    raise NumericalBlowUp(n, r.label)
                state[r.label] = Y
                err[r.label][:, n] = ref_ops.h_norm(embed(r, Y) - X)
                if r.residual:
                    rv = X - disc.advance(prev_ref[r.label], a, fields=f)
                    spij[r.label] = disc.linear_step(spij[r.label]) + rv
                    res[r.label][:, n] = disc.ops.h_norm(spij[r.label])
                    prev_ref[r.label] = X.copy()
            for f in factors:
                if (m + 1) % f == 0:
                    acc[f].reset()
                    if f in wacc:
                        wacc[f][:] = 0.0
    return SweepResult(err, res, ref_norms, recorded)


def _sweep_worker(args):
    builder, indices, seed, kw = args
    ref, rungs = builder()
    return coupled_sweep(ref, rungs, indices, seed, **kw)


def run_sweep(builder, n_paths: int, seed: int, batch_size: int = 250, workers: int = 1,
              **kw) -> SweepResult:
    """``coupled_sweep`` over ``n_paths`` paths in batches, merged in path order.

    ``builder()`` returns ``(ref, rungs)``; it must be picklable when
    ``workers > 1``.
    """
    batches = [np.arange(a, min(a + batch_size, n_paths)) for a in range(0, n_paths, batch_size)]
    jobs = [(builder, b, seed, kw) for b in batches]
    if workers > 1 and len(batches) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_sweep_worker, jobs))
    else:
        ref, rungs = builder()
        parts = [coupled_sweep(ref, rungs, b, seed, **kw) for b in batches]
    cat = lambda ds: {k: np.concatenate([d[k] for d in ds]) for k in ds[0]}  # noqa: E731
    recorded = None
    if parts[0].recorded is not None:
        recorded = np.concatenate([q.recorded for q in parts])
    return SweepResult(cat([q.errors for q in parts]), cat([q.spijker for q in parts]),
                       np.concatenate([q.ref_norms for q in parts]), recorded)


# --- study builders -------------------------------------------------------------------------

@dataclass(frozen=True)
class StudyBuilder:
    """Picklable factory for the reference and rungs of a study."""

    problem_overrides: tuple
    study: str
    ladder: tuple
    variants: tuple
    J: int | None
    k: float
    n_cells: int
    ref_time_factor: int
    ref_space_factor: int
    residual: bool = False

    def __call__(self):
        problem = build_problem(**dict(self.problem_overrides))
        T = problem.T
        if self.study in ("temporal", "two-sided"):
            k_fine = min(self.ladder) / self.ref_time_factor
            ref_mesh = Mesh1D(self.n_cells)
            ref = Discretization(problem, SchemeConfig(Variant.MILSTEIN,
                                 TimeGrid.from_horizon(T, k_fine), ref_mesh))
            rungs = []
            for v in self.variants:
                for kc in self.ladder:
                    f = int(round(kc / k_fine))
                    cfg = SchemeConfig(v, TimeGrid.from_horizon(T, kc), ref_mesh, self.J)
                    rungs.append(Rung(f"{v}:{kc:g}", kc, Discretization(problem, cfg, ref.ops),
                                      f, self.residual))
            return ref, rungs
        if self.study == "spatial":
            ref_mesh = Mesh1D(max(self.ladder) * self.ref_space_factor)
            grid = TimeGrid.from_horizon(T, self.k)
            ref = Discretization(problem, SchemeConfig(Variant.MILSTEIN, grid, ref_mesh))
            res = ref.quad.size // 4  # sub-cells of the reference rule (4 Gauss points each)
            rungs = []
            for v in self.variants:
                for nc in self.ladder:
                    cfg = SchemeConfig(v, grid, Mesh1D(int(nc)), self.J)
                    rungs.append(Rung(f"{v}:{int(nc)}", 1.0 / nc,
                                      Discretization(problem, cfg, resolution=res), 1))
            return ref, rungs
        if self.study == "truncation":
            mesh = Mesh1D(self.n_cells)
            grid = TimeGrid.from_horizon(T, self.k)
            ref = Discretization(problem, SchemeConfig(Variant.MILSTEIN, grid, mesh))
            rungs = [Rung(f"truncated:{int(J)}", float(J),
                          Discretization(problem, SchemeConfig(Variant.TRUNCATED, grid, mesh,
                                                               int(J)), ref.ops), 1)
                     for J in self.ladder]
            return ref, rungs
        raise ValueError(f"no coupled sweep for study {self.study!r}")


def builder_for(plan: ExperimentPlan, variants=None, residual=None) -> StudyBuilder:
    variants = tuple(variants or (plan.variant,))
    return StudyBuilder(tuple(sorted(plan.problem.items())), plan.study, tuple(plan.ladder),
                        variants, plan.J, plan.k, plan.n_cells, plan.ref_time_factor,
                        plan.ref_space_factor,
                        plan.study == "two-sided" if residual is None else residual)


# --- reductions ------------------------------------------------------------------------------

def strong_error(norms: np.ndarray, p: float):
    """``max_n ||X_coarse(t_n) - X_ref(t_n)||_{L_p}`` and its standard error."""
    value, se, _ = lp_max(norms, p)
    return value, se


def rung_table(sweep: SweepResult, builder: StudyBuilder, p: float, variant: str):
    """Rows ``(param, error, stderr, residual_norm, ratio)`` for one variant."""
    rows = []
    for label, norms in sweep.errors.items():
        v, param = label.split(":")
        if v != variant:
            continue
        e, se = strong_error(norms, p)
        res = ratio = None
        if label in sweep.spijker:
            res = lp_max(sweep.spijker[label][:, 1:], p)[0]
            ratio = two_sided_ratio(e, res)
        rows.append((float(param) if builder.study != "spatial" else 1.0 / float(param),
                     e, se, res, ratio))
    return rows


def _fit_params(study: str, rows):
    """Fit abscissa: ``k`` (temporal), ``h`` (spatial) or ``J`` (truncation)."""
    return [r[0] for r in rows]


def run_experiment(plan: ExperimentPlan):
    """Execute a study, fit the rate and write CSV/JSON into ``plan.out`` if set."""
    if plan.study == "regularity":
        return check_regularity(plan)
    builder = builder_for(plan)
    sweep = run_sweep(builder, plan.n_paths, plan.seed, plan.batch_size, plan.workers,
                      memory_budget=plan.memory_budget)
    rows = rung_table(sweep, builder, plan.p,
                      "truncated" if plan.study == "truncation" else plan.variant)
    errs = [r[1] for r in rows]
    report = None
    if len(rows) >= 3 and all(e > 0 for e in errs):
        report = fit_rate(_fit_params(plan.study, rows), errs, [r[2] for r in rows],
                          plan.weighted)
    else:
        report = RateReport([r[0] for r in rows], errs, [r[2] for r in rows],
                            float("nan"), float("nan"), float("nan"))
    report.residuals = [r[3] for r in rows]
    report.ratios = [r[4] for r in rows]
    if plan.out:
        write_outputs(plan, rows, report)
    return report


# --- output ------------------------------------------------------------------------------

def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(float(x))
    return str(x)


@contextmanager
def output_lock(out_dir: Path):
    """Exclusive lock file so only one experiment writes into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out_dir} is locked by another experiment ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def write_outputs(plan: ExperimentPlan, rows, report: RateReport, name: str | None = None):
    out = Path(plan.out)
    stem = name or f"{plan.study}_{plan.variant}"
    with output_lock(out):
        with open(out / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for param, e, se, res, ratio in rows:
                w.writerow([plan.study, _fmt(float(param)), _fmt(float(e)), _fmt(float(se)),
                            _fmt(None if res is None else float(res)),
                            _fmt(None if ratio is None else float(ratio)),
                            plan.n_paths, plan.seed])
        payload = {
            "rows": [dict(zip(CSV_COLUMNS, [plan.study, param, e, se, res, ratio,
                                            plan.n_paths, plan.seed]))
                     for param, e, se, res, ratio in rows],
            "slope": report.slope,
            "r2": report.r2,
            "intercept": report.intercept,
            "dropped": report.dropped,
            "variant": plan.variant,
        }
        (out / f"{stem}.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --- regularity ------------------------------------------------------------------------------

@dataclass
class RegularityReport:
    s_values: list
    moments: dict
    exponents: dict
    lags: list


def _regularity_builder(plan: ExperimentPlan):
    return StudyBuilder(tuple(sorted(plan.problem.items())), "truncation", (), ("milstein",),
                        None, plan.k, plan.n_cells, 1, 1)


def check_regularity(plan: ExperimentPlan, record_every: int = 1, max_lag_exp: int = 6):
    """Moments ``sup_t E||X(t)||_s^{2p}`` and temporal Holder exponents in ``L^{2p}(Omega; H^s)``.

    Exponents are least-squares slopes of ``max_t ||X(t+l) - X(t)||_{L^{2p}(H^s)}``
    against dyadic lags ``l = 2^m k_rec``.
    """
    from .spectral import fractional_norm

    builder = _regularity_builder(plan)
    sweep = run_sweep(builder, plan.n_paths, plan.seed, plan.batch_size, plan.workers,
                      record_every=record_every, memory_budget=plan.memory_budget)
    ref, _ = builder()
    problem = ref.problem
    basis = problem.basis
    coeffs = ref.ops.to_spectral(sweep.recorded, basis)  # (P, n_rec, modes)
    q = 2 * plan.p
    s_values = [0.0, problem.r, 1.0 + problem.r]
    k_rec = ref.k * record_every
    n_rec = coeffs.shape[1]
    lags = [2 ** m for m in range(max_lag_exp + 1) if 2 ** m < n_rec]
    moments, exponents = {}, {}
    for s in s_values:
        norms = fractional_norm(coeffs, s, basis)
        moments[s] = float(np.max(np.mean(norms ** q, axis=0)))
        incs = []
        for lag in lags:
            d = fractional_norm(coeffs[:, lag:] - coeffs[:, :-lag], s, basis)
            incs.append(float(np.max(lp_estimate(d, q)[0])))
        incs = np.asarray(incs)
        if np.all(incs > 0):
            x = np.log(np.asarray(lags) * k_rec)
            exponents[s] = float(np.polyfit(x, np.log(incs), 1)[0])
        else:
            exponents[s] = float("inf")
    report = RegularityReport(s_values, moments, exponents, [lag * k_rec for lag in lags])
    if plan.out:
        out = Path(plan.out)
        with output_lock(out):
            (out / "regularity.json").write_text(json.dumps(
                {"s": s_values, "moments": {str(k): v for k, v in moments.items()},
                 "exponents": {str(k): v for k, v in exponents.items()},
                 "lags": report.lags, "n_paths": plan.n_paths, "seed": plan.seed},
                indent=2, sort_keys=True) + "\n")
    return report


# --- reference ----------------------------------------------------------------------------------

def make_reference(problem: ProblemSpec, grid: TimeGrid, mesh: Mesh1D, path_indices, seed: int,
                   memory_budget: int = 2 * 1024 ** 3):
    """Full-mode Milstein reference trajectories and the increments that drove them.

    Returns ``(GridProcess, increments)`` with increments ``(paths, N, modes)``.
    """
    from .scheme import GridProcess, run

    P = len(path_indices)
    need = 8 * P * grid.n_steps * (problem.n_modes + mesh.n_nodes)
    if need > memory_budget:
        raise ResourceError(need, memory_budget)
    dW = noise_block(seed, path_indices, 0, grid.n_steps, problem.n_modes, grid.k)
    proc = run(problem, SchemeConfig(Variant.MILSTEIN, grid, mesh), dW)
    return GridProcess(proc.states, grid, mesh, seed, np.asarray(path_indices)), dW


__all__ = [
    "ExperimentPlan", "RateReport", "Rung", "StudyBuilder", "SweepResult", "ResourceError",
    "LockedError", "coupled_sweep", "run_sweep", "fit_rate", "strong_error", "run_experiment",
    "check_regularity", "make_reference", "noise_block", "write_outputs", "CSV_COLUMNS",
]


# --- single runs ------------------------------------------------------------------------------

@dataclass
class SolveSummary:
    times: np.ndarray
    norms: np.ndarray
    stderrs: np.ndarray
    final_mean: np.ndarray


def solve(plan: ExperimentPlan) -> SolveSummary:
    """Run one discretisation for ``plan.n_paths`` paths and summarise ``||X(t_n)||_{L_p}``."""
    problem = plan.build_problem()
    grid = TimeGrid.from_horizon(problem.T, plan.k)
    cfg = SchemeConfig(plan.variant, grid, Mesh1D(plan.n_cells), plan.J)
    disc = Discretization(problem, cfg)
    norms, finals = [], []
    for a in range(0, plan.n_paths, plan.batch_size):
        idx = np.arange(a, min(a + plan.batch_size, plan.n_paths))
        need = 8 * idx.size * grid.n_steps * problem.n_modes
        if need > plan.memory_budget:
            raise ResourceError(need, plan.memory_budget)
        dW = noise_block(plan.seed, idx, 0, grid.n_steps, problem.n_modes, grid.k)
        from .scheme import run
        states = run(problem, cfg, dW, disc=disc).states
        norms.append(disc.ops.h_norm(states))
        finals.append(states[:, -1])
    norms = np.concatenate(norms)
    est, se = lp_estimate(norms, plan.p)
    summary = SolveSummary(grid.times, est, se, np.concatenate(finals).mean(axis=0))
    if plan.out:
        out = Path(plan.out)
        with output_lock(out):
            with open(out / "solve.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("time", "lp_norm", "stderr", "n_paths", "seed"))
                for t, e, s in zip(grid.times, est, se):
                    w.writerow((repr(float(t)), repr(float(e)), repr(float(s)), plan.n_paths,
                                plan.seed))
            (out / "solve.json").write_text(json.dumps({
                "variant": plan.variant, "k": plan.k, "n_cells": plan.n_cells,
                "n_paths": plan.n_paths, "seed": plan.seed, "p": plan.p,
                "sup_norm": float(est.max()), "final_mean_nodal": summary.final_mean.tolist(),
            }, indent=2, sort_keys=True) + "\n")
    return summary
