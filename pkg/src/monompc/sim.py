"""Closed-loop simulation of MPC controllers on the true plant under uncertainty scenarios."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .box import Hyperrect
from .models import Model, plant_step
from .nlp import SolverOptions, solve
from .ocp import (
    AffineFeedback,
    RobustOcp,
    applied_input,
    build_cl_feedback_nlp,
    build_cl_nlp,
    build_nominal_nlp,
    build_ol_nlp,
    cold_start,
    nominal_cold_start,
    nominal_warm_start,
    unpack,
    warm_start_shift,
)
from .partition import PartitionSpec

SCENARIO_MODES = ("nominal", "constant-random", "worst-case-constant", "time-varying-random")
CONTROLLERS = ("nominal", "oracle", "ol", "cl", "cl-feedback")
ROBUST = ("ol", "cl", "cl-feedback")
RF_RESIDUAL = 1e-6  # warm starts at or below this residual certify feasibility
VIOLATION_TOL = 1e-7


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class UncertaintyScenario:
    """How the plant parameter evolves over a run."""

    mode: str = "nominal"
    seed: int = 0
    corner: str = "hi"  # worst-case-constant: "hi" or "lo" corner of P

    def __post_init__(self):
        if self.mode not in SCENARIO_MODES:
            raise ValueError(f"unknown scenario mode {self.mode!r}; expected one of {SCENARIO_MODES}")
        if self.corner not in ("hi", "lo"):
            raise ValueError("corner must be 'hi' or 'lo'")

    def realize(self, P: Hyperrect, p_nominal, steps: int) -> np.ndarray:
        """(steps, n_p) parameter values, all inside P."""
        p_nominal = np.asarray(p_nominal, dtype=float)
        rng = np.random.default_rng(self.seed)
        if self.mode == "nominal":
            p = np.tile(P.clip(p_nominal), (steps, 1))
        elif self.mode == "constant-random":
            p = np.tile(P.sample(rng, 1)[0], (steps, 1))
        elif self.mode == "worst-case-constant":
            p = np.tile(P.hi if self.corner == "hi" else P.lo, (steps, 1))
        else:
            p = P.sample(rng, steps)
        return p

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepResult:
    u: np.ndarray
    status: str
    iterations: int
    solve_time: float
    warm_residual: float
    predicted: Hyperrect | None  # step-1 bounding box of the solved plan
    kkt: float = float("nan")


class MpcController:
    """One of the nominal, oracle, OL, CL or CL-feedback controllers with warm starts.

    After a failed solve the shifted warm start is kept as the plan and its
    first input is applied, so robust controllers stay on a feasible plan
    whenever the shift was feasible.
    """

    def __init__(self, kind: str, ocp: RobustOcp, p_nominal=None, opts: SolverOptions | None = None):
        if kind not in CONTROLLERS:
            raise ValueError(f"unknown controller {kind!r}; expected one of {CONTROLLERS}")
        self.kind = kind
        self.ocp = ocp
        self.opts = opts or SolverOptions()
        self.p_nominal = None if p_nominal is None else np.asarray(p_nominal, dtype=float)
        self.nlp = None
        self.prev_z = None
        self.prev = None

    @property
    def robust(self) -> bool:
        return self.kind in ROBUST

    def _build(self, x, u_prev, p):
        if self.kind in ("nominal", "oracle"):
            return build_nominal_nlp(self.ocp, x, p, u_prev)
        if self.kind == "ol":
            return build_ol_nlp(self.ocp, x, u_prev)
        if self.kind == "cl":
            return build_cl_nlp(self.ocp, x, u_prev)
        return build_cl_feedback_nlp(self.ocp, x, u_prev)

    def step(self, x, u_prev, p_true) -> StepResult:
        x = self.ocp.X.clip(np.asarray(x, dtype=float))
        p = p_true if self.kind == "oracle" else self.p_nominal
        warm = None
        if self.nlp is None:
            self.nlp = self._build(x, u_prev, p)
            z0 = nominal_cold_start(self.nlp) if not self.robust else cold_start(self.nlp)
            res = float("inf")
        else:
            if self.robust:
                warm = warm_start_shift(self.nlp, self.prev_z, x, u_prev, prev=self.prev)
            else:
                warm = nominal_warm_start(self.nlp, self.prev_z, x, u_prev, p, prev=self.prev)
            z0, res = warm.z, warm.residual
        t0 = time.perf_counter()
        sol = solve(self.nlp, z0, self.opts, warm=warm)
        dt = time.perf_counter() - t0
        if sol.ok:
            z, self.prev = sol.z, sol
        else:
            z, self.prev = z0, None
        self.prev_z = z
        predicted = unpack(self.nlp, z).boxes[1] if self.robust else None
        u = applied_input(self.nlp, z) if self.robust else z[self.nlp.index[1](0)]
        return StepResult(np.array(u, dtype=float), sol.status, sol.iterations, dt, res, predicted, sol.kkt)


@dataclass
class ClosedLoopLog:
    controller: str
    model: str
    scenario: dict
    steps: int
    n_x: int
    n_u: int
    state_names: tuple
    input_names: tuple
    states: np.ndarray  # (steps + 1, n_x), plant states including the final one
    inputs: np.ndarray  # (steps, n_u)
    status: list
    iterations: list
    solve_time: np.ndarray  # seconds per step
    warm_residual: np.ndarray
    stage_cost: np.ndarray
    predicted: list  # step-1 boxes (or None)
    params: np.ndarray  # realized p per step
    infeasible_at_start: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def accumulated(self) -> np.ndarray:
        return np.cumsum(self.stage_cost)

    @property
    def total_cost(self) -> float:
        return float(self.accumulated[-1]) if self.stage_cost.size else 0.0

    @property
    def failures(self) -> list[int]:
        return [t for t, s in enumerate(self.status) if s != "optimal"]

    @property
    def rf_violations(self) -> list[int]:
        """Failed solves after t=0 whose shifted warm start was feasible."""
        if self.controller not in ROBUST:
            return []
        return [t for t in self.failures if t > 0 and self.warm_residual[t] <= RF_RESIDUAL]

    def state_violation(self, X: Hyperrect) -> np.ndarray:
        return np.array([_point_excess(X, x) for x in self.states])

    def input_violation(self, model: Model) -> np.ndarray:
        out = []
        for u in self.inputs:
            e = _point_excess(model.U, u)
            if model.input_rows is not None:
                A, b = model.input_rows
                e = max(e, float(np.max(A @ u - b, initial=0.0)))
            out.append(e)
        return np.array(out)

    def tube_violations(self, tol: float = VIOLATION_TOL) -> list[int]:
        """Steps whose realized next state left the step-1 predicted box."""
        return [t for t, b in enumerate(self.predicted)
                if b is not None and _point_excess(b, self.states[t + 1]) > tol]

    def mean_solve_ms(self) -> float:
        return float(1e3 * np.mean(self.solve_time)) if self.solve_time.size else 0.0

    def summary(self, model: Model) -> dict:
        return {
            "controller": self.controller,
            "model": self.model,
            "scenario": self.scenario,
            "steps": self.steps,
            "accumulated_cost": self.total_cost,
            "infeasible_at_start": self.infeasible_at_start,
            "failures": len(self.failures),
            "rf_violations": len(self.rf_violations),
            "max_state_violation": float(self.state_violation(model.X).max()),
            "max_input_violation": float(self.input_violation(model).max(initial=0.0)),
            "tube_violations": len(self.tube_violations()),
            **self.meta,
        }

    def to_csv(self, path=None) -> str:
        """Per-step CSV without timing, so equal runs give identical bytes."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", *self.state_names, *self.input_names, "stage_cost", "cost", "status"])
        acc = self.accumulated
        for t in range(self.steps):
            w.writerow([t, *map(repr, self.states[t].tolist()), *map(repr, self.inputs[t].tolist()),
                        repr(float(self.stage_cost[t])), repr(float(acc[t])), self.status[t]])
        w.writerow([self.steps, *map(repr, self.states[self.steps].tolist()), *[""] * self.n_u, "", "", "final"])
        return _write(buf.getvalue(), path)

    def timing_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "solve_ms", "iterations", "warm_residual"])
        for t in range(self.steps):
            w.writerow([t, f"{1e3 * self.solve_time[t]:.3f}", self.iterations[t], repr(float(self.warm_residual[t]))])
        return _write(buf.getvalue(), path)

    def tube_csv(self, path=None) -> str:
        """Step-1 predicted boxes per closed-loop step (plot data)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "dim", "lo", "hi", "realized"])
        for t, b in enumerate(self.predicted):
            if b is None:
                continue
            for i in range(b.n):
                w.writerow([t, i, repr(float(b.lo[i])), repr(float(b.hi[i])), repr(float(self.states[t + 1][i]))])
        return _write(buf.getvalue(), path)


def _point_excess(box: Hyperrect, x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.max(np.maximum(np.maximum(box.lo - x, x - box.hi), 0.0), initial=0.0))


def _write(text: str, path) -> str:
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def recompute_cost(model: Model, log: ClosedLoopLog, u_init=None) -> np.ndarray:
    """Stage costs recomputed from the logged trajectory."""
    u_prev = model.u_set if u_init is None else np.asarray(u_init, dtype=float)
    out = []
    for t in range(log.steps):
        u = log.inputs[t]
        out.append(float(model.stage_cost.evaluate(log.states[t], u, u_prev)[0]))
        u_prev = u
    return np.array(out)


def default_partition(model: Model) -> PartitionSpec:
    """Partition recommended by the model (``meta["partition_levels"]``), else a single leaf."""
    levels = model.meta.get("partition_levels")
    return PartitionSpec.from_levels(levels, model.n_x) if levels else PartitionSpec.single(model.n_x)


def closed_loop_run(controller: str, model: Model, scenario: UncertaintyScenario, steps: int = 75,
                    N: int = 10, partition: PartitionSpec | None = None, opts: SolverOptions | None = None,
                    x0=None, terminal: str | None = None, feedback: AffineFeedback | None = None,
                    stop_on_failure: bool = False) -> ClosedLoopLog:
    """Simulate ``steps`` closed-loop steps of one controller on the plant."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    kw = {"terminal": terminal}
    if feedback is not None:
        kw["feedback"] = feedback
    part = None
    if controller in ("cl", "cl-feedback"):
        part = partition if partition is not None else default_partition(model)
    ocp = RobustOcp.from_model(model, N, part, **kw)
    ctrl = MpcController(controller, ocp, model.p_nominal, opts)
    ps = scenario.realize(model.P, model.p_nominal, steps)
    x = np.array(model.x0 if x0 is None else x0, dtype=float)
    u_prev = np.array(model.u_set, dtype=float)
    states, inputs, status, iters, times, wres, stage, pred = [x], [], [], [], [], [], [], []
    infeasible_at_start = False
    for t in range(steps):
        r = ctrl.step(x, u_prev, ps[t])
        if t == 0 and r.status != "optimal":
            infeasible_at_start = True
        stage.append(float(model.stage_cost.evaluate(x, r.u, u_prev)[0]))
        x = plant_step(model, x, r.u, ps[t])
        states.append(x)
        inputs.append(r.u)
        status.append(r.status)
        iters.append(r.iterations)
        times.append(r.solve_time)
        wres.append(r.warm_residual)
        pred.append(r.predicted)
        u_prev = r.u
        if stop_on_failure and r.status != "optimal":
            break
    n = len(inputs)
    return ClosedLoopLog(
        controller=controller, model=model.name, scenario=scenario.to_dict(), steps=n,
        n_x=model.n_x, n_u=model.n_u, state_names=model.state_names, input_names=model.input_names,
        states=np.array(states), inputs=np.array(inputs), status=status, iterations=iters,
        solve_time=np.array(times), warm_residual=np.array(wres), stage_cost=np.array(stage),
        predicted=pred, params=ps[:n], infeasible_at_start=infeasible_at_start,
        meta={"N": N, "mu": ocp.mu if part is not None else 1},
    )


@dataclass
class BatchSummary:
    model: str
    n_x: int
    n_p: int
    mu: int
    scenarios: int
    rows: dict  # controller -> statistics without timing
    times: dict  # controller -> mean solve time in ms
    runs: dict  # controller -> list of per-run summaries

    def table_row(self) -> dict:
        """Columns n_R, n_x, n_p, mu, OL/CL cost ratios in percent and OL/CL mean solve times."""
        r = self.rows
        return {
            "n_R": self.n_x // 5 if self.model.startswith("cstr") else None,
            "n_x": self.n_x, "n_p": self.n_p, "mu": self.mu,
            "ol_ratio": r.get("ol", {}).get("cost_ratio"),
            "cl_ratio": r.get("cl", {}).get("cost_ratio"),
            "ol_time_ms": self.times.get("ol"),
            "cl_time_ms": self.times.get("cl"),
        }

    def to_json(self, path=None) -> str:
        """Deterministic summary (no timing); timing goes to :meth:`timing_json`."""
        d = {"model": self.model, "n_x": self.n_x, "n_p": self.n_p, "mu": self.mu,
             "scenarios": self.scenarios, "controllers": self.rows, "runs": self.runs}
        return _write(json.dumps(d, indent=2, sort_keys=True) + "\n", path)

    def timing_json(self, path=None) -> str:
        d = {"mean_solve_ms": self.times, "table": self.table_row()}
        return _write(json.dumps(d, indent=2, sort_keys=True) + "\n", path)


def batch_compare(controllers: Sequence[str], model: Model, scenarios: Sequence[UncertaintyScenario],
                  steps: int = 75, N: int = 10, partition: PartitionSpec | None = None,
                  opts: SolverOptions | None = None, workers: int = 1, log_dir=None) -> BatchSummary:
    """Run every controller on every scenario; cost ratios are relative to the oracle."""
    if not scenarios:
        raise ValueError("batch_compare needs at least one scenario")
    names = list(dict.fromkeys(["oracle", *controllers]))
    jobs = [(c, i) for c in names for i in range(len(scenarios))]

    def run(job):
        c, i = job
        return closed_loop_run(c, model, scenarios[i], steps, N, partition, opts)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            logs = list(ex.map(run, jobs))
    else:
        logs = [run(j) for j in jobs]
    by = {c: [lg for (cc, _), lg in zip(jobs, logs) if cc == c] for c in names}
    if log_dir is not None:
        from pathlib import Path
        d = Path(log_dir)
        d.mkdir(parents=True, exist_ok=True)
        for c, lgs in by.items():
            for i, lg in enumerate(lgs):
                lg.to_csv(d / f"{c}_{i:03d}.csv")
                lg.timing_csv(d / f"{c}_{i:03d}_timing.csv")
    oracle = np.array([lg.total_cost for lg in by["oracle"]])
    rows, times, runs = {}, {}, {}
    for c in names:
        lgs = by[c]
        cost = np.array([lg.total_cost for lg in lgs])
        ratio = cost / oracle
        feasible = [not lg.infeasible_at_start and not lg.failures
                    and lg.state_violation(model.X).max() <= VIOLATION_TOL
                    and lg.input_violation(model).max(initial=0.0) <= VIOLATION_TOL for lg in lgs]
        rows[c] = {
            "mean_cost": float(cost.mean()), "max_cost": float(cost.max()),
            "cost_ratio": float(100.0 * ratio.mean()),
            "feasibility_rate": float(np.mean(feasible)),
            "rf_violations": int(sum(len(lg.rf_violations) for lg in lgs)),
        }
        times[c] = float(np.mean([lg.mean_solve_ms() for lg in lgs]))
        runs[c] = [lg.summary(model) for lg in lgs]
    cl_part = partition if partition is not None else default_partition(model)
    mu = cl_part.n_leaves if any(c.startswith("cl") for c in controllers) else 1
    return BatchSummary(model.name, model.n_x, model.n_p, mu, len(scenarios), rows, times, runs)
