"""Command-line interface: configuration, experiments, validation suites and plot data.

Exit codes: 0 success, 1 validation failure, 2 solver or simulation failure,
3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .box import Hyperrect
from .exprgraph import DecompGraph, GraphError, check_monotone
from .models import CostParams, CstrParams, Model, build_cstr, build_double_integrator, build_scalar_monotone
from .nlp import SolverOptions
from .ocp import (
    ConfigError,
    RobustOcp,
    build_cl_feedback_nlp,
    build_cl_nlp,
    build_nominal_nlp,
    build_ol_nlp,
    verify_rcis,
)
from .partition import PartitionSpec, leaf_boxes, validate_tiling
from .reach import check_decomposition, mc_tube_containment, propagate_tube
from .sim import (
    CONTROLLERS,
    ROBUST,
    VIOLATION_TOL,
    UncertaintyScenario,
    batch_compare,
    closed_loop_run,
    default_partition,
)

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2, 3


# --------------------------------------------------------------------------
# configuration schema


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PartitionConfig(_Strict):
    """Cut axis per tree level (balanced tree) or an explicit nested tree ``[axis, left, right]``."""

    levels: Optional[list[int]] = None
    tree: Optional[list] = None


class ScenarioConfig(_Strict):
    mode: Literal["nominal", "constant-random", "worst-case-constant", "time-varying-random"] = "constant-random"
    seed: int = 0  # scenario i of a batch uses seed + i
    corner: Literal["hi", "lo"] = "hi"
    count: int = Field(1, ge=1)


class SolverConfig(_Strict):
    kkt_tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(200, ge=1)
    hessian: Literal["bfgs", "gauss-newton"] = "bfgs"
    reg: float = Field(1e-4, ge=0)

    def options(self) -> SolverOptions:
        return SolverOptions(kkt_tol=self.kkt_tol, max_iter=self.max_iter, hessian=self.hessian, reg=self.reg)


class BoxConfig(_Strict):
    lo: list[float]
    hi: list[float]

    def box(self) -> Hyperrect:
        return Hyperrect(self.lo, self.hi)


class RunConfig(_Strict):
    """Everything one command needs; every field has a default."""

    model: Literal["scalar", "double_integrator", "cstr"] = "cstr"
    n_R: int = Field(1, ge=1)
    params_file: Optional[str] = None  # YAML/JSON with "cstr" and "cost" sections, or "p_amp"
    decomposition_file: Optional[str] = None  # JSON decomposition replacing the synthesized one
    controllers: list[str] = ["nominal", "ol", "cl"]
    N: int = Field(10, ge=1)
    partition: Optional[PartitionConfig] = None  # None: the model's recommended partition
    terminal: Optional[Literal["relaxed", "fixed", "none"]] = None  # None: the model's default
    terminal_box: Optional[BoxConfig] = None
    rcis_candidate: Optional[BoxConfig] = None
    scenario: ScenarioConfig = ScenarioConfig()
    steps: int = Field(75, ge=1)
    solver: SolverConfig = SolverConfig()
    output_dir: str = "monompc_out"
    seed: int = 0  # sampling seed of the validation suites
    samples: int = Field(10_000, ge=1)
    workers: int = Field(1, ge=1)

    @field_validator("controllers")
    @classmethod
    def _known_controllers(cls, v):
        bad = [c for c in v if c not in CONTROLLERS]
        if bad:
            raise ValueError(f"unknown controllers {bad}; expected a subset of {list(CONTROLLERS)}")
        if not v:
            raise ValueError("at least one controller is required")
        return v


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read_mapping(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}", EXIT_CONFIG)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise CliError(f"{path}: not valid YAML/JSON: {e}", EXIT_CONFIG)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise CliError(f"{path}: top level must be a mapping", EXIT_CONFIG)
    return data


def _format_validation(e: ValidationError) -> str:
    lines = []
    for err in e.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "invalid configuration:\n" + "\n".join(lines)


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    data = _read_mapping(path) if path else {}
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise CliError(_format_validation(e), EXIT_CONFIG)


# --------------------------------------------------------------------------
# building blocks


def build_model(cfg: RunConfig) -> Model:
    extra = _read_mapping(cfg.params_file) if cfg.params_file else {}
    try:
        if cfg.model == "cstr":
            unknown = set(extra) - {"cstr", "cost"}
            if unknown:
                raise CliError(f"params_file: unknown sections {sorted(unknown)}", EXIT_CONFIG)
            prm = CstrParams.from_dict({**extra.get("cstr", {}), "n_R": cfg.n_R})
            cost = CostParams.from_dict(extra.get("cost", {}))
            model = build_cstr(cfg.n_R, prm, cost)
        else:
            unknown = set(extra) - {"p_amp"}
            if unknown:
                raise CliError(f"params_file: unknown keys {sorted(unknown)}", EXIT_CONFIG)
            builder = build_scalar_monotone if cfg.model == "scalar" else build_double_integrator
            model = builder(**extra)
    except (TypeError, ValueError) as e:
        raise CliError(f"params_file: {e}", EXIT_CONFIG)
    if cfg.decomposition_file:
        try:
            d = DecompGraph.from_json(Path(cfg.decomposition_file).read_text())
        except (OSError, ValueError, KeyError, GraphError) as e:
            raise CliError(f"decomposition_file: {e}", EXIT_CONFIG)
        if (d.n_x, d.n_u, d.n_p) != (model.n_x, model.n_u, model.n_p):
            raise CliError("decomposition_file: dimensions do not match the model", EXIT_CONFIG)
        model = replace(model, decomp=d)
    return model


def build_partition(cfg: RunConfig, model: Model) -> PartitionSpec:
    try:
        if cfg.partition is None:
            return default_partition(model)
        if cfg.partition.tree is not None:
            return PartitionSpec.from_nested(cfg.partition.tree, model.n_x)
        return PartitionSpec.from_levels(cfg.partition.levels or [], model.n_x)
    except ValueError as e:
        raise CliError(f"partition: {e}", EXIT_CONFIG)


def build_ocp(cfg: RunConfig, model: Model, partition: PartitionSpec | None) -> RobustOcp:
    kw = {"terminal": cfg.terminal}
    if cfg.terminal_box is not None:
        kw["X_f"] = cfg.terminal_box.box()
    try:
        return RobustOcp.from_model(model, cfg.N, partition, **kw)
    except (ConfigError, ValueError) as e:
        raise CliError(f"ocp: {e}", EXIT_CONFIG)


def scenarios(cfg: RunConfig) -> list[UncertaintyScenario]:
    s = cfg.scenario
    return [UncertaintyScenario(s.mode, s.seed + i, s.corner) for i in range(s.count)]


def _out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_check(cfg: RunConfig, out=None) -> int:
    """Monotonicity report, decomposition conditions, tiling and optional RCIS verification."""
    out = out or sys.stdout
    model = build_model(cfg)
    failed = False
    rep = check_monotone(model.f, model.X, model.U, model.P)
    d = model.decomp
    if rep.monotone and d.ignores_second_copy():
        how = "dynamics"
    elif cfg.decomposition_file:
        how = "loaded from file"
    else:
        how = "synthesized"
    out.write(f"monotone: {'yes' if rep.monotone else 'no'}; decomposition = {how}\n")
    dc = check_decomposition(d, model.f, model.X, model.U, model.P, cfg.samples, cfg.seed)
    out.write(dc.summary() + "\n")
    if not dc.ok:
        out.write(f"decomposition violates condition {', '.join(map(str, dc.failed_conditions()))}\n")
        failed = True
    part = build_partition(cfg, model)
    boxes = leaf_boxes(part, model.X, part.default_cuts(model.X))
    tr = validate_tiling(boxes, model.X, cfg.samples, cfg.seed)
    out.write(f"tiling ({part.n_leaves} leaves): {'pass' if tr.ok else 'FAIL'} "
              f"(uncovered {tr.uncovered}, overlapping {tr.overlapping})\n")
    failed |= not tr.ok
    candidate = cfg.rcis_candidate or cfg.terminal_box
    if candidate is not None:
        v = _rcis(cfg, model, part, candidate.box())
        out.write(f"rcis: {'verified' if v.verified else 'unverified'} ({v.message})\n")
        failed |= not v.verified
    return EXIT_VALIDATION if failed else EXIT_OK


def _rcis(cfg, model, part, candidate):
    ocp = build_ocp(cfg.model_copy(update={"terminal": "none"}), model, part)
    return verify_rcis(candidate, part, ocp, cfg.solver.options(), seed=cfg.seed)


def cmd_rcis_verify(cfg: RunConfig, out=None) -> int:
    out = out or sys.stdout
    model = build_model(cfg)
    candidate = cfg.rcis_candidate or cfg.terminal_box
    if candidate is None:
        raise CliError("rcis-verify needs rcis_candidate (or terminal_box) in the configuration", EXIT_CONFIG)
    part = build_partition(cfg, model)
    v = _rcis(cfg, model, part, candidate.box())
    out.write(json.dumps(v.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK if v.verified else EXIT_VALIDATION


def cmd_reach(cfg: RunConfig, out=None) -> int:
    """Open-loop tube from the initial state under the steady input; tube CSV plus MC check."""
    out = out or sys.stdout
    model = build_model(cfg)
    box0 = Hyperrect(model.x0, model.x0)
    inputs = [model.U.clip(model.u_set)] * cfg.N
    try:
        tube = propagate_tube(model.decomp, box0, inputs, model.P)
    except ValueError as e:
        out.write(f"reach: {e}\n")
        return EXIT_VALIDATION
    d = _out_dir(cfg)
    tube.to_csv(d / "tube.csv")
    viol = mc_tube_containment(model.f, tube, inputs, model.P, n_samples=min(cfg.samples, 2000), seed=cfg.seed)
    out.write(f"tube of {tube.N} steps written to {d / 'tube.csv'}; sampled trajectory violations: {viol}\n")
    return EXIT_OK if viol == 0 else EXIT_VALIDATION


def _dry_run(cfg: RunConfig, model: Model, part: PartitionSpec, out) -> int:
    for c in cfg.controllers:
        ocp = build_ocp(cfg, model, part if c in ("cl", "cl-feedback") else None)
        if c in ("nominal", "oracle"):
            nlp = build_nominal_nlp(ocp, model.x0, model.p_nominal)
        else:
            nlp = {"ol": build_ol_nlp, "cl": build_cl_nlp, "cl-feedback": build_cl_feedback_nlp}[c](ocp, model.x0)
        out.write(f"# controller {c}\n")
        out.write(nlp.audit())
    return EXIT_OK


def _robust_failed(summary: dict) -> bool:
    return (summary["rf_violations"] > 0 or summary["max_state_violation"] > VIOLATION_TOL
            or summary["max_input_violation"] > VIOLATION_TOL or summary["infeasible_at_start"])


def cmd_run(cfg: RunConfig, out=None, dry_run: bool = False) -> int:
    """Closed-loop runs (one scenario) or a batch comparison (several scenarios)."""
    out = out or sys.stdout
    model = build_model(cfg)
    part = build_partition(cfg, model)
    build_ocp(cfg, model, part)  # surface configuration errors before any solve
    if dry_run:
        return _dry_run(cfg, model, part, out)
    if cfg.scenario.count > 1:
        return cmd_compare(cfg, out, model=model, part=part)
    d = _out_dir(cfg)
    opts = cfg.solver.options()
    scen = scenarios(cfg)[0]
    summary, code = {}, EXIT_OK
    for c in cfg.controllers:
        log = closed_loop_run(c, model, scen, cfg.steps, cfg.N, part, opts, terminal=cfg.terminal)
        log.to_csv(d / f"{c}.csv")
        log.timing_csv(d / f"{c}_timing.csv")
        if c in ROBUST:
            log.tube_csv(d / f"{c}_tube.csv")
        s = log.summary(model)
        summary[c] = s
        if c in ROBUST and _robust_failed(s):
            code = EXIT_SOLVER
        out.write(f"{c}: cost {s['accumulated_cost']:.6g}, failures {s['failures']}, "
                  f"max state violation {s['max_state_violation']:.3g}\n")
    _dump({"config": cfg.model_dump(), "controllers": summary}, d / "summary.json")
    return code


def cmd_compare(cfg: RunConfig, out=None, model: Model | None = None,
                part: PartitionSpec | None = None) -> int:
    """Batch over ``scenario.count`` seeds; summary with cost ratios against the oracle."""
    out = out or sys.stdout
    model = model or build_model(cfg)
    part = part or build_partition(cfg, model)
    d = _out_dir(cfg)
    summ = batch_compare(cfg.controllers, model, scenarios(cfg), cfg.steps, cfg.N, part,
                         cfg.solver.options(), workers=cfg.workers, log_dir=d / "logs")
    summ.to_json(d / "summary.json")
    summ.timing_json(d / "timing.json")
    for c, r in summ.rows.items():
        out.write(f"{c}: cost ratio {r['cost_ratio']:.2f}%, feasibility {r['feasibility_rate']:.2f}, "
                  f"mean solve {summ.times[c]:.1f} ms\n")
    robust = [s for c in cfg.controllers if c in ROBUST for s in summ.runs[c]]
    return EXIT_SOLVER if any(_robust_failed(s) for s in robust) else EXIT_OK


# --------------------------------------------------------------------------
# entry point


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monompc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", nargs="?", help="YAML/JSON run configuration (defaults when omitted)")
        sp.add_argument("--output-dir", help="override output_dir")
        sp.add_argument("--seed", type=int, help="override the validation sampling seed")

    sp = sub.add_parser("check", help="monotonicity, decomposition, tiling and RCIS checks")
    common(sp)
    sp = sub.add_parser("run", help="closed-loop simulation; batch comparison when scenario.count > 1")
    common(sp)
    sp.add_argument("--dry-run", action="store_true", help="print the NLP layout audit without solving")
    sp = sub.add_parser("compare", help="batch comparison of controllers against the oracle")
    common(sp)
    sp = sub.add_parser("reach", help="open-loop reach tube under the steady input (CSV)")
    common(sp)
    sp = sub.add_parser("rcis-verify", help="verify a robust control invariant box candidate")
    common(sp)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"output_dir": args.output_dir, "seed": args.seed})
        if args.command == "check":
            return cmd_check(cfg)
        if args.command == "run":
            return cmd_run(cfg, dry_run=args.dry_run)
        if args.command == "compare":
            return cmd_compare(cfg)
        if args.command == "reach":
            return cmd_reach(cfg)
        return cmd_rcis_verify(cfg)
    except CliError as e:
        print(e, file=sys.stderr)
        return e.code
    except (ConfigError, ValueError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeError, ArithmeticError) as e:
        print(f"solver or simulation failure: {e}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
