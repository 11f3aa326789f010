import argparse
import json
import logging
import sys
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from .coefficients import (
    check_growth_bound,
    check_local_boundedness,
    check_symbol_uniform_continuity,
    check_tightness,
    estimate_lipschitz_constants,
)
from .config import RunConfig, load_run_config, settings
from .errors import SublabError
from .generator import TestFunction
from .mc_engine import MarkovPolicy, SimulationResult, best_constant_policy, estimate_value, extract_policy_from_pde
from .pide_solver import SchemeConfig, SpatialGrid, ValueField, refine_study, solve
from .scenarios import Scenario, get_payoff, get_scenario, list_scenarios
from .services.reporting import ReportWriter
from .verification import (
    feller_decay_check,
    generator_limit_check,
    maximal_inequality_check,
    monotonicity_suite,
    representation_cross_check,
    semigroup_compose_check,
    symbol_duality_check,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    """The run config could not be loaded or does not describe a valid run."""


@dataclass(frozen=True, eq=False)
class RunContext:
    config: RunConfig
    scenario: Scenario
    grid: SpatialGrid
    scheme: SchemeConfig
    payoff: str
    horizon: float
    x0: np.ndarray
    writer: ReportWriter


def load_context(path: str, out: Optional[str] = None, seed: Optional[int] = None) -> RunContext:
    try:
        config = load_run_config(path)
        if seed is not None:
            config = config.model_copy(update={"mc": config.mc.model_copy(update={"seed": seed})})
        scenario = get_scenario(config.scenario.name, config.scenario.params)
        grid = scenario.grid
        if config.grid is not None:
            grid = SpatialGrid(lo=tuple(config.grid.lo), hi=tuple(config.grid.hi), n=tuple(config.grid.n))
        if grid.dim != scenario.dim:
            raise ConfigError(f"grid dimension {grid.dim} does not match scenario dimension {scenario.dim}")
        scheme = SchemeConfig(
            cfl_safety=config.scheme.cfl_safety,
            kappa=config.scheme.kappa,
            max_timestep=config.scheme.max_timestep,
        )
        payoff = config.payoff or scenario.default_payoff
        get_payoff(payoff)
        horizon = config.horizon or scenario.horizon
        if config.output_times and config.output_times[-1] > horizon:
            raise ConfigError(f"output time {config.output_times[-1]} exceeds the horizon {horizon}")
        x0 = scenario.x0 if config.x0 is None else np.asarray(config.x0, dtype=float)
        if x0.shape != (scenario.dim,):
            raise ConfigError(f"x0 must have {scenario.dim} coordinates")
    except (OSError, ValueError) as e:
        # pydantic.ValidationError and InputError are both ValueErrors
        raise ConfigError(str(e)) from e
    writer = ReportWriter(out or config.resolved_output_dir())
    return RunContext(config, scenario, grid, scheme, payoff, horizon, x0, writer)


# --- subcommands ---

def run_conditions(ctx: RunContext) -> Dict[str, BaseModel]:
    field = ctx.scenario.field
    box = ctx.grid.box
    return {
        "symbol_continuity": check_symbol_uniform_continuity(field, [0.5, 1.0, 2.0, 4.0, 8.0], 64, seed=0),
        "tightness": check_tightness(field.kernel, [0.25, 0.5, 1.0], [1.0, 2.0, 4.0, 8.0]),
        "lipschitz": estimate_lipschitz_constants(field, box, 2000, seed=0),
        "growth": check_growth_bound(field, box),
        "local_bound": check_local_boundedness(field, box),
    }


def conditions_payload(ctx: RunContext) -> dict:
    reports = run_conditions(ctx)
    lipschitz = reports["lipschitz"]
    finite = all(np.isfinite(v) for v in (lipschitz.btilde, lipschitz.sigma, lipschitz.k_over_gamma))
    passed = finite and lipschitz.within_declared is not False and all(getattr(r, "passed", True) for r in reports.values())
    logger.info(f"{'✅' if passed else '❌'} [{ctx.scenario.name}] conditions: {'PASS' if passed else 'FAIL'}")
    return {"name": "conditions", "scenario": ctx.scenario.name, "reports": reports, "passed": passed}


def cmd_check(ctx: RunContext) -> int:
    payload = conditions_payload(ctx)
    ctx.writer.write_json("conditions.json", payload)
    return EXIT_OK if payload["passed"] else EXIT_FAILURE


def cmd_solve(ctx: RunContext) -> int:
    psi = ValueField.from_function(ctx.grid, get_payoff(ctx.payoff))
    solution = solve(psi, ctx.scenario.field, ctx.horizon, ctx.scheme, ctx.config.output_times)

    frames = []
    for layer in solution.trajectory:
        frame = layer.to_frame()
        frame.insert(0, "t", layer.t)
        frames.append(frame)
    ctx.writer.write_frame("value_field.csv", pd.concat(frames, ignore_index=True))

    final_policy = pd.DataFrame(ctx.grid.nodes(), columns=[f"x{i + 1}" for i in range(ctx.grid.dim)])
    final_policy["control"] = solution.policy.choice[-1]
    final_policy["label"] = [ctx.scenario.controls.labels[c] for c in solution.policy.choice[-1]]
    ctx.writer.write_frame("policy_final_layer.csv", final_policy)

    oracle = None
    if ctx.scenario.oracle is not None:
        exact = ctx.scenario.oracle(ctx.payoff, ctx.x0[None], ctx.horizon)
        oracle = None if exact is None else float(exact[0])
    ctx.writer.write_json(
        "solve_summary.json",
        {
            "solver": solution.summary,
            "payoff": ctx.payoff,
            "x0": ctx.x0.tolist(),
            "value_at_x0": solution.value_at(ctx.x0),
            "oracle_at_x0": oracle,
        },
    )
    return EXIT_OK


def _result_row(result: SimulationResult) -> dict:
    row = result.model_dump()
    for key, value in row.pop("max_excursion_quantiles").items():
        row[f"excursion_{key}"] = value
    return row


def cmd_mc(ctx: RunContext) -> int:
    mc = ctx.config.mc
    field = ctx.scenario.field
    payoff = get_payoff(ctx.payoff)
    best = None
    if mc.policy == "extracted":
        psi = ValueField.from_function(ctx.grid, payoff)
        record = solve(psi, field, ctx.horizon, ctx.scheme).policy
        policy = extract_policy_from_pde(record, ctx.horizon, n_steps=mc.n_steps)
        results = [estimate_value(field, policy, payoff, ctx.x0, ctx.horizon, mc.n_paths, mc.seed)]
    elif mc.policy == "best_constant":
        search = best_constant_policy(field, None, payoff, ctx.x0, ctx.horizon, mc.n_paths, mc.seed, n_steps=mc.n_steps)
        results, best = search.results, search.best
    else:
        policy = MarkovPolicy.constant(field.controls.check_index(mc.control), mc.n_steps, ctx.horizon / mc.n_steps)
        results = [estimate_value(field, policy, payoff, ctx.x0, ctx.horizon, mc.n_paths, mc.seed)]

    ctx.writer.write_frame("mc_results.csv", pd.DataFrame([_result_row(r) for r in results]))
    ctx.writer.write_json(
        "mc_summary.json",
        {
            "scenario": ctx.scenario.name,
            "payoff": ctx.payoff,
            "x0": ctx.x0.tolist(),
            "horizon": ctx.horizon,
            "seed": mc.seed,
            "n_paths": mc.n_paths,
            "policy": mc.policy,
            "best_control": best,
            "results": results,
        },
    )
    return EXIT_OK


def _probe_function(ctx: RunContext) -> TestFunction:
    if ctx.scenario.name == "drift_band":
        return TestFunction.capped_linear(ctx.scenario.dim, 3.0)
    return TestFunction.capped_quadratic(ctx.scenario.dim, 3.0)


def _verify_one(ctx: RunContext, check: str) -> Optional[Union[BaseModel, dict]]:
    """Runs one named check; None when it does not apply to the scenario."""
    sc, mc = ctx.scenario, ctx.config.mc
    if check == "conditions":
        return conditions_payload(ctx)
    if check == "symbol_duality":
        return symbol_duality_check(sc)
    if check == "monotonicity":
        return monotonicity_suite(sc, config=ctx.scheme, grid=ctx.grid)
    if check == "refinement":
        if sc.oracle is None or sc.oracle(ctx.payoff, ctx.x0[None], ctx.horizon) is None:
            return None
        return refine_study(sc, levels=3, payoff=ctx.payoff, config=ctx.scheme, horizon=ctx.horizon)
    if check == "semigroup":
        half = ctx.horizon / 2.0
        return semigroup_compose_check(sc, ctx.payoff, half, half, config=ctx.scheme, grid=ctx.grid)
    if check == "generator_limit":
        return generator_limit_check(sc, _probe_function(ctx), ctx.x0, config=ctx.scheme, grid=ctx.grid)
    if check == "representation":
        return representation_cross_check(
            sc, ctx.payoff, ctx.x0, ctx.horizon, mc.n_paths, mc.seed, mc.n_steps, config=ctx.scheme, grid=ctx.grid
        )
    if check == "feller":
        return feller_decay_check(sc, "bump", ctx.horizon, config=ctx.scheme, grid=ctx.grid)
    if check == "maximal_inequality":
        return maximal_inequality_check(sc, ctx.x0, n_paths=min(mc.n_paths, 20_000), seed=mc.seed)
    raise ConfigError(f"unknown check {check!r}")


def cmd_verify(ctx: RunContext) -> int:
    written: List[str] = []
    skipped: List[str] = []
    for check in ctx.config.checks:
        logger.info(f"🚀 [{ctx.scenario.name}] running {check}")
        report = _verify_one(ctx, check)
        if report is None:
            logger.info(f"⏭️ [{ctx.scenario.name}] {check} does not apply, skipped")
            skipped.append(check)
            continue
        name = f"verification/{check}.json"
        ctx.writer.write_json(name, report)
        written.append(name)

    bundle = ctx.writer.summarize_reports(written)
    bundle["scenario"] = ctx.scenario.name
    bundle["skipped"] = skipped
    ctx.writer.write_json("verification.json", bundle)
    logger.info(f"{'✅' if bundle['passed'] else '❌'} [{ctx.scenario.name}] {bundle['count']} reports, skipped {skipped}")
    return EXIT_OK if bundle["passed"] else EXIT_FAILURE


def cmd_scenarios(out: Optional[str]) -> int:
    infos = list_scenarios()
    if out:
        ReportWriter(out).write_json("scenarios.json", infos)
    else:
        json.dump([i.model_dump(mode="json") for i in infos], sys.stdout, sort_keys=True, indent=2)
        sys.stdout.write("\n")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[RunContext], int]] = {
    "check": cmd_check,
    "solve": cmd_solve,
    "mc": cmd_mc,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=str, default=None, help="Output directory (default: config output_dir or SSL_OUTPUT_DIR)")
    common.add_argument("--quiet", action="store_true", help="Only log warnings and errors")

    parser = argparse.ArgumentParser(prog="sublab", description="Sublinear semigroup laboratory: HJB solver, Monte Carlo and checks.")
    sub = parser.add_subparsers(dest="cmd", required=True)
    for name, help_text in (
        ("check", "Run the coefficient condition validators"),
        ("solve", "Solve the HJB equation and write the value field"),
        ("mc", "Monte Carlo value estimates under Markov policies"),
        ("verify", "Run the verification suites"),
    ):
        s = sub.add_parser(name, parents=[common], help=help_text)
        s.add_argument("--config", type=str, required=True, help="Path to a JSON run config")
        s.add_argument("--seed", type=int, default=None, help="Override the Monte Carlo seed")
    sub.add_parser("scenarios", parents=[common], help="List bundled scenarios and their parameter schemas")
    return parser


def _configure_logging(quiet: bool):
    level = logging.WARNING if quiet else getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.quiet)

    if args.cmd == "scenarios":
        return cmd_scenarios(args.out)

    try:
        ctx = load_context(args.config, args.out, args.seed)
    except ConfigError as e:
        logger.error(f"❌ invalid config: {e}")
        return EXIT_CONFIG

    try:
        return COMMANDS[args.cmd](ctx)
    except ConfigError as e:
        logger.error(f"❌ invalid config: {e}")
        return EXIT_CONFIG
    except (SublabError, ArithmeticError, np.linalg.LinAlgError) as e:
        logger.error(f"❌ {args.cmd} failed: {e}")
        return EXIT_FAILURE
