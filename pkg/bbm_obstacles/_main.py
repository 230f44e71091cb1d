from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from bbm_obstacles._analysis import (
    clearing_radius,
    derived_constants,
    predicted_log_mass,
    predicted_rate,
)
from bbm_obstacles._branching import (
    DICHOTOMY_WINDOW,
    GrowthCurve,
    dichotomy_experiment,
    run_replicates,
)
from bbm_obstacles._config import ExperimentSpec
from bbm_obstacles._environment import Clearing, dump_points
from bbm_obstacles._errors import ConfigError, DomainError, TruncationError
from bbm_obstacles._feynman_kac import (
    estimate_annealed_mass,
    estimate_quenched_mass,
    estimates_frame,
    refinement_check,
)
from bbm_obstacles._genealogy import (
    MrcaLaw,
    mrca_cdf,
    pre_coalescence_size_pmf,
    sample_mrca_pairs,
)
from bbm_obstacles._utils import (
    TAG_ENV,
    TAG_TREE,
    map_replicates,
    run_seed,
    write_csv,
    write_json,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_GATE = 1
EXIT_CONFIG = 2
EXIT_TRUNCATED = 3

# The pre-coalescence chi-square passes when 2 of 3 independent seeds do.
CHI_SQUARE_SEEDS = 3
CHI_SQUARE_PASSES = 2


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _finite(value: float) -> float | None:
    return value if math.isfinite(value) else None


def _write_report(spec: ExperimentSpec, name: str, payload: dict[str, Any]) -> Path:
    spec_hash, seed = spec.provenance
    payload = {"provenance": {"spec_hash": spec_hash, "seed": seed}, **payload}
    return write_json(payload, spec.out_dir / name)


def _gate(passed: bool) -> int:
    return EXIT_OK if passed else EXIT_GATE


def _truncation_exit(spec: ExperimentSpec, truncated: int, runs: int) -> bool:
    return runs > 0 and truncated / runs > spec.max_truncated_fraction


def cmd_gen_env(spec: ExperimentSpec) -> int:
    field = spec.make_field()
    lower, upper = np.zeros(spec.d), np.full(spec.d, spec.box)
    points = field.points_in_box(lower, upper)
    volume = spec.box**spec.d
    density = len(points) / volume if volume > 0 else math.nan
    clearing = field.largest_clearing(spec.ell, spec.resolution)
    spec_hash, seed = spec.provenance
    dump_points(spec.out_dir / "points.csv", points, header=f"spec_hash={spec_hash} seed={seed}")
    _write_report(
        spec,
        "gen_env.json",
        {
            "count": len(points),
            "box": spec.box,
            "density": _finite(density),
            "largest_clearing": {
                "center": list(clearing.center),
                "radius": _finite(clearing.radius),
            },
        },
    )
    print(f"Realized {len(points)} obstacle points in [0, {spec.box:g})^{spec.d}")
    print(f"Density estimate: {density:.6g} (nu = {spec.nu:g})")
    print(f"Largest clearing within {spec.ell:g}: radius {clearing.radius:.6g}")
    return EXIT_OK


def _growth_field(spec: ExperimentSpec) -> Any:
    if not spec.has_obstacles:
        return None
    if spec.annealed:
        return spec.field_spec()
    return spec.make_field()


def _aggregate(spec: ExperimentSpec, curves: list[GrowthCurve]) -> pd.DataFrame:
    times = np.asarray(spec.obs_times())
    d, beta = spec.d, spec.beta
    counts = np.array([curve.counts for curve in curves], dtype=float).reshape(-1, len(times))
    # Every run may have been truncated.
    empty = np.full(len(times), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_log = np.log(counts).mean(axis=0) if len(counts) else empty
        rate = np.where(times > 0, mean_log / times, np.nan)
        log_t = np.where(times > 1, np.log(times), np.nan)
        frame = pd.DataFrame(
            {
                "t": times,
                "mean_count": counts.mean(axis=0) if len(counts) else empty,
                "se_count": counts.std(axis=0, ddof=1) / math.sqrt(len(counts))
                if len(counts) > 1
                else np.nan,
                "mean_log_count": mean_log,
                "r_t": rate,
                "(log t)^{2/d}*(r_t-beta)": log_t ** (2 / d) * (rate - beta),
                "t^{2/(d+2)}*(r_t-beta)": times ** (2 / (d + 2)) * (rate - beta),
            }
        )
    if spec.has_obstacles:
        mc = spec.model_constants()
        for mode in ("quenched", "annealed"):
            low = 1.0 if mode == "quenched" else 0.0
            frame[f"predicted_log_mass_{mode}"] = [
                predicted_log_mass(mc, t, mode) if t > low else math.nan for t in times
            ]
            frame[f"predicted_rate_{mode}"] = [
                predicted_rate(mc, t, mode) if t > max(low, 0.0) else math.nan
                for t in times
            ]
    return frame


def cmd_growth_curve(spec: ExperimentSpec) -> int:
    curves = run_replicates(
        spec.sim_config(), spec.replicates, _growth_field(spec), workers=spec.workers
    )
    kept = [curve for curve in curves if not curve.truncated]
    truncated = len(curves) - len(kept)
    per_run = pd.concat(
        [curve.to_frame().assign(run=k, truncated=curve.truncated) for k, curve in enumerate(curves)],
        ignore_index=True,
    )
    write_csv(per_run, spec.out_dir / "replicates.csv", provenance=spec.provenance)
    frame = _aggregate(spec, kept)
    write_csv(frame, spec.out_dir / "growth_curve.csv", provenance=spec.provenance)

    final_rates = np.array([curve.rates[-1] for curve in kept])
    checked = spec.has_obstacles and spec.t_max > 0 and len(kept) > 0
    below = int(np.count_nonzero(final_rates < spec.beta))
    passed = below == len(kept) if checked else True
    _write_report(
        spec,
        "growth_curve.json",
        {
            "runs": len(curves),
            "truncated_runs": truncated,
            "mode": "annealed" if spec.annealed else "quenched",
            "rate_at_t_max": _finite(float(frame["r_t"].iloc[-1])) if len(kept) else None,
            "runs_below_beta": below,
            "pathwise_gate_checked": checked,
            "passed": passed,
        },
    )
    print(f"Completed {len(curves)} runs, {truncated} truncated")
    if len(kept):
        print(f"Mean r_t at t={spec.t_max:g}: {frame['r_t'].iloc[-1]:.6g} (beta = {spec.beta:g})")
    if _truncation_exit(spec, truncated, len(curves)):
        print("Too many truncated runs, the campaign is invalid")
        return EXIT_TRUNCATED
    if checked:
        print(f"r_t < beta in {below} of {len(kept)} runs")
    return _gate(passed)


def _size_counts(spec: ExperimentSpec, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Observed pre-coalescence sizes, MRCA times and leaf counts for one seed."""
    s, sizes, totals = sample_mrca_pairs(
        spec.beta, spec.t_max, spec.pairs, seed, leaves=spec.leaves
    )
    return np.bincount(sizes, minlength=spec.leaves + 1)[2:], s, totals


def cmd_mrca_test(spec: ExperimentSpec) -> int:
    t = spec.t_max
    law = MrcaLaw(t, spec.beta)
    payload: dict[str, Any] = {"pairs": spec.pairs, "beta": spec.beta, "t": t}
    if spec.leaves is None:
        s, _, totals = sample_mrca_pairs(spec.beta, t, spec.pairs, spec.seed)
        ks = stats.kstest(s, lambda u: mrca_cdf(law, u))
        payload["ks_statistic"] = float(ks.statistic)
        payload["ks_pvalue"] = float(ks.pvalue)
        passed = ks.statistic < spec.ks_gate
        print(f"KS statistic {ks.statistic:.5f} (gate {spec.ks_gate:g})")
    else:
        j = spec.leaves
        pmf = np.array([pre_coalescence_size_pmf(i, j) for i in range(2, j + 1)])
        seeds = [run_seed(spec.seed, k, TAG_TREE) for k in range(CHI_SQUARE_SEEDS)]
        samples = [_size_counts(spec, seed) for seed in seeds]
        observed = [counts for counts, _, _ in samples]
        pvalues = [
            float(stats.chisquare(counts, counts.sum() * pmf).pvalue) for counts in observed
        ]
        accepted = sum(p > spec.alpha for p in pvalues)
        s = np.concatenate([s for _, s, _ in samples])
        totals = np.concatenate([totals for _, _, totals in samples])
        payload["seeds"] = seeds
        payload["observed"] = [counts.tolist() for counts in observed]
        payload["expected"] = (spec.pairs * pmf).tolist()
        payload["chi_square_pvalues"] = pvalues
        payload["seeds_passed"] = accepted
        passed = accepted >= CHI_SQUARE_PASSES
        print(
            f"Chi-square p-values {', '.join(f'{p:.4g}' for p in pvalues)} "
            f"(alpha {spec.alpha:g}): {accepted} of {len(pvalues)} seeds pass"
        )
    u = np.linspace(t / 200, t, 200)
    table = pd.DataFrame(
        {
            "u": u,
            "F(u)": mrca_cdf(law, u),
            "empirical": np.searchsorted(np.sort(s), u, side="right") / len(s),
        }
    )
    write_csv(table, spec.out_dir / "mrca.csv", provenance=spec.provenance)
    payload["mean_leaves"] = float(totals.mean())
    payload["passed"] = bool(passed)
    _write_report(spec, "mrca_test.json", payload)
    return _gate(passed)


def cmd_fk_compare(spec: ExperimentSpec) -> int:
    field = spec.make_field()
    times = [t for t in spec.obs_times() if t > 0]
    if not times:
        raise ConfigError("fk-compare needs an observation time after 0")
    estimates = [
        estimate_quenched_mass(field, spec.beta, t, spec.dt, spec.paths, spec.seed, spec.drift or None)
        for t in times
    ]
    curves = run_replicates(
        spec.sim_config(),
        spec.replicates,
        field if spec.has_obstacles else None,
        workers=spec.workers,
    )
    kept = [curve for curve in curves if not curve.truncated]
    obs = np.asarray(spec.obs_times())
    counts = np.array([curve.counts for curve in kept], dtype=float).reshape(-1, len(obs))
    counts = counts[:, obs > 0]
    frame = estimates_frame(estimates)
    frame["bbm_mean"] = counts.mean(axis=0) if len(counts) else np.nan
    frame["bbm_se"] = counts.std(axis=0, ddof=1) / math.sqrt(len(counts)) if len(counts) > 1 else 0.0
    combined = np.hypot(frame["se"], frame["bbm_se"])
    frame["z"] = np.where(combined > 0, (frame["bbm_mean"] - frame["estimate"]) / combined, 0.0)
    write_csv(frame, spec.out_dir / "fk_compare.csv", provenance=spec.provenance)

    agree = bool(np.all(np.abs(frame["z"]) <= spec.fk_sigma))
    payload: dict[str, Any] = {
        "runs": len(curves),
        "truncated_runs": len(curves) - len(kept),
        "max_abs_z": float(np.abs(frame["z"]).max()),
        "agree": agree,
    }
    passed = agree
    if not spec.has_obstacles:
        exact = all(e.point_estimate == math.exp(spec.beta * e.t) for e in estimates)
        payload["exact_free_mass"] = exact
        passed = passed and exact
    else:
        check = refinement_check(
            field, spec.beta, times[-1], spec.dt, spec.paths, spec.seed, sigma=spec.refine_sigma
        )
        payload["refinement"] = {
            "coarse": check.coarse.point_estimate,
            "fine": check.fine.point_estimate,
            "shift": check.shift,
            "combined_se": check.combined_se,
            "passed": check.passed,
        }
        passed = passed and check.passed
        if spec.envs > 0:
            annealed = _annealed_deficit(spec, times)
            payload["annealed"] = annealed
            passed = passed and annealed["passed"]
    payload["passed"] = bool(passed)
    _write_report(spec, "fk_compare.json", payload)
    print(f"Largest |z| between branching and Feynman-Kac: {payload['max_abs_z']:.3f}")
    if _truncation_exit(spec, len(curves) - len(kept), len(curves)):
        print("Too many truncated runs, the campaign is invalid")
        return EXIT_TRUNCATED
    return _gate(passed)


def _annealed_deficit(spec: ExperimentSpec, times: list[float]) -> dict[str, Any]:
    mc = spec.model_constants()
    estimates = [
        estimate_annealed_mass(
            mc, t, spec.dt, spec.paths, spec.envs, spec.seed, workers=spec.workers
        )
        for t in times
    ]
    frame = estimates_frame(estimates)
    deficit = spec.beta * np.asarray(times) - frame["log_estimate"].to_numpy()
    frame["deficit"] = deficit
    write_csv(frame, spec.out_dir / "annealed.csv", provenance=spec.provenance)
    increasing = bool(np.all(deficit > 0) and np.all(np.diff(deficit) > 0))
    slope = None
    if len(times) >= 2 and np.all(deficit > 0):
        slope = float(np.polyfit(np.log(times), np.log(deficit), 1)[0])
    print(f"Annealed deficit log-log slope: {slope} (asymptotic {spec.d / (spec.d + 2):.4f})")
    return {
        "times": list(times),
        "deficit": deficit.tolist(),
        "slope": slope,
        "predicted_slope": spec.d / (spec.d + 2),
        "passed": increasing,
    }


def cmd_dichotomy(spec: ExperimentSpec) -> int:
    if spec.d != 1:
        raise ConfigError("The dichotomy experiment runs in d = 1")
    if not spec.has_obstacles:
        raise ConfigError("The dichotomy experiment needs nu > 0")
    b = spec.drift[0] if spec.drift else 1.0
    window = DICHOTOMY_WINDOW if spec.window is None else spec.window
    reports = [
        dichotomy_experiment(
            b,
            beta,
            spec.nu,
            spec.a,
            spec.t_max,
            spec.replicates,
            spec.seed,
            obs_times=spec.obs_times(),
            window=window,
            particle_cap=spec.cap,
            slope_tolerance=spec.slope_tolerance,
            workers=spec.workers,
        )
        for beta in spec.betas
    ]
    frame = pd.DataFrame({"t": np.asarray(spec.obs_times())})
    for report in reports:
        frame[f"median_log_local_{report.beta:g}"] = report.median_log_local
        frame[f"surviving_log_local_{report.beta:g}"] = report.surviving_log_local
    write_csv(frame, spec.out_dir / "dichotomy.csv", provenance=spec.provenance)
    passed = True
    truncated = 0
    for report in reports:
        growing = report.predicted_exponent > 0
        expected = "growing" if growing else "extinct-like"
        ok = report.label == expected and (report.slope_within_tolerance or not growing)
        passed = passed and ok
        truncated += report.truncated_runs
        print(
            f"beta={report.beta:g}: {report.label} (expected {expected}), "
            f"survival {report.survival_fraction:.3f}, slope {report.slope:.4g} "
            f"vs {report.predicted_exponent:.4g}"
        )
    _write_report(
        spec,
        "dichotomy.json",
        {
            "window": window,
            "reports": [report.to_dict() for report in reports],
            "passed": passed,
        },
    )
    if _truncation_exit(spec, truncated, len(reports) * spec.replicates):
        print("Too many truncated runs, the campaign is invalid")
        return EXIT_TRUNCATED
    return _gate(passed)


def _clearing_task(task: tuple[ExperimentSpec, int]) -> Clearing:
    spec, k = task
    field = spec.make_field(run_seed(spec.seed, k, TAG_ENV))
    return field.largest_clearing(spec.ell, spec.resolution)


def cmd_clearing_stats(spec: ExperimentSpec) -> int:
    tasks = [(spec, k) for k in range(spec.replicates)]
    clearings = map_replicates(_clearing_task, tasks, spec.workers)
    if spec.has_obstacles:
        mc = spec.model_constants()
        predicted = clearing_radius(spec.ell, mc)
        leading = clearing_radius(spec.ell, mc, leading_only=True)
        constants = derived_constants(mc)
    else:
        predicted = leading = 0.0
        constants = None
    radii = np.array([c.radius for c in clearings])
    frame = pd.DataFrame(
        {
            "run": np.arange(len(clearings)),
            **{
                f"center_{i}": [c.center[i] for c in clearings] for i in range(spec.d)
            },
            "radius": radii,
            "predicted": predicted,
        }
    )
    write_csv(frame, spec.out_dir / "clearings.csv", provenance=spec.provenance)
    fraction = float(np.mean(radii >= predicted))
    passed = fraction >= spec.clearing_fraction
    _write_report(
        spec,
        "clearing_stats.json",
        {
            "runs": len(clearings),
            "predicted_radius": predicted,
            "leading_radius": leading,
            "R_0": constants.R_0 if constants else None,
            "median_radius": _finite(float(np.median(radii))),
            "fraction_at_least_predicted": fraction,
            "passed": passed,
        },
    )
    print(f"{fraction:.1%} of clearings reach the predicted radius {predicted:.6g}")
    return _gate(passed)


COMMANDS: dict[str, Callable[[ExperimentSpec], int]] = {
    "gen-env": cmd_gen_env,
    "growth-curve": cmd_growth_curve,
    "mrca-test": cmd_mrca_test,
    "fk-compare": cmd_fk_compare,
    "dichotomy": cmd_dichotomy,
    "clearing-stats": cmd_clearing_stats,
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="pyproject.toml", help="Configuration file")
    common.add_argument("--d", type=int, help="Dimension")
    common.add_argument("--nu", type=float, help="Obstacle intensity, 0 for no obstacles")
    common.add_argument("--a", type=float, help="Obstacle radius")
    common.add_argument("--beta", type=float, help="Branching rate")
    common.add_argument("--drift", type=_floats, help="Constant drift, comma separated")
    common.add_argument("--t-max", dest="t_max", type=float, help="Time horizon")
    common.add_argument("--obs", type=_floats, help="Observation times, comma separated")
    common.add_argument("--cap", type=int, help="Particle cap per run")
    common.add_argument("--seed", type=int, help="Master seed")
    common.add_argument("--replicates", type=int, help="Number of independent runs")
    common.add_argument("--workers", type=int, help="Worker processes")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--dt", type=float, help="Path time step")
    common.add_argument("--paths", type=int, help="Paths per estimate")
    common.add_argument("--envs", type=int, help="Environments for annealed estimates")
    common.add_argument("--pairs", type=int, help="Sampled pairs")
    common.add_argument("--leaves", type=int, help="Condition trees on this many leaves")
    common.add_argument("--ell", type=float, help="Clearing search distance")
    common.add_argument("--resolution", type=float, help="Clearing centre grid step")
    common.add_argument("--box", type=float, help="Side of the dumped box")
    common.add_argument("--window", type=float, help="Pruning radius")
    common.add_argument("--betas", type=_floats, help="Branching rates for the dichotomy")
    common.add_argument(
        "--slope-tolerance",
        dest="slope_tolerance",
        type=float,
        help="Accepted relative error of the local growth exponent",
    )
    common.add_argument(
        "--annealed",
        action="store_const",
        const=True,
        default=None,
        help="Sample a fresh environment per run",
    )
    common.add_argument("-v", "--verbose", action="store_true", help="Show debug logs")

    parser = argparse.ArgumentParser(
        prog="bbm-obstacles",
        description="Branching Brownian motion among mild Poisson obstacles",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, func in COMMANDS.items():
        subparsers.add_parser(name, parents=[common], help=func.__name__[4:].replace("_", " "))
    return parser


def resolve_spec(args: argparse.Namespace) -> ExperimentSpec:
    """Defaults, then the configuration file, then the environment, then flags."""
    spec = ExperimentSpec.from_file(args.config).with_env()
    flags = {
        key: value
        for key, value in vars(args).items()
        if key not in ("config", "verbose")
    }
    return spec.override(**flags, verbose=args.verbose or None)


def main(argv: Sequence[str] | None = None) -> None:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(
            level=logging.DEBUG, format="%(levelname)s %(name)s: %(message)s"
        )
    try:
        spec = resolve_spec(args)
        code = COMMANDS[spec.command](spec)
    except (ConfigError, DomainError) as e:
        print(f"Error: {e}", file=sys.stderr)
        code = EXIT_CONFIG
    except TruncationError as e:
        print(f"Error: {e}", file=sys.stderr)
        code = EXIT_TRUNCATED
    if code:
        sys.exit(code)
