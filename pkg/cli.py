"""
hardy-factor: batch experiment runner for bi-parameter Haar factorization experiments

Every subcommand reads a JSON config (--config), applies flag overrides (flags win),
and writes a JSON bundle to --out (or stdout). Exit codes: 0 success, 2 verification
failure, 3 infeasible, 4 configuration error.
"""

import functools
import io
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click
from pydantic import ValidationError

from dyadic import DyadicInterval, check_resolution
from errors import ConfigError, EnumerationCapError, HardyFactorError, VerificationError
from experiment_config import (
    CollectionsConfig,
    DimFormulaConfig,
    FactorizeConfig,
    GamlenGaudetConfig,
    GenerateConfig,
    MomentsConfig,
    NormConfig,
    RenderConfig,
    SearchConfig,
    SweepConfig,
    VerifyConfig,
    load_config,
    load_operator,
    parse_override,
    merge,
    validate,
)
from factorization import FactorizationArtifacts, constants, factorize, verify_diagram
from haar_space import HardyElement, dual_norm_lower_bound, mixed_norm
from jones_collections import (
    CollectionFamily,
    alpha,
    check_capon,
    check_jones,
    gamlen_gaudet,
    level_tiling,
    smallest_kappa,
)
from operators import multiplication_M
from randomization import (
    VariableIndices,
    acceptance_sweep,
    admissible_indices,
    exhaustive_moments,
    mc_moments,
    search_signs,
)
from reports import dumps, plot_series, read_bundle, report_render, write_bundle, write_series
from seeding import derive_seed

logger = logging.getLogger("hardy_factor")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _emit_error(payload: Dict[str, Any]):
    click.echo(json.dumps(payload, sort_keys=True), err=True)


class HardyFactorGroup(click.Group):
    """Command group that reports usage errors as configuration errors (exit 4)"""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            result = super().main(
                args=args, prog_name=prog_name, complete_var=complete_var, standalone_mode=False, **extra
            )
            code = result if isinstance(result, int) else 0
        except click.ClickException as e:
            _emit_error({"error": type(e).__name__, "message": e.format_message(), "details": {}, "exit_code": 4})
            code = 4
        except click.Abort:
            code = 1
        if standalone_mode:
            sys.exit(code)
        return code


def handle_errors(func: Callable) -> Callable:
    """Map library errors to structured stderr output and exit codes"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return func(*args, **kwargs)
        except HardyFactorError as e:
            _emit_error(e.to_dict())
            ctx.exit(e.exit_code)
        except ValidationError as e:
            error = ConfigError("Invalid parameters", {"errors": json.loads(e.json(include_url=False))})
            _emit_error(error.to_dict())
            ctx.exit(error.exit_code)

    return wrapper


def common_options(func: Callable) -> Callable:
    options = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                     help="JSON config file"),
        click.option("--seed", type=int, default=None, help="Top-level seed (overrides the config)"),
        click.option("--threads", type=int, default=None, help="Worker cap (results do not depend on it)"),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                     help="Output directory; the bundle goes to stdout when omitted"),
        click.option("--plot-data", is_flag=True, default=False, help="Also write (x,y) series CSV files"),
        click.option("--set", "overrides", multiple=True, help="Override a config value: key.path=json"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _load(config_path, seed, threads, overrides, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    merged: Dict[str, Any] = {}
    for text in overrides:
        merged = merge(merged, parse_override(text))
    if extra:
        merged = merge(merged, extra)
    if seed is not None:
        merged["seed"] = seed
    if threads is not None:
        merged["threads"] = threads
    return load_config(config_path, merged)


def _finish(kind: str, bundle: Dict[str, Any], out_dir: Optional[str], plot_data: bool,
            started: float, tables: Optional[Dict[str, str]] = None) -> Dict[str, Any]:
    bundle = {"kind": kind, **bundle}
    bundle.setdefault("metadata", {})["elapsed_seconds"] = round(time.perf_counter() - started, 6)
    if out_dir is None:
        if plot_data:
            raise ConfigError("--plot-data needs --out")
        click.echo(dumps(bundle))
        return bundle
    out = Path(out_dir)
    path = write_bundle(out, f"{kind}.json", bundle)
    for name, text in (tables or {}).items():
        (out / name).write_text(text)
    if plot_data:
        for name, points in plot_series(bundle).items():
            write_series(out, name, points)
    click.echo(str(path))
    return bundle


@click.group(cls=HardyFactorGroup, name="hardy-factor")
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
              default="WARNING", show_default=True, help="Logging level (logs go to stderr)")
def main(log_level: str):
    """Factorization-of-the-identity laboratory for bi-parameter Haar systems."""
    logging.basicConfig(level=getattr(logging, log_level.upper()), format=LOG_FORMAT, stream=sys.stderr, force=True)


# ==================== SPACES AND COLLECTIONS ====================

@main.command()
@common_options
@handle_errors
def norm(config_path, seed, threads, out_dir, plot_data, overrides):
    """Mixed norms and dual-norm lower bounds of an element."""
    started = time.perf_counter()
    cfg = validate(NormConfig, _load(config_path, seed, threads, overrides))
    element = HardyElement.from_dict(cfg.element)
    check_resolution(element.resolution)
    results = []
    for k, exponents in enumerate(cfg.exponents):
        results.append({
            "p": exponents.p,
            "q": exponents.q,
            "norm": mixed_norm(element, exponents),
            "dual_lower": dual_norm_lower_bound(element, exponents, cfg.dual_trials, derive_seed(cfg.seed, f"norm/{k}")),
        })
    _finish("norm", {"resolution": element.resolution, "results": results}, out_dir, plot_data, started)


def _families(cfg: CollectionsConfig):
    if cfg.gamlen_gaudet is not None:
        gg = cfg.gamlen_gaudet
        return gamlen_gaudet(gg.n, gg.m0, gg.N)
    return CollectionFamily.from_dict(cfg.xfam), CollectionFamily.from_dict(cfg.yfam)


def _kappa_text(fam: CollectionFamily) -> str:
    return str(smallest_kappa(fam))


@main.command("check-collections")
@common_options
@handle_errors
def check_collections(config_path, seed, threads, out_dir, plot_data, overrides):
    """Jones (J1)-(J4) and Capon (P1)-(P4) reports; exit 2 when a condition fails."""
    started = time.perf_counter()
    cfg = validate(CollectionsConfig, _load(config_path, seed, threads, overrides))
    xfam, yfam = _families(cfg)
    reports = {
        "jones_x": check_jones(xfam),
        "jones_y": check_jones(yfam),
        "capon": check_capon(xfam, yfam),
    }
    bundle = {name: report.model_dump(mode="json") for name, report in reports.items()}
    bundle["smallest_kappa"] = {"x": _kappa_text(xfam), "y": _kappa_text(yfam)}
    bundle["passed"] = all(report.passed for report in reports.values())
    _finish("collections", bundle, out_dir, plot_data, started)
    if not bundle["passed"]:
        raise VerificationError("Collection conditions failed", {"smallest_kappa": bundle["smallest_kappa"]})


@main.command("gamlen-gaudet")
@common_options
@handle_errors
def gamlen_gaudet_command(config_path, seed, threads, out_dir, plot_data, overrides):
    """Emit the Gamlen-Gaudet families for (n, m0)."""
    started = time.perf_counter()
    cfg = validate(GamlenGaudetConfig, _load(config_path, seed, threads, overrides))
    xfam, yfam = gamlen_gaudet(cfg.n, cfg.m0, cfg.N)
    bundle = {
        "n": cfg.n,
        "m0": cfg.m0,
        "N": xfam.target_resolution,
        "alpha": str(alpha(xfam, yfam)),
        "level_tiling": [level_tiling(xfam, level) for level in range(cfg.n + 1)],
        "xfam": xfam.to_dict(),
        "yfam": yfam.to_dict(),
    }
    _finish("gamlen-gaudet", bundle, out_dir, plot_data, started)


# ==================== RANDOMIZATION ====================

def _parse_indices(variable, labels: List[str]) -> VariableIndices:
    intervals = [DyadicInterval.from_str(label) for label in labels]
    layout = {"W": ("I", "I2", "J", "J2"), "X": ("I", "I2", "J"), "Y": ("I", "J", "J2"), "Z": ("I", "J")}
    names = layout[variable.value]
    if len(intervals) != len(names):
        raise ConfigError(f"{variable.value} takes {len(names)} intervals, got {len(intervals)}")
    return VariableIndices(**dict(zip(names, intervals)))


@main.command()
@common_options
@handle_errors
def moments(config_path, seed, threads, out_dir, plot_data, overrides):
    """Exhaustive and Monte Carlo moments of W, X, Y, Z; exit 2 on a violated bound."""
    started = time.perf_counter()
    cfg = validate(MomentsConfig, _load(config_path, seed, threads, overrides))
    T = load_operator(cfg.operator, cfg.exponents, cfg.seed)
    xfam, yfam = gamlen_gaudet(cfg.n, cfg.m0, T.domain.resolution)
    reports = []
    traces = {}
    failed = False
    for variable in cfg.variables:
        if cfg.indices is None:
            tuples = admissible_indices(variable, cfg.n)
        else:
            tuples = [_parse_indices(variable, labels) for labels in cfg.indices]
        for k, indices in enumerate(tuples):
            if cfg.exhaustive:
                try:
                    report = exhaustive_moments(T, xfam, yfam, variable, indices, cfg.exponents)
                    failed |= report.mean != 0 or report.second_moment > report.bound
                    reports.append(report)
                except EnumerationCapError as e:
                    logger.warning("Skipping exhaustive moments for %s %s: %s", variable.value, indices, e.message)
            if cfg.monte_carlo:
                stream = io.StringIO() if cfg.trace and out_dir is not None else None
                report = mc_moments(T, xfam, yfam, variable, indices, cfg.trials,
                                    derive_seed(cfg.seed, f"moments/{variable.value}/{k}"),
                                    cfg.exponents, stream)
                if stream is not None:
                    lines = stream.getvalue().splitlines(keepends=True)
                    trace = traces.setdefault(variable.value, [])
                    # one header per variable file
                    trace.extend(lines if not trace else lines[1:])
                failed |= not report.within_bound
                reports.append(report)
    bundle = {"n": cfg.n, "m0": cfg.m0, "reports": [r.model_dump(mode="json") for r in reports]}
    _, tables = report_render({"kind": "moments", **bundle})
    for name, lines in traces.items():
        tables[f"trace_{name}.csv"] = "".join(lines)
    _finish("moments", bundle, out_dir, plot_data, started, tables)
    if failed:
        raise VerificationError("Moment bound or zero-mean check failed")


@main.command("search-signs")
@common_options
@handle_errors
def search_signs_command(config_path, seed, threads, out_dir, plot_data, overrides):
    """Rejection sampling of almost-diagonalizing signs (after the sign correction M)."""
    started = time.perf_counter()
    cfg = validate(SearchConfig, _load(config_path, seed, threads, overrides))
    T = load_operator(cfg.operator, cfg.exponents, cfg.seed)
    corrected = T.compose(multiplication_M(T))
    xfam, yfam = gamlen_gaudet(cfg.n, cfg.m0, T.domain.resolution)
    report = search_signs(
        corrected, xfam, yfam, cfg.eta0, cfg.max_attempts, derive_seed(cfg.seed, "search"),
        threads=cfg.threads, gamma=cfg.operator.gamma, m0=cfg.m0,
    )
    _finish("search", report.model_dump(mode="json"), out_dir, plot_data, started)


@main.command()
@common_options
@handle_errors
def sweep(config_path, seed, threads, out_dir, plot_data, overrides):
    """Empirical sign-search acceptance rate against m0."""
    started = time.perf_counter()
    cfg = validate(SweepConfig, _load(config_path, seed, threads, overrides))
    T = load_operator(cfg.operator, cfg.exponents, cfg.seed)
    corrected = T.compose(multiplication_M(T))
    points = acceptance_sweep(corrected, cfg.n, cfg.m0_values, cfg.eta0, cfg.runs, cfg.max_attempts,
                              cfg.seed, cfg.threads)
    bundle = {"n": cfg.n, "eta0": cfg.eta0, "points": [p.model_dump(mode="json") for p in points]}
    _, tables = report_render({"kind": "sweep", **bundle})
    _finish("sweep", bundle, out_dir, plot_data, started, tables)


# ==================== FACTORIZATION ====================

@main.command("factorize")
@common_options
@handle_errors
def factorize_command(config_path, seed, threads, out_dir, plot_data, overrides):
    """Run the factorization pipeline and verify the diagram; exit 2 if verification fails."""
    started = time.perf_counter()
    cfg = validate(FactorizeConfig, _load(config_path, seed, threads, overrides))
    T = load_operator(cfg.operator, cfg.exponents, cfg.seed)
    artifacts = factorize(T, cfg.params, cfg.seed, cfg.threads, cfg.exponents)
    verification = verify_diagram(artifacts, T, cfg.exponents, cfg.samples, derive_seed(cfg.seed, "verify"))
    bundle = artifacts.to_bundle()
    bundle.pop("kind")
    bundle["verification"] = verification.model_dump(mode="json")
    _finish("factorization", bundle, out_dir, plot_data, started)
    if not verification.passed:
        raise VerificationError("Factorization diagram failed verification", {"residual": verification.residual})


@main.command()
@common_options
@click.option("--bundle", "bundle_path", type=click.Path(dir_okay=False), default=None,
              help="Factorization bundle to re-verify")
@handle_errors
def verify(config_path, seed, threads, out_dir, plot_data, overrides, bundle_path):
    """Re-verify a factorization bundle in a separate process."""
    started = time.perf_counter()
    extra = {"bundle": read_bundle(bundle_path)} if bundle_path else None
    cfg = validate(VerifyConfig, _load(config_path, seed, threads, overrides, extra))
    artifacts = FactorizationArtifacts.from_bundle(cfg.bundle)
    report = verify_diagram(artifacts, None, cfg.exponents, cfg.samples, derive_seed(cfg.seed, "verify"))
    _finish("verification", report.model_dump(mode="json"), out_dir, plot_data, started)
    if not report.passed:
        raise VerificationError("Factorization diagram failed verification", {"residual": report.residual})


@main.command("dim-formula")
@common_options
@handle_errors
def dim_formula(config_path, seed, threads, out_dir, plot_data, overrides):
    """Constants table: η0, m0 and N over grids of n, Γ/δ and η."""
    started = time.perf_counter()
    cfg = validate(DimFormulaConfig, _load(config_path, seed, threads, overrides))
    rows = []
    for n in cfg.n_values:
        for ratio in cfg.ratios:
            for eta in cfg.etas:
                c = constants(n, 1.0, ratio, eta)
                rows.append({
                    "n": n,
                    "ratio": ratio,
                    "eta": eta,
                    "N": c.N_formula,
                    "m0": c.m0,
                    "eta0": c.eta0_exact,
                    "dim_V_n": c.dim_V_n,
                    "dim_V_N": c.dim_V_N,
                    "growth_exponent": c.growth_exponent,
                    "union_bound_below_one": c.union_bound_below_one,
                })
    _, tables = report_render({"kind": "dim-formula", "rows": rows})
    _finish("dim-formula", {"rows": rows}, out_dir, plot_data, started, tables)


# ==================== OPERATORS AND REPORTS ====================

@main.command("generate-operator")
@common_options
@handle_errors
def generate_operator(config_path, seed, threads, out_dir, plot_data, overrides):
    """Emit a test operator as JSON (and a binary Gram dump when --out is given)."""
    started = time.perf_counter()
    cfg = validate(GenerateConfig, _load(config_path, seed, threads, overrides))
    T = load_operator(cfg.operator, cfg.exponents, cfg.seed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "operator.bin").write_bytes(T.to_bytes())
    bundle = T.to_dict()
    bundle.pop("kind")
    _finish("operator", bundle, out_dir, plot_data, started)


@main.command()
@common_options
@click.option("--bundle", "bundle_path", type=click.Path(dir_okay=False), default=None,
              help="Bundle to render")
@handle_errors
def render(config_path, seed, threads, out_dir, plot_data, overrides, bundle_path):
    """Human-readable summary and CSV tables of any bundle."""
    extra = {"bundle": read_bundle(bundle_path)} if bundle_path else None
    data = _load(config_path, seed, threads, overrides, extra)
    if not data.get("bundle"):
        raise ConfigError("Cannot render an empty bundle")
    cfg = validate(RenderConfig, data)
    summary, tables = report_render(cfg.bundle)
    click.echo(summary, nl=False)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.txt").write_text(summary)
        for name, text in tables.items():
            (out / name).write_text(text)
        if plot_data:
            for name, points in plot_series(cfg.bundle).items():
                write_series(out, name, points)
    elif plot_data:
        raise ConfigError("--plot-data needs --out")


if __name__ == "__main__":
    main()
