"""Command-line runner: ``mmbm-coupler <validate|simulate|rate|passage>``.

Exit codes: 0 ok, 1 numeric or invariant failure, 2 configuration error,
3 I/O error.  ``MMBM_COUPLER_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .coupling import (
    build_sfp_path,
    coarsen,
    discrepancy,
    path_phase,
    simulate_bundle,
    write_path_csv,
)
from .errors import ConfigError, MmbmError
from .experiments import run_mc_passage, run_rate
from .model import LevelSchedule, MmbmParams, build_level, check_level, validate_params
from .passage import level_independence, passage_matrix, solve_passage
from .sampling import sample_ledger, substream, write_ledger_csv
from .stats import chi_square_transitions, erlang_central_moment, erlang_moment_bound, ks_exponential

log = logging.getLogger("mmbm_coupler")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


@dataclass
class ExperimentConfig:
    model: dict
    levels: list = field(default_factory=lambda: [4, 8, 16, 32])
    n_max: Optional[int] = None
    T: float = 0.5
    horizon: Optional[float] = None
    replications: int = 200
    base_seed: int = 0
    threads: int = 1
    out: str = "out"
    schedule: dict = field(default_factory=dict)
    x: float = 1.0
    mc: dict = field(default_factory=dict)
    alpha: float = 0.01
    dump_ledger: bool = False

    @property
    def finest(self) -> int:
        return self.n_max if self.n_max is not None else max(self.levels)

    @property
    def sim_horizon(self) -> float:
        return self.horizon if self.horizon is not None else 2.0 * self.T


def load_config(path: str, overrides: dict) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(raw, dict) or "model" not in raw:
        raise ConfigError("config must be a JSON object with a 'model' entry")
    model = raw["model"]
    if isinstance(model, str):
        mpath = Path(model)
        if not mpath.is_absolute():
            mpath = Path(path).parent / mpath
        try:
            with open(mpath) as fh:
                model = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"model file not found: {mpath}") from None
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot parse model file {mpath}: {exc}") from None
    raw["model"] = model
    raw.update({k: v for k, v in overrides.items() if v is not None})
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if not cfg.levels or any(int(n) != n or n < 0 for n in cfg.levels):
        raise ConfigError("levels must be a nonempty list of nonnegative integers")
    if cfg.finest < max(cfg.levels):
        raise ConfigError("n_max must be at least the largest level")
    if cfg.replications < 1 or cfg.T <= 0 or cfg.threads < 1:
        raise ConfigError("need replications >= 1, T > 0, threads >= 1")
    return cfg


def _schedule(cfg: ExperimentConfig, params: MmbmParams) -> LevelSchedule:
    return LevelSchedule.for_params(
        params,
        coefficient=float(cfg.schedule.get("coefficient", 2.0)),
        values=cfg.schedule.get("values", ()),
    )


def _fmt(v: float) -> str:
    return repr(float(v))


def _json17(obj: Any, indent: int = 0) -> str:
    """JSON text with floats rendered to 17 significant digits."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json17(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_json17(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _json17(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, np.ndarray):
        return _json17(obj.tolist(), indent)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v) or math.isinf(v):
            return "null"
        return format(v, ".17g")
    return json.dumps(obj)


def _mkdir(out: str) -> Path:
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    if not os.access(p, os.W_OK):
        raise PermissionError(f"output directory {p} is not writable")
    return p


# -- validate -----------------------------------------------------------------


def cmd_validate(cfg: ExperimentConfig) -> int:
    results: list[tuple[str, bool, str]] = []

    def record(name, ok, detail=""):
        results.append((name, bool(ok), detail))

    try:
        params = validate_params(cfg.model)
    except MmbmError as exc:
        print(f"FAIL model validation: {type(exc).__name__}: {exc}")
        return EXIT_NUMERIC
    record("model validation", True)
    sched = _schedule(cfg, params)

    for n in (0, 1, 2, 4, 8):
        lv = build_level(params, sched, n)
        bad = check_level(lv)
        record(f"level {n} invariants", not bad, "; ".join(bad))

    rng = substream(cfg.base_seed, 0)
    ledger = sample_ledger(rng, sched, 4, 4.0)
    nested = all(np.all(np.isin(ledger.level_epochs(n), ledger.level_epochs(n + 1))) for n in range(4))
    record("epoch nesting", nested)

    embed_ok = min_ok = phase_ok = refine_ok = True
    for r in range(5):
        b = simulate_bundle(substream(cfg.base_seed, r), params, sched, 6, 2.0)
        for n in range(1, 7):
            lv = build_level(params, sched, n)
            c = coarsen(b, n, lv)
            path = build_sfp_path(c, lv)
            rep = discrepancy(b, path, 1.0)
            embed_ok &= rep.embed_gap <= 1e-9
            min_ok &= rep.min_gap <= 1e-9
            if len(c):
                phase_ok &= bool(np.all(path_phase(path, c.chi) == c.phases_n[1:]))
            fine_sel = b.ledger.level_mask(n)
            refine_ok &= bool(np.all(b.phases.phase_at_epoch[fine_sel] == c.phases_n[1:]))
    record("exact embedding R^n(chi_k) = R(theta_k)", embed_ok)
    record("minimum embedding", min_ok)
    record("phase identity at chi_k", phase_ok)
    record("phase invariance under refinement", refine_ok)

    big = simulate_bundle(substream(cfg.base_seed, 10_000), params, sched, 4, 4000.0 / sched.lam(4))
    c2 = coarsen(big, 2)
    ks = ks_exponential(c2.L_hat, c2.lam, cfg.alpha)
    record("rescaled drops ~ Exp(lambda_n)", ks.passed, f"D={ks.statistic:.4f}, critical {ks.critical:.4f}")
    if params.m > 1 and len(c2.phases_n) >= 100 * params.m**2:
        chi = chi_square_transitions(c2.phases_n, build_level(params, sched, 2).P, cfg.alpha)
        record("level-2 phase transitions ~ P_2", chi.passed, f"chi2={chi.statistic:.2f}, critical {chi.critical:.2f}")

    us = []
    for n in (2, 4, 8):
        sol = solve_passage(params, sched, n)
        us.append(sol.u)
        record(f"Riccati level {n} converged", sol.converged and sol.riccati_residual <= 1e-12, f"defect {sol.riccati_residual:.3g}")
        record(f"quadratic residual level {n}", sol.quadratic_residual <= 1e-8, f"{sol.quadratic_residual:.3g}")
        psi_ok = np.all(sol.psi >= -1e-12) and np.all(sol.psi <= 1 + 1e-10) and np.all(sol.psi.sum(1) <= 1 + 1e-10)
        record(f"Psi level {n} substochastic", psi_ok)
        off = sol.u - np.diag(np.diag(sol.u))
        record(f"U level {n} sub-generator", np.all(off >= -1e-12) and np.all(sol.u.sum(1) <= 1e-10))
    dist = max(float(np.max(np.abs(a - b))) for a in us for b in us)
    record("U independent of level", dist <= 1e-8, f"{dist:.3g}")
    grid_ok = all(np.all(passage_matrix(us[0], x).sum(1) <= 1 + 1e-10) for x in np.linspace(0, 5, 11))
    record("exp(Ux) substochastic", grid_ok)
    erl_ok = all(erlang_central_moment(a, 1, k) <= erlang_moment_bound(a, 1, k) for a in range(2, 21) for k in range(1, 11))
    record("Erlang central-moment bound", erl_ok)

    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail and not ok else ""))
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_NUMERIC


# -- rate ---------------------------------------------------------------------

RATE_COLUMNS = ["seed", "n", "sup_gap", "embed_gap", "chi_theta_gap", "phase_mismatch"]


def _plot_script(medians: dict) -> str:
    ns = sorted(medians)
    n0 = ns[0]
    c = medians[n0]["sup_gap"] * math.sqrt(n0)
    lines = [
        "# gnuplot script: median grid sup-gap against n, log-log",
        "set logscale xy",
        'set xlabel "n"',
        'set ylabel "median sup |R - R^n|"',
        "$medians << EOD",
        *[f"{n} {_fmt(medians[n]['sup_gap'])}" for n in ns],
        "EOD",
        f"ref(x) = {_fmt(c)} * x**(-0.5)",
        'plot $medians using 1:2 with linespoints title "median sup gap", ref(x) title "slope -1/2"',
    ]
    return "\n".join(lines) + "\n"


def _rate_levels(cfg: ExperimentConfig, sched: LevelSchedule) -> list:
    """Levels whose rule value coefficient * n^2 is not clamped by lambda0."""
    if sched.values:
        return sorted(cfg.levels)
    keep = sorted(n for n in cfg.levels if sched.coefficient * n * n >= sched.lambda0)
    dropped = sorted(set(cfg.levels) - set(keep))
    if dropped:
        log.warning("levels %s have 2n^2 < lambda0 = %g and are not reported", dropped, sched.lambda0)
    if not keep:
        raise ConfigError(f"no level satisfies coefficient * n^2 >= lambda0 = {sched.lambda0}")
    return keep


def cmd_rate(cfg: ExperimentConfig) -> int:
    params = validate_params(cfg.model)
    sched = _schedule(cfg, params)
    levels = _rate_levels(cfg, sched)
    out = _mkdir(cfg.out)
    res = run_rate(params, sched, levels, cfg.finest, cfg.T, cfg.sim_horizon, cfg.replications, cfg.base_seed, cfg.threads)
    with open(out / "rate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RATE_COLUMNS)
        for r, rep in res.rows():
            w.writerow([r, rep.n, _fmt(rep.sup_level_gap), _fmt(rep.embed_gap), _fmt(rep.chi_theta_gap), _fmt(rep.phase_mismatch)])
    summary: dict[str, Any] = {
        "base_seed": cfg.base_seed,
        "replications": cfg.replications,
        "failed_replications": res.failed,
        "levels": list(res.levels),
        "n_max": cfg.finest,
        "T": cfg.T,
        "horizon": cfg.sim_horizon,
        "medians": {str(n): v for n, v in res.medians.items()},
        "delta_n": {str(n): res.reports[0][j].delta_n if res.reports and res.reports[0] else None for j, n in enumerate(res.levels)},
    }
    if res.fit is None:
        summary["fit"] = None
        summary["note"] = "fit skipped: needs at least 3 levels with positive medians"
    else:
        summary["fit"] = {
            "slope": res.fit.slope,
            "intercept": res.fit.intercept,
            "slope_logcorrected": res.fit.slope_logcorrected,
            "rss": res.fit.rss,
        }
    (out / "rate_summary.json").write_text(_json17(summary) + "\n")
    if res.medians:
        (out / "rate_plot.gp").write_text(_plot_script(res.medians))
    if res.failed:
        print(f"{res.failed} replication(s) failed and were skipped", file=sys.stderr)
    if res.fit is not None:
        print(f"slope {res.fit.slope:.4f}  log-corrected {res.fit.slope_logcorrected:.4f}")
    else:
        print("fit skipped")
    return EXIT_OK


# -- passage ------------------------------------------------------------------


def cmd_passage(cfg: ExperimentConfig) -> int:
    params = validate_params(cfg.model)
    sched = _schedule(cfg, params)
    out = _mkdir(cfg.out)
    sols = [solve_passage(params, sched, n) for n in cfg.levels]
    ok = all(s.converged for s in sols)
    drift = params.stationary_drift()
    report: dict[str, Any] = {
        "stationary_drift": drift,
        "drift_regime": "negative" if drift < -1e-12 else ("positive" if drift > 1e-12 else "zero"),
        "x": cfg.x,
        "solutions": [s.to_dict() for s in sols],
    }
    if len(sols) >= 2:
        report["level_independence"] = max(float(np.max(np.abs(a.u - b.u))) for a in sols for b in sols)
    u = sols[-1].u
    pm = passage_matrix(u, cfg.x)
    report["passage_matrix"] = pm.tolist()

    mc = cfg.mc or {}
    bundles = int(mc.get("bundles", 0))
    if bundles > 0:
        starts = mc.get("start_phases") or list(range(params.m))
        rows = []
        for i in starts:
            est = run_mc_passage(
                params, sched, cfg.x, int(i), bundles, float(mc.get("horizon", 50.0)),
                int(mc.get("n_max", 2)), cfg.base_seed, cfg.threads,
            )
            se = est.std_errors
            for j in range(params.m):
                rows.append([i, params.phases[j], _fmt(est.probabilities[j]), _fmt(pm[i, j]), _fmt(se[j])])
            never_p = est.never_fraction
            rows.append([i, "never", _fmt(never_p), _fmt(1.0 - pm[i].sum()), _fmt(math.sqrt(never_p * (1 - never_p) / est.total))])
        with open(out / "passage_mc.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["start_phase", "end_phase", "empirical", "theoretical", "std_error"])
            w.writerows(rows)
    (out / "passage.json").write_text(_json17(report) + "\n")
    for s in sols:
        print(f"n={s.n} iterations={s.iterations} riccati={s.riccati_residual:.3g} quadratic={s.quadratic_residual:.3g}")
    if not ok:
        print("NoConvergence: Riccati solve did not converge; best iterate reported", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# -- simulate -----------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig) -> int:
    params = validate_params(cfg.model)
    sched = _schedule(cfg, params)
    out = _mkdir(cfg.out)
    bundle = simulate_bundle(substream(cfg.base_seed, 0), params, sched, cfg.finest, cfg.sim_horizon)
    labels = list(params.phases)
    with open(out / "skeleton.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "layer", "phase", "r", "interval_min"])
        for t, layer, ph, r, mn in zip(
            bundle.ledger.epochs, bundle.ledger.layers, bundle.phases.phase_at_epoch, bundle.r_at_epoch, bundle.interval_min
        ):
            w.writerow([_fmt(t), int(layer), labels[ph], _fmt(r), _fmt(mn)])
    if cfg.dump_ledger:
        write_ledger_csv(out / "ledger.csv", bundle.ledger, bundle.phases, labels)
    for n in cfg.levels:
        lv = build_level(params, sched, n)
        write_path_csv(build_sfp_path(coarsen(bundle, n, lv), lv), out / f"path_n{n}.csv", labels)
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "simulate": cmd_simulate, "rate": cmd_rate, "passage": cmd_passage}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmbm-coupler", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON experiment configuration")
    ap.add_argument("--seed", type=int, help="base seed (overrides config)")
    ap.add_argument("--threads", type=int, help="worker threads (overrides config)")
    ap.add_argument("--out", help="output directory (overrides config)")
    ap.add_argument("--version", action="version", version=__version__)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("MMBM_COUPLER_LOG", "WARNING").upper()
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level if level in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"} else "WARNING")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        cfg = load_config(args.config, {"base_seed": args.seed, "threads": args.threads, "out": args.out})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MmbmError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
