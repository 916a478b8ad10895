"""Command-line entry point: ``parampde <subcommand> --config run.toml``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from . import harness
from .alloc import RateParams, allocate, allocate_l2, predict_rate, wavelet_predicted_rates
from .harness import ConfigError
from .ortho import parseval_check

log = logging.getLogger("parampde")

EXIT_OK, EXIT_INVALID, EXIT_CHECK = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="parampde", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in [("taylor", "Taylor coefficients and summability diagnostics"),
                       ("jacobi", "Jacobi/Legendre coefficients and Parseval check"),
                       ("hermite", "Hermite coefficients of a lognormal model"),
                       ("allocate", "optimal spatial dofs for the best n coefficients"),
                       ("sweep", "error against total dofs and rate fit"),
                       ("joint", "joint space-parameter best N-term selection"),
                       ("rates", "rate arithmetic only")]:
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--seed", type=int, default=None, help="64-bit seed for sampled errors")
        s.add_argument("--out", type=Path, default=None, help="output directory (overrides config)")
        s.add_argument("--threads", type=int, default=1)
        s.add_argument("--check", action="store_true", help="exit 3 when a tolerance check fails")
    return p


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float) + "\n")


def _expansion_outputs(cfg: dict, out: Path, prefix: str) -> tuple[dict, bool]:
    exp = harness.compute_expansion(cfg)
    exp.raw.to_csv(out / f"{prefix}_coefficients.csv")
    summary: dict = {"config": cfg, "size": len(exp.indices)}
    ok = True
    if exp.kind == "taylor":
        summary.update(harness.taylor_summary(cfg, exp))
        ratios = summary["D"][1:]
        bound = [1.05 * summary["kappa"] ** n * summary["D"][0] for n in range(1, len(summary["D"]))]
        complete = summary["complete"][1:]
        ok = all(d <= b for d, b, c in zip(ratios, bound, complete) if c)
    else:
        pv = parseval_check(exp.raw)
        summary.update({"parseval_lhs": pv.lhs, "parseval_rhs": pv.rhs, "parseval_gap": pv.gap,
                        "family": exp.raw.family.to_dict(), "q": exp.raw.quad.q, "d": exp.raw.quad.d,
                        "note": "coefficients of the discrete solution map on the reference mesh"})
        ok = pv.gap >= -1e-10
    summary["passed"] = ok
    summary["environment"] = harness.environment_fingerprint()
    _write_json(out / f"{prefix}_summary.json", summary)
    return summary, ok


def _rates(cfg: dict) -> tuple[dict, bool]:
    r = cfg.get("rates", {})
    out: dict = {}
    if "alpha" in r:
        out["wavelet_rate"] = wavelet_predicted_rates(r["alpha"], r.get("m", 1), r.get("mode", "linear"))
    if "p_V" in r and "p_X" in r:
        setting = r.get("setting", "sup")
        t = r.get("t", 1.0)
        params = RateParams(r["s"], t, r["p_V"], r["p_X"], setting) if "s" in r \
            else RateParams.derived(t, r["p_V"], r["p_X"], setting)
        pred = predict_rate(params)
        r_formula = pred.r_formula if math.isfinite(pred.r_formula) else None
        out.update({"s": params.s, "t": params.t, "rate": pred.rate, "regime": pred.regime,
                    "r_formula": r_formula, "bracket": list(pred.bracket)})
    if not out:
        raise ConfigError("rates needs alpha (wavelet rates) or p_V and p_X")
    return out, True


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        cfg = harness.load_config(args.config)
        out_dir = args.out or Path(cfg["output"]["dir"])
        prefix = cfg["output"]["prefix"]
        harness.ensure_writable(out_dir)
        if args.command == "rates":
            res, ok = _rates(cfg)
            _write_json(out_dir / f"{prefix}_rates.json", res)
            print(json.dumps(res, sort_keys=True))
        elif args.command in ("taylor", "jacobi", "hermite"):
            want = {"taylor": ("taylor",), "jacobi": ("legendre", "jacobi"), "hermite": ("hermite",)}
            if cfg["expansion"]["kind"] not in want[args.command]:
                raise ConfigError(f"'{args.command}' needs expansion.kind in {want[args.command]}")
            res, ok = _expansion_outputs(cfg, out_dir, prefix)
            log.info("%s: %d coefficients, passed=%s", args.command, res["size"], ok)
        elif args.command == "allocate":
            exp = harness.compute_expansion(cfg)
            n = cfg["allocation"].get("n", 8)
            rows = exp.best_n_rows(n)
            s, _ = harness.default_s(cfg, exp)
            fn = allocate if cfg["allocation"]["setting"] == "sup" else allocate_l2
            plan = fn(exp.norms(cfg["allocation"]["metric"])[rows], s, cfg["allocation"]["t"], len(rows),
                      [exp.indices[i] for i in rows])
            plan.to_csv(out_dir / f"{prefix}_plan.csv")
            res = {"eta": plan.eta, "N_real": plan.N_real, "N_int": plan.N_int, "s": s,
                   "residual": plan.constraint_residual()}
            _write_json(out_dir / f"{prefix}_plan.json", res)
            ok = res["residual"] <= 1e-12
            print(json.dumps(res, sort_keys=True))
        else:
            if args.command == "joint":
                cfg["allocation"]["mode"] = "joint"
                cfg = harness.resolve_config(cfg)
            seed = args.seed if args.seed is not None else cfg.get("seed")
            report = harness.run_sweep(cfg, seed=seed, threads=args.threads)
            paths = harness.write_report(report, out_dir, prefix)
            ok = bool(report.passed)
            log.info("slope=%s predicted=%s passed=%s -> %s", report.slope, report.predicted, report.passed,
                     paths["json"])
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        # ConfigError subclasses ValueError; both signal invalid input
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if args.check and not ok:
        return EXIT_CHECK
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
