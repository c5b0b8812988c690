"""Command-line interface: ``gen``, ``run`` and ``calibrate``.

Exit codes: 0 success, 1 failed assertion or infeasible calibration,
2 configuration/data error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import conformal, credal, io, oce, rcps
from .core import Example, MultiLabelExample, RandomnessContract, RiskguardError
from .harness import ExperimentSpec, run_experiment
from .synthworld import ClassificationWorldConfig, MultiLabelWorldConfig, gen_classification, gen_multilabel

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


class ConfigError(Exception):
    pass


def _load_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _write(path, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text, encoding="utf-8")


def _emit(doc: dict, out) -> None:
    text = io.dumps_document(doc)
    if out:
        _write(out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    data = _load_json(args.config) if args.config else {}
    if not isinstance(data, dict):
        raise ConfigError("world config must be an object")
    if args.seed is not None:
        data = {**data, "seed": args.seed}
    if args.count < 0:
        raise ConfigError("count must be non-negative")
    if args.world == "classification":
        examples = gen_classification(ClassificationWorldConfig.from_dict(data), args.count)
    else:
        examples = gen_multilabel(MultiLabelWorldConfig.from_dict(data), args.count)
    text = io.serialize_records(examples)
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- run


def cmd_run(args) -> int:
    data = _load_json(args.spec)
    if args.seed is not None and isinstance(data, dict):
        data = {**data, "seed": args.seed}
    spec = ExperimentSpec.from_dict(data)
    result = run_experiment(spec, workers=args.workers)
    out = Path(args.out)
    _write(out / "trials.jsonl", "".join(io.dumps_line(r) + "\n" for r in result.records))
    _write(out / "summary.json", io.dumps_document(result.summary))
    for check in result.summary["assertions"]:
        name = check.get("metric") or " vs ".join(check["compare"])
        status = "PASS" if check["passed"] else "FAIL"
        print(f"{status} {name}: {check['value']:.6g} (se {check['se']:.3g})", file=sys.stderr)
    return EXIT_OK if result.passed else EXIT_FAIL


# ---------------------------------------------------------------- calibrate


def _labels(examples) -> np.ndarray:
    if any(e.label is None for e in examples):
        raise ConfigError("calibration records need labels")
    return np.array([e.label for e in examples], dtype=np.int64)


def _classification(examples) -> list[Example]:
    if examples and not isinstance(examples[0], Example):
        raise ConfigError("this method needs classification records")
    return examples


def _cal_scores(examples, dist: str) -> np.ndarray:
    if not examples:
        return np.zeros(0)
    arr = io.classification_arrays(examples)
    return conformal.neg_log_prob(arr[dist][np.arange(len(examples)), _labels(examples)])


def _calibrate_cp(args, examples) -> tuple[dict, int]:
    examples = _classification(examples)
    q = conformal.cp_quantile(_cal_scores(examples, args.dist), args.alpha)
    return {"method": "cp", "alpha": args.alpha, "n": len(examples), "q": q}, EXIT_OK


def _calibrate_lcp(args, examples) -> tuple[dict, int]:
    examples = _classification(examples)
    if not args.test:
        raise ConfigError("lcp needs --test records to localize at")
    tests = _classification(io.read_records(args.test))
    if any(not e.features for e in list(examples) + list(tests)):
        raise ConfigError("lcp needs feature vectors on every record")
    if args.bandwidth is None:
        raise ConfigError("lcp needs --bandwidth")
    scores = _cal_scores(examples, args.dist)
    cal_x = io.classification_arrays(examples)["features"] if examples else np.zeros((0, len(tests[0].features)))
    test_x = io.classification_arrays(tests)["features"] if tests else np.zeros((0, cal_x.shape[1]))
    rng = RandomnessContract(args.seed).stream(0)
    q = conformal.lcp_quantiles(test_x, cal_x, scores, conformal.LcpConfig(args.bandwidth), args.alpha, rng)
    return {"method": "lcp", "alpha": args.alpha, "bandwidth": args.bandwidth, "n": len(examples),
            "q": [{"id": e.id, "q": float(v)} for e, v in zip(tests, q)]}, EXIT_OK


def _calibrate_cdci(args, examples) -> tuple[dict, int]:
    examples = _classification(examples)
    if not examples:
        raise ConfigError("cdci needs at least one calibration record")
    spec = credal.DivergenceSpec(args.alpha_order)
    tau = credal.cdci_offline([(e.cloud_dist, e.edge_dist) for e in examples], spec, args.alpha)
    return {"method": "cdci", "alpha": args.alpha, "alpha_order": args.alpha_order, "n": len(examples),
            "tau_div": tau}, EXIT_OK


def _loss_matrix(examples, grid) -> np.ndarray:
    if isinstance(examples[0], MultiLabelExample):
        scores = [e.item_scores for e in examples]
        truths = [e.positives for e in examples]
        return oce.losses_along_lambda(scores, truths, oce.SetLoss.FNR, grid)
    arr = io.classification_arrays(examples)
    return oce.miscoverage_loss_matrix(arr["edge"], _labels(examples), grid)


def _calibrate_oce(args, examples) -> tuple[dict, int]:
    if len(examples) < 2:
        raise ConfigError("OCE calibration needs at least two records")
    if not args.alpha >= 0:
        raise ConfigError("alpha must be non-negative")
    cost = oce.CostFunction(args.cost, args.zeta if args.cost != "average" else 0.0)
    grid = oce.default_lambda_grid(args.lambda_step)
    L = _loss_matrix(examples, grid)
    order = RandomnessContract(args.seed).stream(0).permutation(len(examples))
    n_opt = min(max(1, int(round(args.opt_fraction * len(examples)))), len(examples) - 1)
    L_opt, L_cal = L[order[:n_opt]], L[order[n_opt:]]
    doc = {"method": args.method, "alpha": args.alpha, "cost": str(cost), "n_opt": n_opt,
           "n_cal": len(examples) - n_opt}
    t_star = rcps.fit_t_per_lambda(L_opt, cost)
    if args.method == "oce-rcps":
        res = rcps.oce_rcps_select(L_cal, grid, cost, t_star, args.alpha, rcps.WsrConfig(args.delta))
        doc.update(delta=args.delta, lambda_hat=res.lambda_hat, t=res.t_used)
        if res.lambda_hat is None:
            doc["ucb_trace"] = [{"lambda": lam, "ucb": u} for lam, u in res.ucb_trace]
            return doc, EXIT_FAIL
        return doc, EXIT_OK
    lam = rcps.oce_crc_select(L_cal, grid, cost, t_star, args.alpha)
    doc.update(lambda_hat=lam, t=float(t_star[np.searchsorted(grid, lam)]) if lam is not None else None)
    if lam is None:
        doc["bound_trace"] = [{"lambda": float(g), "bound": float(b)}
                              for g, b in zip(grid, rcps.crc_bound(L_cal, cost, t_star))]
        return doc, EXIT_FAIL
    return doc, EXIT_OK


CALIBRATORS = {"cp": _calibrate_cp, "lcp": _calibrate_lcp, "cdci": _calibrate_cdci,
               "oce-rcps": _calibrate_oce, "oce-crc": _calibrate_oce}


def cmd_calibrate(args) -> int:
    examples = io.read_records(args.data)
    doc, code = CALIBRATORS[args.method](args, examples)
    _emit(doc, args.out)
    return code


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="riskguard", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset as JSON lines")
    g.add_argument("world", choices=["classification", "multilabel"])
    g.add_argument("--config", help="world config (JSON object)")
    g.add_argument("--count", "-n", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output path (default: stdout)")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run a many-trial experiment spec")
    r.add_argument("spec", help="experiment spec (JSON object)")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--workers", type=int, help="worker processes (default: RISKGUARD_WORKERS or CPU count)")
    r.add_argument("--seed", type=int, help="override the spec's master seed")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="run one calibration method on a data file")
    c.add_argument("method", choices=sorted(CALIBRATORS))
    c.add_argument("data", help="JSON-lines records")
    c.add_argument("--alpha", type=float, default=0.1)
    c.add_argument("--delta", type=float, default=0.1)
    c.add_argument("--dist", choices=["edge", "cloud"], default="edge", help="distribution scored by cp/lcp")
    c.add_argument("--test", help="records to localize at (lcp)")
    c.add_argument("--bandwidth", type=float, help="LCP kernel bandwidth")
    c.add_argument("--alpha-order", type=float, default=1.0, help="alpha-divergence order (cdci)")
    c.add_argument("--cost", choices=["average", "entropic", "cvar"], default="average")
    c.add_argument("--zeta", type=float, default=0.0)
    c.add_argument("--lambda-step", type=float, default=0.001)
    c.add_argument("--opt-fraction", type=float, default=0.2, help="share of records used to fit t")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--workers", type=int, help="accepted for symmetry; calibration is sequential")
    c.add_argument("--out", help="output path (default: stdout)")
    c.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except OSError as exc:
        print(f"riskguard: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, RiskguardError) as exc:
        print(f"riskguard: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
