"""Many-trial experiment driver.

An experiment is a named recipe that turns a per-trial random stream into a
dict of scalar metrics. ``run_experiment`` evaluates the recipe for trials
``0..T-1`` (trial ``i`` uses ``stream(i)`` of the spec's master seed),
summarizes every metric and evaluates the spec's assertions.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import cascade, conformal, credal, oce, rcps
from .core import RandomnessContract, RiskguardError, SplitPlan, make_prob_vector
from .synthworld import (EVAL_STREAM, ClassificationBatch, ClassificationWorld, ClassificationWorldConfig,
                         MultiLabelBatch, MultiLabelWorld, MultiLabelWorldConfig)

HIST_BINS = 50
DEFAULT_MC_COUNT = 100_000
_UNIT_METRICS = {"coverage", "fdp", "deferral", "satisfaction", "satisfied", "lambda", "inefficiency",
                 "crc_le_rcps", "intersection_ok", "none", "risk"}


class SpecError(RiskguardError):
    pass


class TrialError(RiskguardError):
    pass


# ---------------------------------------------------------------- spec


@dataclass
class ExperimentSpec:
    kind: str
    world: dict
    split: dict
    params: dict = field(default_factory=dict)
    trials: int = 1
    seed: int = 0
    assertions: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        if not isinstance(data, dict):
            raise SpecError("experiment spec must be a mapping")
        unknown = set(data) - {"kind", "world", "split", "params", "trials", "seed", "assertions"}
        if unknown:
            raise SpecError(f"unknown spec keys: {sorted(unknown)}")
        try:
            spec = cls(kind=data["kind"], world=dict(data.get("world", {})), split=dict(data["split"]),
                       params=dict(data.get("params", {})), trials=int(data.get("trials", 1)),
                       seed=int(data.get("seed", 0)), assertions=list(data.get("assertions", [])))
        except KeyError as exc:
            raise SpecError(f"missing spec key {exc}") from None
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from None
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return {"kind": self.kind, "world": self.world, "split": self.split, "params": self.params,
                "trials": self.trials, "seed": self.seed, "assertions": self.assertions}

    def validate(self) -> None:
        if self.kind not in EXPERIMENTS:
            raise SpecError(f"unknown experiment kind {self.kind!r}")
        if self.trials < 1:
            raise SpecError("trial count must be at least 1")
        exp = EXPERIMENTS[self.kind]
        if set(self.split) != set(exp.roles):
            raise SpecError(f"{self.kind} needs split roles {list(exp.roles)}")
        try:
            SplitPlan({k: int(v) for k, v in self.split.items()})
        except (TypeError, ValueError) as exc:
            raise SpecError(str(exc)) from None
        unknown = set(self.params) - set(exp.defaults)
        if unknown:
            raise SpecError(f"unknown {self.kind} params: {sorted(unknown)}")
        for a in self.assertions:
            _check_assertion(a)


def _check_assertion(a) -> None:
    if not isinstance(a, dict) or not ("metric" in a or "compare" in a):
        raise SpecError(f"malformed assertion {a!r}")
    if "compare" in a:
        if len(a["compare"]) != 2 or a.get("op", ">=") not in (">=", ">", "<=", "<"):
            raise SpecError(f"malformed comparison {a!r}")
        if a.get("se_mode", "pooled") not in ("pooled", "paired"):
            raise SpecError(f"unknown se_mode in {a!r}")


# ---------------------------------------------------------------- experiments


class Experiment:
    """Base recipe. ``prepare`` runs once; ``trial`` runs per trial in workers."""

    roles: tuple[str, ...] = ()
    defaults: dict[str, Any] = {}
    world_kind = "classification"

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.params = {**self.defaults, **spec.params}
        self.sizes = {k: int(v) for k, v in spec.split.items()}
        try:
            if self.world_kind == "classification":
                self.world = ClassificationWorld(ClassificationWorldConfig.from_dict(spec.world))
            else:
                self.world = MultiLabelWorld(MultiLabelWorldConfig.from_dict(spec.world))
        except RiskguardError as exc:
            raise SpecError(f"world config: {exc}") from None

    def prepare(self) -> None:
        pass

    def split(self, rng: np.random.Generator) -> dict:
        """Draw one dataset and cut it into the spec's roles (random order)."""
        total = sum(self.sizes.values())
        batch = self.world.sample(total, rng)
        order = rng.permutation(total)
        out, start = {}, 0
        for role in self.roles:
            out[role] = batch.take(order[start:start + self.sizes[role]])
            start += self.sizes[role]
        return out

    def trial(self, rng: np.random.Generator) -> dict[str, float]:
        raise NotImplementedError

    def natural_range(self, metric: str) -> tuple[float, float] | None:
        leaf = metric.rsplit(".", 1)[-1]
        if leaf in _UNIT_METRICS:
            return 0.0, 1.0
        return None


def _scores(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return conformal.neg_log_prob(probs[np.arange(len(labels)), labels])


def build_edge_mask(method: str, probs: np.ndarray, cal: ClassificationBatch, target: ClassificationBatch,
                    alpha: float, bandwidth: float, rng: np.random.Generator, dist: str = "edge") -> np.ndarray:
    """Label-set masks for ``target`` from one of ``hms``, ``cp`` or ``lcp``."""
    if method == "hms":
        return conformal.hms_mask(probs, 1.0 - alpha)
    cal_probs = getattr(cal, dist)
    cal_scores = _scores(cal_probs, cal.labels)
    if method == "cp":
        return conformal.cp_mask(probs, conformal.cp_quantile(cal_scores, alpha))
    if method == "lcp":
        q = conformal.lcp_quantiles(target.features, cal.features, cal_scores,
                                    conformal.LcpConfig(bandwidth), alpha, rng)
        return conformal.cp_mask(probs, q)
    raise SpecError(f"unknown set builder {method!r}")


class CpCoverage(Experiment):
    roles = ("cal", "test")
    defaults = {"alpha": 0.1, "method": "cp", "bandwidth": 1.0, "dist": "edge"}

    def trial(self, rng):
        p = self.params
        d = self.split(rng)
        test = d["test"]
        probs = getattr(test, p["dist"])
        mask = build_edge_mask(p["method"], probs, d["cal"], test, p["alpha"], p["bandwidth"], rng, p["dist"])
        hit = mask[np.arange(len(test)), test.labels]
        return {"coverage": float(hit.mean()), "set_size": float(mask.sum(axis=1).mean())}


def _cost_label(cost: oce.CostFunction) -> str:
    return cost.kind if cost.kind == "average" else f"{cost.kind}{cost.zeta:g}"


def parse_costs(items) -> list[oce.CostFunction]:
    try:
        return [oce.CostFunction(c["kind"], float(c.get("zeta", 0.0))) for c in items]
    except (KeyError, TypeError) as exc:
        raise SpecError(f"malformed cost list: {exc}") from None


@dataclass
class RiskCurve:
    grid: np.ndarray
    risk: dict[str, np.ndarray]
    set_size: np.ndarray


def _truth_elements(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Truth-element scores, owners, per-example truth counts and every candidate score."""
    if isinstance(batch, MultiLabelBatch):
        rows, cols = np.nonzero(batch.positives)
        return batch.scores[rows, cols], rows, batch.positives.sum(axis=1), batch.scores
    n = len(batch)
    return batch.edge[np.arange(n), batch.labels], np.arange(n), np.ones(n, int), batch.edge


def true_risk_curve(world, grid, costs: list[oce.CostFunction], mc_count: int = DEFAULT_MC_COUNT,
                    rng: np.random.Generator | None = None, chunk: int = 4096) -> RiskCurve:
    """Monte Carlo OCE risk of the nested sets at every grid point.

    Losses are tallied as ``(truth count, missed count)`` histograms per grid
    column, so memory does not grow with ``mc_count``. The classification
    world uses the edge distribution as the set score and the miscoverage
    loss; the multi-label world uses item scores and the FNR loss.
    """
    if mc_count < 1:
        raise RiskguardError("mc_count must be positive")
    grid = oce.check_grid(grid)
    rng = rng if rng is not None else RandomnessContract(0).stream(EVAL_STREAM)
    if isinstance(world, MultiLabelWorld):
        s_max = int(world.cfg.items_per_instance)
    else:
        s_max = 1
    side = s_max + 1
    g = grid.size
    hist = np.zeros(g * side * side, dtype=np.int64)
    included = np.zeros(g + 1, dtype=np.int64)
    for start in range(0, mc_count, chunk):
        n = min(chunk, mc_count - start)
        elem, owner, sizes, candidates = _truth_elements(world.sample(n, rng))
        missed = oce.missed_count_matrix(elem, owner, n, grid).astype(np.int64)
        flat = (np.arange(g)[None, :] * side + sizes[:, None]) * side + missed
        hist += np.bincount(flat.ravel(), minlength=hist.size)
        included += np.bincount(oce.first_inclusion_index(candidates.ravel(), grid), minlength=g + 1)
    hist = hist.reshape(g, side * side).T  # [value, column]
    s_idx, k_idx = np.divmod(np.arange(side * side), side)
    values = np.where(s_idx > 0, k_idx / np.maximum(s_idx, 1), 0.0)
    keep = hist.sum(axis=1) > 0
    risk = {_cost_label(c): oce.oce_risk_histogram(values[keep], hist[keep], c)[0] for c in costs}
    set_size = np.cumsum(included)[:g] / mc_count
    return RiskCurve(grid, risk, set_size)


def true_oce_risk(world, lam: float, loss: oce.SetLoss, cost: oce.CostFunction,
                  mc_count: int = DEFAULT_MC_COUNT, seed: int = 0) -> float:
    """Population OCE risk of the nested set at a single ``lam``."""
    if mc_count < 10_000:
        raise RiskguardError("mc_count must be at least 1e4")
    expected = oce.SetLoss.FNR if isinstance(world, MultiLabelWorld) else oce.SetLoss.MISCOVERAGE
    if loss is not expected:
        raise RiskguardError(f"{type(world).__name__} supports the {expected.value} loss only")
    rng = RandomnessContract(seed).stream(EVAL_STREAM)
    curve = true_risk_curve(world, [float(lam)], [cost], mc_count, rng)
    return float(curve.risk[_cost_label(cost)][0])


class OceRcps(Experiment):
    roles = ("opt", "cal")
    world_kind = "multilabel"
    defaults = {"alpha": 0.2, "delta": 0.2, "costs": [{"kind": "cvar", "zeta": 0.9}],
                "lambda_step": 0.001, "mc_count": DEFAULT_MC_COUNT, "eta_cap": 0.5,
                "r_grid_resolution": 1e-4}
    methods = ("rcps",)

    def prepare(self):
        p = self.params
        self.costs = parse_costs(p["costs"])
        self.grid = oce.default_lambda_grid(float(p["lambda_step"]))
        self.wsr = rcps.WsrConfig(float(p["delta"]), float(p["r_grid_resolution"]), float(p["eta_cap"]))
        rng = RandomnessContract(self.spec.seed).stream(EVAL_STREAM)
        self.curve = true_risk_curve(self.world, self.grid, self.costs, int(p["mc_count"]), rng)

    def _record(self, out, prefix, lam, label):
        alpha = float(self.params["alpha"])
        none = lam is None
        j = self.grid.size - 1 if none else int(np.searchsorted(self.grid, lam))
        risk = float(self.curve.risk[label][j])
        out[f"{prefix}.{label}.lambda"] = float(self.grid[j])
        out[f"{prefix}.{label}.risk"] = risk
        out[f"{prefix}.{label}.satisfied"] = float(risk <= alpha)
        out[f"{prefix}.{label}.set_size"] = float(self.curve.set_size[j])
        out[f"{prefix}.{label}.none"] = float(none)

    def trial(self, rng):
        alpha = float(self.params["alpha"])
        d = self.split(rng)
        L_opt = oce.fnr_loss_matrix(d["opt"].scores, d["opt"].positives, self.grid)
        L_cal = oce.fnr_loss_matrix(d["cal"].scores, d["cal"].positives, self.grid)
        out: dict[str, float] = {}
        for cost in self.costs:
            label = _cost_label(cost)
            t_star = rcps.fit_t_per_lambda(L_opt, cost)
            lam_r = None
            if "rcps" in self.methods:
                lam_r = rcps.oce_rcps_select(L_cal, self.grid, cost, t_star, alpha, self.wsr).lambda_hat
                self._record(out, "rcps", lam_r, label)
            if "crc" in self.methods:
                lam_c = rcps.oce_crc_select(L_cal, self.grid, cost, t_star, alpha)
                self._record(out, "crc", lam_c, label)
                out[f"crc_le_rcps.{label}"] = float(out[f"crc.{label}.lambda"] <= out[f"rcps.{label}.lambda"])
        return out

    def natural_range(self, metric):
        if metric.endswith(".set_size"):
            return 0.0, float(self.world.cfg.items_per_instance)
        return super().natural_range(metric)


class OceCrcContrast(OceRcps):
    methods = ("rcps", "crc")


class Cdci(Experiment):
    roles = ("cal", "test")
    defaults = {"alpha_dist": 0.1, "alpha_order": 1.0, "sampler": "grid", "grid_size": 100,
                "sample_count": 20000, "intersection_checks": 20}

    def prepare(self):
        p = self.params
        self.div = credal.DivergenceSpec(float(p["alpha_order"]))
        if p["sampler"] == "grid":
            self.sampler = credal.SimplexSampler.grid(int(p["grid_size"]))
        elif p["sampler"] == "random":
            self.sampler = credal.SimplexSampler.random(int(p["sample_count"]), self.spec.seed)
        else:
            raise SpecError(f"unknown sampler {p['sampler']!r}")

    def trial(self, rng):
        p = self.params
        d = self.split(rng)
        cal, test = d["cal"], d["test"]
        tau = credal.cdci_threshold(credal.divergence(cal.cloud, cal.edge, self.div.alpha_order),
                                    float(p["alpha_dist"]))
        cov, ineff = credal.coverage_and_inefficiency_batch(test.cloud, test.edge, tau, self.div, self.sampler)
        ok = True
        for i in range(min(int(p["intersection_checks"]), len(test))):
            ball = credal.CredalBall(make_prob_vector(test.edge[i]), tau, self.div)
            box = credal.credal_bounds(ball, self.sampler)
            q = credal.intersection_probability(box).array
            ok &= bool(np.all(q >= np.asarray(box.lower) - 1e-9) and np.all(q <= np.asarray(box.upper) + 1e-9)
                       and abs(q.sum() - 1.0) < 1e-9)
        return {"coverage": cov, "inefficiency": ineff, "tau": tau if math.isfinite(tau) else float("inf"),
                "intersection_ok": float(ok)}


class CascadeFdr(Experiment):
    roles = ("cal", "train", "val", "test")
    defaults = {"alpha_label": 0.2, "deltas": [0.1, 0.2, 0.4], "builders": ["hms", "cp", "lcp"],
                "predictors": ["isotonic", "random"], "bandwidth": 1.0, "baseline": False}

    def prepare(self):
        for name in self.params["predictors"]:
            cascade.get_predictor(name)
        for b in self.params["builders"]:
            if b not in ("hms", "cp", "lcp"):
                raise SpecError(f"unknown set builder {b!r}")
        for delta in self.params["deltas"]:
            if not 0.0 < float(delta) < 1.0:
                raise SpecError("deltas must lie in (0, 1)")

    def trial(self, rng):
        p = self.params
        alpha = float(p["alpha_label"])
        d = self.split(rng)
        train, val, test = d["train"], d["val"], d["test"]
        cloud_mask = conformal.hms_mask(test.cloud, 1.0 - alpha)
        cloud_size = cloud_mask.sum(axis=1)
        cloud_c = cascade.alignment_scores(test.cloud, cloud_mask)
        out: dict[str, float] = {}
        for builder in p["builders"]:
            info = {}
            for role, b in (("train", train), ("val", val), ("test", test)):
                mask = build_edge_mask(builder, b.edge, d["cal"], b, alpha, float(p["bandwidth"]), rng)
                info[role] = (mask, cascade.alignment_scores(b.edge, mask), cascade.alignment_scores(b.cloud, mask))
            t_mask, t_u, t_c = info["test"]
            val_mis = info["val"][2] < 1.0 - alpha
            for pred_name in p["predictors"]:
                model = cascade.get_predictor(pred_name).fit(info["train"][1], info["train"][2], rng)
                val_hat, test_hat = model(info["val"][1]), model(t_u)
                for delta in p["deltas"]:
                    _, _, _, sel = cascade.screen_arrays(val_hat, val_mis, test_hat, float(delta))
                    self._metrics(out, f"{builder}.{pred_name}.d{float(delta):g}", sel, t_mask, t_c,
                                  cloud_size, cloud_c, alpha)
            if p["baseline"]:
                for delta in p["deltas"]:
                    keep = ~cascade.confidence_based_deferral(test.edge.max(axis=1), 1.0 - float(delta))
                    self._metrics(out, f"{builder}.confidence.d{float(delta):g}", keep, t_mask, t_c,
                                  cloud_size, cloud_c, alpha)
        return out

    @staticmethod
    def _metrics(out, prefix, sel, t_mask, t_c, cloud_size, cloud_c, alpha):
        sizes = np.where(sel, t_mask.sum(axis=1), cloud_size)
        served_c = np.where(sel, t_c, cloud_c)
        res = cascade.cascade_metrics(sel, served_c, sizes, cloud_size, alpha)
        out[f"{prefix}.fdp"] = res.fdp
        out[f"{prefix}.satisfaction"] = res.satisfaction_rate
        out[f"{prefix}.deferral"] = res.deferral_rate
        out[f"{prefix}.ni"] = res.normalized_inefficiency

    def natural_range(self, metric):
        if metric.endswith(".ni"):
            return 0.0, float(self.world.cfg.label_count)
        return super().natural_range(metric)


class CascadeTradeoff(CascadeFdr):
    defaults = {**CascadeFdr.defaults, "predictors": ["isotonic"]}


EXPERIMENTS: dict[str, type[Experiment]] = {
    "cp_coverage": CpCoverage,
    "oce_rcps": OceRcps,
    "oce_crc_contrast": OceCrcContrast,
    "cdci": Cdci,
    "cascade_fdr": CascadeFdr,
    "cascade_tradeoff": CascadeTradeoff,
}


# ---------------------------------------------------------------- running


def resolve_workers(workers: int | None = None) -> int:
    if workers is None:
        env = os.environ.get("RISKGUARD_WORKERS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


_WORKER: dict[str, Any] = {}


def _run_trial(exp: Experiment, seed: int, i: int) -> dict:
    rng = RandomnessContract(seed).stream(i)
    try:
        metrics = exp.trial(rng)
    except Exception as exc:
        raise TrialError(f"trial {i}: {type(exc).__name__}: {exc}") from exc
    return {"trial": i, **{k: float(v) for k, v in metrics.items()}}


def _init_worker(exp: Experiment, seed: int) -> None:
    _WORKER["exp"], _WORKER["seed"] = exp, seed


def _worker_trial(i: int) -> dict:
    return _run_trial(_WORKER["exp"], _WORKER["seed"], i)


def run_trials(exp: Experiment, seed: int, indices, workers: int = 1) -> list[dict]:
    indices = list(indices)
    if workers <= 1 or len(indices) <= 1:
        records = [_run_trial(exp, seed, i) for i in indices]
    else:
        chunk = max(1, len(indices) // (4 * workers))
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(exp, seed)) as pool:
            records = list(pool.map(_worker_trial, indices, chunksize=chunk))
    return sorted(records, key=lambda r: r["trial"])


def _metric_summary(values: np.ndarray, rng_bounds) -> dict:
    t = values.size
    finite = values[np.isfinite(values)]
    mean = math.fsum(values) / t if finite.size == t else float("inf")
    if t > 1 and finite.size == t:
        # sort first so the sum is independent of trial order
        v = np.sort(values)
        se = float(np.sqrt(math.fsum((v - mean) ** 2) / (t - 1)) / math.sqrt(t))
    else:
        se = 0.0
    if rng_bounds is None:
        lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    else:
        lo, hi = rng_bounds
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    counts, _ = np.histogram(np.clip(finite, lo, hi), bins=HIST_BINS, range=(lo, hi))
    return {"mean": mean, "se": se, "min": float(values.min()), "max": float(values.max()),
            "histogram": {"lo": lo, "hi": hi, "counts": [int(c) for c in counts]}}


def evaluate_assertion(a: dict, metrics: dict, records: list[dict]) -> dict:
    slack = float(a.get("se_slack", 0.0))
    if "metric" in a:
        name = a["metric"]
        if name not in metrics:
            raise SpecError(f"assertion refers to unknown metric {name!r}")
        m = metrics[name]
        lower = float(a.get("lower", -math.inf))
        upper = float(a.get("upper", math.inf))
        ok = lower - slack * m["se"] <= m["mean"] <= upper + slack * m["se"]
        return {**a, "value": m["mean"], "se": m["se"], "passed": bool(ok)}
    left, right = a["compare"]
    for name in (left, right):
        if name not in metrics:
            raise SpecError(f"assertion refers to unknown metric {name!r}")
    op = a.get("op", ">=")
    diff = metrics[left]["mean"] - metrics[right]["mean"]
    if a.get("se_mode", "pooled") == "paired":
        d = np.array([r[left] - r[right] for r in records])
        se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
    else:
        se = math.hypot(metrics[left]["se"], metrics[right]["se"])
    ok = {">=": diff >= -slack * se, ">": diff > slack * se,
          "<=": diff <= slack * se, "<": diff < -slack * se}[op]
    return {**a, "value": diff, "se": se, "passed": bool(ok)}


def summarize(exp: Experiment, records: list[dict]) -> dict:
    names = sorted({k for r in records for k in r if k != "trial"})
    metrics = {}
    for name in names:
        vals = np.array([r[name] for r in records], dtype=float)
        metrics[name] = _metric_summary(vals, exp.natural_range(name))
    checks = [evaluate_assertion(a, metrics, records) for a in exp.spec.assertions]
    return {"kind": exp.spec.kind, "trials": len(records), "seed": exp.spec.seed, "spec": exp.spec.to_dict(),
            "metrics": metrics, "assertions": checks, "passed": all(c["passed"] for c in checks)}


@dataclass
class ExperimentResult:
    summary: dict
    records: list[dict]

    @property
    def passed(self) -> bool:
        return bool(self.summary["passed"])

    def mean(self, metric: str) -> float:
        return self.summary["metrics"][metric]["mean"]

    def se(self, metric: str) -> float:
        return self.summary["metrics"][metric]["se"]


def build_experiment(spec: ExperimentSpec | dict) -> Experiment:
    if isinstance(spec, dict):
        spec = ExperimentSpec.from_dict(spec)
    else:
        spec.validate()
    exp = EXPERIMENTS[spec.kind](spec)
    exp.prepare()
    return exp


def run_experiment(spec: ExperimentSpec | dict, workers: int | None = 1, order=None) -> ExperimentResult:
    """Run every trial of ``spec`` and summarize.

    ``order`` optionally permutes the execution order of trial indices; the
    result does not depend on it.
    """
    exp = build_experiment(spec)
    indices = range(exp.spec.trials) if order is None else order
    if sorted(indices) != list(range(exp.spec.trials)):
        raise SpecError("order must be a permutation of the trial indices")
    records = run_trials(exp, exp.spec.seed, indices, resolve_workers(workers))
    return ExperimentResult(summarize(exp, records), records)
