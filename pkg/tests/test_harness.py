import math

import numpy as np
import pytest

from riskguard.harness import (EXPERIMENTS, ExperimentSpec, SpecError, evaluate_assertion, resolve_workers,
                               run_experiment, true_oce_risk)
from riskguard.oce import CostFunction, SetLoss
from riskguard.synthworld import ClassificationWorld, ClassificationWorldConfig, MultiLabelWorld, MultiLabelWorldConfig

CP_SPEC = {"kind": "cp_coverage", "world": {"label_count": 5, "edge_logit_noise": 0.5},
           "split": {"cal": 100, "test": 50}, "params": {"alpha": 0.1}, "trials": 40, "seed": 3,
           "assertions": [{"metric": "coverage", "lower": 0.9, "upper": 0.9 + 1 / 101, "se_slack": 3}]}


class TestSpec:
    def test_round_trip(self):
        spec = ExperimentSpec.from_dict(CP_SPEC)
        assert ExperimentSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize("patch", [{"kind": "nope"}, {"trials": 0}, {"split": {"cal": 10}},
                                       {"params": {"gamma": 1}}, {"assertions": [{"lower": 1}]},
                                       {"world": {"label_count": 1}}])
    def test_invalid(self, patch):
        with pytest.raises(SpecError):
            run_experiment({**CP_SPEC, **patch})

    def test_every_kind_registered(self):
        assert set(EXPERIMENTS) == {"cp_coverage", "oce_rcps", "oce_crc_contrast", "cdci", "cascade_fdr",
                                    "cascade_tradeoff"}


class TestRun:
    def test_single_trial_has_zero_se(self):
        res = run_experiment({**CP_SPEC, "trials": 1})
        assert len(res.records) == 1 and res.se("coverage") == 0.0

    def test_deterministic(self):
        assert run_experiment(CP_SPEC).summary == run_experiment(CP_SPEC).summary

    def test_order_invariant(self):
        order = list(np.random.default_rng(0).permutation(CP_SPEC["trials"]))
        a, b = run_experiment(CP_SPEC), run_experiment(CP_SPEC, order=order)
        assert a.summary == b.summary and a.records == b.records

    def test_workers_invariant(self):
        assert run_experiment(CP_SPEC, workers=2).summary == run_experiment(CP_SPEC).summary

    def test_se_matches_sample_std(self):
        res = run_experiment(CP_SPEC)
        v = np.array([r["coverage"] for r in res.records])
        assert math.isclose(res.se("coverage"), v.std(ddof=1) / math.sqrt(v.size), rel_tol=1e-9)
        assert math.isclose(res.mean("coverage"), v.mean(), rel_tol=1e-12)

    def test_histogram(self):
        h = run_experiment(CP_SPEC).summary["metrics"]["coverage"]["histogram"]
        assert len(h["counts"]) == 50 and sum(h["counts"]) == CP_SPEC["trials"]
        assert (h["lo"], h["hi"]) == (0.0, 1.0)

    def test_coverage_band(self):
        assert run_experiment({**CP_SPEC, "trials": 300}).passed

    def test_lcp_method(self):
        res = run_experiment({**CP_SPEC, "params": {"alpha": 0.1, "method": "lcp", "bandwidth": 1.0}, "trials": 100})
        assert res.passed

    def test_small_oce_run(self):
        spec = {"kind": "oce_crc_contrast", "world": {"items_per_instance": 10}, "split": {"opt": 50, "cal": 200},
                "params": {"lambda_step": 0.01, "mc_count": 10000, "costs": [{"kind": "cvar", "zeta": 0.5}]},
                "trials": 4, "seed": 1}
        res = run_experiment(spec)
        assert res.mean("crc_le_rcps.cvar0.5") == 1.0
        assert {"rcps.cvar0.5.satisfied", "crc.cvar0.5.lambda"} <= set(res.summary["metrics"])

    def test_small_cascade_run(self):
        spec = {"kind": "cascade_fdr", "world": {"edge_temperature": 0.5},
                "split": {"cal": 100, "train": 100, "val": 100, "test": 30},
                "params": {"deltas": [0.3], "baseline": True}, "trials": 3, "seed": 2}
        m = run_experiment(spec).summary["metrics"]
        assert "lcp.random.d0.3.fdp" in m and "hms.confidence.d0.3.deferral" in m

    def test_small_cdci_run(self):
        spec = {"kind": "cdci", "world": {"label_count": 3}, "split": {"cal": 50, "test": 50},
                "params": {"grid_size": 20}, "trials": 2, "seed": 2}
        assert run_experiment(spec).mean("intersection_ok") == 1.0


class TestAssertions:
    metrics = {"a": {"mean": 0.5, "se": 0.1}, "b": {"mean": 0.4, "se": 0.1}}

    def test_band(self):
        assert evaluate_assertion({"metric": "a", "upper": 0.3, "se_slack": 2}, self.metrics, [])["passed"]
        assert not evaluate_assertion({"metric": "a", "upper": 0.3, "se_slack": 1}, self.metrics, [])["passed"]

    def test_compare(self):
        a = evaluate_assertion({"compare": ["a", "b"], "op": ">"}, self.metrics, [])
        assert a["passed"] and math.isclose(a["value"], 0.1)
        assert not evaluate_assertion({"compare": ["a", "b"], "op": ">", "se_slack": 1}, self.metrics, [])["passed"]

    def test_paired(self):
        recs = [{"a": 1.0, "b": 0.0}, {"a": 1.0, "b": 0.0}]
        out = evaluate_assertion({"compare": ["a", "b"], "se_mode": "paired"}, self.metrics, recs)
        assert out["se"] == 0.0

    def test_unknown_metric(self):
        with pytest.raises(SpecError):
            evaluate_assertion({"metric": "zzz"}, self.metrics, [])


class TestTrueOceRisk:
    def test_full_sets(self):
        world = ClassificationWorld(ClassificationWorldConfig())
        assert true_oce_risk(world, 1.0, SetLoss.MISCOVERAGE, CostFunction.average(), 10**4) == 0.0

    def test_cvar_zero_is_average(self):
        world = ClassificationWorld(ClassificationWorldConfig(seed=1))
        a = true_oce_risk(world, 0.5, SetLoss.MISCOVERAGE, CostFunction.average(), 10**5)
        b = true_oce_risk(world, 0.5, SetLoss.MISCOVERAGE, CostFunction.cvar(0.0), 10**5)
        assert abs(a - b) < 1e-7

    def test_noise_free_multilabel(self):
        world = MultiLabelWorld(MultiLabelWorldConfig(score_noise=0.0))
        assert true_oce_risk(world, 0.3, SetLoss.FNR, CostFunction.cvar(0.9), 10**4) == 0.0

    def test_mc_size_agreement(self):
        world = ClassificationWorld(ClassificationWorldConfig(seed=2))
        a = true_oce_risk(world, 0.6, SetLoss.MISCOVERAGE, CostFunction.average(), 10**5)
        b = true_oce_risk(world, 0.6, SetLoss.MISCOVERAGE, CostFunction.average(), 10**6)
        assert abs(a - b) <= 3 * math.sqrt(b * (1 - b) / 10**5)

    def test_requires_enough_samples(self):
        with pytest.raises(Exception):
            true_oce_risk(ClassificationWorld(ClassificationWorldConfig()), 0.5, SetLoss.MISCOVERAGE,
                          CostFunction.average(), 100)

    def test_loss_must_match_world(self):
        with pytest.raises(Exception):
            true_oce_risk(ClassificationWorld(ClassificationWorldConfig()), 0.5, SetLoss.FNR,
                          CostFunction.average(), 10**4)


def test_resolve_workers(monkeypatch):
    monkeypatch.setenv("RISKGUARD_WORKERS", "3")
    assert resolve_workers() == 3 and resolve_workers(2) == 2
    monkeypatch.delenv("RISKGUARD_WORKERS")
    assert resolve_workers() >= 1
