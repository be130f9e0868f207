import json
import math
import os
from pathlib import Path

import numpy as np
import pytest

from loghom.errors import ConfigError, ExperimentFailure, MixedKinds
from loghom.experiment import (
    ExperimentConfig,
    ExperimentRecord,
    collect,
    emit_plot_data,
    pooled_mean_stderr,
    run_experiment,
)


def tiny_config(kind="sample-field", **kw):
    params = dict(kind=kind, dim=2, n_per_side=32, amplitude=0.5, corr_length=1.0,
                  replicas=4, master_seed=7, tol=1e-8)
    params.update(kw)
    return ExperimentConfig(**params)


class TestConfig:
    def test_hash_stable_and_excludes_runtime_knobs(self):
        c1 = tiny_config()
        c2 = tiny_config(out_dir="/tmp/x", threads=4)
        assert c1.config_hash() == c2.config_hash()
        c3 = tiny_config(amplitude=0.7)
        assert c3.config_hash() != c1.config_hash()

    def test_ini_roundtrip(self):
        c = tiny_config(kind="radii", eps_levels=(0.25, 0.125), trunc_M=math.e**3)
        text = c.to_ini()
        back = ExperimentConfig.from_ini(text)
        assert back == c

    def test_ini_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_ini("[grid]\nbogus = 3\n")

    def test_validation(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(kind="nope")
        with pytest.raises(ConfigError):
            tiny_config(amplitude=-1.0)
        with pytest.raises(ConfigError):
            tiny_config(trunc_M=0.5)
        with pytest.raises(ConfigError):
            tiny_config(replicas=-1)


class TestRunExperiment:
    def test_zero_replicas(self, tmp_path):
        cfg = tiny_config(replicas=0, out_dir=str(tmp_path / "run"))
        records, summary = run_experiment(cfg)
        assert records == []
        assert summary["completed"] == 0
        assert (tmp_path / "run" / "manifest.json").exists()
        header = (tmp_path / "run" / "records.csv").read_text().splitlines()
        assert len(header) == 1  # header only

    def test_determinism_bit_identical(self):
        cfg = tiny_config(replicas=3)
        rec1, _ = run_experiment(cfg)
        rec2, _ = run_experiment(cfg)
        for a, b in zip(rec1, rec2):
            assert a.observables == b.observables

    def test_thread_count_does_not_change_results(self):
        serial, _ = run_experiment(tiny_config(replicas=4, threads=1))
        parallel, _ = run_experiment(tiny_config(replicas=4, threads=2))
        for a, b in zip(serial, parallel):
            assert a.replica == b.replica
            assert a.observables == b.observables

    def test_seed_changes_results_but_not_statistics(self):
        rec1, _ = run_experiment(tiny_config(replicas=4, master_seed=1))
        rec2, _ = run_experiment(tiny_config(replicas=4, master_seed=2))
        v1 = collect(rec1, "mean_a_pow[1]")
        v2 = collect(rec2, "mean_a_pow[1]")
        assert not np.allclose(v1, v2)

    def test_two_master_seeds_agree_within_stderr(self):
        # pooled moment estimates from disjoint seed sets agree within
        # 3 combined standard errors
        cfg1 = tiny_config(n_per_side=64, replicas=40, master_seed=11)
        cfg2 = tiny_config(n_per_side=64, replicas=40, master_seed=22)
        r1, _ = run_experiment(cfg1)
        r2, _ = run_experiment(cfg2)
        m1, s1 = pooled_mean_stderr(r1, "mean_a_pow[1]")
        m2, s2 = pooled_mean_stderr(r2, "mean_a_pow[1]")
        assert abs(m1 - m2) < 3 * math.hypot(s1, s2)

    def test_failure_fraction_raises(self, monkeypatch):
        import loghom.experiment as exp_mod

        def boom(config, replica):
            raise RuntimeError("synthetic failure")

        monkeypatch.setitem(exp_mod._SIMPLE_KINDS, "sample-field", boom)
        with pytest.raises(ExperimentFailure):
            run_experiment(tiny_config(replicas=4))

    def test_partial_failures_recorded_not_dropped(self, monkeypatch, tmp_path):
        import loghom.experiment as exp_mod

        original = exp_mod._replica_sample_field

        def sometimes(config, replica):
            if replica == 60:
                raise RuntimeError("synthetic")
            return original(config, replica)

        monkeypatch.setitem(exp_mod._SIMPLE_KINDS, "sample-field", sometimes)
        cfg = tiny_config(replicas=61, out_dir=str(tmp_path / "run"))
        records, summary = run_experiment(cfg)
        assert summary["failed"] == 1
        assert summary["completed"] == 60
        text = (tmp_path / "run" / "records.csv").read_text()
        assert "__error__" in text and "synthetic" in text

    def test_manifest_and_hash_agreement(self, tmp_path):
        cfg = tiny_config(replicas=2, out_dir=str(tmp_path / "run"))
        records, summary = run_experiment(cfg)
        manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
        assert manifest["config_hash"] == cfg.config_hash()
        lines = (tmp_path / "run" / "records.csv").read_text().splitlines()[1:]
        assert all(ln.split(",")[0] == cfg.config_hash() for ln in lines)


class TestEmitPlotData:
    def test_empty_records_header_only(self, tmp_path):
        files = emit_plot_data([], "radii", tmp_path,
                               tiny_config(kind="radii"))
        for path in files:
            lines = Path(path).read_text().splitlines()
            assert len(lines) == 1

    def test_mixed_kinds_rejected(self, tmp_path):
        rec = ExperimentRecord("h", "radii", 0, (1, 0), {})
        with pytest.raises(MixedKinds):
            emit_plot_data([rec], "correctors", tmp_path)

    def test_clt_table_sorted_by_R(self, tmp_path):
        cfg = tiny_config(kind="clt-scaling", n_per_side=64,
                          R_list=(4.0, 8.0, 16.0), replicas=5)
        records, _ = run_experiment(cfg)
        files = emit_plot_data(records, "clt-scaling", tmp_path, cfg)
        rows = Path(files[0]).read_text().splitlines()
        assert rows[0] == "R,log_var,stderr"
        R_vals = [float(r.split(",")[0]) for r in rows[1:]]
        assert R_vals == sorted(R_vals)

    def test_tail_table_has_censored_counts(self, tmp_path):
        cfg = tiny_config(kind="radii", n_per_side=32, amplitude=0.25,
                          replicas=3, radius_kinds=("diamond",))
        records, _ = run_experiment(cfg)
        files = emit_plot_data(records, "radii", tmp_path, cfg)
        tail_file = [f for f in files if "r_diamond" in str(f)][0]
        header = Path(tail_file).read_text().splitlines()[0]
        assert header == "x,log1p_sq,neg_log_survival,censored_n"


class TestKindPipelines:
    def test_sample_field_summary(self):
        records, summary = run_experiment(tiny_config(n_per_side=64, replicas=30))
        z = abs(summary["moments"]["1"]["z"])
        assert z < 4.0
        assert summary["variance"]["pooled"] == pytest.approx(0.5, abs=0.1)

    def test_correctors_summary_voigt_reuss(self):
        cfg = tiny_config(kind="correctors", n_per_side=32, replicas=6)
        records, summary = run_experiment(cfg)
        vr = summary["voigt_reuss"]
        diag = summary["ahom"][0][0]
        assert vr["harmonic"] - 0.05 < diag < vr["arithmetic"] + 0.05
        assert summary["max_reconstruction_residual"] < 1e-6

    def test_commutator_pipeline_runs(self):
        cfg = tiny_config(kind="commutator", n_per_side=64, replicas=12,
                          eps_levels=(0.25, 0.125))
        records, summary = run_experiment(cfg)
        assert "variance_ratios" in summary
        assert summary["ks"]["n"] == 12

    def test_two_scale_pipeline_runs(self):
        cfg = tiny_config(kind="two-scale", n_per_side=64, amplitude=0.25,
                          replicas=4, eps_levels=(0.25, 0.125))
        records, summary = run_experiment(cfg)
        assert summary["max_energy_defect"] < 1e-6
        errs = [rec.observables["two_scale_error[eps=0.25]"] for rec in records]
        assert all(e > 0 for e in errs)

    def test_hole_filling_pipeline(self):
        cfg = tiny_config(kind="hole-filling", n_per_side=64, amplitude=0.5,
                          replicas=6)
        records, summary = run_experiment(cfg)
        assert 0 < summary["beta_hat"] <= 2.0
        assert summary["coverage_with_slack"] >= 0.95

    def test_pathwise_pipeline(self):
        cfg = tiny_config(kind="pathwise", n_per_side=64, amplitude=0.25,
                          replicas=8, eps_levels=(0.25, 0.125))
        records, summary = run_experiment(cfg)
        assert set(summary["residual"]) == {"0.25", "0.125"}
        for entry in summary["residual"].values():
            assert entry["pooled_l2"] >= 0
