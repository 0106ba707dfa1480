import numpy as np
import pytest

from deepbow import errors
from deepbow.dataio import DEFAULT_METRIC_CONFIG
from deepbow.evaluation import FitLog, report_to_json
from deepbow.features import expected_scopes
from deepbow.pipeline import (BowSource, PatchConfig, RunConfig, build_source,
                              build_vectors, extract_bank, fit_codebooks,
                              fit_representation, assemble_matrix,
                              imaging_dimension, load_bank,
                              load_representation, region_mean_matrix,
                              run_cv, run_holdout, save_bank,
                              save_representation)

TINY_PATCH = PatchConfig(size=8, stride=8, coverage_min=0.5)


def _tiny_config(**kw):
    base = dict(scenario="per-metric", family="raw-bow", words=3,
                patch=TINY_PATCH, stage_widths=(2, 2, 2), latent_per_metric=4,
                latent_stacked=4, cae_epochs=1, cae_batch_size=500,
                cae_learning_rate=3e-4, budget=3, inner_folds=2,
                grid_C=(1.0,), grid_gamma_scale=(0.1,), grid_folds=3,
                repeats=2, val_fraction=0.2, rounds=1, heldout_size=3,
                ensemble_size=2, master_seed=13)
    base.update(kw)
    return RunConfig(**base)


def _kinds_by_scope(log, kind):
    return [r.scope for r in log.records if r.kind == kind]


class TestConfig:
    def test_validate_rejects_unknown(self):
        with pytest.raises(errors.ConfigError):
            _tiny_config(family="boosted-trees").validate()
        with pytest.raises(errors.ConfigError):
            _tiny_config(scenario="volumetric").validate()

    def test_effective_words_defaults(self):
        assert RunConfig(scenario="per-metric").effective_words == 20
        assert RunConfig(scenario="stacked").effective_words == 130
        assert RunConfig(scenario="stacked", words=5).effective_words == 5


class TestDimensionLaws:
    def test_per_metric(self):
        cfg = RunConfig(scenario="per-metric", family="raw-bow")
        assert len(expected_scopes(DEFAULT_METRIC_CONFIG, "per-metric")) == 13
        assert imaging_dimension(DEFAULT_METRIC_CONFIG, cfg) == 260
        cfg30 = RunConfig(scenario="per-metric", family="raw-bow", words=30)
        assert imaging_dimension(DEFAULT_METRIC_CONFIG, cfg30) == 390

    def test_stacked(self):
        cfg = RunConfig(scenario="stacked", family="deep-bow")
        assert imaging_dimension(DEFAULT_METRIC_CONFIG, cfg) == 260
        cfg190 = RunConfig(scenario="stacked", family="deep-bow", words=190)
        assert imaging_dimension(DEFAULT_METRIC_CONFIG, cfg190) == 380

    def test_region_mean(self):
        cfg = RunConfig(family="region-mean")
        assert imaging_dimension(DEFAULT_METRIC_CONFIG, cfg) == 13


class TestBankArtifacts:
    def test_save_load_round_trip(self, tiny_dataset, tmp_path):
        bank = extract_bank(tiny_dataset, TINY_PATCH)
        save_bank(bank, TINY_PATCH, tmp_path / "bank")
        loaded, patch = load_bank(tmp_path / "bank")
        assert patch == TINY_PATCH
        assert set(loaded) == set(bank)
        for key in bank:
            assert len(loaded[key]) == len(bank[key])
            for a, b in zip(bank[key], loaded[key]):
                assert np.array_equal(a.values, b.values)
                assert np.array_equal(a.origins, b.origins)
                assert a.subject_ids[0] == b.subject_ids[0]

    def test_missing_index(self, tmp_path):
        with pytest.raises(errors.DataError):
            load_bank(tmp_path / "nothing-here")


class TestRepresentationArtifacts:
    def test_save_load_encode_parity(self, tiny_dataset, tmp_path):
        cfg = _tiny_config(family="deep-bow")
        bank = extract_bank(tiny_dataset, cfg.patch)
        log = FitLog()
        rep = fit_representation(tiny_dataset, bank, cfg,
                                 np.arange(len(tiny_dataset.subjects)),
                                 "protocol", log)
        assert sorted(rep.models) == ["FA", "MD"]
        save_representation(rep, tmp_path / "rep")
        back = load_representation(tmp_path / "rep")
        assert back.scenario == rep.scenario
        assert back.scope == "protocol"
        vb1 = build_vectors(tiny_dataset, bank, cfg, rep)
        vb2 = build_vectors(tiny_dataset, bank, cfg, back)
        for key in vb1.keys:
            assert np.array_equal(vb1.vectors[key], vb2.vectors[key])
            assert vb1.spans[key] == vb2.spans[key]

    def test_missing_dir(self, tmp_path):
        with pytest.raises(errors.DataError):
            load_representation(tmp_path / "nope")


class TestStagewiseAssembly:
    def test_stacked_matrix_dimensions(self, tiny_dataset):
        cfg = _tiny_config(scenario="stacked", family="raw-bow")
        bank = extract_bank(tiny_dataset, cfg.patch)
        vb = build_vectors(tiny_dataset, bank, cfg, None)
        assert vb.keys == [("cc", "stacked"), ("thalamus", "stacked")]
        books = fit_codebooks(tiny_dataset, vb, cfg)
        mat = assemble_matrix(tiny_dataset, vb, books, cfg.scenario)
        assert mat.n_imaging == 2 * 3
        assert len(mat.names) == 2 * 3 + 6
        assert mat.values.shape == (12, 12)

    def test_codebook_fit_logged(self, tiny_dataset):
        cfg = _tiny_config()
        bank = extract_bank(tiny_dataset, cfg.patch)
        vb = build_vectors(tiny_dataset, bank, cfg, None)
        log = FitLog()
        books = fit_codebooks(tiny_dataset, vb, cfg, scope="protocol",
                              fit_log=log, train_idx=np.arange(6))
        assert len(books) == 3
        recs = [r for r in log.records if r.kind == "codebook"]
        assert len(recs) == 3
        assert all(len(r.ids) == 6 for r in recs)

    def test_region_mean_matrix_shape(self, tiny_dataset):
        mat = region_mean_matrix(tiny_dataset)
        assert mat.values.shape == (12, 3 + 6)
        assert mat.names[:3] == ["cc/FA/mean", "cc/MD/mean", "thal/FA/mean"]


class TestRunCv:
    def test_region_mean(self, tiny_dataset):
        report, log = run_cv(tiny_dataset, _tiny_config(family="region-mean"))
        assert len(report.rows) == 2
        assert log.audit() == []
        kinds = set(report.audit["by_kind"])
        assert kinds == {"selection", "standardize", "grid", "svm"}

    def test_raw_bow(self, tiny_dataset):
        report, log = run_cv(tiny_dataset, _tiny_config(family="raw-bow"))
        assert len(report.rows) == 2
        assert log.audit() == []
        # one codebook per scope key per split, nothing representation-level
        assert report.audit["by_kind"]["codebook"] == 2 * 3
        assert "norm" not in report.audit["by_kind"]
        assert "cae" not in report.audit["by_kind"]
        assert set(_kinds_by_scope(log, "codebook")) == {"split:r00", "split:r01"}

    def test_deep_bow_protocol_scope(self, tiny_dataset):
        report, log = run_cv(tiny_dataset, _tiny_config(family="deep-bow"))
        assert len(report.rows) == 2
        assert log.audit() == []
        assert _kinds_by_scope(log, "norm") == ["protocol", "protocol"]
        assert _kinds_by_scope(log, "cae") == ["protocol", "protocol"]
        assert report.audit["by_kind"]["codebook"] == 2 * 3

    def test_deep_bow_strict_refits_per_split(self, tiny_dataset):
        cfg = _tiny_config(family="deep-bow", strict_leakage=True)
        report, log = run_cv(tiny_dataset, cfg)
        assert log.audit() == []
        assert sorted(set(_kinds_by_scope(log, "cae"))) == ["split:r00", "split:r01"]
        assert report.audit["by_kind"]["cae"] == 2 * 2  # two metrics per split

    def test_determinism(self, tiny_dataset):
        r1, _ = run_cv(tiny_dataset, _tiny_config(family="raw-bow"))
        r2, _ = run_cv(tiny_dataset, _tiny_config(family="raw-bow"))
        assert report_to_json(r1) == report_to_json(r2)


class TestRunHoldout:
    def test_region_mean_smoke(self, tiny_dataset):
        report, log = run_holdout(tiny_dataset, _tiny_config(family="region-mean"))
        assert len(report.rows) == 1
        assert report.ensemble_size == 2
        assert len(report.rows[0]["heldout_ids"]) == 3
        assert log.audit() == []

    def test_deep_bow_round_scope(self, tiny_dataset):
        report, log = run_holdout(tiny_dataset, _tiny_config(family="deep-bow"))
        assert log.audit() == []
        # representation fits bind to the round, not the protocol
        assert set(_kinds_by_scope(log, "cae")) == {"round:0"}
        assert set(_kinds_by_scope(log, "norm")) == {"round:0"}


class TestBowSourceGuards:
    def test_deep_without_pool_rejected(self, tiny_dataset):
        cfg = _tiny_config(family="deep-bow")
        bank = extract_bank(tiny_dataset, cfg.patch)
        src = BowSource(tiny_dataset, bank, cfg)
        with pytest.raises(errors.ScopeMismatch):
            src.materialize(np.arange(8), np.arange(8, 12), None,
                            "split:r00", FitLog())

    def test_raw_bow_round_source_is_self(self, tiny_dataset):
        cfg = _tiny_config(family="raw-bow")
        bank = extract_bank(tiny_dataset, cfg.patch)
        src = BowSource(tiny_dataset, bank, cfg)
        assert src.round_source("round:0", np.arange(9), np.arange(9, 12),
                                FitLog()) is src
