import json

import numpy as np
import pytest
from conftest import TINY_CARDS, tiny_batch
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dephn import harness
from dephn.assembly import build_model
from dephn.data import LabeledDataset, split_dataset
from dephn.estimator import MultiTaskClassifier, train_step
from dephn.features import FieldSchema
from dephn.nn import Adam

SMALL = dict(epochs=2, batch_size=128, expert_dim=4, dnn_widths=(8,), depth=1)


def step_params(name, n_tasks, **step_kw):
    schema = FieldSchema(TINY_CARDS, 4)
    model = build_model(name, schema, n_tasks, seed=3, expert_dim=3, dnn_widths=(4,))
    params = model.named_parameters()
    X, Y = tiny_batch(64, seed=2, n_tasks=n_tasks)
    opt = Adam()
    for _ in range(3):
        train_step(model, opt, X, Y, params=params, **step_kw)
    return {k: p.value.copy() for k, p in params.items()}


class TestTrainStep:
    def test_neutral_gamma_matches_plain_update(self):
        plain = step_params("dephn", 2, virtual_gradient=False)
        neutral = step_params("dephn", 2, virtual_gradient=True, gamma_override=1.0)
        for k in plain:
            np.testing.assert_allclose(neutral[k], plain[k], atol=1e-12, rtol=0)

    def test_single_task_ignores_modulation(self):
        plain = step_params("dephn", 1, virtual_gradient=False)
        modulated = step_params("dephn", 1, virtual_gradient=True)
        for k in plain:
            np.testing.assert_array_equal(modulated[k], plain[k])

    def test_modulation_changes_only_gate_parameters_in_one_step(self):
        schema = FieldSchema(TINY_CARDS, 4)
        X, Y = tiny_batch(64, seed=2)
        results = []
        for vg_on in (False, True):
            model = build_model("dephn", schema, 2, seed=3, expert_dim=3, dnn_widths=(4,))
            params = model.named_parameters()
            train_step(model, Adam(), X, Y, virtual_gradient=vg_on, gamma_override=None if vg_on else 1.0, params=params)
            results.append({k: p.value.copy() for k, p in params.items()})
        changed = [k for k in results[0] if not np.array_equal(results[0][k], results[1][k])]
        assert changed and all(k.startswith("gates.raw") for k in changed)

    def test_loss_decreases_over_100_steps(self, small_related):
        est = MultiTaskClassifier(model="dephn", **SMALL).build(2, small_related.cardinalities)
        X, Y = small_related.features, small_related.labels
        rng = np.random.default_rng(0)
        first = None
        for _ in range(100):
            idx = rng.choice(len(X), 64, replace=False)
            losses = est.partial_fit(X[idx], Y[idx])
            first = losses.sum() if first is None else first
        final = sum(float(x.value) for x in est.model_.losses(est.model_(X[:1000]), Y[:1000]))
        assert final < first

    def test_non_finite_loss_raises(self):
        schema = FieldSchema(TINY_CARDS, 4)
        model = build_model("dnn", schema, 2, dnn_widths=(4,))
        model.nets[0].layers[-1].bias.value[...] = np.nan
        X, Y = tiny_batch()
        with pytest.raises(FloatingPointError):
            train_step(model, Adam(), X, Y)


class TestEstimator:
    def test_sklearn_protocol(self, small_related):
        est = MultiTaskClassifier(model="mmoe", **SMALL)
        assert clone(est).get_params() == est.get_params()
        with pytest.raises(NotFittedError):
            est.predict_proba(small_related.features[:5])
        est.fit(small_related.features, small_related.labels)
        P = est.predict_proba(small_related.features[:50])
        assert P.shape == (50, 2)
        assert set(np.unique(est.predict(small_related.features[:50]))) <= {0, 1}
        assert 0.5 < est.score(small_related.features, small_related.labels) <= 1.0
        assert len(est.history_) == SMALL["epochs"]

    def test_forward_is_unaffected_by_the_virtual_gradient_flag(self, small_related):
        est = MultiTaskClassifier(model="dephn", **SMALL).fit(small_related.features[:500], small_related.labels[:500])
        off = clone(est).set_params(virtual_gradient=False)
        off.build(2, est.schema_.cardinalities)
        off.model_.load_state_dict(est.model_.state_dict())
        np.testing.assert_array_equal(est.predict_proba(small_related.features), off.predict_proba(small_related.features))

    def test_seeded_fit_is_reproducible(self, small_related):
        X, Y = small_related.features[:800], small_related.labels[:800]
        a = MultiTaskClassifier(model="dephn", **SMALL).fit(X, Y).predict_proba(X)
        b = MultiTaskClassifier(model="dephn", **SMALL).fit(X, Y).predict_proba(X)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("Y", [np.array([[0, 2]] * 4), np.zeros((3, 2))])
    def test_label_validation(self, Y):
        with pytest.raises(ValueError):
            MultiTaskClassifier().fit(np.zeros((4, 3), dtype=int), Y)

    def test_negative_feature_index(self):
        with pytest.raises(ValueError):
            MultiTaskClassifier().fit(-np.ones((4, 3), dtype=int), np.zeros((4, 2)))

    def test_unknown_model(self):
        with pytest.raises(ValueError):
            MultiTaskClassifier(model="ple").build(2, TINY_CARDS)

    def test_dnn_baseline_smoke_threshold(self, small_related):
        est = MultiTaskClassifier(model="dnn", epochs=5, batch_size=64, dnn_widths=(32, 16)).fit(
            small_related.features, small_related.labels
        )
        assert est.history_[-1][0] <= 0.8 * est.history_[0][0]


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            harness.TrainConfig.from_dict({"epoch": 3})

    def test_missing_file_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="missing.cfg"):
            harness.TrainConfig.from_file(tmp_path / "missing.cfg")

    def test_bad_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{epochs: 2")
        with pytest.raises(ValueError, match="invalid JSON"):
            harness.TrainConfig.from_file(path)

    def test_hash_tracks_content(self):
        a = harness.TrainConfig()
        assert a.config_hash == harness.TrainConfig().config_hash
        assert a.config_hash != a.replace(seed=1).config_hash
        assert len(a.config_hash) == 12

    def test_round_trip_through_json(self, tmp_path):
        cfg = harness.TrainConfig(mappings=("rm",), epochs=3)
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert harness.TrainConfig.from_file(path) == cfg

    def test_unknown_coefficient(self):
        with pytest.raises(ValueError):
            harness.TrainConfig(coefficient="mul-tan")


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory, small_unrelated):
    out = tmp_path_factory.mktemp("run")
    cfg = harness.TrainConfig(**SMALL, valid_fraction=0.2)
    return harness.run_experiment(cfg, out, dataset=small_unrelated)


class TestArtifacts:
    def test_files_and_columns(self, finished_run):
        for name in harness.REPRODUCIBLE_FILES:
            rows = harness.read_rows(finished_run.out_dir / name)
            assert rows, name
            assert all(r["config_hash"] == finished_run.config.config_hash and r["seed"] == "0" for r in rows)

    def test_row_counts(self, finished_run):
        d = finished_run.out_dir
        c, dim = len(finished_run.estimator.schema_.cardinalities), finished_run.config.embed_dim
        assert len(harness.read_rows(d / "ssg.csv")) == 3 * c * dim
        assert len(harness.read_rows(d / "loss_curve.csv")) == SMALL["epochs"] * 2
        assert len(harness.read_rows(d / "scatter.csv")) == 600
        assert len(harness.read_rows(d / "gates.csv")) == 2 * 3 * 3
        assert len(harness.read_rows(d / "activation_ratio.csv")) == 2

    def test_metric_ranges(self, finished_run):
        for m in finished_run.metrics:
            assert 0 <= m["auc"] <= 1 and m["logloss"] >= 0

    def test_line_endings_and_encoding(self, finished_run):
        raw = (finished_run.out_dir / "metrics.csv").read_bytes()
        assert b"\r\n" not in raw
        raw.decode("utf-8")

    def test_reload_reproduces_predictions(self, finished_run, small_unrelated):
        est = harness.load_run(finished_run.out_dir)
        X = small_unrelated.features[:100]
        np.testing.assert_array_equal(est.predict_proba(X), finished_run.estimator.predict_proba(X))

    def test_summarize(self, finished_run):
        rows = harness.summarize([finished_run.out_dir])
        assert len(rows) == 2 and rows[0]["model"] == "dephn"
        assert "dephn" in harness.format_table(rows)

    def test_mmoe_run_skips_gate_reports(self, tmp_path, small_unrelated):
        run = harness.run_experiment(harness.TrainConfig(model="mmoe", **SMALL), tmp_path, dataset=small_unrelated)
        assert not (tmp_path / "gates.csv").exists()
        assert (tmp_path / "scatter.csv").exists()
        assert run.metrics[0]["note"] == ""


def test_single_class_validation_fold_is_reported_not_fatal(tmp_path, small_unrelated):
    train, _ = split_dataset(small_unrelated, 0.2, seed=0)
    n = 40
    valid = LabeledDataset(train.features[:n], np.column_stack([np.ones(n, int), train.labels[:n, 1]]), train.cardinalities)
    valid.labels[0, 1], valid.labels[1, 1] = 0, 1
    cfg = harness.TrainConfig(model="mmoe", **SMALL)
    run = harness.run_experiment(cfg, tmp_path, split=(train, valid))
    assert np.isnan(run.metrics[0]["auc"]) and "auc omitted" in run.metrics[0]["note"]
    assert 0 <= run.metrics[1]["auc"] <= 1
    row = harness.read_rows(tmp_path / "metrics.csv")[0]
    assert row["auc"] == "" and "both classes" in row["note"]


def test_sweep_emits_sixteen_rows(tmp_path, small_unrelated):
    cfg = harness.TrainConfig(**{**SMALL, "epochs": 1}, valid_fraction=0.2)
    rows = harness.sweep(cfg, tmp_path, dataset=small_unrelated.subset(np.arange(800)))
    assert len(rows) == 16
    assert {(r["function"], r["similarity"]) for r in rows} == {
        (f, m) for f in harness.vg.COEFFICIENTS for m in harness.vg.SIMILARITIES
    }
    assert len(harness.read_rows(tmp_path / "sweep_metrics.csv")) == 16


def test_same_config_gives_identical_csv_bytes(tmp_path, small_unrelated):
    cfg = harness.TrainConfig(**SMALL)
    data = small_unrelated.subset(np.arange(1000))
    harness.run_experiment(cfg, tmp_path / "a", dataset=data)
    harness.run_experiment(cfg, tmp_path / "b", dataset=data)
    for name in harness.REPRODUCIBLE_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
