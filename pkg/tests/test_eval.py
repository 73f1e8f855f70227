import itertools
import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dynrel import eval as ev, nncore as nn, objective
from dynrel.baselines import InSupervisedModel
from dynrel.decoder import DecoderConfig
from dynrel.encoder import EncoderConfig, LatentPosterior, pair_indices
from dynrel.errors import ConfigurationError, DimensionError, UsageError


def rand_labels(rng, examples, n_agents, steps):
    """Symmetric zero-diagonal [E, T, N, N] relation labels."""
    out = rng.integers(0, 2, size=(examples, steps, n_agents, n_agents)) \
        .astype(np.uint8)
    for e in range(examples):
        for t in range(steps):
            np.fill_diagonal(out[e, t], 0)
            out[e, t] = np.triu(out[e, t], 1)
            out[e, t] |= out[e, t].T
    return out


def small_dyari(n_agents=3, period=10, seed=0):
    enc = EncoderConfig(channels=6, n_extract_blocks=1,
                        skip_connections_per_block=2, inference_period=period)
    dec = DecoderConfig(msg_hidden=8, gru_hidden=8)
    return objective.DyariModel(n_agents, 4, enc, dec,
                                np.random.default_rng(seed))


class TestRelationSequence:
    def test_from_ground_truth_layout(self):
        rng = np.random.default_rng(0)
        labels = rand_labels(rng, 2, 4, 6)
        seq = ev.RelationSequence.from_ground_truth(labels, 4)
        first, second = pair_indices(4)
        assert seq.labels.shape == (2, 12, 6)
        for q in range(12):
            assert_array_equal(seq.labels[:, q, :],
                               labels[:, :, first[q], second[q]])

    def test_from_posterior_broadcast(self):
        rng = np.random.default_rng(1)
        logits = nn.Tensor(rng.normal(size=(2, 6, 2, 3)))
        post = LatentPosterior(logits=logits, edges=np.array([0, 4, 8, 10]),
                               horizon=10)
        seq = ev.RelationSequence.from_posterior(post, 3)
        hard = post.hard_labels()
        for b, (lo, hi) in enumerate(((0, 4), (4, 8), (8, 10))):
            for t in range(lo, hi):
                assert_array_equal(seq.labels[..., t], hard[..., b])

    def test_window(self):
        seq = ev.RelationSequence(labels=np.zeros((1, 6, 10), np.int64),
                                  n_agents=3)
        assert seq.window(2, 7).horizon == 5
        with pytest.raises(UsageError):
            seq.window(5, 11)
        with pytest.raises(UsageError):
            seq.window(4, 4)

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            ev.RelationSequence(labels=np.zeros((1, 5, 10)), n_agents=3)


class TestEdgeAccuracy:
    def make(self, labels, n=3):
        return ev.RelationSequence(labels=np.asarray(labels), n_agents=n)

    def test_perfect(self):
        rng = np.random.default_rng(2)
        x = rng.integers(0, 2, size=(2, 6, 8))
        assert ev.edge_accuracy(self.make(x), self.make(x)) == 1.0

    def test_complement_is_perfect(self):
        rng = np.random.default_rng(3)
        x = rng.integers(0, 2, size=(2, 6, 8))
        assert ev.edge_accuracy(self.make(1 - x), self.make(x)) == 1.0

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            pred = rng.integers(0, 2, size=(1, 6, 8))
            truth = rng.integers(0, 2, size=(1, 6, 8))
            got = ev.edge_accuracy(self.make(pred), self.make(truth))
            want = max(
                np.mean(np.asarray(perm)[pred] == truth)
                for perm in itertools.permutations(range(2)))
            assert got == pytest.approx(want)
            assert got >= 0.5

    def test_half_match_scores_half(self):
        pred = np.zeros((1, 6, 8), dtype=np.int64)
        truth = np.zeros((1, 6, 8), dtype=np.int64)
        truth[..., :4] = 1
        assert ev.edge_accuracy(self.make(pred), self.make(truth)) == 0.5

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ev.edge_accuracy(
                self.make(np.zeros((1, 6, 8), np.int64)),
                self.make(np.zeros((1, 6, 9), np.int64)))


class TestTrajectoryMse:
    def test_zero(self):
        x = np.random.default_rng(5).random((2, 5, 3, 4))
        assert ev.trajectory_mse(x, x) == 0.0

    def test_constant_offset(self):
        x = np.zeros((2, 5, 3, 4))
        assert ev.trajectory_mse(x + 0.25, x) == pytest.approx(0.0625)

    def test_matches_loop(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((2, 4, 3, 2)), rng.random((2, 4, 3, 2))
        want = np.mean([(a[i] - b[i]) ** 2 for i in range(2)])
        assert ev.trajectory_mse(a, b) == pytest.approx(want, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ev.trajectory_mse(np.zeros((2, 3)), np.zeros((3, 2)))


class FakeBatch:
    def __init__(self, states, labels):
        self.states = states
        self.labels = labels

    def __len__(self):
        return len(self.states)


@pytest.fixture()
def random_batch():
    rng = np.random.default_rng(7)
    states = rng.random((5, 20, 3, 4)).astype(np.float32)
    labels = rand_labels(rng, 5, 3, 20)
    return FakeBatch(states, labels)


def eval_cfg(**kw):
    kw.setdefault("context_steps", 4)
    kw.setdefault("decode_horizon", 8)
    kw.setdefault("batch_size", 4)
    return objective.TrainConfig(**kw)


class TestModelMetrics:
    def test_nelbo_matches_direct(self, random_batch):
        model = small_dyari()
        cfg = eval_cfg(batch_size=5)
        got = ev.nelbo(random_batch, model, cfg)
        _, diag = objective.elbo(random_batch.states, model, cfg, hard=True)
        assert got == pytest.approx(-diag["elbo"], rel=1e-9)
        assert np.isfinite(got)

    def test_model_step_labels_batching(self, random_batch):
        model = small_dyari()
        cfg = eval_cfg()
        whole = ev.model_step_labels(model, random_batch, cfg, batch_size=5)
        parts = ev.model_step_labels(model, random_batch, cfg, batch_size=2)
        assert_array_equal(whole.labels, parts.labels)
        assert whole.labels.shape == (5, 6, 20)

    def test_supervised_labels_are_ground_truth(self, random_batch):
        model = InSupervisedModel(3, 4, DecoderConfig(msg_hidden=8,
                                                      gru_hidden=8),
                                  np.random.default_rng(8))
        seq = ev.model_step_labels(model, random_batch, eval_cfg())
        want = ev.RelationSequence.from_ground_truth(random_batch.labels, 3)
        assert_array_equal(seq.labels, want.labels)
        acc = ev.posterior_accuracy(model, random_batch, eval_cfg())
        assert acc == 1.0

    def test_posterior_accuracy_bounds(self, random_batch):
        acc = ev.posterior_accuracy(small_dyari(), random_batch, eval_cfg())
        assert 0.5 <= acc <= 1.0

    def test_split_mse_supervised_oracle(self, random_batch):
        from dynrel.baselines import in_supervised_predict
        from dynrel.decoder import AUTOREGRESSIVE
        model = InSupervisedModel(3, 4, DecoderConfig(msg_hidden=8,
                                                      gru_hidden=8),
                                  np.random.default_rng(9))
        cfg = eval_cfg()
        got = ev.split_mse(model, random_batch, cfg, batch_size=5)
        mu = in_supervised_predict(model, random_batch.states,
                                   random_batch.labels, AUTOREGRESSIVE, 4, 8)
        want = ev.trajectory_mse(mu, random_batch.states[:, 4:12])
        assert got == pytest.approx(want, rel=1e-9)

    def test_split_mse_batching(self, random_batch):
        model = small_dyari()
        cfg = eval_cfg()
        a = ev.split_mse(model, random_batch, cfg, batch_size=5)
        b = ev.split_mse(model, random_batch, cfg, batch_size=2)
        assert a == pytest.approx(b, rel=1e-12)


class TestSpecs:
    def test_dataset_slug_and_label(self):
        ds = ev.DatasetSpec.make("periodic", period=20)
        assert ds.slug("desk") == "periodic-period20-n5-desk-d0"
        assert ds.label() == "20"
        assert ev.DatasetSpec.make("static").label() == "40"
        assert ev.DatasetSpec.make("additive", start=4, step=4).label() == "Add"
        assert ev.DatasetSpec.make("stochastic", block=4,
                                   flip_prob=0.8).label() == "0.8"

    def test_dataset_params_roundtrip(self):
        ds = ev.DatasetSpec.make("stochastic", block=4, flip_prob=0.9)
        assert ds.params == {"block": 4, "flip_prob": 0.9}

    def test_experiment_validation(self):
        ds = ev.DatasetSpec.make("static")
        with pytest.raises(ConfigurationError):
            ev.ExperimentSpec(name="x", dataset=ds, model_kind="transformer")
        with pytest.raises(ConfigurationError):
            ev.ExperimentSpec(name="x", dataset=ds, model_kind="dyari",
                              inference_period=-1)
        with pytest.raises(ConfigurationError):
            ev.ExperimentSpec(name="x", dataset=ds, model_kind="dyari",
                              inference_period=12, decode_horizon=40)

    def test_cell_slug_distinguishes_variants(self):
        ds = ev.DatasetSpec.make("periodic", period=20)
        base = ev.ExperimentSpec(name="a", dataset=ds, model_kind="dyari",
                                 inference_period=20)
        nopool = ev.ExperimentSpec(name="b", dataset=ds, model_kind="dyari",
                                   inference_period=20,
                                   disable_interp_pool=True)
        tf = ev.ExperimentSpec(name="c", dataset=ds, model_kind="dyari",
                               inference_period=20,
                               scheme_kind="teacher_forcing")
        slugs = {s.cell_slug("desk", 0) for s in (base, nopool, tf)}
        assert len(slugs) == 3
        assert base.cell_slug("desk", 0) != base.cell_slug("desk", 1)
        assert base.cell_slug("desk", 0) != base.cell_slug("paper", 0)

    def test_shared_cells_collide_across_recipes(self):
        # the grid's matched-period cell and the ablation baseline are
        # the same training run, so their slugs must agree
        grid = [s for s in ev.recipe_specs("table3-corrected")
                if s.name == "grid|20|20"][0]
        pool = [s for s in ev.recipe_specs("avgpool-ablation")
                if s.name == "with-pool"][0]
        assert grid.cell_slug("desk", 1) == pool.cell_slug("desk", 1)

    def test_recipe_unknown(self):
        with pytest.raises(ConfigurationError):
            ev.recipe_specs("table9")

    def test_recipe_sizes(self):
        assert len(ev.recipe_specs("table1")) == 16
        assert len(ev.recipe_specs("table2")) == 20
        assert len(ev.recipe_specs("table3")) == 9
        assert len(ev.recipe_specs("table3-corrected")) == 16
        assert len(ev.recipe_specs("stochastic")) == 6
        assert len(ev.recipe_specs("avgpool-ablation")) == 2


class TestRendering:
    def table(self):
        return {"title": "Demo", "header": ["Model", "A", "B"],
                "rows": [["long-name", 0.9123456, None],
                         ["x", 3.2e-5, 1.0]]}

    def test_text_alignment(self):
        text = ev.render_table_text(self.table())
        lines = text.splitlines()
        assert lines[0] == "Demo"
        assert lines[1].startswith("Model")
        assert set(lines[2]) <= {"-", " "}
        assert "0.912" in lines[3] and "-" in lines[3]
        assert "3.2e-05" in lines[4]

    def test_csv(self, tmp_path):
        path = str(tmp_path / "t.csv")
        ev.write_table_csv(self.table(), path)
        import csv
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["Model", "A", "B"]
        assert rows[1][2] == ""          # None renders empty

    def test_seed_mean(self):
        per_seed = [
            {"accuracy": 0.8, "mse": 1.0, "nelbo": 5.0,
             "best_valid_elbo": -5.0, "seed": 0, "cell": "c"},
            {"accuracy": 0.6, "mse": 3.0, "nelbo": 7.0,
             "best_valid_elbo": -7.0, "seed": 1, "cell": "c"},
        ]
        out = ev._seed_mean(per_seed)
        assert out["accuracy"] == pytest.approx(0.7)
        assert out["mse"] == pytest.approx(2.0)
        assert out["seeds"] == [0, 1]
        assert "seed" not in out

    def test_atomic_write(self, tmp_path):
        path = str(tmp_path / "cell.json")
        ev._atomic_write_json(path, {"a": 1})
        assert json.load(open(path)) == {"a": 1}
        assert not os.path.exists(path + ".tmp")


TINY_SCALE = ev.ScalePreset("tiny", 8, 4, 4, 2)
TINY_MODELS = ev.ModelPreset(channels=6, skip_units=2, msg_hidden=8,
                             gru_hidden=8, nri_hidden=16)


@pytest.fixture()
def tiny_world(tmp_path, monkeypatch):
    monkeypatch.setitem(ev.SCALES, "tiny", TINY_SCALE)
    monkeypatch.setitem(ev.MODEL_PRESETS, "tiny", TINY_MODELS)
    return str(tmp_path)


class TestExperimentEngine:
    def test_dataset_cache(self, tiny_world):
        spec = ev.DatasetSpec.make("periodic", period=10, n_agents=3)
        ds, fp = ev.ensure_dataset(spec, "tiny", tiny_world)
        assert len(ds.train) == 8 and len(ds.test) == 4
        assert ds.train.states.shape[1] == 50
        marker = os.path.join(ev.dataset_dir(tiny_world, spec, "tiny"),
                              "train.bin")
        before = os.path.getmtime(marker)
        ds2, fp2 = ev.ensure_dataset(spec, "tiny", tiny_world)
        assert fp2 == fp
        assert os.path.getmtime(marker) == before
        assert_array_equal(ds.train.states, ds2.train.states)

    def test_run_experiment_trains_and_caches(self, tiny_world):
        spec = ev.ExperimentSpec(
            name="t", dataset=ev.DatasetSpec.make("periodic", period=10,
                                                  n_agents=3),
            model_kind="dyari", inference_period=10, decode_horizon=10)
        metrics = ev.run_experiment(spec, 0, tiny_world, "tiny")
        for key in ("accuracy", "mse", "nelbo", "best_valid_elbo"):
            assert np.isfinite(metrics[key]), key
        assert 0.5 <= metrics["accuracy"] <= 1.0
        assert metrics["epochs_run"] == 2
        run_dir = os.path.join(tiny_world, "runs",
                               spec.cell_slug("tiny", 0))
        assert os.path.exists(os.path.join(run_dir, "checkpoint.bin"))
        assert os.path.exists(os.path.join(run_dir, "history.jsonl"))

        again = ev.run_experiment(spec, 0, tiny_world, "tiny")
        assert again == metrics          # served from the cell cache
        forced = ev.run_experiment(spec, 0, tiny_world, "tiny", force=True)
        assert forced["accuracy"] == pytest.approx(metrics["accuracy"])

    def test_run_experiment_supervised(self, tiny_world):
        spec = ev.ExperimentSpec(
            name="t-in", dataset=ev.DatasetSpec.make("periodic", period=10,
                                                     n_agents=3),
            model_kind="in", decode_horizon=10)
        metrics = ev.run_experiment(spec, 0, tiny_world, "tiny")
        assert metrics["accuracy"] == 1.0
        assert np.isfinite(metrics["mse"])

    def test_adaptive_ensemble_cell(self, tiny_world):
        spec = ev.ExperimentSpec(
            name="t-add", dataset=ev.DatasetSpec.make("additive", start=4,
                                                      step=4, n_agents=3),
            model_kind="nri-adaptive", members=(4, 8), decode_horizon=10)
        metrics = ev.run_experiment(spec, 0, tiny_world, "tiny")
        assert metrics["member_periods"] == [4, 8]
        assert metrics["selected_member"] in (4, 8)
        assert 0.5 <= metrics["accuracy"] <= 1.0
        runs = os.listdir(os.path.join(tiny_world, "runs"))
        members = [r for r in runs if r.endswith(("__L4", "__L8"))]
        assert len(members) == 2

    def test_run_grid_tiny_recipe(self, tiny_world, monkeypatch):
        ds = ev.DatasetSpec.make("periodic", period=10, n_agents=3)
        spec = ev.ExperimentSpec(name="only", dataset=ds, model_kind="dyari",
                                 inference_period=10, decode_horizon=10)

        def table(results):
            row = results.get("only", {})
            return {"title": "Tiny", "header": ["Cell", "Acc"],
                    "rows": [["only", row.get("accuracy")]]}

        monkeypatch.setitem(ev.RECIPES, "tiny-demo",
                            (lambda: [spec], table))
        got = ev.run_grid("tiny-demo", tiny_world, "tiny", seeds=(0,))
        assert got["recipe"] == "tiny-demo"
        assert got["rows"][0][1] is not None
        out = os.path.join(tiny_world, "results", "tiny-demo")
        assert sorted(os.listdir(out)) == ["table.csv", "table.json",
                                           "table.txt"]
        payload = json.load(open(os.path.join(out, "table.json")))
        assert payload["cells"]["only"]["seeds"] == [0]
