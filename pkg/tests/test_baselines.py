import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from dynrel import nncore as nn, sim
from dynrel.baselines import (
    BaselineKind,
    InSupervisedModel,
    NriEncoder,
    NriModel,
    _blockify,
    assign_members,
    in_supervised_predict,
    nri_adaptive_infer,
    nri_mlp_encode,
)
from dynrel.decoder import AUTOREGRESSIVE, DecoderConfig, one_hot_relations, FixedRelations
from dynrel.encoder import pair_indices
from dynrel.errors import ConfigurationError, DimensionError, UsageError


def dec_cfg():
    return DecoderConfig(msg_hidden=8, gru_hidden=8)


def make_nri(n_agents=3, state_dim=2, horizon=10, period=None, hidden=16,
             seed=0, **kw):
    return NriModel(n_agents, state_dim, horizon, dec_cfg(),
                    np.random.default_rng(seed), period=period,
                    hidden=hidden, **kw)


class TestBaselineKind:
    def test_valid(self):
        BaselineKind("nri_static")
        BaselineKind("in_supervised")
        BaselineKind("nri_adaptive", sub_lengths=(4, 8))

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError):
            BaselineKind("gnn")

    def test_adaptive_needs_lengths(self):
        with pytest.raises(ConfigurationError):
            BaselineKind("nri_adaptive")


class TestBlockify:
    def test_even_split_layout(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 12, 3, 2)).astype(np.float32)
        got = _blockify(nn.Tensor(x), np.array([0, 4, 8, 12])).data
        assert got.shape == (2, 3, 3, 8)
        for e in range(2):
            for b in range(3):
                for n in range(3):
                    want = x[e, 4 * b:4 * (b + 1), n, :].reshape(-1)
                    assert_array_equal(got[e, b, n], want)

    def test_tail_padded_with_last_step(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(1, 10, 2, 2)).astype(np.float32)
        got = _blockify(nn.Tensor(x), np.array([0, 4, 8, 10])).data
        assert got.shape == (1, 3, 2, 8)
        tail = got[0, 2]            # steps 8, 9, then 9 repeated twice
        want_steps = x[0, [8, 9, 9, 9]]          # [4, N, D]
        for n in range(2):
            assert_array_equal(tail[n], want_steps[:, n, :].reshape(-1))

    def test_gradient_counts_padding(self):
        x = nn.Tensor(np.zeros((1, 10, 2, 2), dtype=np.float64),
                      requires_grad=True)
        out = _blockify(x, np.array([0, 4, 8, 10]))
        nn.tsum(out).backward()
        # every step feeds one block; step 9 also fills two pad slots
        want = np.ones((10,))
        want[9] = 3.0
        assert_array_equal(x.grad[0, :, 0, 0], want)


class TestNriEncoder:
    def test_output_shape(self):
        enc = NriEncoder(4, 5, 2, 2, np.random.default_rng(0), hidden=8)
        w = np.random.default_rng(1).normal(size=(3, 2, 4, 10)) \
            .astype(np.float32)
        assert enc(nn.Tensor(w)).shape == (3, 2, 12, 2)

    def test_matches_explicit_message_loop(self):
        n = 4
        enc = NriEncoder(n, 3, 2, 2, np.random.default_rng(2), hidden=8)
        w = np.random.default_rng(3).normal(size=(2, n, 6)).astype(np.float32)
        got = enc(nn.Tensor(w)).data

        first, second = pair_indices(n)
        h = enc.embed(nn.Tensor(w)).data
        e = enc.edge1(nn.Tensor(np.concatenate(
            [h[:, first], h[:, second]], axis=-1))).data
        incoming = np.zeros((2, n, e.shape[-1]), dtype=e.dtype)
        for q in range(len(first)):
            incoming[:, second[q]] += e[:, q]
        h2 = enc.node(nn.Tensor(incoming)).data
        want = enc.edge2(nn.Tensor(np.concatenate(
            [h2[:, first], h2[:, second]], axis=-1))).data
        assert_allclose(got, want, rtol=1e-5, atol=1e-6)

    def test_extra_hidden_grows_embed(self):
        base = NriEncoder(3, 4, 2, 2, np.random.default_rng(0), hidden=8)
        deep = NriEncoder(3, 4, 2, 2, np.random.default_rng(0), hidden=8,
                          extra_hidden=2)
        assert len(deep.embed.layers) == len(base.embed.layers) + 2

    def test_gradient_reaches_all_parameters(self):
        enc = NriEncoder(3, 4, 2, 2, np.random.default_rng(4), hidden=8)
        w = nn.Tensor(np.random.default_rng(5)
                      .normal(size=(2, 3, 8)).astype(np.float32))
        nn.tsum(enc(w) * enc(w)).backward()
        for name, p in enc.parameters().items():
            assert p.grad is not None and np.any(p.grad != 0), name

    def test_initial_posterior_near_uniform(self):
        cfg = sim.SimConfig(n_agents=4, raw_steps=2000, sample_every=100,
                            seed=3)
        schedule = sim.build_schedule(
            "periodic", cfg.n_samples,
            sim.random_base_graph(4, np.random.default_rng(0)), period=10)
        states, _ = sim.simulate_trajectory(cfg, schedule)
        lo = states.min(axis=(0, 1), keepdims=True)
        hi = states.max(axis=(0, 1), keepdims=True)
        x = ((states - lo) / (hi - lo)).astype(np.float32)[None]
        model = make_nri(n_agents=4, state_dim=4, horizon=cfg.n_samples,
                         hidden=64, seed=11)
        post = model.posterior(nn.Tensor(x))
        p = post.probabilities().data
        ent = float(-(p * np.log(p)).sum(axis=-2).mean())
        assert ent >= 0.9 * math.log(2)


class TestNriModel:
    def test_static_single_block(self):
        model = make_nri()
        assert model.kind == "nri-static"
        assert_array_equal(model.edges, [0, 10])
        x = np.random.default_rng(0).random((2, 10, 3, 2)).astype(np.float32)
        post = model.posterior(nn.Tensor(x))
        assert post.n_blocks == 1
        assert post.logits.shape == (2, 6, 2, 1)

    def test_adaptive_blocks_and_tail(self):
        model = make_nri(period=4)
        assert model.kind == "nri-adaptive"
        assert_array_equal(model.edges, [0, 4, 8, 10])
        x = np.random.default_rng(1).random((2, 10, 3, 2)).astype(np.float32)
        post = model.posterior(nn.Tensor(x))
        assert post.logits.shape == (2, 6, 2, 3)
        steps = post.stepwise().data
        for lo, hi in ((0, 4), (4, 8), (8, 10)):
            for t in range(lo, hi):
                assert_array_equal(steps[..., t], steps[..., lo])

    def test_blocks_encoded_independently(self):
        model = make_nri(period=5)
        x = np.random.default_rng(2).random((2, 10, 3, 2)).astype(np.float32)
        post = model.posterior(nn.Tensor(x))
        for b, lo in enumerate((0, 5)):
            window = np.ascontiguousarray(
                x[:, lo:lo + 5].transpose(0, 2, 1, 3)).reshape(2, 3, 10)
            alone = model.encoder(nn.Tensor(window)).data   # [B, pairs, K]
            assert_allclose(post.logits.data[..., b], alone, rtol=1e-6)

    def test_wrong_length_rejected(self):
        model = make_nri()
        x = np.zeros((1, 12, 3, 2), dtype=np.float32)
        with pytest.raises(DimensionError):
            model.posterior(nn.Tensor(x))

    @pytest.mark.parametrize("period", [0, 11, -2])
    def test_bad_period(self, period):
        with pytest.raises(ConfigurationError):
            make_nri(period=period)

    def test_shares_vae_sampling(self):
        model = make_nri(period=5)
        x = np.random.default_rng(3).random((2, 10, 3, 2)).astype(np.float32)
        post = model.posterior(nn.Tensor(x))
        rel = model.sample_relations(post, 0.5, hard=True)
        z = rel.stepwise().data
        assert z.shape == (2, 6, 2, 10)
        assert_allclose(z.sum(axis=-2), 1.0)


class TestNriMlpEncode:
    def test_whole_trajectory_logits(self):
        model = make_nri()
        x = np.random.default_rng(4).random((3, 10, 3, 2)).astype(np.float32)
        logits = nri_mlp_encode(model, nn.Tensor(x))
        assert logits.shape == (3, 6, 2, 1)

    def test_rejects_blocked_encoder(self):
        model = make_nri(period=5)
        x = np.random.default_rng(5).random((1, 10, 3, 2)).astype(np.float32)
        with pytest.raises(UsageError):
            nri_mlp_encode(model, nn.Tensor(x))


class TestAssignMembers:
    def test_exact_matches(self):
        assert assign_members([4, 8, 12, 16], [4, 8, 12, 16]) == [0, 1, 2, 3]

    def test_nearest(self):
        assert assign_members([4, 8, 12, 16], [11, 15, 3]) == [2, 3, 0]

    def test_tie_goes_to_shorter(self):
        assert assign_members([8, 12], [10]) == [0]
        assert assign_members([12, 8], [10]) == [1]

    def test_growing_segment_lengths(self):
        # segment lengths of [0,4,12,24,40,50): the trailing length-10
        # piece ties between 8 and 12 and lands on 8
        members = assign_members([4, 8, 12, 16], [4, 8, 12, 16, 10])
        assert members == [0, 1, 2, 3, 1]


class TestAdaptiveInfer:
    def test_single_model_labels(self):
        model = make_nri(period=4)
        x = np.random.default_rng(6).random((2, 10, 3, 2)).astype(np.float32)
        seq = nri_adaptive_infer(model, nn.Tensor(x))
        assert seq.labels.shape == (2, 6, 10)
        post = model.posterior(nn.Tensor(x))
        want = post.hard_labels()
        for b, (lo, hi) in enumerate(zip(model.edges[:-1], model.edges[1:])):
            for t in range(lo, hi):
                assert_array_equal(seq.labels[..., t], want[..., b])

    def test_ensemble_stitches_by_segment(self):
        m_short = make_nri(period=4, horizon=12, seed=7)
        m_long = make_nri(period=6, horizon=12, seed=8)
        x = np.random.default_rng(9).random((2, 12, 3, 2)).astype(np.float32)
        edges = np.array([0, 5, 12])    # lengths 5, 7 -> members 4, 6
        seq = nri_adaptive_infer([m_short, m_long], nn.Tensor(x),
                                 segment_edges=edges)
        a = nri_adaptive_infer(m_short, nn.Tensor(x)).labels
        b = nri_adaptive_infer(m_long, nn.Tensor(x)).labels
        assert_array_equal(seq.labels[..., :5], a[..., :5])
        assert_array_equal(seq.labels[..., 5:], b[..., 5:])

    def test_ensemble_needs_edges(self):
        model = make_nri(period=4)
        x = np.zeros((1, 10, 3, 2), dtype=np.float32)
        with pytest.raises(ConfigurationError):
            nri_adaptive_infer([model], nn.Tensor(x))

    def test_empty_ensemble(self):
        with pytest.raises(ConfigurationError):
            nri_adaptive_infer([], nn.Tensor(np.zeros((1, 10, 3, 2))),
                               segment_edges=np.array([0, 10]))

    def test_edges_must_cover_trajectory(self):
        model = make_nri(period=4)
        x = np.zeros((1, 10, 3, 2), dtype=np.float32)
        with pytest.raises(ConfigurationError):
            nri_adaptive_infer([model], nn.Tensor(x),
                               segment_edges=np.array([0, 8]))


class TestInSupervised:
    def setup_method(self):
        rng = np.random.default_rng(10)
        self.model = InSupervisedModel(3, 4, dec_cfg(), rng)
        self.x = rng.random((2, 20, 3, 4)).astype(np.float32)
        labels = rng.integers(0, 2, size=(2, 20, 3, 3)).astype(np.uint8)
        for e in range(2):
            for t in range(20):
                np.fill_diagonal(labels[e, t], 0)
                labels[e, t] |= labels[e, t].T
        self.labels = labels

    def test_predict_matches_direct_rollout(self):
        got = in_supervised_predict(self.model, self.x, self.labels,
                                    AUTOREGRESSIVE, 4, 8)
        z = one_hot_relations(self.labels, 3, 2)
        rel = FixedRelations(z=z, horizon=20)
        want = self.model.decoder.rollout(nn.Tensor(self.x), rel,
                                          AUTOREGRESSIVE, 4, 8).data
        assert_array_equal(got, want)

    def test_deterministic(self):
        a = in_supervised_predict(self.model, self.x, self.labels,
                                  AUTOREGRESSIVE, 4, 8)
        b = in_supervised_predict(self.model, self.x, self.labels,
                                  AUTOREGRESSIVE, 4, 8)
        assert_array_equal(a, b)

    def test_requires_labels(self):
        with pytest.raises(UsageError):
            in_supervised_predict(self.model, self.x, None,
                                  AUTOREGRESSIVE, 4, 8)

    def test_no_posterior(self):
        with pytest.raises(UsageError):
            self.model.posterior(nn.Tensor(self.x))
