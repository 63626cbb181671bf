import logging

import numpy as np
import pytest

from attnxfer import embedding, synthdata
from attnxfer import energynet as en
from attnxfer.energynet import EnergyNetConfig, EnergyNetParams, MiningState, SiameseBatch, SiameseItem
from helpers import central_diff


def hand_params():
    return EnergyNetParams(
        w1=np.array([[1.0, 0.0], [0.0, -1.0]]), b1=np.zeros(2),
        w2=np.eye(2), b2=np.array([0.5, 0.0]),
        wf=np.array([1.0, 2.0]), dim_c=1,
    )


def random_params(seed=0, map_dim=9, dim_c=3, hidden=6, d=4):
    p = en.init_energynet(map_dim, dim_c, hidden, d, seed)
    rng = np.random.default_rng(seed + 50)
    p.b1 = rng.normal(scale=0.1, size=hidden)
    p.b2 = rng.normal(scale=0.1, size=d)
    return p


def random_batch(seed=0, b=5, map_dim=9, dim_c=3):
    rng = np.random.default_rng(seed)
    return SiameseBatch(*(rng.random((b, map_dim + dim_c)) for _ in range(4)))


def separable_samples(seed):
    return [en.TrainSample(vid, f, label, stacks[f])
            for vid, label, stacks in synthdata.separable_maps(seed=seed) for f in range(len(stacks))]


VOCAB4 = embedding.one_hot_vocabulary(synthdata.concept_names(4))


class TestForward:
    def test_hand_computed(self):
        p = hand_params()
        # z1 = [2, -3], h = [2, 0], f = [2.5, 0], e = 2.5
        np.testing.assert_array_equal(en.embed([2.0], [3.0], p), [2.5, 0.0])
        vocab = embedding.ConceptVocabulary(["a"], [[3.0]])
        assert en.energy_net(np.array([[2.0]]), 0, vocab, p) == 2.5

    def test_zero_params_embed_zero(self):
        p = random_params()
        for a in ("w1", "b1", "w2", "b2"):
            setattr(p, a, np.zeros_like(getattr(p, a)))
        np.testing.assert_array_equal(en.embed(np.ones(9), np.ones(3), p), np.zeros(4))

    def test_zero_wf_gives_zero_energy(self):
        p = random_params(3)
        p.wf[:] = 0.0
        vocab = embedding.one_hot_vocabulary(["a", "b", "c"])
        assert en.energy_net(np.random.default_rng(3).random((3, 3)), 1, vocab, p) == 0.0

    def test_energy_is_projection(self):
        p = hand_params()
        p.wf = np.array([1.0, 0.0])
        vocab = embedding.ConceptVocabulary(["a"], [[3.0]])
        assert en.energy_net(np.array([[2.0]]), 0, vocab, p) == 2.5

    def test_energy_matches_recomputation(self):
        p = random_params(4)
        vocab = embedding.one_hot_vocabulary(["a", "b", "c"])
        m = np.random.default_rng(4).random((3, 3))
        x = np.concatenate([m.ravel(), vocab.vectors[2]])
        h = np.maximum(p.w1 @ x + p.b1, 0.0)
        oracle = p.wf @ (p.w2 @ h + p.b2)
        assert en.energy_net(m, 2, vocab, p) == pytest.approx(oracle, rel=1e-12)

    def test_batch_rows_independent(self):
        p = random_params(1)
        x = np.random.default_rng(1).random((7, 12))
        full = en.embed(x[:, :9], x[:, 9:], p)
        for i in range(7):
            assert full[i].tobytes() == en.embed(x[i, :9], x[i, 9:], p).tobytes()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="does not match"):
            en.embed(np.ones(8), np.ones(3), random_params())

    def test_embed_gradient_finite_differences(self):
        p = random_params(2)
        x = np.random.default_rng(2).random(12)
        u = np.random.default_rng(3).normal(size=4)
        f = lambda: float(u @ en.embed(x[:9], x[9:], p))
        num = central_diff(f, p.w1)
        # analytic: d(u.f)/dw1 = ((w2^T u) * relu'(z1)) x^T
        z1 = p.w1 @ x + p.b1
        ana = np.outer((p.w2.T @ u) * (z1 > 0), x)
        np.testing.assert_allclose(num, ana, rtol=1e-6, atol=1e-8)

    def test_init_shapes_and_range(self):
        p = en.init_energynet(25, 4, 128, 64, seed=0)
        assert p.w1.shape == (128, 29) and p.w2.shape == (64, 128) and p.wf.shape == (64,)
        assert np.abs(p.w1).max() <= np.sqrt(6 / (29 + 128))
        np.testing.assert_array_equal(p.b1, 0.0)
        assert en.init_energynet(25, 4, seed=3).equal(en.init_energynet(25, 4, seed=3))


class TestLosses:
    def test_energy_loss_examples(self):
        assert en.energy_loss(3.0, 1.0, 1.0) == 0.0
        assert en.energy_loss(2.0, 1.5, 1.0) == 0.5
        assert en.energy_loss(2.0, 0.5, 1.0) == 0.0
        assert en.energy_loss(1.0, 0.5, 1.0) == 0.5
        assert en.energy_loss(0.0, 0.0, 1.0) == 1.0
        with pytest.raises(ValueError):
            en.energy_loss(0.0, 0.0, 0.0)

    def test_cosine_examples(self):
        assert en.cosine_distance([1, 0], [1, 0]) == 0.0
        assert en.cosine_distance([1, 0], [0, 1]) == 1.0
        assert en.cosine_distance([1, 0], [-1, 0]) == 2.0
        assert en.cosine_distance([1, 1], [2, 2]) == pytest.approx(0.0, abs=1e-15)

    def test_cosine_zero_vector(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert en.cosine_distance([0, 0], [1, 0]) == 1.0
        assert "zero-norm" in caplog.text

    def test_triplet_from_distances(self):
        a = np.array([1.0, 0.0])
        unit = lambda cos: np.array([cos, np.sqrt(1 - cos * cos)])
        assert en.triplet_loss(a, unit(0.8), unit(0.1), 0.5) == 0.0
        assert en.triplet_loss(a, unit(0.6), unit(0.5), 0.5) == pytest.approx(0.4, abs=1e-12)

    def test_triplet_examples(self):
        assert en.triplet_loss([1, 0], [1, 0], [0, 1], 0.5) == 0.0
        assert en.triplet_loss([1, 0], [0, 1], [1, 0], 0.5) == 1.5
        assert en.triplet_loss([1, 0], [1, 1], [1, 1], 0.5) == pytest.approx(0.5)
        with pytest.raises(ValueError):
            en.triplet_loss([1], [1], [1], 0.0)

    def test_batch_terms_match_scalar_definitions(self):
        p = random_params(4)
        batch = random_batch(4)
        terms = en.joint_terms(batch, p, 1.0, 0.5, 0.7)
        for i in range(len(batch)):
            e_fa = float(p.wf @ en.embed(batch.x_fa[i, :9], batch.x_fa[i, 9:], p))
            e_gt = float(p.wf @ en.embed(batch.x_gt[i, :9], batch.x_gt[i, 9:], p))
            f = [en.embed(x[i, :9], x[i, 9:], p) for x in (batch.x_gt, batch.x_pos, batch.x_neg)]
            el = en.energy_loss(e_gt, e_fa, 1.0)
            tl = en.triplet_loss(*f, 0.5)
            assert terms.energy[i] == pytest.approx(el, rel=1e-12, abs=1e-14)
            assert terms.triplet[i] == pytest.approx(tl, rel=1e-12, abs=1e-14)
            assert terms.joint[i] == pytest.approx(el + 0.7 * tl, rel=1e-12, abs=1e-14)

    def test_lambda_zero_is_energy_only(self):
        p = random_params(5)
        batch = random_batch(5)
        terms = en.joint_terms(batch, p, lambda_t=0.0)
        np.testing.assert_array_equal(terms.joint, terms.energy)
        # changing the positive branch cannot matter without the triplet term
        other = SiameseBatch(batch.x_fa, batch.x_gt, batch.x_pos * 0.0, batch.x_neg)
        _, g1, _ = en.joint_loss_batch(batch, p, lambda_t=0.0)
        _, g2, _ = en.joint_loss_batch(other, p, lambda_t=0.0)
        for a in ("w1", "b1", "w2", "b2", "wf"):
            np.testing.assert_array_equal(getattr(g1, a), getattr(g2, a))

    @pytest.mark.parametrize("seed", range(3))
    def test_joint_gradient_finite_differences(self, seed):
        p = random_params(seed)
        batch = random_batch(seed + 10)
        _, grads, _ = en.joint_loss_batch(batch, p, 1.0, 0.5, 1.0)
        loss = lambda: en.joint_loss_batch(batch, p, 1.0, 0.5, 1.0)[0]
        for a in ("w1", "b1", "w2", "b2", "wf"):
            num = central_diff(loss, getattr(p, a))
            np.testing.assert_allclose(getattr(grads, a), num, rtol=1e-5, atol=1e-7, err_msg=a)

    def test_energy_gradient_finite_differences(self):
        p = random_params(7)
        x = np.random.default_rng(7).random(12)
        e = lambda: float(p.wf @ en.embed(x[:9], x[9:], p))
        # energy is linear in wf: gradient is the embedding
        np.testing.assert_allclose(central_diff(e, p.wf), en.embed(x[:9], x[9:], p), rtol=1e-7, atol=1e-9)

    def test_four_branches_share_weights(self):
        p = random_params(8)
        batch = random_batch(8, b=3)
        terms = en.joint_terms(batch, p)
        for i in range(3):
            single = en.joint_terms(batch.take([i]), p)
            assert single.joint[0] == terms.joint[i]

    def test_item_loss(self):
        vocab = embedding.one_hot_vocabulary(["a", "b", "c"])
        p = random_params(9)
        rng = np.random.default_rng(9)
        item = SiameseItem(rng.random((3, 3, 3)), 0, 2, rng.random((3, 3)), rng.random((3, 3)), 1)
        loss, grads = en.joint_loss(item, p, vocab)
        batch = item.to_batch(vocab)
        np.testing.assert_array_equal(batch.x_fa[0, 9:], [0, 0, 1])
        assert loss == pytest.approx(en.joint_terms(batch, p).joint[0])
        assert grads.w1.shape == p.w1.shape

    def test_item_validation(self):
        m = np.zeros((3, 2, 2))
        with pytest.raises(ValueError, match="false concept"):
            SiameseItem(m, 1, 1, m[0], m[0], 2)
        with pytest.raises(ValueError, match="negative"):
            SiameseItem(m, 1, 0, m[0], m[0], 1)


class TestSGD:
    def test_update_rule(self):
        p = hand_params()
        g = en.EnergyNetGrads(*(np.ones_like(a) for a in p.arrays()))
        q = en.sgd_update(p, g, lr=0.1, wd=0.5)
        np.testing.assert_allclose(q.w1, p.w1 - 0.1 * (1 + 0.5 * p.w1))
        np.testing.assert_allclose(q.b2, p.b2 - 0.1)
        np.testing.assert_allclose(q.wf, p.wf - 0.1 * (1 + 0.5 * p.wf))

    def test_non_finite_gradient(self):
        p = hand_params()
        g = en.EnergyNetGrads(*(np.ones_like(a) for a in p.arrays()))
        g.b1[0] = np.nan
        with pytest.raises(en.TrainingDiverged):
            en.sgd_update(p, g, 0.1, 0.0)


class TestMining:
    def test_top_k_plus_random(self):
        losses = [0.1, 0.9, 0.5, 0.9, 0.0, 0.3]
        idx = en.mine_hard_negatives(losses, 3, 2, np.random.default_rng(0))
        np.testing.assert_array_equal(idx[:3], [1, 3, 2])
        assert len(set(idx)) == 5
        assert set(idx[3:]) <= {0, 4, 5}

    def test_top_two(self):
        idx = en.mine_hard_negatives([0.1, 0.9, 0.5, 0.0], 2, 0, np.random.default_rng(0))
        np.testing.assert_array_equal(idx, [1, 2])

    def test_whole_pool(self):
        idx = en.mine_hard_negatives([0.1, 0.9, 0.5, 0.0], 4, 0, np.random.default_rng(0))
        assert sorted(idx) == [0, 1, 2, 3]

    def test_no_random(self):
        idx = en.mine_hard_negatives([3.0, 1.0, 2.0], 2, 0, np.random.default_rng(0))
        np.testing.assert_array_equal(idx, [0, 2])

    def test_pool_too_small(self):
        with pytest.raises(ValueError, match="smaller"):
            en.mine_hard_negatives([1.0, 2.0], 2, 1, np.random.default_rng(0))

    def test_seeded(self):
        losses = np.random.default_rng(1).random(32)
        a = en.mine_hard_negatives(losses, 16, 4, np.random.default_rng(5))
        b = en.mine_hard_negatives(losses, 16, 4, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_grow_schedule(self):
        s = MiningState()
        assert en.grow_schedule(s, 0.6) is s
        assert en.grow_schedule(s, 0.5) is s
        g = en.grow_schedule(s, 0.4)
        assert g.batch_size == 256 and g.grown
        assert en.grow_schedule(g, 10.0).batch_size == 256

    def test_state_validation(self):
        with pytest.raises(ValueError):
            MiningState(batch_size=10, k=16, r=4)


class TestTraining:
    CFG = EnergyNetConfig(lr=0.01, epochs=20)

    def test_separable_fixture(self):
        accs, frame_rates = [], []
        for s in range(5):
            res = en.train_energynet(separable_samples(s), VOCAB4, EnergyNetConfig(lr=0.01, epochs=20, seed=s))
            test = synthdata.separable_maps(videos_per_class=8, seed=100 + s)
            accs.append(np.mean([en.classify_energynet(st, VOCAB4, res.params)[0] == lab for _, lab, st in test]))
            ok = []
            for _, lab, st in test:
                e = en.energy_table(st, VOCAB4, res.params)
                ok.extend(e[:, lab] > np.delete(e, lab, axis=1).max(axis=1))
            frame_rates.append(np.mean(ok))
        assert np.median(accs) >= 0.95
        assert np.median(frame_rates) >= 0.95

    def test_zero_epochs(self):
        cfg = EnergyNetConfig(epochs=0, seed=3)
        res = en.train_energynet(separable_samples(0), VOCAB4, cfg)
        assert res.log == []
        assert res.params.equal(en.init_energynet(25, 4, cfg.hidden, cfg.d, 3))

    def test_deterministic(self):
        a = en.train_energynet(separable_samples(0), VOCAB4, EnergyNetConfig(lr=0.01, epochs=3))
        b = en.train_energynet(separable_samples(0), VOCAB4, EnergyNetConfig(lr=0.01, epochs=3))
        assert a.params.equal(b.params)
        assert a.log == b.log

    def test_loss_decreases_and_pool_grows(self):
        res = en.train_energynet(separable_samples(1), VOCAB4, self.CFG)
        losses = [e["joint_loss"] for e in res.log]
        assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])
        assert res.log[0]["batch_size"] == 32
        assert res.log[-1]["batch_size"] == 256
        assert set(res.log[0]) == {"iter", "joint_loss", "energy_loss", "triplet_loss", "batch_size"}

    def test_single_class_rejected(self):
        samples = [s for s in separable_samples(0) if s.label == 0]
        with pytest.raises(ValueError, match="two classes"):
            en.train_energynet(samples, VOCAB4, self.CFG)

    def test_class_without_partner_is_excluded(self, caplog):
        samples = separable_samples(0)
        lone = [s for s in samples if s.label == 3][:1]
        samples = [s for s in samples if s.label != 3] + lone
        with caplog.at_level(logging.WARNING):
            en.train_energynet(samples, VOCAB4, EnergyNetConfig(epochs=1))
        assert "[3]" in caplog.text

    def test_empty(self):
        with pytest.raises(ValueError):
            en.train_energynet([], VOCAB4, self.CFG)


class TestClassifyAndFiles:
    def test_table_matches_single_calls(self):
        p = en.init_energynet(25, 4, 8, 4, seed=1)
        stacks = synthdata.separable_maps(seed=1)[0][2][:2]
        table = en.energy_table(stacks, VOCAB4, p)
        for f in range(2):
            for c in range(4):
                assert table[f, c] == en.energy_net(stacks[f, c], c, VOCAB4, p)

    def test_single_frame_score_is_energy(self):
        p = en.init_energynet(25, 4, 8, 4, seed=2)
        stacks = synthdata.separable_maps(seed=2)[0][2][:1]
        _, table = en.classify_energynet(stacks, VOCAB4, p)
        for c in range(4):
            assert table.scores[c] == en.energy_net(stacks[0, c], c, VOCAB4, p)

    def test_mean_then_argmax_oracle(self):
        p = en.init_energynet(25, 4, 8, 4, seed=5)
        rng = np.random.default_rng(5)
        for _ in range(5):
            stacks = rng.random((3, 4, 5, 5))
            e = [[en.energy_net(stacks[f, c], c, VOCAB4, p) for c in range(4)] for f in range(3)]
            means = [sum(e[f][c] for f in range(3)) / 3 for c in range(4)]
            winner, table = en.classify_energynet(stacks, VOCAB4, p)
            assert winner == max(range(4), key=lambda c: (means[c], -c))
            np.testing.assert_allclose(table.scores, means, rtol=1e-12)

    def test_classify_mean_and_ties(self):
        p = en.init_energynet(25, 4, 8, 4, seed=1)
        stacks = synthdata.separable_maps(seed=2)[3][2]
        winner, table = en.classify_energynet(stacks, VOCAB4, p)
        np.testing.assert_allclose(table.scores, en.energy_table(stacks, VOCAB4, p).mean(0))
        assert winner == int(np.argmax(table.scores))
        p.wf[:] = 0.0
        assert en.classify_energynet(stacks, VOCAB4, p)[0] == 0
        with pytest.raises(ValueError):
            en.classify_energynet(np.zeros((0, 4, 5, 5)), VOCAB4, p)

    def test_checkpoint_round_trip(self, tmp_path):
        p = random_params(3)
        p.seed = 17
        path = tmp_path / "e.aten"
        en.save_energynet(path, p)
        q = en.load_energynet(path)
        assert q.equal(p) and q.dim_c == 3 and q.seed == 17
        assert en.dumps_energynet(q) == path.read_bytes()
        assert path.read_bytes()[:4] == b"ATEN"

    def test_checkpoint_rejects_garbage(self):
        data = en.dumps_energynet(random_params())
        with pytest.raises(ValueError, match="magic"):
            en.loads_energynet(b"ATNW" + data[4:])
        with pytest.raises(ValueError, match="version"):
            en.loads_energynet(data[:4] + (2).to_bytes(4, "little") + data[8:])
        with pytest.raises(ValueError, match="trailing"):
            en.loads_energynet(data + b"\0" * 8)

    def test_write_log(self, tmp_path):
        path = tmp_path / "log.jsonl"
        en.write_log(path, [{"iter": 0, "joint_loss": 1.5}])
        assert path.read_text() == '{"iter": 0, "joint_loss": 1.5}\n'
