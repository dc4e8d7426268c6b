import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fewshot_tc import numerics as nx
from fewshot_tc.dataio import (Dataset, Profile, SynthConfig, monolithic_split,
                               partition_by_popularity, synth_generate)
from fewshot_tc.episodes import Episode, test_episode_batch as make_test_batch
from fewshot_tc.errors import ConfigError
from fewshot_tc.nets import Encoder, EncoderSpec, head_params, init_relation_module, relation_scores
from fewshot_tc.numerics import Tensor
from fewshot_tc.trainers import (TrainConfig, distill, distill_loss, evaluate_episodes,
                                 finetune_episode, maml_adapt_evaluate, maml_objective,
                                 meta_train_maml, meta_train_protonet, meta_train_relationnet,
                                 protonet_loss, relation_loss, simclr_loss, supcon_loss,
                                 train_contrastive, train_monolithic, transfer_plain)
from fewshot_tc.trainers.meta import _classifier_loss

from oracles import central_fd, naive_kl, naive_simclr, naive_supcon, rel_err

TINY = EncoderSpec("cnn2", 4, 2, filters=(4, 4), latent_dim=8)


def toy_separable(n_per_class=20, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n_per_class)
    X = rng.normal(size=(len(y), 4, 2)) * 0.3
    X[:, :, 0] += np.where(y == 0, -2.0, 2.0)[:, None]
    return Dataset(X, y, None, Profile(4, 2))


@pytest.fixture(scope="module")
def synth_splits():
    d = synth_generate(SynthConfig(n_classes=12, samples_per_class_max=120, separability=10,
                                   seed=3))
    p = partition_by_popularity(d, 6, 2, 4)
    return tuple(d.subset(p.indices(s)) for s in ("train", "val", "test"))


@pytest.fixture(scope="module")
def source(synth_splits):
    fit, val = monolithic_split(synth_splits[0], seed=0)
    model, _ = train_monolithic(fit, val, EncoderSpec("cnn2", 10, 4), TrainConfig(epochs=1))
    return model


class TestConfig:
    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"temperature": 0.0},
                                    {"distill_temperature": 0.5}, {"distill_alpha": 1.5},
                                    {"lr": -1.0}, {"lr_policy": "cosine"},
                                    {"selection": "worst"}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainConfig.from_dict({"epochs": 2, "bogus": 1})


class TestContrastiveLosses:
    def test_hand_example(self):
        z = Tensor(np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        got = supcon_loss(z, [0, 0, 1], temperature=1.0).item()
        assert got == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
        assert got == pytest.approx(0.3133, abs=1e-4)

    @pytest.mark.parametrize("b", [1, 2, 5, 16])
    def test_identical_views(self, b):
        z = Tensor(np.tile([0.3, -1.2, 0.5], (2 * b, 1)))
        assert abs(simclr_loss(z, 0.1).item() - math.log(2 * b - 1)) < 1e-12
        assert abs(supcon_loss(z, np.zeros(2 * b), 0.1).item() - math.log(2 * b - 1)) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 4), st.floats(0.05, 2.0), st.integers(0, 10**6))
    def test_oracle(self, b, n_cls, tau, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(2 * b, 5))
        base = rng.integers(0, n_cls, size=b)
        labels = np.concatenate([base, base])
        assert abs(simclr_loss(Tensor(z), tau).item() - naive_simclr(z, tau)) < 1e-6
        assert abs(supcon_loss(Tensor(z), labels, tau).item()
                   - naive_supcon(z, labels, tau)) < 1e-6

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10**6))
    def test_supcon_reduces_to_simclr(self, b, seed):
        z = np.random.default_rng(seed).normal(size=(2 * b, 4))
        labels = np.concatenate([np.arange(b), np.arange(b)]) + 7
        assert supcon_loss(Tensor(z), labels, 0.2).item() == pytest.approx(
            simclr_loss(Tensor(z), 0.2).item(), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10**6))
    def test_non_negative(self, b, seed):
        z = np.random.default_rng(seed).normal(size=(2 * b, 3))
        assert simclr_loss(Tensor(z), 0.1).item() >= 0

    def test_bad_temperature(self):
        with pytest.raises(ConfigError):
            simclr_loss(Tensor(np.ones((2, 2))), 0.0)

    @pytest.mark.parametrize("supervised", [False, True])
    def test_gradient_matches_fd(self, supervised):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(8, 3))
        labels = np.array([0, 1, 0, 2, 0, 1, 0, 2])

        def f(a):
            t = Tensor(a)
            return (supcon_loss(t, labels, 0.5) if supervised else simclr_loss(t, 0.5)).item()

        zt = Tensor(z.copy(), requires_grad=True)
        loss = supcon_loss(zt, labels, 0.5) if supervised else simclr_loss(zt, 0.5)
        (g,) = nx.grad(loss, [zt])
        assert rel_err(g.data, central_fd(f, [z.copy()])[0]) < 1e-4


class TestDistillLoss:
    def test_equal_logits_zero_kl(self):
        logits = np.array([[1.0, -2.0, 0.5]])
        kl = distill_loss(Tensor(logits), logits, [0], alpha=0.0, temperature=4.0)
        assert abs(kl.item()) < 1e-12

    def test_alpha_one_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        s, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        y = [0, 2, 1, 1]
        assert distill_loss(Tensor(s), t, y, 1.0, 4.0).item() == pytest.approx(
            nx.cross_entropy(Tensor(s), y).item(), abs=1e-14)

    def test_hand_kl(self):
        # KL(softmax([2,0]) || softmax([0,2])) = 2 tanh(1)
        got = distill_loss(Tensor(np.array([[0.0, 2.0]])), np.array([[2.0, 0.0]]), [0],
                           alpha=0.0, temperature=1.0).item()
        assert got == pytest.approx(naive_kl([[2.0, 0.0]], [[0.0, 2.0]]), abs=1e-12)
        assert got == pytest.approx(2 * math.tanh(1.0), abs=1e-12)

    def test_temperature_weighting(self):
        rng = np.random.default_rng(2)
        s, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        got = distill_loss(Tensor(s), t, [0, 1, 2], 0.0, 3.0).item()
        assert got == pytest.approx(9.0 * naive_kl(t, s, 3.0), rel=1e-10)


class TestMonolithic:
    def test_separable_toy_reaches_full_train_accuracy(self):
        d = toy_separable()
        cfg = TrainConfig(epochs=50, batch_size=8, selection="last")
        model, history = train_monolithic(d, None, TINY, cfg)
        assert len(history) == 50
        with nx.no_grad():
            pred = np.argmax(nx.linear(Tensor(model.encoder.embed(d.X)),
                                       model.heads["linear"]["weight"],
                                       model.heads["linear"]["bias"]).data, axis=1)
        assert np.mean(pred == d.y) == 1.0

    def test_deterministic(self):
        d = toy_separable(seed=1)
        fit, val = monolithic_split(d, seed=0)
        cfg = TrainConfig(epochs=3, batch_size=8, seed=5)
        a, ha = train_monolithic(fit, val, TINY, cfg)
        b, hb = train_monolithic(fit, val, TINY, cfg)
        assert a.fingerprint() == b.fingerprint() and ha == hb
        assert len(ha) == 3 and all("val_bacc" in r for r in ha)

    def test_best_validation_epoch_published(self):
        d = toy_separable(seed=2)
        fit, val = monolithic_split(d, seed=0)
        _, history = train_monolithic(fit, val, TINY, TrainConfig(epochs=4, batch_size=8))
        assert max(r["val_bacc"] for r in history) >= history[-1]["val_bacc"]

    def test_class_embedding_head(self):
        model, _ = train_monolithic(toy_separable(), None, TINY,
                                    TrainConfig(method="baseline_ce", epochs=1))
        assert set(model.heads) == {"class_embedding"}
        assert set(model.heads["class_embedding"]) == {"weight"}

    def test_published_model_is_read_only(self):
        model, _ = train_monolithic(toy_separable(), None, TINY, TrainConfig(epochs=1))
        with pytest.raises(ValueError):
            model.encoder.params["fc.bias"].data[0] = 1.0


def duplicated_episode():
    rng = np.random.default_rng(0)
    base = rng.normal(size=(6, 10, 4))
    X = np.concatenate([base, base])
    y = np.concatenate([[0, 0, 1, 1, 2, 2]] * 2)
    d = Dataset(X, y, None, Profile(10, 4))
    ep = Episode((0, 1, 2), np.array([0, 1, 2, 3, 4, 5]), np.array([6, 7, 8, 9, 10, 11]),
                 2, 2, "test", "dup")
    return d, ep


class TestFinetune:
    @pytest.mark.parametrize("head", ["nearest_neighbor", "prototype"])
    def test_memorization(self, head):
        d, ep = duplicated_episode()
        enc_model = _random_source()
        # with S=2 distinct supports per class, the prototype of a class need not
        # coincide with a query; use S=1 for the prototype head
        if head == "prototype":
            ep = Episode((0, 1, 2), np.array([0, 2, 4]), np.array([6, 8, 10]), 1, 1, "test", "p")
        assert finetune_episode(enc_model, ep, d, head) == 1.0

    @pytest.mark.parametrize("head", ["linear", "class_embedding", "logistic",
                                      "nearest_neighbor", "prototype", "maml"])
    def test_trunk_bit_identical(self, source, synth_splits, head):
        te = synth_splits[2]
        before = source.fingerprint()
        ep = make_test_batch(te, 4, 5, 5, 1, seed=0)[0]
        acc = finetune_episode(source, ep, te, head, TrainConfig(finetune_steps=10,
                                                                  inner_steps=2))
        assert 0.0 <= acc <= 1.0
        assert source.fingerprint() == before

    def test_transfer_plain_trunk_bit_identical(self, source, synth_splits):
        te = synth_splits[2]
        before = source.fingerprint()
        _, h = transfer_plain(source, te, te, TrainConfig(epochs=2))
        assert source.fingerprint() == before
        assert sum(v.size for v in h.values()) == head_params(200, 4)

    def test_high_separability_nn(self, source, synth_splits):
        te = synth_splits[2]
        eps = make_test_batch(te, 4, 50, 20, 5, seed=1)
        assert np.mean(evaluate_episodes(source, eps, te, "nearest_neighbor")) >= 0.9

    def test_degenerate_transfer_equals_finetune(self, source, synth_splits):
        te = synth_splits[2]
        ep = make_test_batch(te, 4, 5, 5, 1, seed=3)[0]
        cfg = TrainConfig(epochs=100, batch_size=10_000, finetune_steps=100)
        support = Dataset(te.X[ep.support_idx], ep.support_labels, None, te.profile)
        query = Dataset(te.X[ep.query_idx], ep.query_labels, None, te.profile)
        acc_tl, _ = transfer_plain(source, support, query, cfg, init_key=ep.episode_id)
        assert acc_tl == pytest.approx(finetune_episode(source, ep, te, "linear", cfg))

    def test_unknown_head(self, source, synth_splits):
        te = synth_splits[2]
        ep = make_test_batch(te, 2, 1, 1, 1, seed=0)[0]
        with pytest.raises(ConfigError):
            finetune_episode(source, ep, te, "svm")


def _random_source():
    from fewshot_tc.trainers import publish
    return publish(Encoder(EncoderSpec("cnn2", 10, 4), seed=0), "none", TrainConfig())


class TestProtoNet:
    def test_identical_embeddings_give_log_n(self):
        for n in (2, 4, 7):
            z = Tensor(np.ones((n * 2, 3)))
            ys, yq = np.repeat(np.arange(n), 2), np.arange(n)
            loss = protonet_loss(z, ys, Tensor(np.ones((n, 3))), yq, n)
            assert loss.item() == pytest.approx(math.log(n), abs=1e-12)

    def test_lr_halving(self):
        d = toy_separable(8)
        cfg = TrainConfig(epochs=21, episodes_per_epoch=1, ways=2, shots=1, queries=1,
                          lr=1e-3, val_episodes=0)
        _, history = meta_train_protonet(d, None, TINY, cfg)
        lrs = {r["epoch"]: r["lr"] for r in history}
        assert lrs[0] == 1e-3 and lrs[10] == 5e-4 and lrs[20] == 2.5e-4

    def test_end_to_end_high_separability(self, synth_splits):
        tr, va, te = synth_splits
        cfg = TrainConfig(epochs=2, episodes_per_epoch=30, ways=4, shots=5, queries=10,
                          val_episodes=10)
        model, _ = meta_train_protonet(tr, va, EncoderSpec("cnn2", 10, 4), cfg)
        eps = make_test_batch(te, 4, 5, 15, 20, seed=2)
        assert np.mean(evaluate_episodes(model, eps, te, "prototype")) >= 0.85


class TestRelationNet:
    def test_perfect_scores_zero_loss_and_gradient(self):
        target = np.eye(3)[[0, 2, 1]]
        pred = Tensor(target.copy(), requires_grad=True)
        loss = nx.mse(pred, target)
        (g,) = nx.grad(loss, [pred])
        assert loss.item() == 0.0 and np.all(g.data == 0.0)

    def test_untrained_scores_in_unit_interval(self):
        rng = np.random.default_rng(0)
        mod = init_relation_module(8, rng)
        s = relation_scores(mod, rng.normal(size=(4, 8)) * 30, rng.normal(size=(6, 8)) * 30).data
        assert np.all((s >= 0) & (s <= 1))

    def test_loss_decreases(self, synth_splits):
        tr = synth_splits[0]
        drops = []
        for seed in range(5):
            cfg = TrainConfig(epochs=5, episodes_per_epoch=10, ways=3, shots=2, queries=3,
                              val_episodes=0, seed=seed, selection="last")
            _, history = meta_train_relationnet(tr, None, EncoderSpec("cnn2", 10, 4,
                                                                      filters=(8, 8),
                                                                      latent_dim=32), cfg)
            drops.append(history[-1]["loss"] - history[0]["loss"])
        assert np.median(drops) < 0

    def test_relation_loss_uniform_half(self):
        module = {"w1": Tensor(np.zeros((4, 3))), "b1": Tensor(np.zeros(3)),
                  "w2": Tensor(np.zeros((3, 1))), "b2": Tensor(np.zeros(1))}
        zs = Tensor(np.ones((4, 2)))
        loss = relation_loss(module, zs, [0, 0, 1, 1], Tensor(np.ones((2, 2))), [0, 1], 2)
        assert loss.item() == pytest.approx(0.25)


class TestMAML:
    @staticmethod
    def scalar_loss(ps, batch):
        x, y = batch
        return (ps[0] * x - y) ** 2

    def test_scalar_closed_form(self):
        w = Tensor(0.0, requires_grad=True)
        holder = {}

        def builder(ps):
            holder["loss"] = maml_objective(self.scalar_loss, ps, (1.0, 1.0), (1.0, 1.0), 1, 0.5)
            return holder["loss"]

        (g,) = nx.higher_order_grad(builder, [w])
        assert holder["loss"].item() == 0.0 and g.item() == 0.0

    def test_zero_inner_steps_is_plain_training(self):
        w = Tensor(0.7, requires_grad=True)
        (g,) = nx.higher_order_grad(
            lambda ps: maml_objective(self.scalar_loss, ps, (1.0, 1.0), (2.0, 3.0), 0, 0.5), [w])
        assert g.item() == pytest.approx(2 * (0.7 * 2 - 3) * 2)

    def test_encoder_pipeline_matches_fd(self):
        spec = EncoderSpec("cnn2", 3, 2, filters=(2,), latent_dim=3)
        enc = Encoder(spec, seed=1)
        rng = np.random.default_rng(0)
        head = {"head/weight": rng.normal(size=(3, 2)) * 0.5, "head/bias": np.zeros(2)}
        names = list(enc.params) + list(head)
        arrays = [enc.params[k].data.copy() for k in enc.params] + list(head.values())
        loss_fn = _classifier_loss(enc, names)
        support = (rng.normal(size=(4, 3, 2)), np.array([0, 1, 0, 1]))
        query = (rng.normal(size=(4, 3, 2)), np.array([1, 0, 0, 1]))

        def pipeline(*arrs):
            ps = [Tensor(a, requires_grad=True) for a in arrs]
            return maml_objective(loss_fn, ps, support, query, 2, 0.1).item()

        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        got = nx.higher_order_grad(
            lambda ps: maml_objective(loss_fn, ps, support, query, 2, 0.1), leaves)
        ref = central_fd(pipeline, [a.copy() for a in arrays], h=1e-6)
        assert max(rel_err(g.data, r) for g, r in zip(got, ref)) < 1e-3

    def test_meta_train_and_fresh_head_meta_test(self, synth_splits):
        tr, _, te = synth_splits
        spec = EncoderSpec("cnn2", 10, 4, filters=(4, 4), latent_dim=16)
        cfg = TrainConfig(epochs=1, episodes_per_epoch=3, ways=2, shots=2, queries=2,
                          val_episodes=0, inner_steps=2, lr=1e-4)
        model, history = meta_train_maml(tr, None, spec, cfg)
        assert history[0]["skipped"] == 0 and np.isfinite(history[0]["loss"])
        before = model.fingerprint()
        ep = make_test_batch(te, 4, 3, 3, 1, seed=0)[0]   # test ways differ from train ways
        acc = maml_adapt_evaluate(model, ep, te, cfg)
        assert 0.0 <= acc <= 1.0 and model.fingerprint() == before


class TestContrastive:
    def test_unsupervised_ignores_labels(self):
        d = toy_separable(6)
        shuffled = Dataset(d.X, d.y[::-1], None, d.profile)
        cfg = TrainConfig(method="simclr", epochs=1, batch_size=4)
        a, ha = train_contrastive(d, None, TINY, None, cfg)
        b, hb = train_contrastive(shuffled, None, TINY, None, cfg)
        assert a.fingerprint() == b.fingerprint() and ha == hb

    def test_supervised_reads_labels(self):
        d = toy_separable(6)
        shuffled = Dataset(d.X, np.tile([0, 1], 6), None, d.profile)
        cfg = TrainConfig(method="supcon", epochs=1, batch_size=4, supervised=True)
        a, _ = train_contrastive(d, None, TINY, None, cfg)
        b, _ = train_contrastive(shuffled, None, TINY, None, cfg)
        assert a.fingerprint() != b.fingerprint()

    def test_finite_losses_and_class_embedding(self, synth_splits):
        fit, val = monolithic_split(synth_splits[0], seed=0)
        cfg = TrainConfig(method="supcon_ce", epochs=1, batch_size=16, supervised=True,
                          class_embedding=True)
        model, history = train_contrastive(fit, val, EncoderSpec("cnn2", 10, 4, filters=(4, 4),
                                                                 latent_dim=16), None, cfg)
        assert np.isfinite(history[0]["loss"]) and 0 <= history[0]["val_bacc"] <= 1
        assert "class_embedding" in model.heads


class TestDistill:
    def test_student_differs_and_teacher_untouched(self, source, synth_splits):
        fit, val = monolithic_split(synth_splits[0], seed=0)
        before = source.fingerprint()
        student, history = distill(source, fit, val, TrainConfig(epochs=1, method="rfs_distill"))
        assert source.fingerprint() == before
        assert student.fingerprint() != before
        assert history[0]["val_bacc"] > 0.5
