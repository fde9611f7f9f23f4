import math
from dataclasses import replace

import numpy as np
import pytest

from dmu import numerics as nx
from dmu.data import generate_synthetic, make_bench, make_split
from dmu.engine import (DivergenceError, TrainConfig, lr_at, sequential_upgrade, sgd_step, sub_seed,
                        train, train_bct, train_dmu, train_standalone)
from dmu.losses import dmu_objective
from dmu.models import INFER, TRAIN

TINY = TrainConfig(epochs=3, batch_size=16, hidden=(16,), embedding_dim=8, adapter_hidden=16,
                   s=8.0, m=0.2)


@pytest.fixture(scope="module")
def split():
    ds = generate_synthetic(4, 24, 6, 0.3, 0.3, seed=1)
    return make_split(ds, "extended_data", 0.5, seed=1)


@pytest.fixture(scope="module")
def old_run(split):
    return train_standalone(split.old_set, replace(TINY, method="old"))


def params_of(model):
    return {k: v.copy() for k, v in model.params.items()}


class TestSgdStep:
    def test_plain_step(self):
        p = {"w": np.array([1.0])}
        sgd_step(p, {"w": np.array([0.5])}, 0.1, 0.0, 0.0, {})
        assert p["w"][0] == pytest.approx(0.95)

    def test_zero_grad_no_decay(self):
        p = {"w": np.array([[1.0, -2.0]])}
        sgd_step(p, {"w": np.zeros((1, 2))}, 0.1, 0.9, 0.0, {})
        np.testing.assert_array_equal(p["w"], [[1.0, -2.0]])

    def test_two_momentum_steps(self):
        p, vel = {"w": np.array([1.0])}, {}
        g1, g2, lr, mu, wd = 0.5, -0.2, 0.1, 0.9, 0.01
        sgd_step(p, {"w": np.array([g1])}, lr, mu, wd, vel)
        sgd_step(p, {"w": np.array([g2])}, lr, mu, wd, vel)
        v1 = g1 + wd * 1.0
        w1 = 1.0 - lr * v1
        v2 = mu * v1 + g2 + wd * w1
        assert p["w"][0] == pytest.approx(w1 - lr * v2, abs=1e-15)

    def test_no_decay_names(self):
        p = {"a.gamma": np.array([1.0])}
        sgd_step(p, {"a.gamma": np.array([0.0])}, 0.1, 0.0, 0.5, {}, frozenset({"a.gamma"}))
        assert p["a.gamma"][0] == 1.0

    def test_non_finite_gradient(self):
        with pytest.raises(DivergenceError):
            sgd_step({"w": np.ones(1)}, {"w": np.array([np.nan])}, 0.1, 0.0, 0.0, {})


class TestSchedule:
    def test_ramp_start_and_end(self):
        assert lr_at(0, 100, 10, 0.1) == pytest.approx(0.01)
        assert lr_at(9, 100, 10, 0.1) == pytest.approx(0.1)

    def test_continuous_at_boundary(self):
        assert lr_at(10, 100, 10, 0.1) == pytest.approx(0.1)

    def test_final_step(self):
        assert lr_at(99, 100, 10, 0.1) == pytest.approx(0.0, abs=1e-7)

    def test_midpoint(self):
        # post-warmup span 0..89 → progress 0.5 at step 10 + 44.5
        assert lr_at(10, 101, 10, 1.0) == pytest.approx(1.0)
        assert lr_at(55, 101, 10, 1.0) == pytest.approx(0.5)

    def test_no_warmup(self):
        assert lr_at(0, 5, 0, 0.2) == pytest.approx(0.2)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(5, 5, 1, 0.1)


class TestConfig:
    def test_paper_defaults(self):
        c = TrainConfig()
        assert (c.momentum, c.weight_decay, c.epochs, c.warmup_epochs, c.base_lr) == \
            (0.9, 1e-4, 30, 1, 0.1)

    def test_bad_method(self):
        with pytest.raises(ValueError):
            TrainConfig(method="focal")

    def test_sub_seeds_differ(self):
        assert sub_seed(0, "encoder") != sub_seed(0, "adapter")


class TestStandalone:
    def test_trace_length_and_finite(self, old_run):
        assert len(old_run.trace) == 3
        assert all(math.isfinite(r["l_new"]) for r in old_run.trace)

    def test_deterministic(self, split, old_run):
        again = train_standalone(split.old_set, replace(TINY, method="old"))
        for k, v in old_run.encoder.params.items():
            assert v.tobytes() == again.encoder.params[k].tobytes()

    def test_loss_decreases_on_separable_data(self):
        ds = generate_synthetic(3, 40, 4, 0.05, 0.0, seed=0)
        run = train_standalone(ds, replace(TINY, method="oracle", epochs=8))
        losses = [r["l_new"] for r in run.trace]
        assert np.mean(losses[-3:]) < np.mean(losses[:3])

    def test_wrong_method(self, split):
        with pytest.raises(ValueError):
            train_standalone(split.old_set, replace(TINY, method="bct"))

    def test_needs_old_model(self, split):
        with pytest.raises(ValueError):
            train(split.new_set, replace(TINY, method="dmu"))


class TestCompatible:
    def test_old_model_untouched(self, split, old_run):
        before = params_of(old_run.encoder)
        protos = old_run.classifier.prototypes.copy()
        buffers = {k: v.copy() for k, v in old_run.encoder.buffers.items()}
        train_dmu(split.new_set, old_run, replace(TINY, method="dmu"))
        train_bct(split.new_set, old_run, replace(TINY, method="bct"))
        for k, v in before.items():
            np.testing.assert_array_equal(old_run.encoder.params[k], v)
        for k, v in buffers.items():
            np.testing.assert_array_equal(old_run.encoder.buffers[k], v)
        np.testing.assert_array_equal(old_run.classifier.prototypes, protos)

    def test_bct_without_constraint_is_oracle(self, split, old_run):
        orc = train_standalone(split.new_set, replace(TINY, method="oracle"))
        bct = train_bct(split.new_set, old_run, replace(TINY, method="bct", coef_compat=0.0))
        for k, v in orc.encoder.params.items():
            np.testing.assert_array_equal(bct.encoder.params[k], v)

    def test_dmu_ablation_is_oracle(self, split, old_run):
        orc = train_standalone(split.new_set, replace(TINY, method="oracle"))
        dmu = train_dmu(split.new_set, old_run,
                        replace(TINY, method="dmu", coef_compat=0.0, coef_fa=0.0))
        for k, v in orc.encoder.params.items():
            np.testing.assert_array_equal(dmu.encoder.params[k], v)

    def test_dmu_outputs_and_lambda(self, split, old_run):
        run = train_dmu(split.new_set, old_run, replace(TINY, method="dmu"))
        assert run.adapter is not None and run.generation == 1
        assert all(r["lambda_sum_dev"] < 1e-9 for r in run.trace)
        assert all(r["l_fa"] > 0 and r["l_sbc"] > 0 for r in run.trace)

    def test_bct_has_no_adapter(self, split, old_run):
        assert train_bct(split.new_set, old_run, replace(TINY, method="bct")).adapter is None

    def test_wrong_dispatch(self, split, old_run):
        with pytest.raises(ValueError):
            train_bct(split.new_set, old_run, replace(TINY, method="dmu"))
        with pytest.raises(ValueError):
            train_dmu(split.new_set, old_run, replace(TINY, method="bct"))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_step(self, split, old_run):
        with pytest.raises(DivergenceError) as err:
            train_dmu(split.new_set, old_run, replace(TINY, method="dmu", base_lr=1e300))
        assert err.value.step >= 0


def test_joint_gradient_is_sum_of_terms(split, old_run):
    rng = np.random.default_rng(4)
    idx = rng.choice(len(split.new_set), 12, replace=False)
    x, y = split.new_set.vectors[idx], split.new_set.labels[idx]
    run = train_dmu(split.new_set, old_run, replace(TINY, method="dmu", epochs=1))
    cfg = replace(TINY, method="dmu")
    emb_old = old_run.encoder.encode(x, INFER)

    def grads(coefs):
        obj = replace(cfg, **coefs).objective()
        enc_l, ad_l = run.encoder.leaves(), run.adapter.leaves()
        cls_l = run.classifier.leaves()
        saved = [{k: v.copy() for k, v in m.buffers.items()} for m in (run.encoder, run.adapter)]
        emb = run.encoder.forward(x, TRAIN, enc_l)
        adapted = run.adapter.forward(emb_old, TRAIN, ad_l)
        loss, _ = dmu_objective(emb, y, cls_l["prototypes"], obj, emb_old=emb_old,
                                protos_old=old_run.classifier.prototypes,
                                old_labels=old_run.classifier.local_labels(y), adapted=adapted)
        nx.backward(loss)
        for m, buf in zip((run.encoder, run.adapter), saved):
            for k, v in m.buffers.items():
                v[...] = buf[k]
        out = {f"e/{k}": t.grad.copy() for k, t in enc_l.items()}
        out.update({f"a/{k}": t.grad.copy() for k, t in ad_l.items()})
        out["c"] = cls_l["prototypes"].grad.copy()
        return out

    joint = grads({})
    parts = [grads({"coef_compat": 0.0, "coef_fa": 0.0}),
             grads({"coef_new": 0.0, "coef_fa": 0.0}),
             grads({"coef_new": 0.0, "coef_compat": 0.0})]
    for k, g in joint.items():
        np.testing.assert_allclose(g, sum(p[k] for p in parts), atol=1e-10)


def test_sequence_bookkeeping():
    ds = generate_synthetic(4, 30, 6, 0.3, 0.3, seed=2)
    bench = make_bench(generate_synthetic(4, 12, 6, 0.3, 0.3, 2, sample_seed=1), 2, 2)
    res = sequential_upgrade(ds, bench, [0.3, 0.6, 0.9], ("bct", "dmu"),
                             replace(TINY, epochs=2, seed=5))
    assert [r.generation for r in res.reports["bct"]] == [1, 2]
    assert [r.gallery_version for r in res.reports["dmu"]] == [1, 2]
    assert [r.gallery_version for r in res.reports["bct"]] == [0, 0]
    assert res.galleries["dmu"].generation == 2
    for a, b in zip(res.runs["bct"], res.runs["dmu"]):
        assert a.config.seed == b.config.seed
    assert res.reports["bct"][0].m_cross == res.reports["bct"][0].m_cross_prev


def test_single_generation_sequence_matches_direct_training():
    ds = generate_synthetic(4, 30, 6, 0.3, 0.3, seed=2)
    bench = make_bench(generate_synthetic(4, 12, 6, 0.3, 0.3, 2, sample_seed=1), 2, 2)
    cfg = replace(TINY, epochs=2, seed=5)
    res = sequential_upgrade(ds, bench, [0.4, 0.8], ("bct",), cfg)
    from dmu.data import nested_subsets
    subs = nested_subsets(ds, [0.4, 0.8], 5)
    old = train_standalone(subs[0], replace(cfg, method="old", seed=5000))
    bct = train_bct(subs[1], old, replace(cfg, method="bct", seed=5001))
    for k, v in bct.encoder.params.items():
        np.testing.assert_array_equal(res.runs["bct"][0].encoder.params[k], v)
