import math

import numpy as np
import pytest

from gradcheck import assert_grad_matches
from otalign.exceptions import RejectedInputError
from otalign.losses import focal_loss_logits, report_nll, report_nll_logits
from otalign.model import (
    LabelClassifier,
    LoraAdapter,
    ProjectionHead,
    ToyGenerator,
    classifier_backward,
    classifier_logits,
    classify,
    fuse_backward,
    fuse_prompt,
    generator_backward,
    generator_logits,
    generator_step_distributions,
    init_sentinels,
    load_checkpoint,
    lora_backward,
    lora_forward,
    project,
    project_backward,
    save_checkpoint,
)
from otalign.numerics import SeededRng

SEEDS = range(20)


def loop_project(W, b, X):
    return np.array([[sum(W[o][i] * x[i] for i in range(len(x))) + b[o] for o in range(len(b))] for x in X])


def head(rng, d_in, d_out):
    return ProjectionHead(rng.normal(size=(d_out, d_in)), rng.normal(size=d_out))


class TestProject:
    def test_identity(self):
        X = np.random.default_rng(0).normal(size=(4, 3))
        assert np.array_equal(project(ProjectionHead(np.eye(3), np.zeros(3)), X), X)

    def test_zero_weight(self):
        c = np.array([1.5, -2.0])
        out = project(ProjectionHead(np.zeros((2, 3)), c), np.ones((5, 3)))
        assert all(np.array_equal(r, c) for r in out)

    def test_loop_oracle(self):
        rng = np.random.default_rng(1)
        h, X = head(rng, 2, 3), rng.normal(size=(4, 2))
        np.testing.assert_allclose(project(h, X), loop_project(h.weight, h.bias, X), rtol=0, atol=1e-12)

    def test_affine(self):
        rng = np.random.default_rng(2)
        h = head(rng, 3, 2)
        X, Y = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        for a in (0.0, 0.3, 1.7):
            np.testing.assert_allclose(project(h, a * X + (1 - a) * Y),
                                       a * project(h, X) + (1 - a) * project(h, Y), atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(RejectedInputError):
            project(ProjectionHead(np.eye(3), np.zeros(3)), np.ones((2, 4)))

    def test_init(self):
        h = ProjectionHead.init(500, 200, SeededRng(0))
        assert np.all(h.bias == 0)
        assert abs(h.weight.std() - 0.02) < 0.001

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        h, X, G = head(rng, 3, 4), rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
        g = project_backward(h, X, G)
        assert_grad_matches(lambda W: np.sum(G * project(ProjectionHead(W, h.bias), X)), h.weight, g["weight"])
        assert_grad_matches(lambda b: np.sum(G * project(ProjectionHead(h.weight, b), X)), h.bias, g["bias"])
        assert_grad_matches(lambda Z: np.sum(G * project(h, Z)), X, g["input"])


class TestLora:
    def test_zero_a_is_base(self):
        rng = np.random.default_rng(0)
        W = rng.normal(size=(5, 7))
        ad = LoraAdapter.init(W, 3, SeededRng(0))
        assert np.all(ad.a == 0)
        for _ in range(20):
            x = rng.normal(size=7)
            assert np.array_equal(lora_forward(ad, x), W @ x)

    def test_full_rank_cancellation(self):
        rng = np.random.default_rng(1)
        W = rng.normal(size=(4, 6))
        ad = LoraAdapter(W, -np.eye(4), W)
        assert ad.rank == 4
        np.testing.assert_allclose(lora_forward(ad, rng.normal(size=6)), 0.0, atol=1e-12)

    def test_dense_oracle(self):
        rng = np.random.default_rng(2)
        W, A, B = rng.normal(size=(8, 8)), rng.normal(size=(8, 2)), rng.normal(size=(2, 8))
        ad = LoraAdapter(W, A, B)
        X = rng.normal(size=(6, 8))
        np.testing.assert_allclose(lora_forward(ad, X), X @ (W + A @ B).T, rtol=0, atol=1e-12)
        np.testing.assert_allclose(lora_forward(ad, X[0]), (W + A @ B) @ X[0], rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_update_in_column_span(self, seed):
        rng = np.random.default_rng(seed)
        ad = LoraAdapter(rng.normal(size=(9, 7)), rng.normal(size=(9, 2)), rng.normal(size=(2, 7)))
        y = ad.delta() @ rng.normal(size=7)
        coef, *_ = np.linalg.lstsq(ad.a, y, rcond=None)
        assert np.linalg.norm(ad.a @ coef - y) <= 1e-8
        assert np.linalg.matrix_rank(ad.delta()) <= 2

    @pytest.mark.parametrize("r", [0, 5])
    def test_rank_bounds(self, r):
        with pytest.raises(RejectedInputError):
            LoraAdapter.init(np.zeros((4, 6)), r, SeededRng(0))

    def test_base_read_only(self):
        ad = LoraAdapter.init(np.ones((3, 3)), 1, SeededRng(0))
        with pytest.raises(ValueError):
            ad.base_weight[0, 0] = 2.0

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        W, A, B = rng.normal(size=(4, 5)), rng.normal(size=(4, 2)), rng.normal(size=(2, 5))
        ad = LoraAdapter(W, A, B)
        X, G = rng.normal(size=(3, 5)), rng.normal(size=(3, 4))
        g = lora_backward(ad, X, G)
        assert_grad_matches(lambda a: np.sum(G * lora_forward(LoraAdapter(W, a, B), X)), A, g["a"])
        assert_grad_matches(lambda b: np.sum(G * lora_forward(LoraAdapter(W, A, b), X)), B, g["b"])
        assert_grad_matches(lambda Z: np.sum(G * lora_forward(ad, Z)), X, g["input"])


class TestClassifier:
    def test_zero_weights_uniform(self):
        clf = LabelClassifier([ProjectionHead(np.zeros((56, 5)), np.zeros(56))])
        assert np.all(classify(clf, np.ones((3, 5))) == 0.25)
        assert classify(clf, np.ones(5)).shape == (56,)

    def test_dimension_mismatch(self):
        clf = LabelClassifier.init(5, SeededRng(0))
        with pytest.raises(RejectedInputError):
            classify(clf, np.ones((2, 4)))

    def test_no_cross_sample_leakage(self):
        clf = LabelClassifier.init(6, SeededRng(1), hidden=8)
        X = np.random.default_rng(0).normal(size=(7, 6))
        full = classify(clf, X)
        perm = np.random.default_rng(1).permutation(7)
        np.testing.assert_array_equal(classify(clf, X[perm]), full[perm])
        np.testing.assert_array_equal(classify(clf, X[2:3])[0], full[2])

    @pytest.mark.parametrize("hidden", [None, 6])
    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed, hidden):
        rng = np.random.default_rng(seed)
        clf = LabelClassifier.init(4, SeededRng(seed), hidden=hidden)
        for layer in clf.layers:
            layer.weight = rng.normal(size=layer.weight.shape)
            layer.bias = rng.normal(size=layer.bias.shape)
        X = rng.normal(size=(3, 4))
        T = np.zeros((3, 56))
        T[np.arange(3)[:, None], np.arange(14) * 4 + rng.integers(0, 4, size=(3, 14))] = 1.0

        def loss_with(layer_idx, name):
            def f(value):
                old = getattr(clf.layers[layer_idx], name)
                setattr(clf.layers[layer_idx], name, value)
                try:
                    return focal_loss_logits(classifier_logits(clf, X)[0], T).value
                finally:
                    setattr(clf.layers[layer_idx], name, old)
            return f

        logits, cache = classifier_logits(clf, X)
        g = classifier_backward(clf, cache, focal_loss_logits(logits, T).gradients["logits"])
        for i, layer in enumerate(clf.layers):
            assert_grad_matches(loss_with(i, "weight"), layer.weight, g[f"l{i}.weight"])
            assert_grad_matches(loss_with(i, "bias"), layer.bias, g[f"l{i}.bias"])
        assert_grad_matches(lambda Z: focal_loss_logits(classifier_logits(clf, Z)[0], T).value, X, g["input"])


class TestFuse:
    def test_order(self):
        s = np.arange(3 * 2, dtype=float).reshape(3, 2) + 100
        img, lbl = np.ones((2, 2)), np.full((3, 2), 2.0)
        f = fuse_prompt(img, lbl, s)
        assert f.shape == (8, 2)
        assert np.array_equal(f[0], s[0]) and np.array_equal(f[3], s[1]) and np.array_equal(f[7], s[2])
        assert np.array_equal(f[1:3], img) and np.array_equal(f[4:7], lbl)

    def test_empty_labels(self):
        f = fuse_prompt(np.ones((2, 4)), np.zeros((0, 4)), init_sentinels(4, SeededRng(0)))
        assert f.shape == (5, 4)

    def test_dimension_mismatch(self):
        with pytest.raises(RejectedInputError):
            fuse_prompt(np.ones((2, 3)), np.ones((1, 4)), np.zeros((3, 4)))

    def test_backward_splits(self):
        G = np.arange(8 * 2, dtype=float).reshape(8, 2)
        gi, gl, gs = fuse_backward(2, G)
        assert np.array_equal(gi, G[1:3]) and np.array_equal(gl, G[4:7])
        assert np.array_equal(gs, G[[0, 3, 7]])


class TestGenerator:
    def test_zero_generator_uniform(self):
        gen = ToyGenerator.init(9, 4, 6, 2, SeededRng(0), zero=True)
        fused = np.random.default_rng(0).normal(size=(5, 4))
        P = generator_step_distributions(gen, fused, 5)
        assert np.allclose(P, 1 / 9, rtol=0, atol=1e-15)
        assert report_nll(P, [0, 1, 2, 3, 4]).value == pytest.approx(5 * math.log(9), abs=1e-12)

    def test_target_too_long(self):
        gen = ToyGenerator.init(9, 4, 3, 2, SeededRng(0))
        with pytest.raises(RejectedInputError):
            generator_logits(gen, np.zeros((2, 4)), 4)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_nll_gradients(self, seed):
        rng = np.random.default_rng(seed)
        gen = ToyGenerator.init(7, 3, 5, 2, SeededRng(seed))
        gen.adapter.a = rng.normal(size=gen.adapter.a.shape)
        fused = rng.normal(size=(4, 3))
        y = rng.integers(0, 7, size=4)

        def nll(fz=fused, a=None, b=None):
            ad = gen.adapter
            g2 = ToyGenerator(LoraAdapter(ad.base_weight, ad.a if a is None else a, ad.b if b is None else b),
                              gen.bias, gen.dim, gen.max_len)
            return report_nll_logits(generator_logits(g2, fz, len(y))[0], y).value

        logits, Z = generator_logits(gen, fused, len(y))
        g = generator_backward(gen, fused, Z, report_nll_logits(logits, y).gradients["logits"])
        assert_grad_matches(lambda a: nll(a=a), gen.adapter.a, g["a"])
        assert_grad_matches(lambda b: nll(b=b), gen.adapter.b, g["b"])
        assert_grad_matches(lambda f: nll(fz=f), fused, g["input"])

    def test_lora_only_training(self):
        gen = ToyGenerator.init(7, 3, 5, 2, SeededRng(0))
        base = gen.adapter.base_weight.copy()
        fused = np.random.default_rng(0).normal(size=(4, 3))
        y = np.array([1, 2, 3])
        before = generator_step_distributions(gen, fused, 3)
        for _ in range(20):
            logits, Z = generator_logits(gen, fused, 3)
            g = generator_backward(gen, fused, Z, report_nll_logits(logits, y).gradients["logits"])
            gen.adapter.a = gen.adapter.a - 0.5 * g["a"]
            gen.adapter.b = gen.adapter.b - 0.5 * g["b"]
        after = generator_step_distributions(gen, fused, 3)
        assert not np.allclose(before, after)
        assert np.array_equal(gen.adapter.base_weight, base)
        assert report_nll(after, y).value < report_nll(before, y).value


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    groups = {"w": rng.normal(size=(3, 4)) * 1e-7, "b": rng.normal(size=5), "s": np.array(math.pi)}
    save_checkpoint(tmp_path / "c.json", groups)
    back = load_checkpoint(tmp_path / "c.json")
    assert back.keys() == groups.keys()
    for k in groups:
        assert back[k].shape == np.shape(groups[k])
        assert np.array_equal(back[k], groups[k])


def test_checkpoint_rejects_foreign(tmp_path):
    (tmp_path / "c.json").write_text('{"format": "other", "version": 1, "groups": {}}')
    with pytest.raises(RejectedInputError):
        load_checkpoint(tmp_path / "c.json")
