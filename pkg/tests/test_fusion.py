"""Source fuser and random-drop tests."""

import numpy as np
import pytest

from nir import autodiff as ad
from nir.fusion import (
    FUSE_STRATEGIES,
    SOURCES,
    DropMask,
    FuserParams,
    apply_drop,
    fuse,
    random_drop,
)

DIM, KEY_DIM = 6, 3


def fresh_fuser(seed=0):
    return FuserParams(DIM, KEY_DIM, np.random.default_rng(seed))


def unit_rows(seed, n=4, dim=DIM):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def as_tensors(rows):
    return [ad.constant(rows[i : i + 1]) for i in range(rows.shape[0])]


def oracle_attention_fuse(x, p):
    """Plain numpy restatement of the attention fuse strategy."""
    q, k, v = x @ p.wq.value, x @ p.wk.value, x @ p.wv.value
    logits = q @ k.T / np.sqrt(p.key_dim)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    m = e / e.sum(axis=1, keepdims=True)
    flat = (m @ v).reshape(1, 4 * p.dim)
    out = np.maximum(flat @ p.l1.value + p.c1.value, 0.0) @ p.l2.value + p.c2.value
    return out / np.linalg.norm(out), m


class TestFuse:
    def test_attention_matches_oracle(self):
        p = fresh_fuser()
        x = unit_rows(1)
        got, amap = fuse(as_tensors(x), p, ad.LeafCache())
        want, want_map = oracle_attention_fuse(x, p)
        np.testing.assert_allclose(got.value, want, atol=1e-12)
        np.testing.assert_allclose(amap, want_map, atol=1e-12)
        np.testing.assert_allclose(amap.sum(axis=1), np.ones(4), atol=1e-12)

    def test_output_is_unit_for_every_strategy(self):
        p = fresh_fuser()
        x = unit_rows(2)
        for strategy in FUSE_STRATEGIES:
            out, _ = fuse(as_tensors(x), p, ad.LeafCache(), strategy)
            assert out.value.shape == (1, DIM)
            assert abs(np.linalg.norm(out.value) - 1.0) < 1e-12

    def test_max_baseline(self):
        p = fresh_fuser()
        x = unit_rows(3)
        out, amap = fuse(as_tensors(x), p, ad.LeafCache(), "max")
        want = x.max(axis=0, keepdims=True)
        np.testing.assert_allclose(out.value, want / np.linalg.norm(want), atol=1e-12)
        assert amap is None

    def test_add_baseline(self):
        p = fresh_fuser()
        x = unit_rows(4)
        out, _ = fuse(as_tensors(x), p, ad.LeafCache(), "add")
        want = x.sum(axis=0, keepdims=True)
        np.testing.assert_allclose(out.value, want / np.linalg.norm(want), atol=1e-12)

    def test_neural_baseline(self):
        p = fresh_fuser()
        x = unit_rows(5)
        out, _ = fuse(as_tensors(x), p, ad.LeafCache(), "neural")
        flat = x.reshape(1, 4 * DIM)
        h1 = np.maximum(flat @ p.l1.value + p.c1.value, 0.0)
        h2 = np.maximum(h1 @ p.l2.value + p.c2.value, 0.0)
        np.testing.assert_allclose(out.value, h2 / np.linalg.norm(h2), atol=1e-12)

    def test_all_zero_inputs_closed_form(self):
        """With every source missing the attention path degenerates to a
        constant: softmax of zeros is uniform, values are zero, so the
        output is l2_normalize(relu(c1) @ l2 + c2)."""
        rng = np.random.default_rng(6)
        p = fresh_fuser()
        p.c1.value = rng.standard_normal((1, 4 * DIM))
        p.c2.value = rng.standard_normal((1, DIM))
        zeros = [ad.constant(np.zeros((1, DIM))) for _ in SOURCES]
        out, amap = fuse(zeros, p, ad.LeafCache())
        want = np.maximum(p.c1.value, 0.0) @ p.l2.value + p.c2.value
        np.testing.assert_allclose(out.value, want / np.linalg.norm(want), atol=1e-12)
        np.testing.assert_allclose(amap, np.full((4, 4), 0.25), atol=1e-12)

    def test_input_validation(self):
        p = fresh_fuser()
        x = as_tensors(unit_rows(7))
        with pytest.raises(ValueError):
            fuse(x[:3], p, ad.LeafCache())
        with pytest.raises(ValueError):
            fuse(x, p, ad.LeafCache(), "median")
        bad = x[:3] + [ad.constant(np.zeros((1, DIM + 1)))]
        with pytest.raises(ValueError):
            fuse(bad, p, ad.LeafCache())

    def test_gradients(self):
        p = fresh_fuser(seed=8)
        x = unit_rows(9)

        def f():
            ctx = ad.LeafCache()
            out, _ = fuse(as_tensors(x), p, ctx)
            return ad.matmul(out, ad.constant(np.linspace(1.0, 2.0, DIM)[:, None]))

        assert ad.grad_check(f, p.parameters()) < 1e-6

    def test_parameter_names(self):
        p = fresh_fuser()
        names = {q.name for q in p.parameters()}
        assert names == {
            "fuser.wq",
            "fuser.wk",
            "fuser.wv",
            "fuser.l1",
            "fuser.c1",
            "fuser.l2",
            "fuser.c2",
        }


class TestRandomDrop:
    def test_mask_invariants(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            mask = random_drop(rng)
            assert mask.keep[mask.preserved]
            assert 0 <= mask.preserved < 4
            assert any(mask.keep)

    def test_preserved_source_uniform(self):
        rng = np.random.default_rng(1)
        counts = np.zeros(4)
        n = 40_000
        for _ in range(n):
            counts[random_drop(rng).preserved] += 1
        np.testing.assert_allclose(counts / n, np.full(4, 0.25), atol=0.01)

    def test_marginal_keep_probability(self):
        """Marginal keep rate per source: P(preserved) + P(not) * 0.7
        = 0.25 + 0.75 * 0.7 = 0.775."""
        rng = np.random.default_rng(2)
        n = 100_000
        kept = np.zeros(4)
        for _ in range(n):
            kept += random_drop(rng).keep
        np.testing.assert_allclose(kept / n, np.full(4, 0.775), atol=0.01)

    def test_keep_prob_one_keeps_everything(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            assert random_drop(rng, keep_prob=1.0).keep == (True, True, True, True)

    def test_keep_prob_zero_keeps_exactly_one(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            mask = random_drop(rng, keep_prob=0.0)
            assert sum(mask.keep) == 1
            assert mask.keep[mask.preserved]

    def test_invalid_mask_rejected(self):
        with pytest.raises(ValueError):
            DropMask((True, False, True, True), 1)

    def test_apply_drop_blanks_dropped_sources(self):
        texts = {s: f"text of {s}" for s in SOURCES}
        mask = DropMask((True, False, True, False), 0)
        out = apply_drop(texts, mask)
        assert out["caption"] == "text of caption"
        assert out["body"] == ""
        assert out["headline"] == "text of headline"
        assert out["lead"] == ""
        assert texts["body"] == "text of body"  # input untouched

    def test_drop_equals_zero_substitution(self):
        """Dropping a source and replacing its encoding with an explicit
        zero vector fuse to exactly the same output."""
        p = fresh_fuser()
        x = unit_rows(10)
        mask = DropMask((False, True, True, False), 2)
        dropped = x.copy()
        for i, kept in enumerate(mask.keep):
            if not kept:
                dropped[i] = 0.0
        for strategy in ("attention", "add", "neural"):
            a, _ = fuse(as_tensors(dropped), p, ad.LeafCache(), strategy)
            b, _ = fuse(
                [
                    as_tensors(x)[i] if kept else ad.constant(np.zeros((1, DIM)))
                    for i, kept in enumerate(mask.keep)
                ],
                p,
                ad.LeafCache(),
                strategy,
            )
            np.testing.assert_array_equal(a.value, b.value)
