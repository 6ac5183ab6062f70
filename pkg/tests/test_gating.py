import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from comad.autograd import Tensor
from comad.errors import ConfigError
from comad.gating import GatingConfig, affinity, compute_gating, consensus, gate
from comad.losses import fuse


def rand_tokens(rng, m, shape=(2, 5, 3)):
    return [Tensor(rng.standard_normal(shape)) for _ in range(m)]


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


class TestAffinity:
    def test_self_and_negated(self):
        z = Tensor(np.random.default_rng(0).standard_normal((2, 4, 3)))
        s = affinity(z, [z, Tensor(-z.data)]).data
        np.testing.assert_allclose(s[..., 0], 1, atol=1e-12)
        np.testing.assert_allclose(s[..., 1], -1, atol=1e-12)

    def test_direct_formula(self):
        rng = np.random.default_rng(1)
        z, ts = Tensor(rng.standard_normal((1, 2, 3))), rand_tokens(rng, 2, (1, 2, 3))
        s = affinity(z, ts).data
        for n, m in itertools.product(range(2), range(2)):
            assert s[0, n, m] == pytest.approx(cos(z.data[0, n], ts[m].data[0, n]), abs=1e-12)

    def test_no_teachers(self):
        with pytest.raises(ConfigError):
            affinity(Tensor(np.ones((1, 1, 2))), [])


class TestConsensus:
    def test_identical_teachers(self):
        t = Tensor(np.random.default_rng(2).standard_normal((2, 3, 4)))
        np.testing.assert_allclose(consensus([t, t, t]).data, 1, atol=1e-12)

    def test_pair_symmetric(self):
        a, b = rand_tokens(np.random.default_rng(3), 2)
        c = consensus([a, b]).data
        np.testing.assert_array_equal(c[..., 0], c[..., 1])
        assert c[0, 0, 0] == pytest.approx(cos(a.data[0, 0], b.data[0, 0]), abs=1e-12)

    def test_three_brute_force(self):
        ts = rand_tokens(np.random.default_rng(4), 3)
        c = consensus(ts).data
        for b, n, m in itertools.product(range(2), range(5), range(3)):
            expect = np.mean([cos(ts[m].data[b, n], ts[k].data[b, n]) for k in range(3) if k != m])
            assert c[b, n, m] == pytest.approx(expect, abs=1e-12)

    def test_single_teacher_is_zero(self):
        assert not consensus(rand_tokens(np.random.default_rng(5), 1)).data.any()


class TestGate:
    def test_equal_scores_uniform(self):
        e = Tensor(np.full((1, 2, 4), 0.3))
        np.testing.assert_allclose(gate(e, Tensor(np.zeros((1, 2, 4))), GatingConfig()).alpha.data, 0.25)

    def test_two_teacher_hand_value(self):
        r = gate(Tensor([[[1.0, 0.0]]]), Tensor([[[0.0, 0.0]]]), GatingConfig(temperature=0.1))
        a = r.alpha.data[0, 0]
        assert a[0] == pytest.approx(0.9999546, abs=1e-7) and a[1] == pytest.approx(4.54e-5, abs=1e-7)

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        s, c = rng.uniform(-1, 1, (2, 3, 3)), rng.uniform(-1, 1, (2, 3, 3))
        base = gate(Tensor(s), Tensor(c), GatingConfig()).alpha.data
        shifted = gate(Tensor(s + 0.37), Tensor(c), GatingConfig()).alpha.data
        np.testing.assert_allclose(shifted, base, atol=1e-12)

    @pytest.mark.parametrize("variant,which", [("affinity_only", "s"), ("consensus_only", "c"), ("full", "sc")])
    def test_variants_pick_scores(self, variant, which):
        rng = np.random.default_rng(7)
        s, c = rng.uniform(-1, 1, (1, 2, 3)), rng.uniform(-1, 1, (1, 2, 3))
        e = {"s": s, "c": c, "sc": s + c}[which]
        np.testing.assert_array_equal(gate(Tensor(s), Tensor(c), GatingConfig(variant=variant)).e.data, e)

    def test_uniform_bypasses_softmax(self):
        r = gate(Tensor(np.eye(3)[None]), Tensor(np.zeros((1, 3, 3))), GatingConfig(variant="uniform"))
        assert np.all(r.alpha.data == 1 / 3)

    def test_invalid_variant(self):
        with pytest.raises(ConfigError):
            GatingConfig(variant="learned")
        with pytest.raises(ConfigError):
            GatingConfig(temperature=0.0)

    def test_alpha_detached_by_default(self):
        rng = np.random.default_rng(8)
        z = Tensor(rng.standard_normal((1, 2, 3)), requires_grad=True)
        assert not compute_gating(z, [z, z * 2.0], GatingConfig()).alpha.requires_grad
        assert compute_gating(z, [z, z * -1.0], GatingConfig(differentiable=True)).alpha.requires_grad


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1), st.floats(0.05, 3.0))
def test_invariants(m, seed, lam):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.standard_normal((2, 4, 6)))
    ts = rand_tokens(rng, m, (2, 4, 6))
    r = compute_gating(z, ts, GatingConfig())
    a = r.alpha.data
    assert np.abs(a.sum(-1) - 1).max() <= 1e-6
    assert np.all((a > 0) & (a <= 1))
    assert np.all(np.abs(r.s.data) <= 1 + 1e-12) and np.all(np.abs(r.c.data) <= 1 + 1e-12)
    np.testing.assert_array_equal(r.e.data, r.s.data + r.c.data)
    perm = rng.permutation(m)
    rp = compute_gating(z, [ts[i] for i in perm], GatingConfig())
    np.testing.assert_allclose(rp.alpha.data, a[..., perm], atol=1e-12)
    j = int(rng.integers(m))
    scaled = [Tensor(t.data * lam) if i == j else t for i, t in enumerate(ts)]
    rs = compute_gating(z, scaled, GatingConfig())
    np.testing.assert_allclose(rs.alpha.data, a, atol=1e-9)


def test_single_teacher_alpha_one():
    z, (t,) = Tensor(np.ones((1, 2, 3))), rand_tokens(np.random.default_rng(9), 1, (1, 2, 3))
    assert np.all(compute_gating(z, [t], GatingConfig()).alpha.data == 1.0)


def test_outlier_suppressed():
    t = np.random.default_rng(10).standard_normal((1, 1, 8))
    r = compute_gating(Tensor(t), [Tensor(t), Tensor(t), Tensor(-t)], GatingConfig())
    a = r.alpha.data[0, 0]
    assert a[2] < 1 / 3 and a[0] > 1 / 3 and a[1] > 1 / 3


def test_uniform_is_mean_fusion():
    ts = rand_tokens(np.random.default_rng(11), 3)
    r = compute_gating(Tensor(np.ones((2, 5, 3))), ts, GatingConfig(variant="uniform"))
    fused = fuse(r.alpha, ts).data
    np.testing.assert_allclose(fused, (ts[0].data + ts[1].data + ts[2].data) / 3, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1), st.sampled_from(["f32", "f64"]))
def test_detached_path_matches_graph_path(m, seed, dtype):
    rng = np.random.default_rng(seed)
    dt = np.float32 if dtype == "f32" else np.float64
    z = Tensor(rng.standard_normal((2, 4, 6)).astype(dt))
    ts = [Tensor(rng.standard_normal((2, 4, 6)).astype(dt)) for _ in range(m)]
    fast = compute_gating(z, ts, GatingConfig())
    slow = compute_gating(z, ts, GatingConfig(differentiable=True))
    tol = 1e-5 if dtype == "f32" else 1e-12
    for a, b in [(fast.s, slow.s), (fast.c, slow.c), (fast.alpha, slow.alpha)]:
        assert a.dtype == dt
        np.testing.assert_allclose(a.data, b.data, atol=tol)


def test_zero_token_gives_zero_affinity():
    z = Tensor(np.zeros((1, 1, 3)))
    r = compute_gating(z, [Tensor(np.ones((1, 1, 3))), Tensor(-np.ones((1, 1, 3)))], GatingConfig())
    assert not r.s.data.any()
