import math

import numpy as np
import pytest

from sdpn import core
from sdpn.core import (
    SinkhornConfig,
    Temperatures,
    backward,
    cross_entropy_loss,
    diversity_loss,
    ema_update,
    init_prototypes,
    sdpn_step_forward,
    softmax_rows,
    student_distribution,
    teacher_distribution,
    total_loss,
)
from sdpn.multicrop import CropSet
from sdpn.nn import ArchConfig, Network

RNG = np.random.default_rng


def reference_sinkhorn(z, n_iters, floor=1e-12):
    """Independent scripted iteration: plain loops, no shared helpers."""
    b, k = z.shape
    q = np.zeros_like(z, dtype=np.float64)
    for i in range(b):
        m = max(z[i])
        for j in range(k):
            q[i, j] = math.exp(z[i, j] - m)
    for _ in range(n_iters):
        for j in range(k):
            col = sum(q[i][j] for i in range(b))
            for i in range(b):
                q[i][j] = q[i][j] / max(col * k, floor)
        for i in range(b):
            row = sum(q[i])
            for j in range(k):
                q[i][j] = q[i][j] / max(row * b, floor)
    return q * b


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


class TestTeacherDistribution:
    def test_constant_logits_square_gives_uniform(self):
        proj = np.zeros((4, 8))
        c = np.zeros((4, 8))
        c[:, 0] = 1.0
        p = teacher_distribution(proj, c, 0.04, SinkhornConfig())
        np.testing.assert_allclose(p, 0.25, atol=1e-12)

    def test_shift_invariance_2x2(self):
        for a in (-3.0, 0.0, 5.0):
            proj = np.full((2, 4), 0.5)
            protos = np.full((2, 4), a / 2.0)  # all logits equal
            p = teacher_distribution(proj, protos, 1.0, SinkhornConfig())
            np.testing.assert_allclose(p, 0.5, atol=1e-12)

    def test_matches_reference_iteration(self):
        # unit-norm rows (the op's contract) across the realistic temperature range
        rng = RNG(0)
        for trial in range(20):
            b = int(rng.integers(2, 9))
            k = int(rng.integers(2, 9))
            d = 5
            proj = _unit_rows(rng.standard_normal((b, d)))
            protos = _unit_rows(rng.standard_normal((k, d)))
            tau = 0.04 if trial % 3 == 0 else float(rng.uniform(0.1, 1.0))
            got = teacher_distribution(proj, protos, tau, SinkhornConfig(n_iters=3))
            want = reference_sinkhorn(proj @ protos.T / tau, 3)
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_rows_are_distributions(self):
        rng = RNG(1)
        p = teacher_distribution(rng.standard_normal((6, 16)), rng.standard_normal((32, 16)),
                                 0.04, SinkhornConfig())
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_many_iterations_approach_balanced_columns(self):
        rng = RNG(2)
        b = k = 8
        p = teacher_distribution(_unit_rows(rng.standard_normal((b, 4))),
                                 _unit_rows(rng.standard_normal((k, 4))),
                                 0.1, SinkhornConfig(n_iters=50))
        np.testing.assert_allclose(p.sum(axis=0), b / k, atol=1e-3)

    def test_non_finite_logits_rejected(self):
        proj = np.array([[np.inf, 0.0]])
        with pytest.raises(FloatingPointError):
            teacher_distribution(proj, np.eye(2), 0.04, SinkhornConfig())


class TestStudentDistribution:
    def test_equal_logits_uniform(self):
        p = student_distribution(np.zeros((3, 4)), RNG(0).standard_normal((5, 4)) * 0, 0.1)
        np.testing.assert_allclose(p, 0.2)

    def test_rows_sum_to_one(self):
        rng = RNG(1)
        p = student_distribution(rng.standard_normal((10, 8)), rng.standard_normal((16, 8)), 0.1)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_closed_form_two_way(self):
        # logits / tau = [ln 3, 0] -> [0.75, 0.25]
        proj = np.array([[math.log(3.0) * 0.1, 0.0]])
        protos = np.eye(2)
        p = student_distribution(proj, protos, 0.1)
        np.testing.assert_allclose(p, [[0.75, 0.25]], atol=1e-12)


class TestCrossEntropy:
    def test_matching_one_hot_is_zero(self):
        p = np.zeros((1, 4))
        p[0, 2] = 1.0
        assert cross_entropy_loss(p, p[None]) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_student_against_one_hot(self):
        p_tea = np.array([[1.0, 0.0, 0.0, 0.0]])
        p_stu = np.full((1, 1, 4), 0.25)
        assert cross_entropy_loss(p_tea, p_stu) == pytest.approx(math.log(4.0), abs=1e-9)

    def test_uniform_uniform_is_log_k(self):
        k = 16
        p = np.full((3, k), 1.0 / k)
        views = np.stack([p] * 4)
        assert cross_entropy_loss(p, views) == pytest.approx(math.log(k), abs=1e-9)

    def test_misalignment_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy_loss(np.full((2, 4), 0.25), np.full((1, 3, 4), 0.25))


class TestDiversity:
    def test_antipodal_pair(self):
        x = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert diversity_loss(x) == pytest.approx(-math.log(2.0), abs=1e-9)

    def test_identical_rows_clamped(self):
        x = np.array([[0.6, 0.8], [0.6, 0.8]])
        assert diversity_loss(x) == pytest.approx(-math.log(1e-4), abs=1e-9)

    def test_orthonormal_triple(self):
        x = np.eye(3)
        assert diversity_loss(x) == pytest.approx(-math.log(math.sqrt(2.0)), abs=1e-9)

    def test_literal_scale_multiplies_by_n(self):
        x = np.eye(3)
        assert diversity_loss(x, literal_scale=True) == pytest.approx(3 * diversity_loss(x), abs=1e-12)

    def test_single_row_rejected(self):
        with pytest.raises(ValueError):
            diversity_loss(np.ones((1, 3)))

    def test_moving_closest_pair_apart_decreases_loss(self):
        rng = RNG(0)
        x = rng.standard_normal((6, 8))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        base = diversity_loss(x)
        # find the closest pair and push them apart along their difference
        d = np.linalg.norm(x[:, None] - x[None, :], axis=2)
        np.fill_diagonal(d, np.inf)
        i, j = np.unravel_index(np.argmin(d), d.shape)
        x2 = x.copy()
        delta = 0.05 * (x2[i] - x2[j])
        x2[i] += delta
        x2[j] -= delta
        assert diversity_loss(x2) < base

    def test_gradient_matches_fd(self):
        from sdpn.core import _diversity_backward, _diversity_forward

        rng = RNG(3)
        x = rng.standard_normal((5, 6))
        _, cache = _diversity_forward(x, 1e-4, False)
        g = _diversity_backward(cache, 1.0)
        eps = 1e-6
        for idx in [(0, 0), (2, 3), (4, 5)]:
            xp = x.copy(); xp[idx] += eps
            xm = x.copy(); xm[idx] -= eps
            fd = (diversity_loss(xp) - diversity_loss(xm)) / (2 * eps)
            assert abs(fd - g[idx]) < 1e-6


class TestTotalLoss:
    def test_mu_zero(self):
        assert total_loss(1.5, 99.0, 0.0).total == 1.5

    def test_arithmetic(self):
        bd = total_loss(1.0, 2.0, 0.1)
        assert bd.total == pytest.approx(1.2, abs=1e-12)
        assert bd.total == bd.l_ce + bd.mu * bd.l_dr  # bitwise identical recomputation

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            total_loss(float("nan"), 0.0, 0.1)


TINY = ArchConfig(
    n_mels=6, conv_channels=(5,), conv_kernels=(3,), conv_dilations=(1,),
    embed_dim=8, head_hidden=10, head_out=4, n_prototypes=6,
)


def _tiny_system(seed=0, dtype=np.float64):
    student = Network(TINY, RNG(seed), dtype)
    teacher = Network(TINY, RNG(seed + 100), dtype)
    teacher.copy_from(student)
    protos = init_prototypes(TINY.n_prototypes, TINY.head_out, RNG(seed + 200), dtype)
    return student, teacher, protos


def _tiny_crops(n_utts, seed=0):
    rng = RNG(seed)
    crops = []
    for i in range(n_utts):
        crops.append(
            CropSet(
                utterance_id=f"u{i}",
                global_view=rng.standard_normal((12, TINY.n_mels)).astype(np.float64),
                local_views=[rng.standard_normal((7, TINY.n_mels)) for _ in range(4)],
            )
        )
    return crops


class TestEma:
    def test_endpoints(self):
        s, t, _ = _tiny_system()
        before = [p.value.copy() for p in t.params()]
        ema_update(t, s, 1.0)
        for p, b in zip(t.params(), before):
            np.testing.assert_array_equal(p.value, b)
        ema_update(t, s, 0.0)
        for pt, ps in zip(t.params(), s.params()):
            np.testing.assert_array_equal(pt.value, ps.value)

    def test_scalar_arithmetic(self):
        s, t, _ = _tiny_system()
        for p in t.params():
            p.value[...] = 1.0
        for p in s.params():
            p.value[...] = 0.0
        ema_update(t, s, 0.9)
        for p in t.params():
            np.testing.assert_allclose(p.value, 0.9, atol=1e-12)

    def test_affine_composition(self):
        # two updates at m equal one update at m^2 for a frozen student
        m = 0.8
        s, t1, _ = _tiny_system(seed=1)
        t2 = Network(TINY, RNG(999), np.float64)
        t2.copy_from(t1)
        ema_update(t1, s, m)
        ema_update(t1, s, m)
        ema_update(t2, s, m * m)
        for a, b in zip(t1.params(), t2.params()):
            np.testing.assert_allclose(a.value, b.value, atol=1e-12)

    def test_momentum_out_of_range(self):
        s, t, _ = _tiny_system()
        with pytest.raises(ValueError):
            ema_update(t, s, 1.5)

    def test_running_stats_copied(self):
        s, t, _ = _tiny_system()
        s.encoder_forward(RNG(0).standard_normal((3, 9, TINY.n_mels)), train=True)
        ema_update(t, s, 0.5)
        for name, arr in t.state().items():
            np.testing.assert_array_equal(arr, s.state()[name])


class TestStepForwardBackward:
    def test_loss_finite_and_breakdown_consistent(self):
        student, teacher, protos = _tiny_system()
        bd, graph = sdpn_step_forward(_tiny_crops(3), student, teacher, protos,
                                      Temperatures(), SinkhornConfig(), mu=0.1)
        assert np.isfinite(bd.total)
        assert bd.total == bd.l_ce + 0.1 * bd.l_dr

    def test_mu_zero_total_is_ce(self):
        student, teacher, protos = _tiny_system()
        bd, _ = sdpn_step_forward(_tiny_crops(3), student, teacher, protos,
                                  Temperatures(), SinkhornConfig(), mu=0.0)
        assert bd.total == bd.l_ce

    def test_batch_of_one_rejected(self):
        student, teacher, protos = _tiny_system()
        with pytest.raises(ValueError):
            sdpn_step_forward(_tiny_crops(1), student, teacher, protos,
                              Temperatures(), SinkhornConfig(), mu=0.1)

    def test_gradient_set_has_student_and_prototypes_only(self):
        student, teacher, protos = _tiny_system()
        bd, graph = sdpn_step_forward(_tiny_crops(4), student, teacher, protos,
                                      Temperatures(), SinkhornConfig(), mu=0.1)
        grads = backward(graph)
        student_names = {p.name for p in student.params()}
        assert set(grads) == student_names | {"prototypes"}
        # the teacher's parameters never appear, and every gradient is finite
        for g in grads.values():
            assert np.all(np.isfinite(g))

    def test_teacher_rows_sum_to_one_in_graph(self):
        student, teacher, protos = _tiny_system()
        _, graph = sdpn_step_forward(_tiny_crops(4), student, teacher, protos,
                                     Temperatures(), SinkhornConfig(), mu=0.1)
        np.testing.assert_allclose(graph.p_tea.sum(axis=1), 1.0, atol=1e-6)

    def test_short_sgd_run_decreases_loss(self):
        from sdpn.optim import SgdOptimizer

        student, teacher, protos = _tiny_system(seed=3)
        opt = SgdOptimizer(student.params() + [protos], momentum=0.9, weight_decay=0.0)
        crops = _tiny_crops(2, seed=5)
        losses = []
        for _ in range(50):
            bd, graph = sdpn_step_forward(crops, student, teacher, protos,
                                          Temperatures(), SinkhornConfig(), mu=0.1)
            losses.append(bd.total)
            opt.step(backward(graph), lr=0.05)
            ema_update(teacher, student, 0.95)
        assert all(np.isfinite(losses))
        assert np.mean(losses[-5:]) < np.mean(losses[:5])


class TestTemperatureSharpening:
    @staticmethod
    def _entropy(p):
        return float(-(p * np.log(np.maximum(p, 1e-300))).sum())

    def test_sharper_at_lower_temperature(self):
        rng = RNG(0)
        for _ in range(1000):
            z = rng.standard_normal(10)
            sharp = softmax_rows((z / 0.04)[None])[0]
            soft = softmax_rows((z / 0.1)[None])[0]
            assert self._entropy(sharp) < self._entropy(soft)


def test_prototype_init_unit_rows():
    p = init_prototypes(32, 8, RNG(0))
    np.testing.assert_allclose(np.linalg.norm(p.value, axis=1), 1.0, atol=1e-6)
    assert p.unit_rows and not p.decay
