import numpy as np
import pytest

from minmax_lenet.tensor import Tape, Tensor, cross_entropy_from_logits, linear
from minmax_lenet.theorem import (
    DEFAULT_CHUNK, ToyModelSpec, analytic_input_gradient, draw_problem, expected_input_gradient, run_grid,
    sample_weights, verify_gradient_bound,
)


def tape_gradient(W, x, label):
    with Tape() as tape:
        xt = tape.watch(Tensor(x[None]))
        loss = cross_entropy_from_logits(linear(xt, Tensor(W), Tensor(np.zeros(W.shape[0]))), [label])
    return tape.gradient(loss, [xt])[0][0]


class TestGradient:
    def test_zero_weights(self):
        assert not analytic_input_gradient(np.zeros((3, 4)), np.ones(4), np.eye(3)[1]).any()

    def test_two_class_hand_case(self):
        g = analytic_input_gradient(np.eye(2), np.zeros(2), [1.0, 0.0])
        np.testing.assert_array_equal(g, [-0.5, 0.5])

    def test_matches_tape(self):
        rng = np.random.default_rng(0)
        for m, n in ((2, 5), (10, 50), (4, 3)):
            W, x = rng.uniform(size=(m, n)), rng.uniform(size=n)
            label = int(rng.integers(m))
            g = analytic_input_gradient(W, x, np.eye(m)[label])
            np.testing.assert_allclose(g, tape_gradient(W, x, label), rtol=0, atol=1e-10)

    def test_batched(self):
        rng = np.random.default_rng(1)
        W = rng.uniform(size=(6, 3, 4))
        x, y = rng.uniform(size=4), np.eye(3)[2]
        batch = analytic_input_gradient(W, x, y)
        for k in range(6):
            np.testing.assert_allclose(batch[k], analytic_input_gradient(W[k], x, y), rtol=1e-14)


class TestSampling:
    def test_spec_validation(self):
        with pytest.raises(ValueError):
            ToyModelSpec(2, 3, "gaussian")
        with pytest.raises(ValueError):
            ToyModelSpec(0, 3)
        with pytest.raises(ValueError):
            ToyModelSpec(2, 3, "bernoulli", 1.5)

    def test_families(self):
        u = sample_weights(ToyModelSpec(4, 5), 0, 5000)
        assert u.shape == (5000, 4, 5) and 0 <= u.min() and u.max() < 1
        assert abs(u.mean() - 0.5) < 3 * np.sqrt(1 / 12 / u.size)
        b = sample_weights(ToyModelSpec(4, 5, "bernoulli", 0.05), 0, 5000)
        assert set(np.unique(b)) <= {0.0, 1.0}
        assert abs(b.mean() - 0.05) < 3 * np.sqrt(0.05 * 0.95 / b.size)

    def test_p1_zero_gives_zero_gradient(self):
        x, y = draw_problem(3, 6, 0)
        mean, se = expected_input_gradient(ToyModelSpec(3, 6, "bernoulli", 0.0), x, y, 500, 1)
        assert not mean.any() and not se.any()

    def test_stderr_scales(self):
        x, y = draw_problem(2, 5, 2)
        spec = ToyModelSpec(2, 5)
        _, s1 = expected_input_gradient(spec, x, y, 2000, 3)
        _, s4 = expected_input_gradient(spec, x, y, 8000, 3)
        np.testing.assert_allclose(s4 / s1, 0.5, rtol=0.1)

    def test_moments_match_loop_oracle(self):
        m, n, trials = 10, 20, 300
        x, y = draw_problem(m, n, 5)
        label = int(np.argmax(y))
        res = verify_gradient_bound(ToyModelSpec(m, n), ToyModelSpec(m, n, "bernoulli", 0.05), x, y, trials, 11)
        ss_a, ss_b = np.random.SeedSequence(11).spawn(2)
        assert trials <= DEFAULT_CHUNK  # one draw call reproduces the stream
        for ss, spec, side, se in ((ss_a, ToyModelSpec(m, n), res.side_a, res.stderr_a),
                                   (ss_b, ToyModelSpec(m, n, "bernoulli", 0.05), res.side_b, res.stderr_b)):
            Ws = sample_weights(spec, np.random.default_rng(ss), trials)
            g = np.array([tape_gradient(W, x, label) for W in Ws])
            np.testing.assert_allclose(side, np.abs(g.mean(axis=0)), rtol=1e-9, atol=1e-15)
            np.testing.assert_allclose(se, g.std(axis=0, ddof=1) / np.sqrt(trials), rtol=1e-6, atol=1e-15)


class TestVerify:
    def test_shape_and_family_checks(self):
        x, y = draw_problem(2, 3, 0)
        with pytest.raises(ValueError):
            verify_gradient_bound(ToyModelSpec(2, 3, "bernoulli"), ToyModelSpec(2, 3, "bernoulli"), x, y, 10, 0)
        with pytest.raises(ValueError):
            verify_gradient_bound(ToyModelSpec(2, 3), ToyModelSpec(2, 4, "bernoulli"), x, y, 10, 0)

    def test_closed_forms_vanish(self):
        x, y = draw_problem(10, 50, 0)
        r = verify_gradient_bound(ToyModelSpec(10, 50), ToyModelSpec(10, 50, "bernoulli", 0.05), x, y, 100, 0)
        assert abs(r.closed_form_a) < 1e-15 and abs(r.closed_form_b) < 1e-15

    def test_seeded(self):
        x, y = draw_problem(2, 5, 0)
        a = verify_gradient_bound(ToyModelSpec(2, 5), ToyModelSpec(2, 5, "bernoulli", 0.05), x, y, 500, 4)
        b = verify_gradient_bound(ToyModelSpec(2, 5), ToyModelSpec(2, 5, "bernoulli", 0.05), x, y, 500, 4)
        assert a.z == b.z

    def test_small_p1_has_no_violations(self):
        x, y = draw_problem(10, 20, 1)
        r = verify_gradient_bound(ToyModelSpec(10, 20), ToyModelSpec(10, 20, "bernoulli", 0.01), x, y, 5000, 0)
        assert r.violations == 0

    def test_write(self, tmp_path):
        r = run_grid(p1s=(0.05,), ms=(2,), ns=(5,), trials=200)[0]
        r.write(tmp_path, "t")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "coordinate,side_a,side_b,stderr_a,stderr_b,violation" and len(lines) == 6
        assert (tmp_path / "t.json").exists()

    def test_grid_shape(self):
        res = run_grid(p1s=(0.01, 0.1), ms=(2, 3), ns=(4,), trials=50)
        assert [(r.m, r.n, r.p1) for r in res] == [(2, 4, 0.01), (2, 4, 0.1), (3, 4, 0.01), (3, 4, 0.1)]
        assert res[0].x == res[1].x
