"""Tests for constrained score-matching training."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import finite_difference_grad, relative_error

from lcmuse import training
from lcmuse.energy import EnergyModel, NetworkSpec, init_model
from lcmuse.exceptions import ConfigError, NumericalError, ShapeError
from lcmuse.tensor import grad, tensor
from lcmuse.training import (
    Adam,
    TrainConfig,
    dsm_loss,
    local_lipschitz,
    local_lipschitz_batch,
    penalty,
    penalty_from_ratios,
    train,
    write_history_csv,
)

TINY = NetworkSpec(layers=2, channels=3, kernel_size=3)
SMALL = NetworkSpec(layers=3, channels=8, kernel_size=3)


def zero_model(sigma_f: float) -> EnergyModel:
    base = init_model(TINY, sigma_f=sigma_f)
    return base.with_parameters([np.zeros_like(a) for a in base.parameter_arrays()])


class TestTrainConfig:
    def test_l_is_one_minus_m(self):
        cfg = TrainConfig(m=0.3)
        assert cfg.l == pytest.approx(0.7)

    def test_default_step_size_is_tenth_of_radius(self):
        cfg = TrainConfig(delta=2.0)
        assert cfg.step_size == pytest.approx(0.2)
        assert TrainConfig(delta=2.0, ascent_step_size=0.05).step_size == 0.05

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(m=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(m=1.0)
        with pytest.raises(ConfigError):
            TrainConfig(lam=-1.0)
        with pytest.raises(ConfigError):
            TrainConfig(delta=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(dtype="float16")


class TestDsmLoss:
    def test_perfect_score_gives_zero(self, rng):
        # Zero network with sigma_f = 1 has score(u) = u; on zero images the
        # score at the perturbed point equals the target exactly.
        model = zero_model(sigma_f=1.0)
        batch = [np.zeros((2, 8, 8)) for _ in range(3)]
        sigmas = rng.uniform(0, 0.1, size=3)
        zs = [rng.standard_normal((2, 8, 8)) for _ in range(3)]
        assert dsm_loss(model, batch, sigmas, zs).item() == pytest.approx(0.0, abs=1e-24)

    def test_algebraic_collapse_to_image_norms(self, rng):
        model = zero_model(sigma_f=1.0)
        batch = [rng.standard_normal((2, 8, 8)) for _ in range(4)]
        sigmas = rng.uniform(0, 0.1, size=4)
        zs = [rng.standard_normal((2, 8, 8)) for _ in range(4)]
        want = float(np.mean([(b**2).sum() for b in batch]))
        assert dsm_loss(model, batch, sigmas, zs).item() == pytest.approx(want, rel=1e-12)

    def test_matches_independent_recomputation(self, rng):
        model = init_model(TINY, rng=rng)
        batch = [rng.standard_normal((2, 8, 8)) for _ in range(2)]
        sigmas = [0.05, 0.02]
        zs = [rng.standard_normal((2, 8, 8)) for _ in range(2)]
        got = dsm_loss(model, batch, sigmas, zs).item()
        terms = []
        for x, s, z in zip(batch, sigmas, zs):
            g = model.score(tensor(x + s * z)).numpy()
            terms.append(((g - s * z) ** 2).sum())
        assert got == pytest.approx(float(np.mean(terms)), abs=1e-10)

    def test_shape_errors(self, rng):
        model = init_model(TINY, rng=rng)
        good = [np.zeros((2, 8, 8))]
        with pytest.raises(ShapeError):
            dsm_loss(model, good, [0.1, 0.2], [np.zeros((2, 8, 8))])
        with pytest.raises(ShapeError):
            dsm_loss(model, good, [0.1], [np.zeros((2, 8, 9))])
        with pytest.raises(ShapeError):
            dsm_loss(model, [], [], [])

    def test_theta_gradient_matches_finite_differences(self, rng):
        # Exercises gradient-of-gradient: the loss contains a score.
        base = init_model(TINY, rng=rng)
        batch = [0.5 * rng.standard_normal((2, 8, 8)) for _ in range(2)]
        sigmas = [0.07, 0.03]
        zs = [rng.standard_normal((2, 8, 8)) for _ in range(2)]

        live = base.trainable()
        params = live.parameters()
        loss = dsm_loss(live, batch, sigmas, zs)
        got = grad(loss, params)

        raw = base.parameter_arrays()
        for i in range(len(raw)):
            def f(pv, i=i):
                vals = list(raw)
                vals[i] = pv
                return dsm_loss(base.with_parameters(vals), batch, sigmas, zs).item()

            want = finite_difference_grad(f, raw[i])
            assert relative_error(got[i].numpy(), want) < 1e-4


class TestLocalLipschitz:
    def test_linear_half_map(self, rng):
        # sigma_f = sqrt(2) makes the score u/2, so T(u) = u/2 everywhere.
        model = zero_model(sigma_f=np.sqrt(2.0))
        x = rng.standard_normal((2, 8, 8))
        for seed in (0, 1):
            probe = local_lipschitz(model, x, delta=0.5, steps=5, seed=seed)
            assert probe.ratio == pytest.approx(0.5, rel=1e-9)

    def test_scaled_identity_map(self, rng):
        model = zero_model(sigma_f=0.1)
        x = rng.standard_normal((2, 8, 8))
        probe = local_lipschitz(model, x, delta=0.3, steps=3, seed=0)
        assert probe.ratio == pytest.approx(99.0, rel=1e-9)

    def test_iterates_stay_in_ball(self, rng):
        model = init_model(TINY, rng=rng)
        x = rng.standard_normal((2, 8, 8))
        delta = 0.4
        probe = local_lipschitz(model, x, delta=delta, steps=10, seed=3)
        for p in (probe.x1, probe.x2):
            assert np.linalg.norm((p - x).reshape(-1)) <= delta * (1 + 1e-9)

    def test_degenerate_init_is_reseparated(self, rng):
        model = init_model(TINY, rng=rng)
        x = rng.standard_normal((2, 8, 8))
        same = x + 0.01
        probe = local_lipschitz(
            model, x, delta=0.5, steps=2, seed=0, init=(same.copy(), same.copy())
        )
        assert np.isfinite(probe.ratio)
        assert np.linalg.norm((probe.x1 - probe.x2).reshape(-1)) >= 1e-6 * 0.5

    def test_ascent_beats_random_sampling_and_respects_jacobian_bound(self, rng):
        model = init_model(TINY, rng=np.random.default_rng(7))
        x = 0.5 * rng.standard_normal((2, 8, 8))
        delta = 0.3
        probe = local_lipschitz(model, x, delta=delta, steps=60, step_size=delta / 10, seed=1)

        # Lower bound: best ratio over 1e4 random pairs in the ball.
        n = x.size
        best = 0.0
        for _ in range(10):
            d1 = rng.standard_normal((1000, n))
            d1 *= (delta * rng.uniform(size=1000) ** (1 / n) / np.linalg.norm(d1, axis=1))[:, None]
            d2 = rng.standard_normal((1000, n))
            d2 *= (delta * rng.uniform(size=1000) ** (1 / n) / np.linalg.norm(d2, axis=1))[:, None]
            p1 = x[None] + d1.reshape(1000, *x.shape)
            p2 = x[None] + d2.reshape(1000, *x.shape)
            t1 = model.t_map(tensor(p1)).numpy().reshape(1000, -1)
            t2 = model.t_map(tensor(p2)).numpy().reshape(1000, -1)
            num = np.linalg.norm(t1 - t2, axis=1)
            den = np.linalg.norm((p1 - p2).reshape(1000, -1), axis=1)
            best = max(best, float((num / np.maximum(den, 1e-12)).max()))
        assert probe.ratio >= best * (1 - 1e-9)

        # Upper bound: max spectral norm of the finite-difference Jacobian of
        # T over 100 ball points, plus 5% slack. The two-point ratio is
        # bounded by the Jacobian norm along the segment between the points
        # (mean value theorem), so half the points sample that segment and
        # half the ball at large.
        eps = 1e-5
        eye = np.eye(n)
        worst = 0.0
        points = []
        for t in np.linspace(0.0, 1.0, 50):
            points.append(probe.x1 + t * (probe.x2 - probe.x1))
        for _ in range(50):
            d = rng.standard_normal(n)
            d *= delta * rng.uniform() ** (1 / n) / np.linalg.norm(d)
            points.append(x + d.reshape(x.shape))
        for u in points:
            plus = (u.reshape(-1)[None] + eps * eye).reshape(n, *x.shape)
            minus = (u.reshape(-1)[None] - eps * eye).reshape(n, *x.shape)
            tp = model.t_map(tensor(plus)).numpy().reshape(n, -1)
            tm = model.t_map(tensor(minus)).numpy().reshape(n, -1)
            J = (tp - tm).T / (2 * eps)
            worst = max(worst, float(np.linalg.norm(J, 2)))
        assert probe.ratio <= worst * 1.05


class TestPenalty:
    def test_dead_zone(self):
        assert penalty_from_ratios([0.1, 0.5, 0.89], l=0.9).item() == 0.0

    def test_single_ratio_half_over(self):
        assert penalty_from_ratios([0.9 + 0.5], l=0.9).item() == pytest.approx(0.25)

    def test_mixed_ratios(self):
        got = penalty_from_ratios([0.8, 1.1], l=0.9).item()
        assert got == pytest.approx((0.0**2 + 0.2**2) / 2)

    def test_theta_gradient_zero_in_dead_zone(self, rng):
        # T == 0 everywhere, so all ratios are ~0 and the hinge is inactive.
        model = zero_model(sigma_f=1.0).trainable()
        cfg = TrainConfig(delta=0.5, ascent_steps=2, m=0.1)
        batch = [rng.standard_normal((2, 8, 8)) for _ in range(2)]
        pen, probes, _ = penalty(model, batch, cfg, rng=np.random.default_rng(0))
        assert pen.item() == pytest.approx(0.0, abs=1e-20)
        grads = grad(pen, model.parameters())
        for g in grads:
            np.testing.assert_array_equal(g.numpy(), np.zeros_like(g.numpy()))

    def test_matches_hinge_of_measured_ratios(self, rng):
        model = init_model(TINY, rng=rng).trainable()
        cfg = TrainConfig(delta=0.5, ascent_steps=3, m=0.9999)  # l tiny: hinge active
        batch = [rng.standard_normal((2, 8, 8)) for _ in range(3)]
        pen, probes, ratios = penalty(model, batch, cfg, rng=np.random.default_rng(1))
        measured = np.array([p.ratio for p in probes])
        want = float(np.mean(np.maximum(measured - cfg.l, 0.0) ** 2))
        assert pen.item() == pytest.approx(want, rel=1e-6)


class TestAdam:
    def test_first_step_is_signed_lr(self):
        opt = Adam(lr=0.01)
        params = [np.array([1.0, -2.0, 3.0])]
        grads = [np.array([0.5, -0.25, 1.0])]
        (new,) = opt.step(params, grads)
        # With bias correction, the first step is lr * g/(|g| + eps).
        np.testing.assert_allclose(new, params[0] - 0.01 * np.sign(grads[0]), atol=1e-6)

    def test_matches_reference_implementation(self, rng):
        lr, b1, b2, eps = 3e-3, 0.9, 0.999, 1e-8
        opt = Adam(lr=lr, beta1=b1, beta2=b2, eps=eps)
        p = rng.standard_normal(7)
        p_ref = p.copy()
        m = np.zeros(7)
        v = np.zeros(7)
        cur = [p]
        for t in range(1, 6):
            g = rng.standard_normal(7)
            cur = opt.step(cur, [g])
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p_ref = p_ref - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        np.testing.assert_allclose(cur[0], p_ref, atol=1e-12)


class TestTrain:
    def test_pure_dsm_halves_loss_on_one_image(self):
        from lcmuse.mri import make_phantom

        x = make_phantom(0, 16, 16)
        img = np.stack([x.real, x.imag])
        model = init_model(SMALL, sigma_f=0.1, rng=np.random.default_rng(0))
        cfg = TrainConfig(lam=0.0, epochs=200, batch_size=1, lr=1e-2, seed=0)
        trained, history = train(model, [img], cfg)
        assert len(history) == 200
        first = history[0]["dsm"]
        best = min(h["dsm"] for h in history)
        assert best <= 0.5 * first

    def test_determinism(self):
        from lcmuse.mri import make_phantom

        imgs = [
            np.stack([p.real, p.imag])
            for p in (make_phantom(i, 16, 16) for i in range(3))
        ]
        model = init_model(TINY, rng=np.random.default_rng(1))
        cfg = TrainConfig(lam=10.0, delta=0.5, ascent_steps=2, epochs=2, batch_size=2, seed=5)
        t1, h1 = train(model, imgs, cfg)
        t2, h2 = train(model, imgs, cfg)
        for a, b in zip(t1.parameter_arrays(), t2.parameter_arrays()):
            np.testing.assert_array_equal(a, b)
        assert h1 == h2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_loss_aborts_with_state(self):
        from lcmuse.mri import make_phantom

        x = make_phantom(0, 16, 16)
        img = np.stack([x.real, x.imag]).astype(np.float32)
        model = init_model(SMALL, rng=np.random.default_rng(0))
        cfg = TrainConfig(lam=0.0, epochs=50, batch_size=1, lr=1e12, dtype="float32", seed=0)
        with pytest.raises(NumericalError) as exc:
            train(model, [img], cfg)
        assert "step" in exc.value.state

    def test_lam_ramps_while_violations_persist(self):
        # A zero network with sharp sigma_f has ratio 99 everywhere: the
        # constraint is violated at every probe, so lam doubles each epoch.
        imgs = [np.zeros((2, 8, 8)) for _ in range(2)]
        model = zero_model(sigma_f=0.1)
        cfg = TrainConfig(
            lam=1e-6,  # keep the penalty numerically harmless
            delta=0.5,
            ascent_steps=1,
            epochs=3,
            batch_size=2,
            lr=1e-12,
            lam_ramp_every=1,
            seed=0,
        )
        _, history = train(model, imgs, cfg)
        lams = [h["lam"] for h in history]
        assert lams[0] == pytest.approx(1e-6)
        assert lams[1] == pytest.approx(2e-6)
        assert lams[2] == pytest.approx(4e-6)

    def test_history_csv(self, tmp_path):
        history = [
            {"step": 0, "epoch": 0, "dsm": 1.0, "penalty": 0.0, "lam": 10.0,
             "max_ratio": 0.5, "m_prime": 0.5, "loss": 1.0}
        ]
        path = tmp_path / "history.csv"
        write_history_csv(history, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0].startswith("step,")
        assert len(lines) == 2

    def test_empty_dataset_rejected(self):
        model = init_model(TINY)
        with pytest.raises(ConfigError):
            train(model, [], TrainConfig())


class TestConstraintSatisfaction:
    def test_large_lambda_caps_probe_ratio(self):
        # With a heavy penalty from the start, trained probes on held-out
        # points must sit at or below the contraction target (plus slack).
        from lcmuse.mri import make_phantom

        imgs = [
            np.stack([p.real, p.imag])
            for p in (make_phantom(i, 16, 16) for i in range(4))
        ]
        held = np.stack([make_phantom(99, 16, 16).real, make_phantom(99, 16, 16).imag])
        model = init_model(TINY, sigma_f=1.0, rng=np.random.default_rng(2))
        cfg = TrainConfig(
            lam=1e4, m=0.1, delta=0.5, ascent_steps=5, epochs=60, batch_size=2,
            lr=1e-3, seed=0,
        )
        trained, history = train(model, imgs, cfg)
        probe = local_lipschitz(trained, held, delta=cfg.delta, steps=15, seed=0)
        assert probe.ratio <= cfg.l + 0.05
