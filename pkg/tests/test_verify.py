"""Tests for verification probes, image metrics, and the report format."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from lcmuse import mri, verify
from lcmuse.energy import EnergyModel, NetworkSpec, init_model
from lcmuse.exceptions import ConfigError, ReportIntegrityError, ShapeError
from lcmuse.solver import SolverConfig
from lcmuse.verify import (
    VerificationRecord,
    VerificationReport,
    VerifyConfig,
    probe_convexity,
    probe_monotonicity,
    probe_robustness,
    probe_uniqueness,
    psnr,
    run_verification,
    sample_ball_pairs,
    ssim,
)

SMALL = NetworkSpec(layers=3, channels=8, kernel_size=3)


def zero_model(sigma_f: float = 1.0) -> EnergyModel:
    base = init_model(SMALL, sigma_f=sigma_f)
    return base.with_parameters([np.zeros_like(a) for a in base.parameter_arrays()])


def contractive_model(scale: float = 0.3, sigma_f: float = 1.0, seed: int = 5) -> EnergyModel:
    base = init_model(SMALL, sigma_f=sigma_f, rng=np.random.default_rng(seed))
    return base.with_parameters([scale * a for a in base.parameter_arrays()])


def linear_score(matrix: np.ndarray, shape: tuple):
    """Score callable applying a fixed matrix to flattened batches."""

    def fn(batch: np.ndarray) -> np.ndarray:
        flat = batch.reshape(batch.shape[0], -1)
        return (flat @ matrix.T).reshape(batch.shape)

    return fn


def symmetric_with_spectrum(eigenvalues: np.ndarray, seed: int = 0) -> np.ndarray:
    """Symmetric matrix with the given eigenvalues in a random basis."""
    rng = np.random.default_rng(seed)
    d = len(eigenvalues)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return q @ np.diag(eigenvalues) @ q.T


class TestSampleBallPairs:
    def test_points_lie_in_ball(self, rng):
        center = rng.standard_normal((2, 4, 4))
        xs, ys = sample_ball_pairs(center, 0.7, 200, rng)
        for pts in (xs, ys):
            dist = np.linalg.norm((pts - center).reshape(200, -1), axis=1)
            assert np.all(dist <= 0.7 + 1e-12)

    def test_reproducible_for_same_seed(self):
        center = np.zeros((2, 3, 3))
        xs1, ys1 = sample_ball_pairs(center, 1.0, 50, np.random.default_rng(9))
        xs2, ys2 = sample_ball_pairs(center, 1.0, 50, np.random.default_rng(9))
        np.testing.assert_array_equal(xs1, xs2)
        np.testing.assert_array_equal(ys1, ys2)

    def test_rejects_bad_arguments(self, rng):
        with pytest.raises(ConfigError):
            sample_ball_pairs(np.zeros((2, 2, 2)), 0.0, 10, rng)
        with pytest.raises(ConfigError):
            sample_ball_pairs(np.zeros((2, 2, 2)), 1.0, 0, rng)

    def test_unresolvable_degeneracy_raises(self, rng):
        with pytest.raises(ConfigError):
            sample_ball_pairs(np.zeros((2, 2, 2)), 1e-300, 10, rng)


class TestProbeMonotonicity:
    def test_identity_score_gives_modulus_one(self, rng):
        model = zero_model(sigma_f=1.0)
        centers = [rng.standard_normal((2, 4, 4)) for _ in range(2)]
        res = probe_monotonicity(model, centers, delta=0.5, n_pairs=200, seed=1)
        assert res.m_prime == pytest.approx(1.0, abs=1e-10)
        assert res.positive_fraction == 1.0
        assert res.sample_count == 400

    def test_negated_identity_fails(self, rng):
        fn = linear_score(-np.eye(8), (2, 2, 2))
        res = probe_monotonicity(fn, [np.zeros((2, 2, 2))], 1.0, n_pairs=100, seed=0)
        assert res.m_prime == pytest.approx(-1.0, abs=1e-10)
        assert res.positive_fraction == 0.0
        rec = VerificationRecord.make("local_monotonicity", 100, res.m_prime, 0.05, "ge")
        assert not rec.passed

    def test_two_dimensional_spectrum_floor_is_found(self):
        # d = 2: sampled directions cover the circle densely, so the minimum
        # Rayleigh quotient reaches the smallest eigenvalue.
        M = symmetric_with_spectrum(np.array([0.3, 2.0]), seed=3)
        res = probe_monotonicity(
            linear_score(M, (2, 1, 1)), [np.zeros((2, 1, 1))], 1.0, n_pairs=2000, seed=0
        )
        assert res.m_prime == pytest.approx(0.3, abs=0.02)

    def test_clustered_spectrum_floor_is_found(self):
        # Oracle: eigendecomposition says the smallest eigenvalue is 0.3; the
        # remaining eigenvalues sit close by so random pair directions can
        # expose the floor.
        eigs = np.array([0.3] + [0.35] * 7)
        M = symmetric_with_spectrum(eigs, seed=4)
        assert np.linalg.eigvalsh(M).min() == pytest.approx(0.3, abs=1e-12)
        res = probe_monotonicity(
            linear_score(M, (2, 2, 2)), [np.zeros((2, 2, 2))], 1.0, n_pairs=20000, seed=0
        )
        assert res.m_prime == pytest.approx(0.3, abs=0.02)
        assert res.positive_fraction == 1.0

    def test_never_underestimates_spectrum_floor(self):
        # Soundness on a spread spectrum: the sampled quotient can overshoot
        # the smallest eigenvalue but never undershoot it.
        rng = np.random.default_rng(11)
        eigs = np.concatenate([[0.3], rng.uniform(0.3, 2.0, size=31)])
        M = symmetric_with_spectrum(eigs, seed=12)
        res = probe_monotonicity(
            linear_score(M, (2, 4, 4)), [np.zeros((2, 4, 4))], 1.0, n_pairs=5000, seed=2
        )
        assert res.m_prime >= 0.3 - 1e-9
        assert res.m_prime <= 2.0 + 1e-9


class TestProbeConvexity:
    def test_quadratic_equality_case(self, rng):
        model = zero_model(sigma_f=1.0)
        centers = [rng.standard_normal((2, 4, 4))]
        slack = probe_convexity(model, centers, 0.5, n_pairs=300, m=1.0, seed=7)
        assert abs(slack) <= 1e-10

    def test_quadratic_half_modulus_analytic_slack(self):
        model = zero_model(sigma_f=1.0)
        center = np.zeros((2, 4, 4))
        slack = probe_convexity(model, [center], 0.5, n_pairs=300, m=0.5, seed=7)
        xs, ys = sample_ball_pairs(center, 0.5, 300, np.random.default_rng(7))
        d2 = np.linalg.norm((xs - ys).reshape(300, -1), axis=1) ** 2
        want = 0.25 * d2.min()
        assert slack == pytest.approx(want, rel=1e-10)

    def test_consistent_with_monotonicity_on_same_pairs(self, rng):
        # The equivalence is exact for the true ball-wide modulus; the
        # sampled version carries a curvature-variation gap, so the proxy
        # model is kept mildly nonlinear to stay within the 1e-6 slack.
        model = contractive_model(scale=0.1)
        centers = [rng.standard_normal((2, 5, 5)) for _ in range(2)]
        res = probe_monotonicity(model, centers, 0.3, n_pairs=200, seed=3)
        assert res.m_prime > 0
        slack = probe_convexity(model, centers, 0.3, n_pairs=200, m=res.m_prime, seed=3)
        assert slack >= -1e-6


class TestProbeRobustness:
    def unitary_op(self, H=8, W=8):
        return mri.ForwardOperator(np.ones((H, W)), np.ones((1, H, W), dtype=np.complex128))

    def test_quadratic_closed_form_amplification(self, rng):
        # With an identity-energy prior and a unitary operator the minimizer
        # is b-linear: x*(b) = Aᴴb/(1+η²), so ‖Δx‖ = ‖n‖/(1+η²) and the
        # measured amplification is exactly η²/(1+η²).
        op = self.unitary_op()
        model = zero_model(sigma_f=1.0)
        eta = 0.5
        x_ref = rng.standard_normal((2, 8, 8))
        cfg = SolverConfig(eta=eta, L=1.0, tol=1e-12, cg_tol=1e-12)
        res = probe_robustness(
            model, op, x_ref, eta, m_measured=1.0, delta=1.0, n_trials=3, seed=0,
            solver_cfg=cfg,
        )
        want = eta**2 / (1 + eta**2)
        assert res.max_amplification == pytest.approx(want, abs=1e-6)
        assert res.bound_holds
        assert res.trials == 3

    def test_zero_perturbation_skipped(self, rng):
        op = self.unitary_op()
        model = zero_model(sigma_f=1.0)
        cfg = SolverConfig(eta=0.5, L=1.0)
        res = probe_robustness(
            model, op, rng.standard_normal((2, 8, 8)), 0.5, 1.0, 1.0,
            solver_cfg=cfg, perturbations=[np.zeros((1, 8, 8), dtype=complex)],
        )
        assert res.trials == 0
        assert res.skipped == 1
        assert res.max_amplification == 0.0

    def test_oversized_perturbation_rejected(self, rng):
        op = self.unitary_op()
        model = zero_model(sigma_f=1.0)
        cfg = SolverConfig(eta=0.5, L=1.0)
        big = np.ones((1, 8, 8), dtype=complex)
        with pytest.raises(ConfigError):
            probe_robustness(
                model, op, rng.standard_normal((2, 8, 8)), 0.5, 0.1, 0.1,
                solver_cfg=cfg, perturbations=[big],
            )

    def test_half_bound_is_twice_primary(self, rng):
        op = self.unitary_op()
        model = zero_model(sigma_f=1.0)
        cfg = SolverConfig(eta=0.5, L=1.0)
        res = probe_robustness(
            model, op, rng.standard_normal((2, 8, 8)), 0.5, 1.0, 1.0,
            n_trials=2, solver_cfg=cfg,
        )
        assert res.max_amplification_half_bound == pytest.approx(
            2 * res.max_amplification, rel=1e-12
        )


class TestPsnr:
    def test_identical_images_hit_cap(self, rng):
        x = rng.random((6, 6))
        assert psnr(x, x) == 99.0

    def test_uniform_error_reference_value(self):
        ref = np.full((8, 8), 0.6)
        ref[0, 0] = 1.0
        rec = ref - 0.1
        assert psnr(ref, rec) == pytest.approx(20.0, abs=1e-12)

    def test_matches_two_pass_recomputation(self, rng):
        ref = rng.random((7, 9)) + 1j * rng.random((7, 9))
        rec = ref + 0.05 * (rng.random((7, 9)) + 1j * rng.random((7, 9)))
        peak = 0.0
        for v in np.abs(ref).ravel():
            peak = max(peak, v)
        se = 0.0
        for a, b in zip(np.abs(ref).ravel(), np.abs(rec).ravel()):
            se += (a - b) ** 2
        want = 20 * np.log10(peak / np.sqrt(se / ref.size))
        assert psnr(ref, rec) == pytest.approx(want, rel=1e-12)

    def test_phase_rotation_invariance(self, rng):
        ref = rng.random((6, 6)) + 1j * rng.random((6, 6))
        rec = ref + 0.1 * rng.random((6, 6))
        rot = np.exp(0.7j)
        assert psnr(ref * rot, rec * rot) == pytest.approx(psnr(ref, rec), rel=1e-12)

    def test_accepts_channel_tensors(self, rng):
        from lcmuse.tensor import tensor

        ref = rng.random((2, 6, 6))
        rec = ref + 0.01
        assert psnr(tensor(ref), tensor(rec)) == pytest.approx(psnr(ref, rec), rel=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((4, 4)), np.zeros((5, 5)))


def ssim_loop_oracle(a: np.ndarray, b: np.ndarray) -> float:
    """Independent per-window SSIM: explicit loops, no shared code."""
    size, sigma = 7, 1.5
    coords = np.arange(size) - (size - 1) / 2
    g = np.exp(-(coords**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    L = a.max() if a.max() > 0 else 1.0
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    H, W = a.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            pa = a[i : i + size, j : j + size]
            pb = b[i : i + size, j : j + size]
            mu_a = (w * pa).sum()
            mu_b = (w * pb).sum()
            va = (w * pa * pa).sum() - mu_a**2
            vb = (w * pb * pb).sum() - mu_b**2
            cov = (w * pa * pb).sum() - mu_a * mu_b
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (va + vb + c2))
            )
    return float(np.mean(vals))


class TestSsim:
    def test_identical_images_give_one(self, rng):
        x = rng.random((10, 10))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_zero_reconstruction_scores_low(self, rng):
        ref = rng.random((12, 12)) + 0.5
        got = ssim(ref, np.zeros_like(ref))
        assert got < 0.1
        assert got == pytest.approx(ssim_loop_oracle(ref, np.zeros_like(ref)), rel=1e-10)

    def test_tiny_noise_scores_near_one(self, rng):
        ref = rng.random((12, 12))
        rec = ref + 1e-4 * rng.standard_normal((12, 12))
        assert ssim(ref, rec) >= 0.999

    def test_matches_window_loop_oracle(self, rng):
        ref = rng.random((11, 13))
        rec = np.clip(ref + 0.2 * rng.standard_normal((11, 13)), 0, None)
        assert ssim(ref, rec) == pytest.approx(ssim_loop_oracle(ref, rec), rel=1e-10)

    def test_phase_rotation_invariance(self, rng):
        ref = rng.random((9, 9)) + 1j * rng.random((9, 9))
        rec = ref + 0.05 * rng.random((9, 9))
        rot = np.exp(-1.1j)
        assert ssim(ref * rot, rec * rot) == pytest.approx(ssim(ref, rec), rel=1e-12)

    def test_constant_images_are_stable(self):
        ref = np.full((8, 8), 0.5)
        rec = np.full((8, 8), 0.3)
        got = ssim(ref, rec)
        assert np.isfinite(got)
        assert -1.0 <= got <= 1.0
        assert ssim(ref, ref.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_too_small_images_rejected(self):
        with pytest.raises(ShapeError):
            ssim(np.zeros((5, 5)), np.zeros((5, 5)))


class TestVerificationReport:
    def make_report(self) -> VerificationReport:
        records = (
            VerificationRecord.make("local_monotonicity", 100, 0.4, 0.05, "ge"),
            VerificationRecord.make("residual_lipschitz_ratio", 10, 0.8, 0.95, "le"),
        )
        return VerificationReport(records=records, metadata={"seed": 0, "delta": 1.0})

    def test_pass_flags_follow_from_numbers(self):
        rec = VerificationRecord.make("x", 1, 0.4, 0.05, "ge")
        assert rec.passed
        assert not VerificationRecord.make("x", 1, 0.01, 0.05, "ge").passed
        assert VerificationRecord.make("x", 1, 0.9, 0.95, "le").passed
        assert not VerificationRecord.make("x", 1, 1.0, 0.95, "le").passed

    def test_integrity_check_accepts_honest_report(self):
        self.make_report().check_integrity()

    def test_tampered_pass_flag_detected(self):
        report = self.make_report()
        bad = dataclasses.replace(report.records[0], measured=0.01)
        tampered = VerificationReport(
            records=(bad, report.records[1]), metadata=report.metadata
        )
        with pytest.raises(ReportIntegrityError):
            tampered.check_integrity()

    def test_json_round_trip(self):
        report = self.make_report()
        text = report.to_json()
        back = VerificationReport.from_json(text)
        assert back.records == report.records
        assert back.metadata == report.metadata
        assert back.to_json() == text

    def test_record_lookup(self):
        report = self.make_report()
        assert report.record("local_monotonicity").measured == 0.4
        with pytest.raises(KeyError):
            report.record("missing")

    def test_all_passed(self):
        assert self.make_report().all_passed


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("verifyds")
    mri.generate_dataset(out, n=2, size=16, accel=2.0, eta=0.01, n_coils=2, seed=4)
    return mri.load_dataset(out)


class TestRunVerification:
    def small_cfg(self) -> VerifyConfig:
        return VerifyConfig(
            delta=0.5,
            m=0.1,
            n_balls=2,
            n_pairs=100,
            lipschitz_steps=4,
            n_recon_cases=1,
            n_inits=2,
            n_robust_trials=1,
            seed=0,
        )

    def test_contractive_model_passes_everything(self, tiny_dataset):
        model = contractive_model(scale=0.1)
        report = run_verification(
            model, tiny_dataset, SolverConfig(eta=0.01), self.small_cfg()
        )
        names = [r.name for r in report.records]
        assert names == [
            "local_monotonicity",
            "residual_lipschitz_ratio",
            "convexity_consistency",
            "descent",
            "stationarity",
            "uniqueness",
            "robustness",
            "robustness_half_bound",
        ]
        report.check_integrity()
        assert report.all_passed, [
            (r.name, r.measured, r.threshold) for r in report.records if not r.passed
        ]
        assert report.metadata["model_hash"] == verify.model_fingerprint(model)

    def test_deterministic_report(self, tiny_dataset):
        model = contractive_model(scale=0.1)
        a = run_verification(model, tiny_dataset, SolverConfig(eta=0.01), self.small_cfg())
        b = run_verification(model, tiny_dataset, SolverConfig(eta=0.01), self.small_cfg())
        assert a.to_json() == b.to_json()

    def test_reuses_supplied_states(self, tiny_dataset):
        from lcmuse.solver import solve
        from lcmuse.mri import sense_init

        model = contractive_model(scale=0.1)
        scfg = SolverConfig(eta=0.01)
        op = tiny_dataset.operator(0)
        b = tiny_dataset.kspaces[0]
        _, st = solve(model, op, b, sense_init(op, b), scfg)
        report = run_verification(
            model, tiny_dataset, scfg, self.small_cfg(), states=[st]
        )
        assert report.record("descent").sample_count == st.iterations
