"""Subject warm start (bake + distill) and curvature preconditioning."""

import numpy as np
import pytest

from meshsplat import (AdaptationConfig, Adapter, DrivingSignal,
                       KroneckerPreconditioner, LossWeights, TrainSample,
                       bake_raw_map, distill_raw_map, init_weights,
                       psnr, render_prediction, rig_frames,
                       subject_warm_start)
from meshsplat.bench import make_oracle_weights
from meshsplat.errors import ContractError
from conftest import make_camera

L1_ONLY = LossWeights(perceptual=0.0, depth_distortion=0.0,
                      normal_consistency=0.0)


def _oracle_samples(small_world, cfg, n=3, size=24, seed=0):
    """Real frames rendered from oracle weights, several views/drivings."""
    rig, anchors, inputs = small_world
    oracle = make_oracle_weights(cfg, seed=77)
    samples = []
    for k in range(n):
        rng = np.random.default_rng(seed + k)
        driving = (DrivingSignal.zeros(cfg.n_expressions) if k == 0 else
                   DrivingSignal(psi_expr=rng.normal(
                       scale=0.3, size=cfg.n_expressions)))
        frames = rig_frames(rig, driving, anchors)
        camera = make_camera(size, distance=0.4)
        target = render_prediction(cfg, oracle, inputs, driving, frames,
                                   camera).rgb
        samples.append(TrainSample(inputs=inputs, driving=driving,
                                   frames=frames, camera=camera,
                                   target=target))
    return samples


class TestBake:
    def test_shape_and_constant_channels(self, small_world, tiny_prior):
        cfg, _ = tiny_prior
        _, _, inputs = small_world
        samples = _oracle_samples(small_world, cfg)
        raw, coverage = bake_raw_map(samples, inputs)
        assert raw.shape == (inputs.height, inputs.width, 13)
        assert 0.0 <= coverage <= 1.0
        np.testing.assert_array_equal(raw[..., 0:3], 0.0)   # no offset
        np.testing.assert_array_equal(raw[..., 6], 1.0)     # identity quat
        np.testing.assert_array_equal(raw[..., 7:10], 0.0)
        np.testing.assert_array_equal(raw[..., 10:12], -0.7)
        np.testing.assert_array_equal(raw[..., 12], 2.2)    # near-opaque

    def test_solid_color_is_recovered(self, small_world, tiny_prior):
        """Texels visible in a uniform image bake to that color."""
        cfg, _ = tiny_prior
        _, _, inputs = small_world
        samples = _oracle_samples(small_world, cfg, n=2)
        flat = np.full_like(samples[0].target, 0.7)
        for s in samples:
            s.target[...] = flat
        raw, coverage = bake_raw_map(samples, inputs)
        assert coverage > 0.3
        # covered texels: sigmoid(logit(0.7)) == 0.7
        wsum_covered = np.abs(raw[..., 3:6]).sum(-1) > 1e-9
        got = 1.0 / (1.0 + np.exp(-raw[..., 3:6][wsum_covered]))
        np.testing.assert_allclose(got, 0.7, atol=1e-6)

    def test_deterministic(self, small_world, tiny_prior):
        cfg, _ = tiny_prior
        _, _, inputs = small_world
        samples = _oracle_samples(small_world, cfg)
        raw1, c1 = bake_raw_map(samples, inputs)
        raw2, c2 = bake_raw_map(samples, inputs)
        np.testing.assert_array_equal(raw1, raw2)
        assert c1 == c2

    def test_empty_samples_rejected(self, small_world):
        _, _, inputs = small_world
        with pytest.raises(ContractError):
            bake_raw_map([], inputs)


class TestDistill:
    def test_rms_decreases_and_is_traced(self, small_world, tiny_prior):
        cfg, weights = tiny_prior
        _, _, inputs = small_world
        samples = _oracle_samples(small_world, cfg)
        raw, _ = bake_raw_map(samples, inputs)
        drivings = [s.driving for s in samples]
        w = {k: v.copy() for k, v in weights.items()}
        trace = distill_raw_map(cfg, w, inputs, drivings, raw, steps=60,
                                lr=5e-3)
        assert len(trace) == 60
        assert trace[-1] < 0.5 * trace[0]

    def test_zero_steps_is_identity(self, small_world, tiny_prior):
        cfg, weights = tiny_prior
        _, _, inputs = small_world
        samples = _oracle_samples(small_world, cfg, n=1)
        raw, _ = bake_raw_map(samples, inputs)
        w = {k: v.copy() for k, v in weights.items()}
        trace = distill_raw_map(cfg, w, inputs, [samples[0].driving], raw,
                                steps=0)
        assert trace == []
        for name in weights:
            np.testing.assert_array_equal(w[name], weights[name])

    def test_no_drivings_rejected(self, small_world, tiny_prior):
        cfg, weights = tiny_prior
        _, _, inputs = small_world
        raw = np.zeros((inputs.height, inputs.width, 13))
        with pytest.raises(ContractError):
            distill_raw_map(cfg, dict(weights), inputs, [], raw)


class TestSubjectWarmStart:
    def test_beats_cold_init_feed_forward(self, small_world, tiny_prior):
        """The warm start's renders are closer to the subject than a
        random initialization's."""
        cfg, _ = tiny_prior
        _, _, inputs = small_world
        samples = _oracle_samples(small_world, cfg, n=3)
        warm, info = subject_warm_start(cfg, samples, inputs, seed=5,
                                        distill_steps=150)
        cold = init_weights(cfg, seed=5)

        def mean_psnr(w):
            return np.mean([
                psnr(render_prediction(cfg, w, s.inputs, s.driving,
                                       s.frames, s.camera).rgb, s.target)
                for s in samples])

        assert mean_psnr(warm) > mean_psnr(cold) + 1.0
        assert set(info) == {"coverage", "n_drivings", "distill_rms"}
        assert info["n_drivings"] == 3

    def test_deterministic_given_seed(self, small_world, tiny_prior):
        cfg, _ = tiny_prior
        _, _, inputs = small_world
        samples = _oracle_samples(small_world, cfg, n=2)
        w1, _ = subject_warm_start(cfg, samples, inputs, seed=9,
                                   distill_steps=40)
        w2, _ = subject_warm_start(cfg, samples, inputs, seed=9,
                                   distill_steps=40)
        for name in w1:
            np.testing.assert_array_equal(w1[name], w2[name])

    def test_duplicate_drivings_deduplicated(self, small_world, tiny_prior):
        cfg, _ = tiny_prior
        _, _, inputs = small_world
        samples = _oracle_samples(small_world, cfg, n=1) * 3
        _, info = subject_warm_start(cfg, samples, inputs,
                                     distill_steps=1)
        assert info["n_drivings"] == 1


class TestKroneckerPreconditioner:
    def test_identity_covariance_rescales_only(self):
        """With orthonormal activation rows (A == I) and orthonormal
        output rows (G == I), preconditioning divides by (1+damping)^2
        on the output weight and (1+damping) elsewhere."""
        rng = np.random.default_rng(0)
        din, dout = 6, 4
        pc = KroneckerPreconditioner(0, beta=0.0, damping=0.01)
        h = np.eye(din) * np.sqrt(din)          # h^T h / n == I
        g_rows = np.eye(dout) * np.sqrt(dout)   # g^T g / n == I
        grads = {"dec_w_out": rng.normal(size=(dout, din)),
                 "dec_b_out": rng.normal(size=dout)}
        ref_w = grads["dec_w_out"].copy()
        ref_b = grads["dec_b_out"].copy()
        pc.apply(grads, [h], g_rows)
        lam_a = 0.01 + 1e-8
        lam_g = 0.01 + 1e-12
        np.testing.assert_allclose(
            grads["dec_w_out"], ref_w / (1 + lam_a) / (1 + lam_g),
            rtol=1e-10)
        np.testing.assert_allclose(
            grads["dec_b_out"], ref_b / (1 + lam_g), rtol=1e-10)

    def test_empty_rows_leave_gradients_untouched(self):
        pc = KroneckerPreconditioner(0)
        grads = {"dec_w_out": np.ones((3, 2)), "dec_b_out": np.ones(3)}
        pc.apply(grads, [np.zeros((0, 2))], np.zeros((0, 3)))
        np.testing.assert_array_equal(grads["dec_w_out"], np.ones((3, 2)))

    def test_wrong_stack_count_rejected(self):
        pc = KroneckerPreconditioner(2)
        with pytest.raises(ContractError):
            pc.apply({}, [np.zeros((1, 2))], np.zeros((1, 3)))

    def test_bad_hyper_params_rejected(self):
        with pytest.raises(ContractError):
            KroneckerPreconditioner(1, beta=1.0)
        with pytest.raises(ContractError):
            KroneckerPreconditioner(1, damping=0.0)
        with pytest.raises(ContractError):
            KroneckerPreconditioner(-1)


class TestAdapterBatching:
    def test_new_config_knobs_validated(self):
        with pytest.raises(ContractError):
            AdaptationConfig(batch_size=0)
        with pytest.raises(ContractError):
            AdaptationConfig(batch_schedule="sorted")
        with pytest.raises(ContractError):
            AdaptationConfig(precondition="full")
        with pytest.raises(ContractError):
            AdaptationConfig(precond_beta=1.0)
        with pytest.raises(ContractError):
            AdaptationConfig(precond_damping=0.0)

    def test_blocked_needs_divisible_pool(self, small_world, tiny_prior):
        cfg, weights = tiny_prior
        real = _oracle_samples(small_world, cfg, n=3, size=12)
        adapter = Adapter(cfg=cfg, weights=weights, lr=1e-3,
                          batch_size=2, batch_schedule="blocked",
                          loss_weights=L1_ONLY)
        with pytest.raises(ContractError):
            adapter.run(real, [], 1)

    def test_batch_one_random_matches_legacy_stream(self, small_world,
                                                    tiny_prior):
        """batch_size=1 without preconditioning is the plain loop."""
        cfg, weights = tiny_prior
        real = _oracle_samples(small_world, cfg, n=2, size=12)
        a = Adapter(cfg=cfg, weights=weights, lr=5e-3, seed=4,
                    loss_weights=L1_ONLY)
        b = Adapter(cfg=cfg, weights=weights, lr=5e-3, seed=4,
                    loss_weights=L1_ONLY, batch_size=1,
                    batch_schedule="random", precondition="none")
        ta = a.run(real, [], 5)
        tb = b.run(real, [], 5)
        assert ta == tb
        for name in a.weights:
            np.testing.assert_array_equal(a.weights[name],
                                          b.weights[name])

    def test_blocked_covers_pool_deterministically(self, small_world,
                                                   tiny_prior):
        """Blocked scheduling draws nothing from the RNG and two runs
        produce identical weights."""
        cfg, weights = tiny_prior
        real = _oracle_samples(small_world, cfg, n=4, size=12)
        runs = []
        for _ in range(2):
            adapter = Adapter(cfg=cfg, weights=weights, lr=2e-3, seed=11,
                              loss_weights=L1_ONLY, batch_size=2,
                              batch_schedule="blocked")
            adapter.run(real, [], 4)
            runs.append(adapter.weights)
        for name in runs[0]:
            np.testing.assert_array_equal(runs[0][name], runs[1][name])

    def test_preconditioned_batch_loss_decreases(self, small_world,
                                                 tiny_prior):
        cfg, weights = tiny_prior
        real = _oracle_samples(small_world, cfg, n=4, size=12)
        adapter = Adapter(cfg=cfg, weights=weights, lr=5e-3, seed=2,
                          loss_weights=L1_ONLY, batch_size=2,
                          batch_schedule="blocked",
                          precondition="decoder")
        trace = adapter.run(real, [], 12)
        assert len(trace) == 12
        assert trace[-1] < trace[0]

    def test_stage2_empty_pool_matches_stage1_with_knobs(self, small_world,
                                                         tiny_prior):
        """The n_gen = 0 degeneration holds with batching and
        preconditioning enabled too."""
        from meshsplat import adapt_stage1, adapt_stage2
        cfg, weights = tiny_prior
        real = _oracle_samples(small_world, cfg, n=4, size=12)
        acfg = AdaptationConfig(stage1_steps=6, stage2_steps=6, seed=3,
                                batch_size=2, batch_schedule="blocked",
                                precondition="decoder")
        w1, t1 = adapt_stage1(cfg, weights, real, acfg, base_lr=1e-2,
                              loss_weights=L1_ONLY)
        w2, t2 = adapt_stage2(cfg, weights, real, [], acfg, base_lr=1e-2,
                              loss_weights=L1_ONLY)
        assert t1 == t2
        for name in w1:
            np.testing.assert_array_equal(w1[name], w2[name])
