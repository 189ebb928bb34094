import numpy as np
import pytest

from gahb.datasets import DatasetSpec, generate
from gahb.denoiser import (
    BFCNNConfig,
    ModelDenoiser,
    TrainConfig,
    astype_model,
    build_model,
    denoise,
    full_scale_config,
    load_checkpoint,
    model_vjp,
    param_count,
    save_checkpoint,
    train,
    write_loss_trace_csv,
)
from gahb.errors import (
    CheckpointError,
    DimensionMismatch,
    GahbError,
    TrainingDiverged,
)
from gahb.rng import normal_field


def actual_param_count(model):
    return sum(p.size for p in model.param_list())


def cosine(a, b):
    a, b = a.ravel(), b.ravel()
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def disk_images(count, size=16, seed=0):
    spec = DatasetSpec("disks", count=count, image_size=(size, size),
                       seed=seed)
    images, _ = generate(spec)
    return images


class TestParamCount:
    def test_full_scale_is_665856(self):
        cfg = full_scale_config()
        assert param_count(cfg) == 665856
        model = build_model(cfg, seed=0)
        assert actual_param_count(model) == 665856

    def test_tiny_config_is_220(self):
        cfg = BFCNNConfig(layers=3, channels=4, image_size=(8, 8))
        assert param_count(cfg) == 220
        assert actual_param_count(build_model(cfg)) == 220

    def test_formula_matches_arrays(self):
        for layers, channels in ((3, 1), (5, 6), (9, 32)):
            cfg = BFCNNConfig(layers=layers, channels=channels)
            assert actual_param_count(build_model(cfg)) == param_count(cfg)

    def test_config_validation(self):
        with pytest.raises(GahbError):
            BFCNNConfig(layers=2, channels=4)
        with pytest.raises(GahbError):
            BFCNNConfig(layers=5, channels=0)


class TestBuild:
    def test_seeded_build_is_deterministic(self):
        cfg = BFCNNConfig(layers=5, channels=8)
        a = build_model(cfg, seed=3)
        b = build_model(cfg, seed=3)
        for pa, pb in zip(a.param_list(), b.param_list()):
            np.testing.assert_array_equal(pa, pb)
        c = build_model(cfg, seed=4)
        assert max(np.max(np.abs(pa - pc)) for pa, pc in
                   zip(a.weights, c.weights)) > 1e-4

    def test_fresh_norm_state_is_unit(self):
        model = build_model(BFCNNConfig(layers=6, channels=8))
        assert len(model.gains) == 4 and len(model.running_rms) == 4
        for g, r in zip(model.gains, model.running_rms):
            np.testing.assert_array_equal(g, np.ones(8, dtype=np.float32))
            np.testing.assert_array_equal(r, np.ones(8, dtype=np.float32))

    def test_astype_round_trip_values(self):
        model = build_model(BFCNNConfig(layers=4, channels=6), seed=1)
        double = astype_model(model, np.float64)
        assert double.dtype == np.float64
        np.testing.assert_allclose(double.weights[0], model.weights[0],
                                   rtol=1e-7)


class TestStructuralInvariants:
    def _model(self, seed=0):
        return astype_model(
            build_model(BFCNNConfig(layers=5, channels=8, image_size=(8, 8)),
                        seed=seed),
            np.float64)

    def test_zero_maps_to_zero_exactly(self):
        model = self._model()
        out = denoise(model, np.zeros((2, 1, 8, 8)))
        np.testing.assert_array_equal(out, np.zeros((2, 1, 8, 8)))

    def test_eval_mode_is_degree_one_homogeneous(self):
        model = self._model(seed=2)
        y = normal_field((3, 1, 8, 8), seed=5)
        base = denoise(model, y)
        for alpha in (0.5, 2.0, 7.3):
            np.testing.assert_allclose(denoise(model, alpha * y),
                                       alpha * base, rtol=1e-10, atol=1e-12)

    def test_output_equals_jacobian_times_input(self):
        # piecewise-linear + degree-1 homogeneous means f(y) = J(y) y
        model = self._model(seed=3)
        y = normal_field((1, 1, 8, 8), seed=6)
        d = y.size
        jac = np.empty((d, d))
        for i in range(d):
            cot = np.zeros((1, 1, 8, 8))
            cot.flat[i] = 1.0
            jac[i] = model_vjp(model, y, cot).ravel()
        np.testing.assert_allclose((jac @ y.ravel()).reshape(y.shape),
                                   denoise(model, y), rtol=1e-8, atol=1e-12)

    def test_rejects_bad_input_shapes(self):
        model = self._model()
        with pytest.raises(DimensionMismatch):
            denoise(model, np.zeros((8, 8)))
        with pytest.raises(DimensionMismatch) as err:
            denoise(model, np.zeros((1, 2, 8, 8)))
        assert err.value.axis == "channels"

    def test_model_denoiser_wraps_eval_forward(self):
        model = self._model(seed=4)
        den = ModelDenoiser(model)
        y = normal_field((2, 1, 8, 8), seed=7)
        np.testing.assert_array_equal(den(y), denoise(model, y))
        assert den.image_size == (8, 8)
        cot = normal_field((1, 1, 8, 8), seed=8)
        np.testing.assert_array_equal(den.vjp(y[:1], cot),
                                      model_vjp(model, y[:1], cot))

    def test_model_denoiser_dtype_cast_leaves_original(self):
        base = build_model(BFCNNConfig(layers=4, channels=4), seed=5)
        den = ModelDenoiser(base, dtype=np.float64)
        assert den.model.dtype == np.float64
        assert base.dtype == np.float32


class TestTraining:
    def test_bit_reproducible(self):
        images = disk_images(8)
        cfg = TrainConfig(steps=25, batch=4, seed=11)
        runs = []
        for _ in range(2):
            model = build_model(BFCNNConfig(layers=4, channels=6), seed=1)
            runs.append(train(model, images, cfg))
        for pa, pb in zip(runs[0].model.param_list(),
                          runs[1].model.param_list()):
            np.testing.assert_array_equal(pa, pb)
        np.testing.assert_array_equal(runs[0].loss_trace, runs[1].loss_trace)

    def test_loss_decreases(self):
        images = disk_images(12)
        model = build_model(BFCNNConfig(layers=5, channels=12), seed=2)
        res = train(model, images, TrainConfig(steps=200, batch=16, seed=3,
                                               sigma_range=(0.0, 0.5)))
        losses = res.loss_trace[:, 2]
        assert np.median(losses[-50:]) < 0.5 * np.median(losses[:50])

    def test_trace_records_steps_and_sigma(self):
        images = disk_images(4)
        model = build_model(BFCNNConfig(layers=4, channels=4), seed=3)
        res = train(model, images, TrainConfig(steps=10, batch=4, seed=4,
                                               sigma_range=(0.2, 0.4)))
        np.testing.assert_array_equal(res.loss_trace[:, 0], np.arange(10))
        assert np.all(res.loss_trace[:, 1] >= 0.2)
        assert np.all(res.loss_trace[:, 1] <= 0.4)
        assert model.step == 10
        # continuing advances the counter
        res2 = train(model, images, TrainConfig(steps=5, batch=4, seed=5))
        np.testing.assert_array_equal(res2.loss_trace[:, 0],
                                      np.arange(10, 15))

    def test_single_image_memorization(self):
        # one training image: the denoiser should reproduce it from heavy
        # corruption
        image = disk_images(1, seed=9)
        model = build_model(
            BFCNNConfig(layers=5, channels=16, image_size=(16, 16)), seed=0)
        train(model, image, TrainConfig(steps=600, batch=8, seed=1,
                                        sigma_range=(0.0, 1.0)))
        sigma = 0.2
        y = image + sigma * normal_field(image.shape, seed=2)
        out = denoise(model, y.astype(np.float32))
        assert cosine(out, image) > 0.95

    def test_zero_noise_training_approaches_identity(self):
        images = disk_images(6, seed=10)
        model = build_model(BFCNNConfig(layers=4, channels=8), seed=4)
        train(model, images, TrainConfig(steps=300, batch=8, seed=6,
                                         sigma_range=(0.0, 0.0)))
        out = denoise(model, images.astype(np.float32))
        rel = np.linalg.norm(out - images) / np.linalg.norm(images)
        assert rel < 0.05

    def test_zero_dataset_learns_to_suppress_noise(self):
        images = np.zeros((4, 1, 16, 16), dtype=np.float32)
        model = build_model(BFCNNConfig(layers=4, channels=8), seed=5)
        sigma = 0.3
        res = train(model, images, TrainConfig(steps=600, batch=8, seed=7,
                                               lr=3e-3,
                                               sigma_range=(sigma, sigma)))
        assert np.mean(res.loss_trace[-50:, 2]) < 0.05 * sigma ** 2

    def test_non_finite_loss_raises(self):
        images = np.full((4, 1, 8, 8), np.nan, dtype=np.float32)
        model = build_model(BFCNNConfig(layers=4, channels=4), seed=6)
        with pytest.raises(TrainingDiverged) as err:
            train(model, images, TrainConfig(steps=5, batch=4, seed=8))
        assert err.value.step == 0

    def test_rejects_non_image_stack(self):
        model = build_model(BFCNNConfig(layers=4, channels=4), seed=7)
        with pytest.raises(DimensionMismatch):
            train(model, np.zeros((4, 64)), TrainConfig(steps=1, batch=2))

    def test_loss_trace_csv(self, tmp_path):
        trace = np.array([[0, 0.5, 0.25], [1, 0.4, 0.125]])
        path = tmp_path / "trace.csv"
        write_loss_trace_csv(path, trace)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "step,sigma_mean,loss"
        assert lines[1].startswith("0,0.500000,")
        assert len(lines) == 3


class TestCheckpoints:
    def _trained(self, tmp_path):
        images = disk_images(4, seed=12)
        model = build_model(BFCNNConfig(layers=4, channels=6), seed=8)
        train(model, images, TrainConfig(steps=20, batch=4, seed=9))
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        return model, path

    def test_round_trip_bit_identical(self, tmp_path):
        model, path = self._trained(tmp_path)
        loaded = load_checkpoint(path)
        assert loaded.config.to_dict() == model.config.to_dict()
        assert loaded.step == model.step
        for pa, pb in zip(model.param_list(), loaded.param_list()):
            np.testing.assert_array_equal(pa, pb)
        for ra, rb in zip(model.running_rms, loaded.running_rms):
            np.testing.assert_array_equal(ra, rb)
        y = normal_field((2, 1, 16, 16), seed=3).astype(np.float32)
        np.testing.assert_array_equal(denoise(model, y),
                                      denoise(loaded, y))

    def test_truncated_payload_fails_checksum(self, tmp_path):
        _, path = self._trained(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_corrupted_byte_fails_checksum(self, tmp_path):
        _, path = self._trained(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[-5] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        _, path = self._trained(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"NOPE"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_config_mismatch_rejected(self, tmp_path):
        _, path = self._trained(tmp_path)
        with pytest.raises(CheckpointError, match="config mismatch"):
            load_checkpoint(path,
                            expected_config=BFCNNConfig(layers=5, channels=6))

    def test_expected_config_accepts_match(self, tmp_path):
        model, path = self._trained(tmp_path)
        loaded = load_checkpoint(path, expected_config=model.config)
        assert loaded.config.layers == 4
