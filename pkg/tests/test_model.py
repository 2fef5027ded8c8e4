"""Model assembly: frame mapping, lattice contracts, padding invariance."""

import numpy as np
import pytest

from scorescribe.autodiff import ShapeError, Tensor, no_grad
from scorescribe.model import (
    ArchConfig,
    ProbLattice,
    TranscriptionModel,
    count_frames,
    init_params,
    map_to_sequence,
    sequence_to_map,
)

SMALL = dict(input_height=32, block_channels=(4, 8), lstm_hidden=8, lstm_layers=2)


def small_model(num_classes=5, seed=0):
    return TranscriptionModel(ArchConfig(num_classes=num_classes, **SMALL), seed)


class TestMapToSequence:
    def test_reference_shape(self):
        feats = Tensor(np.zeros((1, 256, 8, 100), dtype=np.float32))
        assert map_to_sequence(feats).shape == (100, 1, 2048)

    def test_per_sample_per_column_identity(self):
        B, C, H, W = 2, 3, 2, 4
        data = np.zeros((B, C, H, W), dtype=np.float32)
        for b in range(B):
            for w in range(W):
                data[b, :, :, w] = w + 100 * b
        seq = map_to_sequence(Tensor(data)).data
        for b in range(B):
            for t in range(W):
                np.testing.assert_array_equal(seq[t, b], t + 100 * b)

    def test_channel_major_order(self):
        data = np.arange(12, dtype=np.float32).reshape(1, 3, 4, 1)  # C=3, H=4
        seq = map_to_sequence(Tensor(data)).data
        np.testing.assert_array_equal(seq[0, 0], np.arange(12))  # index = c*H + h

    def test_roundtrip_bit_exact(self):
        rng = np.random.default_rng(0)
        feats = Tensor(rng.normal(size=(2, 3, 4, 5)).astype(np.float32))
        back = sequence_to_map(map_to_sequence(feats), channels=3, height=4)
        assert np.array_equal(back.data, feats.data)


class TestCountFrames:
    @pytest.mark.parametrize("width,frames", [(1600, 100), (16, 1), (31, 1), (160, 10)])
    def test_values(self, width, frames):
        assert count_frames(width) == frames

    def test_too_narrow(self):
        with pytest.raises(ShapeError, match="too narrow"):
            count_frames(15)


class TestArchConfig:
    def test_height_must_divide(self):
        with pytest.raises(ValueError, match="divisible"):
            ArchConfig(num_classes=3, input_height=100)

    def test_num_classes_minimum(self):
        with pytest.raises(ValueError, match="num_classes"):
            ArchConfig(num_classes=1)

    def test_roundtrip_dict(self):
        cfg = ArchConfig(num_classes=7, **SMALL)
        assert ArchConfig.from_dict(cfg.to_dict()) == cfg


class TestModelForward:
    def test_lattice_rows_normalize(self):
        model = small_model()
        imgs = Tensor(np.random.default_rng(1).random((2, 1, 32, 24), dtype=np.float32).astype(np.float32))
        for lat in model.forward(imgs, [24, 17], "train"):
            np.testing.assert_allclose(np.exp(lat.data).sum(axis=1), 1.0, atol=1e-6)

    def test_frame_counts_follow_width_floor(self):
        model = small_model()
        imgs = Tensor(np.zeros((3, 1, 32, 40), dtype=np.float32))
        lats = model.forward(imgs, [40, 36, 20], "train")
        assert [l.shape[0] for l in lats] == [10, 9, 5]

    def test_too_narrow_rejected(self):
        model = small_model()  # two blocks: one frame per 4 columns
        imgs = Tensor(np.zeros((1, 1, 32, 3), dtype=np.float32))
        with pytest.raises(ShapeError, match="too narrow"):
            model.forward(imgs, None, "train")

    def test_padding_invariance_of_sliced_lattices(self):
        model = small_model(seed=3)
        rng = np.random.default_rng(2)
        img = rng.random((1, 32, 28)).astype(np.float32)
        # warm the running stats so eval mode is defined
        model.forward(Tensor(img[None]), None, "train")
        pads = []
        for padded_width in (40, 64, 96):
            canvas = np.zeros((1, 1, 32, padded_width), dtype=np.float32)
            canvas[0, :, :, :28] = img
            with no_grad():
                [lat] = model.forward(Tensor(canvas), [28], "eval")
            assert lat.shape[0] == 7  # sliced to the true frame count
            pads.append(lat.data)
        np.testing.assert_allclose(pads[0], pads[1], rtol=1e-4, atol=1e-5)
        np.testing.assert_allclose(pads[0], pads[2], rtol=1e-4, atol=1e-5)

    def test_batch_size_invariance_eval(self):
        model = small_model(seed=4)
        rng = np.random.default_rng(3)
        a = rng.random((1, 32, 24)).astype(np.float32)
        b = rng.random((1, 32, 24)).astype(np.float32)
        both = Tensor(np.stack([a, b]))
        model.forward(both, None, "train")  # warm stats
        with no_grad():
            lat_batch = model.forward(both, None, "eval")
            [lat_a] = model.forward(Tensor(a[None]), None, "eval")
            [lat_b] = model.forward(Tensor(b[None]), None, "eval")
        np.testing.assert_allclose(lat_batch[0].data, lat_a.data, rtol=1e-4, atol=1e-6)
        np.testing.assert_allclose(lat_batch[1].data, lat_b.data, rtol=1e-4, atol=1e-6)

    def test_eval_mode_deterministic(self):
        model = small_model(seed=5)
        img = np.random.default_rng(4).random((1, 32, 36)).astype(np.float32)
        model.forward(Tensor(img[None]), None, "train")
        first = model.lattice(img).log_probs
        second = model.lattice(img).log_probs
        assert np.array_equal(first, second)


class TestParamAccounting:
    def test_registry_count_matches_closed_form(self):
        cfg = ArchConfig(num_classes=5, **SMALL)
        reg = TranscriptionModel(cfg, 0).registry()

        def block_params(cin, cout):
            reduce = cout * cin + cout
            rcl = cout * cout * 9 + cout + 2 * cout
            return reduce + 2 * rcl

        expected = block_params(1, 4) + block_params(4, 8)
        feat = 8 * (32 // 4)
        h = cfg.lstm_hidden
        expected += 2 * (4 * h * feat + 4 * h * h + 4 * h)  # bilstm layer 1
        expected += 2 * (4 * h * (2 * h) + 4 * h * h + 4 * h)  # bilstm layer 2
        expected += cfg.num_classes * 2 * h + cfg.num_classes
        assert reg.total_parameters() == expected

    def test_init_params_deterministic_per_seed(self):
        cfg = ArchConfig(num_classes=4, **SMALL)
        a, b = init_params(cfg, 11), init_params(cfg, 11)
        c = init_params(cfg, 12)
        assert a.names() == b.names() == c.names()
        for name in a.names():
            assert np.array_equal(a[name].data, b[name].data)
        assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())


class TestProbLattice:
    def test_requires_two_dims(self):
        with pytest.raises(ShapeError):
            ProbLattice(np.zeros((2, 3, 4)))

    def test_properties(self):
        lat = ProbLattice(np.zeros((7, 5)))
        assert lat.frames == 7 and lat.num_classes == 5
