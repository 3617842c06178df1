import numpy as np
import pytest

from helpers import zero_parameters
from mapfuse import checkpoint
from mapfuse.errors import DimensionError, FormatError
from mapfuse.models import (ArchSpec, Corrector, FuseNetMini, MiniSegNet, OSMNet,
                            ResidualCorrectionPipeline, build_model, encoder_modules, fuse_average,
                            fuse_residual)
from mapfuse.optim import SGD
from mapfuse.tensor import Tensor, masked_softmax_cross_entropy

K = 6
WIDTHS = (4, 8)


@pytest.fixture
def inputs():
    rng = np.random.default_rng(0)
    image = rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
    layers = (rng.random((2, 4, 16, 16)) < 0.3).astype(np.float32)
    return image, layers


def n_params(model):
    return sum(p.data.size for p in model.parameters())


class TestMiniSegNet:
    def test_output_shape(self):
        net = MiniSegNet(3, K, widths=(4, 8, 16))
        assert net(Tensor(np.zeros((1, 3, 128, 128)))).shape == (1, K, 128, 128)

    def test_truncated_decoder_resolution(self):
        net = MiniSegNet(3, K, widths=(4, 4, 4, 4, 4), decoder_trunc=2)
        assert net(Tensor(np.zeros((1, 3, 160, 160)))).shape == (1, K, 40, 40)

    def test_zero_weights_zero_scores(self, inputs):
        net = MiniSegNet(3, K, widths=WIDTHS)
        zero_parameters(net)
        assert not net(Tensor(inputs[0])).data.any()

    def test_divisibility_checked(self):
        with pytest.raises(DimensionError):
            MiniSegNet(3, K, widths=WIDTHS)(Tensor(np.zeros((1, 3, 18, 16))))

    def test_exposes_features(self, inputs):
        net = MiniSegNet(3, K, widths=WIDTHS)
        _, z = net.forward_with_features(Tensor(inputs[0]))
        assert z.shape == (2, WIDTHS[0], 16, 16)

    def test_same_seed_same_weights(self):
        a, b = MiniSegNet(3, K, WIDTHS, seed=5), MiniSegNet(3, K, WIDTHS, seed=5)
        assert checkpoint.dumps(a.state_dict()) == checkpoint.dumps(b.state_dict())


class TestOSMNet:
    def test_shape(self):
        assert OSMNet(4, K)(Tensor(np.zeros((1, 4, 128, 128)))).shape == (1, K, 128, 128)

    def test_zero_weights(self, inputs):
        net = OSMNet(4, K)
        zero_parameters(net)
        assert not net(Tensor(inputs[1])).data.any()

    def test_features_are_post_relu(self, inputs):
        _, z = OSMNet(4, K).forward_with_features(Tensor(inputs[1] - 0.5))
        assert z.data.min() >= 0 and z.shape[1] == 32

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            OSMNet(4, K)(Tensor(np.zeros((1, 3, 8, 8))))


class TestFusionRules:
    def test_average_properties(self):
        rng = np.random.default_rng(1)
        a, b = Tensor(rng.normal(size=(1, K, 4, 4))), Tensor(rng.normal(size=(1, K, 4, 4)))
        np.testing.assert_array_equal(fuse_average(a, a).data, a.data)
        assert not fuse_average(a, Tensor(-a.data)).data.any()
        np.testing.assert_array_equal(fuse_average(a, b).data, fuse_average(b, a).data)
        with pytest.raises(DimensionError):
            fuse_average(a, Tensor(np.zeros((1, K, 2, 2))))

    def test_residual_zero_corrector(self):
        rng = np.random.default_rng(2)
        corr = Corrector(5, K)
        zero_parameters(corr)
        avg = Tensor(rng.normal(size=(1, K, 4, 4)))
        out = fuse_residual(avg, Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(1, 3, 4, 4))), corr)
        np.testing.assert_array_equal(out.data, avg.data)

    def test_residual_shift_linearity(self):
        rng = np.random.default_rng(3)
        corr = Corrector(5, K)
        z1, z2 = Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(rng.normal(size=(1, 3, 2, 2)))
        avg = rng.normal(size=(1, K, 4, 4)).astype(np.float32)
        base = fuse_residual(Tensor(avg), z1, z2, corr).data
        shifted = fuse_residual(Tensor(avg + 2.0), z1, z2, corr).data
        np.testing.assert_allclose(shifted - base, 2.0, atol=1e-5)


class TestDegeneracy:
    def test_fusenet_zero_ancillary_equals_segnet(self, inputs):
        image, layers = inputs
        fused = FuseNetMini(3, 4, K, widths=WIDTHS, seed=9)
        zero_parameters(fused.ancillary)
        single = MiniSegNet(3, K, widths=WIDTHS)
        single.load_state_dict({k[len("main."):]: v for k, v in fused.state_dict().items() if k.startswith("main.")})
        a = fused(Tensor(image), Tensor(layers)).data
        b = single(Tensor(image)).data
        assert a.tobytes() == b.tobytes()

    def test_rescorr_zero_corrector_equals_average(self, inputs):
        image, layers = inputs
        rc = ResidualCorrectionPipeline(3, 4, K, widths=WIDTHS, seed=4)
        zero_parameters(rc.corrector)
        s_opt = rc.segnet(Tensor(image))
        s_osm = rc.osmnet(Tensor(layers))
        ref = fuse_average(s_opt, s_osm).data
        assert rc(Tensor(image), Tensor(layers)).data.tobytes() == ref.tobytes()

    def test_fusenet_both_inputs_matter(self, inputs):
        image, layers = inputs
        net = FuseNetMini(3, 4, K, widths=WIDTHS, seed=1).eval()
        full = net(Tensor(image), Tensor(layers)).data
        no_map = net(Tensor(image), Tensor(np.zeros_like(layers))).data
        no_img = net(Tensor(np.zeros_like(image)), Tensor(layers)).data
        assert not np.array_equal(full, no_map)
        assert not np.array_equal(full, no_img)

    def test_fusenet_parameter_count(self):
        fused = FuseNetMini(3, 4, K, widths=WIDTHS)
        single = MiniSegNet(3, K, widths=WIDTHS)
        # the ancillary encoder only differs in its first conv's input channels (4 vs 3)
        extra = n_params(single.encoder) + WIDTHS[0] * (4 - 3) * 9
        assert n_params(fused) == n_params(single) + extra


class TestJointTraining:
    @pytest.mark.parametrize("kind", ["average", "rescorr", "fusenet"])
    def test_every_parameter_moves(self, kind, inputs):
        image, layers = inputs
        spec = ArchSpec(kind, 3, 4, K, widths=list(WIDTHS))
        model = build_model(spec)
        labels = np.random.default_rng(0).integers(0, K, (2, 16, 16))
        before = {k: v.copy() for k, v in model.state_dict().items()}
        opt = SGD(model.parameters())
        loss = masked_softmax_cross_entropy(model(Tensor(image), Tensor(layers)), labels)
        loss.backward()
        opt.step(0.1)
        for name, p in model.named_parameters():
            assert not np.array_equal(p.data, before[name]), name

    def test_encoder_partition(self):
        seg = build_model(ArchSpec("segnet", 3, 4, K, widths=list(WIDTHS)))
        fuse = build_model(ArchSpec("fusenet", 3, 4, K, widths=list(WIDTHS)))
        osm = build_model(ArchSpec("osmnet", 3, 4, K))
        assert encoder_modules(seg) == [seg.encoder]
        assert encoder_modules(fuse) == [fuse.main.encoder, fuse.ancillary]
        assert encoder_modules(osm) == []


class TestArchAndCheckpoint:
    def test_arch_json_round_trip(self):
        spec = ArchSpec("fusenet", 3, 4, K, widths=[4, 8], decoder_trunc=1, encoding="sdt", seed=3)
        assert ArchSpec.from_json(spec.to_json()) == spec

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ArchSpec("unet", 3, 4, K)

    def test_checkpoint_round_trip(self, tmp_path):
        model = build_model(ArchSpec("rescorr", 3, 4, K, widths=list(WIDTHS)))
        checkpoint.save(model.state_dict(), tmp_path / "m.mfw")
        other = build_model(ArchSpec("rescorr", 3, 4, K, widths=list(WIDTHS), seed=1))
        other.load_state_dict(checkpoint.load(tmp_path / "m.mfw"))
        assert checkpoint.dumps(other.state_dict()) == checkpoint.dumps(model.state_dict())

    def test_checkpoint_layout(self):
        blob = checkpoint.dumps({"w": np.ones((2, 3), np.float32)})
        # magic, count, u16 name length, name, rank, two dims, six floats
        assert len(blob) == 4 + 4 + 2 + 1 + 1 + 8 + 24
        assert blob[:4] == b"MFW1"

    @pytest.mark.parametrize("cut", [3, 9, -1])
    def test_checkpoint_corruption(self, cut):
        blob = checkpoint.dumps({"w": np.ones((2, 3), np.float32)})
        with pytest.raises(FormatError):
            checkpoint.loads(blob[:cut])

    def test_checkpoint_trailing_bytes(self):
        with pytest.raises(FormatError):
            checkpoint.loads(checkpoint.dumps({"w": np.ones(2, np.float32)}) + b"\0")
