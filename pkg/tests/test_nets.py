import math

import numpy as np
import pytest
import torch

from choroidseg import nets
from choroidseg.errors import ConfigError, ExtractorWeightsError
from choroidseg.losses import adv_gen_loss, disc_loss, perceptual_loss


def small_unet(seed=0, base=8, depth=3):
    net = nets.UNet(nets.SegmenterConfig(base_width=base, depth=depth))
    nets.init_parameters(net, seed)
    return net


class TestUNet:
    def test_output_shape_and_normalization(self):
        net = small_unet()
        probs = net(torch.rand(2, 1, 64, 64))
        assert probs.shape == (2, 2, 64, 64)
        assert torch.allclose(probs.sum(dim=1), torch.ones(2, 64, 64), atol=1e-5)
        assert probs.min() >= 0.0

    def test_identical_inputs_identical_outputs(self):
        net = small_unet(seed=3)
        x = torch.rand(1, 1, 64, 64)
        batch = torch.cat([x, x], dim=0)
        probs = net(batch)
        assert torch.equal(probs[0], probs[1])

    def test_untrained_entropy_near_uniform(self):
        # freshly initialized nets should be close to maximally unsure
        entropies = []
        for seed in range(10):
            net = small_unet(seed=seed, base=16, depth=4)
            with torch.no_grad():
                p = net(torch.rand(2, 1, 128, 128)).clamp(1e-9, 1.0)
            entropies.append(float(-(p * p.log()).sum(dim=1).mean()))
        mean_entropy = float(np.mean(entropies))
        assert abs(mean_entropy - math.log(2)) <= 0.3 * math.log(2)

    def test_indivisible_input_rejected(self):
        net = small_unet(depth=3)
        with pytest.raises(ConfigError, match="divisible"):
            net(torch.rand(1, 1, 60, 60))

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            nets.UNet(nets.SegmenterConfig(base_width=2))
        with pytest.raises(ConfigError):
            nets.UNet(nets.SegmenterConfig(depth=1))

    def test_normalization_holds_for_random_weights(self):
        # probability-map invariant under arbitrary parameter draws
        for seed in range(8):
            net = small_unet(seed=seed * 17 + 1)
            with torch.no_grad():
                for p in net.parameters():
                    p.mul_(1.0 + 0.5 * seed)  # push activations around
                probs = net(torch.rand(1, 1, 32, 32))
            assert torch.allclose(probs.sum(dim=1), torch.ones_like(probs.sum(dim=1)), atol=1e-5)

    def test_translation_covariance_on_trained_net(self, trained_band_net, source_dataset):
        from choroidseg import dataio, metrics
        img, _ = dataio.preprocess(source_dataset.sample(0), 64)
        shift = 16
        rolled = torch.roll(img, shifts=shift, dims=1)[None]
        with torch.no_grad():
            pred = trained_band_net(img[None]).argmax(dim=1)[0].numpy()
            pred_of_rolled = trained_band_net(rolled).argmax(dim=1)[0].numpy()
        rolled_pred = np.roll(pred, shift, axis=0)
        assert metrics.iou(pred_of_rolled, rolled_pred) >= 0.9


class TestPatchDiscriminator:
    def test_pinned_output_size_for_default_input(self):
        disc = nets.PatchDiscriminator()
        out = disc(torch.rand(2, 2, 224, 224))
        # conv arithmetic for k4 p1 with strides (2,2,2,1) + final projection
        assert out.shape == (2, 1, 26, 26)
        assert disc.output_size(224) == 26
        assert 10 <= out.shape[-1] <= 30

    def test_output_size_helper_matches_forward(self):
        disc = nets.PatchDiscriminator()
        for size in (64, 128, 224):
            out = disc(torch.rand(1, 2, size, size))
            assert out.shape[-1] == disc.output_size(size)
            assert out.shape[-1] >= 2

    def test_scores_strictly_inside_unit_interval(self):
        disc = nets.PatchDiscriminator()
        nets.init_parameters(disc, 5)
        out = disc(torch.rand(1, 2, 64, 64))
        assert out.min() > 0.0 and out.max() < 1.0

    def test_reacts_to_band_shift_after_one_step(self):
        torch.manual_seed(0)
        disc = nets.PatchDiscriminator()
        nets.init_parameters(disc, 7)
        band = torch.zeros(1, 2, 64, 64)
        band[:, 0] = 1.0
        band[:, 1, 20:36, :] = 1.0
        band[:, 0, 20:36, :] = 0.0
        shifted = torch.roll(band, shifts=32, dims=2)
        opt = torch.optim.AdamW(disc.parameters(), lr=1e-4)
        loss = disc_loss(disc(band), disc(shifted))
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            assert not torch.allclose(disc(band), disc(shifted))


class TestGradientRouting:
    def test_adversarial_loss_updates_generator_not_discriminator(self):
        gen, disc = small_unet(1), nets.PatchDiscriminator()
        nets.init_parameters(disc, 2)
        for p in disc.parameters():
            p.requires_grad_(False)
        probs = gen(torch.rand(1, 1, 64, 64))
        adv_gen_loss(disc(probs)).backward()
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in gen.parameters())
        assert all(p.grad is None for p in disc.parameters())

    def test_discriminator_loss_updates_discriminator_not_generator(self):
        gen, disc = small_unet(3), nets.PatchDiscriminator()
        nets.init_parameters(disc, 4)
        probs_s = gen(torch.rand(1, 1, 64, 64)).detach()
        probs_t = gen(torch.rand(1, 1, 64, 64)).detach()
        disc_loss(disc(probs_s), disc(probs_t)).backward()
        assert all(p.grad is None for p in gen.parameters())
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in disc.parameters())


@pytest.fixture(scope="module")
def extractor():
    return nets.FeatureExtractor("fallback")


class TestFeatureExtractor:

    def test_pyramid_shapes_for_224(self, extractor):
        pyr = extractor(torch.rand(1, 1, 224, 224))
        sizes = [level.shape[-1] for level in pyr.levels]
        channels = [level.shape[1] for level in pyr.levels]
        assert sizes == [224, 112, 56, 28, 14]
        assert tuple(channels) == nets.PYRAMID_CHANNELS

    def test_halving_between_levels(self, extractor):
        pyr = extractor(torch.rand(1, 1, 64, 64))
        sizes = [level.shape[-1] for level in pyr.levels]
        assert sizes == [64, 32, 16, 8, 4]

    def test_identical_inputs_identical_pyramids(self, extractor):
        x = torch.rand(1, 1, 64, 64)
        a = extractor(x)
        b = extractor(x.clone())
        assert all(torch.equal(la, lb) for la, lb in zip(a.levels, b.levels))

    def test_fallback_weights_deterministic(self):
        a = nets.FeatureExtractor("fallback").state_dict()
        b = nets.FeatureExtractor("fallback").state_dict()
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_weights_frozen_and_untouched_by_training(self, extractor):
        before = {k: v.clone() for k, v in extractor.state_dict().items()}
        pred = torch.rand(1, 1, 64, 64, requires_grad=True)
        loss = perceptual_loss(extractor(pred), extractor(torch.rand(1, 1, 64, 64)))
        loss.backward()
        assert pred.grad is not None and pred.grad.abs().sum() > 0
        assert all(p.grad is None for p in extractor.parameters())
        assert all(not p.requires_grad for p in extractor.parameters())
        after = extractor.state_dict()
        assert all(torch.equal(before[k], after[k]) for k in before)

    def test_gradient_reaches_input_through_all_levels(self, extractor):
        pred = torch.rand(1, 1, 32, 32, requires_grad=True)
        pyr = extractor(pred)
        pyr.levels[-1].abs().mean().backward()
        assert torch.isfinite(pred.grad).all()
        assert pred.grad.abs().sum() > 0

    def test_pretrained_unresolvable_gives_instructions(self, monkeypatch):
        monkeypatch.delenv(nets.EXTRACTOR_WEIGHTS_ENV, raising=False)
        import torchvision.models

        def boom(*args, **kwargs):
            raise RuntimeError("no network")

        monkeypatch.setattr(torchvision.models, "vgg19", boom)
        with pytest.raises(ExtractorWeightsError, match="download"):
            nets.FeatureExtractor("pretrained")

    def test_pretrained_missing_file_rejected(self):
        with pytest.raises(ExtractorWeightsError, match="not found"):
            nets.FeatureExtractor("pretrained", weights_path="/nonexistent/vgg.pth")

    def test_pretrained_loads_torchvision_format_file(self, tmp_path):
        # synthesize a state dict with the real conv shapes and check the mapping
        reference = nets.FeatureExtractor("fallback")
        state = {}
        gen = torch.Generator().manual_seed(99)
        for idx, conv in zip((0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28),
                             reference._conv_modules()):
            state[f"features.{idx}.weight"] = torch.randn(conv.weight.shape, generator=gen)
            state[f"features.{idx}.bias"] = torch.randn(conv.bias.shape, generator=gen)
        path = tmp_path / "weights.pth"
        torch.save(state, path)
        loaded = nets.FeatureExtractor("pretrained", weights_path=str(path))
        convs = loaded._conv_modules()
        assert torch.equal(convs[0].weight, state["features.0.weight"])
        assert torch.equal(convs[-1].weight, state["features.28.weight"])

    def test_bad_input_shape_rejected(self, extractor):
        with pytest.raises(ValueError):
            extractor(torch.rand(1, 3, 64, 64))
