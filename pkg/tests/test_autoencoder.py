import math

import pytest
import torch

from liversynth.autoencoder import Autoencoder
from liversynth.autoencoder import GaussianLatent
from liversynth.autoencoder import fit_autoencoder
from liversynth.autoencoder import kl_divergence
from liversynth.autoencoder import load_autoencoder
from liversynth.autoencoder import reconstruction_loss
from liversynth.autoencoder import reparameterize
from liversynth.autoencoder import vae_loss
from liversynth.config import AutoencoderConfig
from liversynth.config import OptimizerSettings
from liversynth.config import VaeStageConfig
from liversynth.core import ShapeMismatchError
from liversynth.core import torch_generator
from liversynth.dataset import load_pairs
from liversynth.training import NonFiniteLossError

ROI = (32, 32, 16)


def _model(**overrides) -> Autoencoder:
    torch.manual_seed(0)
    return Autoencoder(AutoencoderConfig(latent_channels=2, base_width=4, **overrides))


def test_latent_is_downsampled_by_factor():
    model = _model()
    posterior = model.encode(torch.rand(2, 1, *ROI))
    assert posterior.mean.shape == (2, 2, 8, 8, 4)
    assert model.decode(posterior.mean).shape == (2, 1, *ROI)


def test_unbatched_sample_roundtrips_shape():
    model = _model()
    posterior = model.encode(torch.rand(1, *ROI))
    assert posterior.mean.shape == (2, 8, 8, 4)
    assert model.decode(posterior.mean).shape == (1, *ROI)


def test_image_decoder_output_in_unit_range():
    out = _model()(torch.rand(1, 1, 8, 8, 4) * 10)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_indivisible_input_names_axis():
    with pytest.raises(ShapeMismatchError, match="depth axis"):
        _model().encode(torch.rand(1, 1, 8, 8, 6))


def test_wrong_channel_count_rejected():
    with pytest.raises(ShapeMismatchError, match="channel"):
        _model().encode(torch.rand(1, 5, 8, 8, 4))


def test_kl_of_standard_normal_is_zero():
    g = GaussianLatent(torch.zeros(2, 3), torch.zeros(2, 3))
    assert float(kl_divergence(g)) == pytest.approx(0.0)
    shifted = GaussianLatent(torch.ones(2, 3), torch.zeros(2, 3))
    assert float(kl_divergence(shifted)) == pytest.approx(0.5)


def test_kl_overflow_raises():
    g = GaussianLatent(torch.full((2,), float("inf")), torch.zeros(2))
    with pytest.raises(NonFiniteLossError):
        kl_divergence(g)


def test_reparameterize_is_seeded():
    g = GaussianLatent(torch.zeros(4, 4), torch.zeros(4, 4))
    assert torch.equal(reparameterize(g, 5), reparameterize(g, 5))
    assert not torch.equal(reparameterize(g, 5), reparameterize(g, 6))


def test_reconstruction_loss_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        reconstruction_loss(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 1, 4, 4, 2))


def test_vae_loss_gradients_match_finite_differences(grad_check):
    model = _model().double()
    x = torch.rand(1, 1, 8, 8, 4, generator=torch_generator(1), dtype=torch.float64)

    def loss_fn():
        posterior = model.encode(x)
        x_hat = model.decode(reparameterize(posterior, 3))
        return vae_loss(x, x_hat, posterior, kl_weight=1e-2).total

    checked, failures = grad_check(loss_fn, model.parameters())
    assert checked == 100
    assert failures == []


def test_untrained_checkpoint_loads_frozen(untrained_image_vae):
    assert untrained_image_vae.kind == "vae_image"
    assert untrained_image_vae.history == []
    model = load_autoencoder(untrained_image_vae)
    assert not model.training
    assert not any(p.requires_grad for p in model.parameters())


@pytest.mark.slow
def test_overfits_single_phantom(phantom_manifest):
    data = load_pairs(phantom_manifest).volumes[:1]
    stage = VaeStageConfig(
        model=AutoencoderConfig(latent_channels=2, base_width=4),
        optimizer=OptimizerSettings(learning_rate=3e-3, weight_decay=0.0, epochs=150, batch_size=1, log_every=50),
    )
    checkpoint = fit_autoencoder(stage, data, seed=0)
    initial = checkpoint.constants["initial_eval_reconstruction"]
    assert checkpoint.history[-1]["eval_reconstruction"] < 0.5 * initial


def test_kl_closed_form_for_wider_shifted_posterior():
    g = GaussianLatent(torch.ones(3, 4, dtype=torch.float64), torch.full((3, 4), math.log(4.0), dtype=torch.float64))
    assert float(kl_divergence(g)) == pytest.approx(0.5 * (1.0 + 4.0 - 1.0 - math.log(4.0)), abs=1e-12)
