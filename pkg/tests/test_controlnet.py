import numpy as np
import pytest
import torch

from liversynth.config import ControlNetConfig
from liversynth.config import DenoiserConfig
from liversynth.controlnet import ConditionTensor
from liversynth.controlnet import ControlNet
from liversynth.controlnet import conditional_sample
from liversynth.controlnet import conditioned_mse
from liversynth.controlnet import conditioned_predict_noise
from liversynth.controlnet import encode_condition
from liversynth.controlnet import load_controlnet
from liversynth.core import LabelMap
from liversynth.core import ShapeMismatchError
from liversynth.core import torch_generator
from liversynth.diffusion import Denoiser
from liversynth.diffusion import LatentCodec
from liversynth.diffusion import build_schedule
from liversynth.diffusion import load_denoiser
from liversynth.diffusion import sample_latent

LATENT = (2, 2, 8, 8, 4)
BASE_CONFIG = DenoiserConfig(latent_channels=2, base_width=8, num_levels=2, time_embedding_dim=8)


def _pair(zero_init: bool = True) -> tuple[Denoiser, ControlNet]:
    torch.manual_seed(0)
    base = Denoiser(BASE_CONFIG)
    control = ControlNet.from_denoiser(base, ControlNetConfig(condition_channels=3, zero_init=zero_init))
    return base, control


def _condition(batch: int = 1, spatial=(8, 8, 4)) -> ConditionTensor:
    return ConditionTensor(torch.randn((batch, 3, *spatial), generator=torch_generator(1)))


def test_zero_initialized_branch_leaves_base_unchanged():
    base, control = _pair()
    z = torch.randn(LATENT, generator=torch_generator(0))
    with torch.no_grad():
        expected = base(z, 3)
        actual = conditioned_predict_noise(base, control, z, 3, _condition())
    assert torch.equal(actual, expected)


def test_encoder_copy_matches_base():
    base, control = _pair()
    for name, tensor in base.encoder.state_dict().items():
        assert torch.equal(control.encoder.state_dict()[name], tensor)


def test_condition_spatial_mismatch_names_axis():
    base, control = _pair()
    with pytest.raises(ShapeMismatchError, match="depth axis mismatch"):
        conditioned_predict_noise(base, control, torch.randn(LATENT), 1, _condition(spatial=(8, 8, 2)))


def test_condition_channel_mismatch():
    base, control = _pair()
    bad = ConditionTensor(torch.randn(1, 2, 8, 8, 4))
    with pytest.raises(ShapeMismatchError, match="channels"):
        conditioned_predict_noise(base, control, torch.randn(LATENT), 1, bad)


def test_condition_must_be_batched():
    with pytest.raises(ShapeMismatchError):
        ConditionTensor(torch.zeros(3, 8, 8, 4))


def test_control_gradients_match_finite_differences(grad_check):
    base, control = _pair(zero_init=False)
    base, control = base.double(), control.double()
    base.requires_grad_(False)
    schedule = build_schedule(10, 1e-2, 0.2)
    generator = torch_generator(3)
    z0 = torch.randn((1, 2, 4, 4, 2), generator=generator, dtype=torch.float64)
    noise = torch.randn(z0.shape, generator=generator, dtype=torch.float64)
    cond = ConditionTensor(torch.randn((1, 3, 4, 4, 2), generator=generator, dtype=torch.float64))

    checked, failures = grad_check(
        lambda: conditioned_mse(base, control, z0, cond, 6, noise, schedule), control.parameters()
    )
    assert checked == 100
    assert failures == []
    assert all(p.grad is None for p in base.parameters())


def test_conditional_sampling_is_seeded():
    base, control = _pair(zero_init=False)
    schedule = build_schedule(3, 1e-2, 0.2)
    cond = _condition()
    first = conditional_sample(base, control, cond, schedule, seed=4)
    assert first.shape == (1, 2, 8, 8, 4)
    assert torch.equal(first, conditional_sample(base, control, cond, schedule, seed=4))


def test_trained_branch_references_frozen_models(tiny_checkpoints):
    base, control, _ = tiny_checkpoints
    assert control.kind == "controlnet"
    assert control.references == base.hashes()
    assert len(control.history) == 1
    model = load_controlnet(control)
    frozen = load_denoiser(base.image_diffusion)
    codec = LatentCodec.from_checkpoints(base.label_vae, base.label_diffusion)
    label = LabelMap(np.ones((32, 32, 16), dtype=np.uint8))
    cond = encode_condition(label, codec)
    assert cond.data.shape == (1, 2, 8, 8, 4)
    with torch.no_grad():
        assert conditioned_predict_noise(frozen, model, torch.zeros(1, 2, 8, 8, 4), 2, cond).shape == (1, 2, 8, 8, 4)


def test_zero_initialized_branch_is_identity_for_random_inputs():
    base, control = _pair()
    generator = torch_generator(7)
    with torch.no_grad():
        for _ in range(10):
            z = torch.randn((1, 2, 8, 8, 4), generator=generator)
            t = int(torch.randint(1, 1000, (1,), generator=generator))
            cond = ConditionTensor(torch.randn((1, 3, 8, 8, 4), generator=generator))
            assert torch.equal(conditioned_predict_noise(base, control, z, t, cond), base(z, t))


def test_zero_initialized_sampling_matches_base_sampling():
    base, control = _pair()
    schedule = build_schedule(3, 1e-2, 0.2)
    conditioned = conditional_sample(base, control, _condition(), schedule, seed=11)
    plain = sample_latent(base, schedule, conditioned.shape, seed=11)
    assert torch.equal(conditioned, plain)
