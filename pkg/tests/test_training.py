import warnings

import pytest
import torch

from liversynth.config import OptimizerSettings
from liversynth.core import torch_generator
from liversynth.training import EpochMeter
from liversynth.training import NonFiniteLossError
from liversynth.training import ensure_finite
from liversynth.training import epoch_batches
from liversynth.training import fit


def test_epoch_batches_cover_every_sample():
    batches = epoch_batches(7, 3, torch_generator(0))
    assert [len(b) for b in batches] == [3, 3, 1]
    assert sorted(torch.cat(batches).tolist()) == list(range(7))
    again = epoch_batches(7, 3, torch_generator(0))
    assert all(torch.equal(a, b) for a, b in zip(batches, again))


def test_epoch_meter_averages_components():
    meter = EpochMeter()
    meter.update({"loss": torch.tensor(1.0)})
    meter.update({"loss": torch.tensor(3.0)})
    assert meter.means() == {"loss": 2.0}


def test_ensure_finite_reports_position():
    with pytest.raises(NonFiniteLossError, match="epoch=2") as excinfo:
        ensure_finite({"loss": float("nan")}, stage="vae_image", epoch=2, batch=0)
    assert excinfo.value.stage == "vae_image"
    assert excinfo.value.batch == 0


def test_fit_minimises_quadratic():
    target = torch.tensor([1.0, -2.0])
    weight = torch.nn.Parameter(torch.zeros(2))
    settings = OptimizerSettings(learning_rate=0.1, weight_decay=0.0, epochs=100, batch_size=1)

    def batch_loss(indices, generator):
        return {"loss": ((weight - target) ** 2).sum()}

    history = fit("quadratic", [weight], settings, 1, batch_loss, torch_generator(0))
    assert len(history) == 100
    assert history[-1]["loss"] < history[0]["loss"]
    assert torch.allclose(weight.detach(), target, atol=0.1)


def test_fit_stops_on_nan():
    weight = torch.nn.Parameter(torch.zeros(1))
    settings = OptimizerSettings(epochs=3, batch_size=1)

    def batch_loss(indices, generator):
        return {"loss": weight.sum() * float("nan")}

    with pytest.raises(NonFiniteLossError) as excinfo:
        fit("broken", [weight], settings, 2, batch_loss, torch_generator(0))
    assert excinfo.value.epoch == 1


def test_fit_requires_samples():
    with pytest.raises(ValueError, match="no training samples"):
        fit("empty", [], OptimizerSettings(), 0, lambda i, g: {}, torch_generator(0))


def test_finite_check_accepts_graph_tensors_quietly():
    weight = torch.ones(3, requires_grad=True)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ensure_finite({"loss": (weight * 2).sum(), "kl": 0.5}, stage="vae_label")
