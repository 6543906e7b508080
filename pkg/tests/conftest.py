from bisect import bisect_right
from pathlib import Path
from typing import Callable
from typing import Iterable

import pytest
import torch

from liversynth.autoencoder import fit_autoencoder
from liversynth.autoencoder import train_vae
from liversynth.config import AutoencoderConfig
from liversynth.config import ControlNetConfig
from liversynth.config import ControlNetStageConfig
from liversynth.config import DenoiserConfig
from liversynth.config import DiffusionStageConfig
from liversynth.config import ExperimentConfig
from liversynth.config import OptimizerSettings
from liversynth.config import PhantomParams
from liversynth.config import ScheduleConfig
from liversynth.config import VaeStageConfig
from liversynth.controlnet import ModelCheckpoints
from liversynth.controlnet import train_controlnet
from liversynth.core import torch_generator
from liversynth.diffusion import train_diffusion
from liversynth.phantom import generate_phantom_dataset
from liversynth.state import StateStore

ROI = (32, 32, 16)


def tiny_optimizer(epochs: int, learning_rate: float = 1e-3) -> OptimizerSettings:
    return OptimizerSettings(learning_rate=learning_rate, epochs=epochs, batch_size=2, log_every=1)


def tiny_vae_stage(stage: str, epochs: int = 0) -> VaeStageConfig:
    return VaeStageConfig(
        model=AutoencoderConfig(
            in_channels=5 if stage == "label" else 1,
            stage=stage,
            latent_channels=2,
            base_width=4,
        ),
        optimizer=tiny_optimizer(epochs),
    )


def tiny_diffusion_stage(epochs: int = 1, num_timesteps: int = 5) -> DiffusionStageConfig:
    return DiffusionStageConfig(
        model=DenoiserConfig(latent_channels=2, base_width=8, num_levels=2, time_embedding_dim=8),
        schedule=ScheduleConfig(num_timesteps=num_timesteps),
        optimizer=tiny_optimizer(epochs),
    )


def tiny_controlnet_stage(epochs: int = 1) -> ControlNetStageConfig:
    return ControlNetStageConfig(
        model=ControlNetConfig(condition_channels=2),
        optimizer=tiny_optimizer(epochs),
    )


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    parameters: Iterable[torch.Tensor],
    num_samples: int = 100,
    step: float = 1e-6,
    seed: int = 0,
) -> tuple[int, list[str]]:
    """Compare autograd against central differences on sampled entries; return (checked, failures)."""
    params = [p for p in parameters if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = torch.cat(
        [
            p.grad.flatten() if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
            for p in params
        ]
    )
    offsets = [0]
    for p in params:
        offsets.append(offsets[-1] + p.numel())
    picks = torch.randperm(offsets[-1], generator=torch_generator(seed))[:num_samples].tolist()
    failures = []
    with torch.no_grad():
        for flat in picks:
            index = bisect_right(offsets, flat) - 1
            view = params[index].view(-1)
            local = flat - offsets[index]
            original = view[local].item()
            view[local] = original + step
            plus = float(loss_fn())
            view[local] = original - step
            minus = float(loss_fn())
            view[local] = original
            numeric = (plus - minus) / (2 * step)
            exact = float(analytic[flat])
            if abs(exact - numeric) > 1e-3 * max(abs(exact), abs(numeric)) + 1e-7:
                failures.append(f"entry {flat}: analytic {exact:.6e} vs numeric {numeric:.6e}")
    return len(picks), failures


@pytest.fixture()
def grad_check() -> Callable[..., tuple[int, list[str]]]:
    return finite_difference_check


@pytest.fixture()
def state_store(tmp_path: Path) -> StateStore:
    db_path = tmp_path / "state.db"
    store = StateStore(db_path)
    yield store
    store.close()


@pytest.fixture(autouse=True)
def _clear_run_root_env(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("LIVERSYNTH_RUN_ROOT", raising=False)


@pytest.fixture(scope="session")
def phantom_params() -> PhantomParams:
    return PhantomParams(roi_shape=ROI)


@pytest.fixture()
def phantom_manifest(tmp_path: Path, phantom_params: PhantomParams):
    return generate_phantom_dataset(6, 0, phantom_params, (4, 1, 1), tmp_path / "data")


@pytest.fixture(scope="session")
def tiny_checkpoints(tmp_path_factory: pytest.TempPathFactory, phantom_params: PhantomParams):
    """Briefly trained label/image stages on six phantoms: (base checkpoints, control checkpoint, manifest)."""
    manifest = generate_phantom_dataset(6, 100, phantom_params, (4, 1, 1), tmp_path_factory.mktemp("tiny"))
    label_vae = train_vae(tiny_vae_stage("label", epochs=1), manifest, seed=1)
    image_vae = train_vae(tiny_vae_stage("image", epochs=1), manifest, seed=2)
    base = ModelCheckpoints(
        label_vae=label_vae,
        label_diffusion=train_diffusion(tiny_diffusion_stage(), label_vae, manifest, seed=3),
        image_vae=image_vae,
        image_diffusion=train_diffusion(tiny_diffusion_stage(), image_vae, manifest, seed=4),
    )
    control = train_controlnet(tiny_controlnet_stage(), base, manifest, seed=5)
    return base, control, manifest


@pytest.fixture()
def untrained_image_vae():
    data = torch.rand((2, 1, *ROI), generator=torch_generator(0))
    return fit_autoencoder(tiny_vae_stage("image", epochs=0), data, seed=0)


def tiny_experiment_payload(run_root: Path, name: str = "tiny") -> dict:
    vae = {"latent_channels": 2, "base_width": 4}
    denoiser = {"latent_channels": 2, "base_width": 8, "num_levels": 2, "time_embedding_dim": 8}
    quick = {"learning_rate": 1e-3, "epochs": 1, "batch_size": 2, "log_every": 1}
    return {
        "name": name,
        "run_root": str(run_root),
        "phantom": {"roi_shape": list(ROI)},
        "data": {"count": 6, "base_seed": 0, "splits": [2, 2, 2]},
        "label_vae": {"model": {**vae, "in_channels": 5, "stage": "label"}, "optimizer": quick},
        "image_vae": {"model": {**vae, "in_channels": 1, "stage": "image"}, "optimizer": quick},
        "label_diffusion": {"model": denoiser, "schedule": {"num_timesteps": 3}, "optimizer": quick},
        "image_diffusion": {"model": denoiser, "schedule": {"num_timesteps": 3}, "optimizer": quick},
        "controlnet": {"model": {"condition_channels": 2}, "optimizer": quick},
        "synthesis": {"count": 2},
        "segmentation": {
            "variants": ["unet"],
            "tasks": ["liver_only"],
            "num_levels": 2,
            "base_width": 4,
            "optimizer": quick,
        },
        "metrics": {"output_dim": 8, "input_slice_size": [16, 16], "widths": [4, 8]},
    }


@pytest.fixture()
def tiny_experiment(tmp_path: Path) -> ExperimentConfig:
    return ExperimentConfig.model_validate(tiny_experiment_payload(tmp_path / "runs"))
