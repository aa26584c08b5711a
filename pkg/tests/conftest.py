import warnings

import pytest
import torch
from hypothesis import HealthCheck, settings

from ctsynth.config import RunConfig, TrainConfig
from ctsynth.discriminator import DiscriminatorConfig
from ctsynth.generator import GeneratorConfig
from ctsynth.phantom import DataConfig

settings.register_profile("ctsynth", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ctsynth")

torch.set_num_threads(1)


def tiny_config(size=64, n_train=8, ngf=8, ndf=8, steps=2, stage_epochs=(1, 1, 2), seed=0, **train) -> RunConfig:
    """Small, fast run config for unit tests."""
    return RunConfig(
        data=DataConfig(size=size, n_train=n_train, n_test_synth=4, n_test_seg=4, seed=seed),
        generator=GeneratorConfig(base_resolution=size, base_channels=ngf, n_residual_blocks=2),
        discriminator=DiscriminatorConfig(base_channels=ndf, n_layers=3 if size >= 64 else 2),
        train=TrainConfig(epochs_total=sum(stage_epochs), stage_epochs=stage_epochs, batch_size=2,
                          steps_per_epoch=steps, seed=seed, **train),
    )


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def phantom_samples():
    from ctsynth.phantom import dataset_from_config

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        man = dataset_from_config(DataConfig(size=64, n_train=8, n_test_synth=4, n_test_seg=4, seed=3))
    return man.materialize("train_synth"), man.materialize("test_synth")


# -- acceptance summary ------------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(n: int, ok: bool, detail: str) -> None:
    _ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains networks; minutes on one CPU core")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
