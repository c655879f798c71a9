import pytest

from blurman.datagen import SceneConfig, one_arm_swing, synthesize
from blurman.trainer import TrainConfig


def tiny_scene(**kw):
    base = dict(swings=one_arm_swing(amplitude=0.75, freq=0.75), frames=4, width=32, height=32, focal=50.0,
                field_resolution=(24, 24, 10), n_samples=16, texture_period=0.2, background=0.25)
    base.update(kw)
    return SceneConfig(**base)


def tiny_train_config(**kw):
    base = dict(iterations=0, patches=2, patch_size=6, n_samples=12, field_resolution=(16, 16, 8),
                density_scale=20.0, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthesize(tiny_scene())


ACCEPTANCE_LINES = {}


def report_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
