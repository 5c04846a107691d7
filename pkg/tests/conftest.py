import pytest
import torch

from fcbnet import BackboneConfig, FcbNetConfig, build_fcbnet

ACCEPTANCE_LINES: list[str] = []


def make_config(variant="base", in_channels=3, **model_kw) -> FcbNetConfig:
    cfg = FcbNetConfig(backbone=BackboneConfig(variant=variant, in_channels=in_channels))
    for key, value in model_kw.items():
        section, _, name = key.rpartition("__")
        setattr(getattr(cfg, section) if section else cfg, name, value)
    return cfg


@pytest.fixture(scope="session")
def tiny_model():
    return build_fcbnet(make_config("tiny"), seed=0)


@pytest.fixture(scope="session")
def base_model():
    return build_fcbnet(make_config("base"), seed=0)


@pytest.fixture
def acceptance_report():
    def record(number: int, ok: bool, detail: str):
        ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        return ok

    return record


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
