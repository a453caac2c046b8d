import numpy as np
import pytest

from ssit.config import HeadConfig, RunConfig, ViTConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**pretrain) -> RunConfig:
    """A configuration small enough for finite-difference and multi-step tests."""
    cfg = RunConfig(seed=3)
    cfg.vit = ViTConfig(image_size=16, patch_size=4, embed_dim=16, depth=2, heads=2)
    cfg.heads = HeadConfig(proj_hidden=32, proj_out=16, pred_hidden=32)
    cfg.pretrain.batch_size = 4
    cfg.pretrain.epochs = 3
    cfg.pretrain.warmup_epochs = 1
    for k, v in pretrain.items():
        setattr(cfg.pretrain, k, v)
    return cfg.validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


_criteria = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" not in report.nodeid:
        return
    if report.when == "call" or report.outcome != "passed":
        detail = dict(report.user_properties).get("detail", "")
        _criteria.setdefault(report.nodeid, (report.outcome, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, (outcome, detail) in sorted(_criteria.items()):
        name = nodeid.split("::")[-1]
        number = int(name[len("test_c"):].split("_")[0])
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}  {verdict}  {name}" + (f"  ({detail})" if detail else ""))
