import re

import pytest
import torch

from splitcodec.codec import CodecModel, SequenceCodec
from splitcodec.config import ExperimentConfig

torch.set_num_threads(1)


def tiny_config(variant: str = "proposed", **model) -> ExperimentConfig:
    dims = {"vocab_size": 96, "n_layer": 3, "n_embd": 16, "n_head": 2, "seq_len": 16, "split": 1}
    dims.update(model)
    return ExperimentConfig().replace(model=dims, codec={"variant": variant, "channels": 2},
                                      splits=[dims["split"]])


def tiny_model(variant: str = "proposed", seed: int = 0, **model) -> CodecModel:
    torch.manual_seed(seed)
    return CodecModel(tiny_config(variant, **model)).eval()


@pytest.fixture(scope="session")
def tiny_codecs():
    return {v: SequenceCodec(tiny_model(v)) for v in ("proposed", "fourier", "direct_access")}


ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 12


@pytest.fixture
def verdict():
    """Record one acceptance line, then fail the test if the criterion is not met."""

    def record(n: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        assert ok, f"criterion {n}: {detail}"

    return record


def _criterion(nodeid: str) -> int | None:
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", nodeid)
    return int(m.group(1)) if m else None


def pytest_runtest_logreport(report):
    n = _criterion(report.nodeid)
    if n is not None and report.failed and n not in ACCEPTANCE:
        message = str(report.longrepr).strip().splitlines()[-1] if report.longrepr else "error"
        ACCEPTANCE[n] = (False, f"error before verdict: {message}")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
