"""Shared fixtures and the acceptance-criteria summary printed at the end of a run."""

from __future__ import annotations

import numpy as np
import pytest

from mambaulite.params import ParamStore

TOY_ARGS = ["--synthetic", "200", "--size", "64", "--epochs", "30", "--seed", "7"]


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one acceptance line, then assert it."""
    def report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {title} | {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        assert ok, line
    return report


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def store64():
    return ParamStore(np.float64)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The 30-epoch synthetic training run, executed once per session through the CLI."""
    import time

    from mambaulite.cli import main

    out = tmp_path_factory.mktemp("toy") / "toy.mbul"
    t0 = time.perf_counter()
    code = main(["train", *TOY_ARGS, "--out", str(out)])
    elapsed = time.perf_counter() - t0
    return {"code": code, "ckpt": out, "log": out.with_suffix(".csv"), "seconds": elapsed}
