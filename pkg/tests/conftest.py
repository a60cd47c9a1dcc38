import contextlib
import io
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from xformer import cli
from xformer.model.spec import default_spec
from xformer.model.xformer import build_xformer


@dataclass
class CliRun:
    code: int
    out: str
    err: str


def run_cli(*argv) -> CliRun:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main([str(a) for a in argv])
    return CliRun(code, out.getvalue(), err.getvalue())


@dataclass
class TrainedRun:
    out_dir: Path
    result: CliRun
    seconds: float

    @property
    def archive(self) -> Path:
        return self.out_dir / cli.ARCHIVE_NAME

    @property
    def config(self) -> Path:
        return self.out_dir / cli.TRAINED_CONFIG_NAME

    def losses(self) -> list:
        rows = (self.out_dir / cli.LOSS_NAME).read_text().splitlines()[1:]
        return [float(r.split(",")[1]) for r in rows]


@pytest.fixture(scope="session")
def default_model():
    return build_xformer(default_spec(), 0)


@pytest.fixture(scope="session")
def trained_run(tmp_path_factory):
    """One pinned-seed 200-step toy-train run shared by every test that needs trained weights."""
    out = tmp_path_factory.mktemp("toy_train")
    t0 = time.perf_counter()
    result = run_cli("toy-train", "--seed", 0, "--out", out)
    seconds = time.perf_counter() - t0
    assert result.code == 0, result.err
    return TrainedRun(out, result, seconds)


ACCEPTANCE_LINES: list = []


def report(number: int, passed: bool, detail: str) -> None:
    """Record and print one acceptance line."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
