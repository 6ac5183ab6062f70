import contextlib
import io
import time

import pytest

from comad.cli import main

NOISE_TEACHER_CONFIG = "teachers.noise = [2]\ntrain.batch_size = 16\ntrain.steps = 300\n"


def run_cli(*argv):
    """Run the CLI in-process; returns (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        try:
            code = main([str(a) for a in argv])
        except SystemExit as exc:
            code = exc.code
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="session")
def noise_teacher_setup(tmp_path_factory):
    """Teachers 0 and 1 toy-pretrained, teacher 2 emitting noise.

    Returns ``(config path, teachers dir, init-teachers stdout)``.
    """
    root = tmp_path_factory.mktemp("noise_teachers")
    cfg = root / "config.toml"
    cfg.write_text(NOISE_TEACHER_CONFIG)
    code, out, err = run_cli("init-teachers", "--config", cfg, "--out-dir", root / "teachers", "--mode", "toy-pretrain")
    assert code == 0, err
    return cfg, root / "teachers", out


_ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class _Criterion:
    def __init__(self, name):
        self.name, self.detail = name, ""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = self.detail or (str(exc).splitlines()[0] if exc else "")
        line = f"[{status}] {self.name}: {detail} ({time.perf_counter() - self.start:.1f}s)"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    """``with criterion("name") as c: ...`` records one PASS/FAIL line; set ``c.detail`` for the summary."""
    return _Criterion
