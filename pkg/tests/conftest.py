import os
import re
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from pprad import pipeline  # noqa: E402

# every error map produced anywhere in the suite is checked against its bound
MAP_RUNS = {"ppr": 0, "ae": 0}
BOUNDS = {"ppr": float(np.sqrt(3.0)), "ae": 1.0}


def _monitored(fn, kind):
    def wrapper(*args, **kwargs):
        emap = fn(*args, **kwargs)
        lo, hi = float(emap.data.min()), float(emap.data.max())
        assert lo >= 0 and hi <= BOUNDS[kind], f"{kind} error map outside [0, {BOUNDS[kind]}]: [{lo}, {hi}]"
        MAP_RUNS[kind] += 1
        return emap
    return wrapper


@pytest.fixture(scope="session", autouse=True)
def map_bound_monitor():
    with pytest.MonkeyPatch.context() as mp:
        mp.setattr(pipeline, "infer_error_map_ppr", _monitored(pipeline.infer_error_map_ppr, "ppr"))
        mp.setattr(pipeline, "infer_error_map_ae", _monitored(pipeline.infer_error_map_ae, "ae"))
        yield MAP_RUNS


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", rep.nodeid)
            if m and rep.when == "call":
                detail = dict(rep.user_properties).get("detail", "")
                lines.append((int(m.group(1)), f"criterion {m.group(1)} ({m.group(2)}): "
                                                f"{'PASS' if outcome == 'passed' else 'FAIL'}  {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
