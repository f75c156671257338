import csv
import json
import sys
from pathlib import Path

import pytest

from misa.cli import TRACE_FIXED_COLUMNS


def check_trace_schema(path: Path) -> list[dict]:
    """Parse a trace.csv and assert the documented column layout and value types."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    assert tuple(header[:len(TRACE_FIXED_COLUMNS)]) == TRACE_FIXED_COLUMNS
    assert header[-1] == "wall_time"
    middle = header[len(TRACE_FIXED_COLUMNS):-1]
    B = len(middle) // 2
    assert middle == [f"p_{b}" for b in range(B)] + [f"G_{b}" for b in range(B)]
    parsed = []
    for row in body:
        assert len(row) == len(header)
        rec = dict(zip(header, row))
        out = {"epoch": int(rec["epoch"]),
               "sampled": [int(x) for x in rec["sampled"].split(";")] if rec["sampled"] else []}
        for k in header:
            if k not in out:
                out[k] = float(rec[k])
        probs = [out[f"p_{b}"] for b in range(B)]
        assert abs(sum(probs) - 1) < 1e-9 and min(probs) > 0
        assert all(out[f"G_{b}"] >= 0 for b in range(B))
        assert all(0 <= i < B for i in out["sampled"])
        parsed.append(out)
    epochs = [r["epoch"] for r in parsed]
    assert epochs == sorted(epochs)
    return parsed


def write_config(path: Path, **cfg) -> Path:
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def quad_config(tmp_path):
    return write_config(tmp_path / "quad.json", seed=1, task="quadratic",
                        engine={"alpha": 0.01, "T": 5, "N": 30, "delta": 0.3})


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
