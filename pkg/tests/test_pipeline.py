"""End-to-end synthetic pipeline against a frozen golden report."""

import json
import math
from pathlib import Path

import pytest

GOLDEN = Path(__file__).with_name("golden") / "synthetic_pipeline.json"


def _compare(got, want, path="$"):
    if isinstance(want, dict):
        assert isinstance(got, dict) and set(got) == set(want), path
        for k in want:
            _compare(got[k], want[k], f"{path}.{k}")
    elif isinstance(want, list):
        assert isinstance(got, list) and len(got) == len(want), path
        for i, (g, w) in enumerate(zip(got, want)):
            _compare(g, w, f"{path}[{i}]")
    elif isinstance(want, float) and not isinstance(want, bool):
        assert isinstance(got, (int, float)), path
        assert math.isclose(got, want, rel_tol=1e-6, abs_tol=1e-6), f"{path}: {got} != {want}"
    else:
        assert got == want, path


@pytest.fixture(scope="module")
def serial(pipeline, tmp_path_factory):
    return pipeline.dumps(pipeline.run_pipeline(tmp_path_factory.mktemp("serial"), threads=1))


def test_matches_golden(serial):
    _compare(json.loads(serial), json.loads(GOLDEN.read_text()))


@pytest.mark.parametrize("threads", [2, 5])
def test_byte_identical_across_threads(pipeline, serial, tmp_path, threads):
    assert pipeline.dumps(pipeline.run_pipeline(tmp_path, threads=threads)) == serial


def test_rerun_byte_identical(pipeline, serial, tmp_path):
    assert pipeline.dumps(pipeline.run_pipeline(tmp_path, threads=1)) == serial
