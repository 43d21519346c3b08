import importlib.util
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(Path(__file__).resolve().parent))


def _load_pipeline():
    spec = importlib.util.spec_from_file_location("synthetic_pipeline", ROOT / "scripts" / "synthetic_pipeline.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


@pytest.fixture(scope="session")
def pipeline():
    return _load_pipeline()


@pytest.fixture(scope="session")
def pipeline_dir(tmp_path_factory, pipeline):
    """Synthetic inputs shared by the CLI tests (generated once)."""
    d = tmp_path_factory.mktemp("pipe")
    pipeline.make_data(d)
    return d
