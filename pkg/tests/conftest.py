import os
import sys

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("SPAC_OUTPUT_ROOT", str(tmp_path / "runs"))
    return tmp_path
