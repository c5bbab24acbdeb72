import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from csagn import synthetic  # noqa: E402
from csagn.corpus import write_corpus  # noqa: E402


@pytest.fixture(scope="session")
def synth_small():
    return synthetic.generate(12, seed=5)


@pytest.fixture
def synth_file(tmp_path, synth_small):
    path = tmp_path / "synth.jsonl"
    write_corpus(path, synth_small)
    return path


@pytest.fixture
def write_lines(tmp_path):
    def write(records, name="data.jsonl"):
        path = tmp_path / name
        path.write_text("".join(json.dumps(r) + "\n" for r in records))
        return path

    return write
