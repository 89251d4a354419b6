import pathlib

import pytest
import yaml

from npsd import dataset, synthetic

CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def demo_corpus(tmp_path_factory) -> pathlib.Path:
    """Small synthetic corpus: ~60 s of speech, 30 s each of white and pink noise."""
    root = tmp_path_factory.mktemp("corpus")
    synthetic.write_demo_corpus(str(root), speech_seconds=60.0, noise_seconds=30.0, seed=11)
    return root


@pytest.fixture(scope="session")
def demo_manifest(demo_corpus) -> dataset.CorpusManifest:
    cfg = yaml.safe_load((demo_corpus / "config.yaml").read_text())
    return dataset.CorpusManifest.from_config(cfg, str(demo_corpus))


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
