import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("opmark", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("opmark")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_split(tmp_path_factory):
    """10 + 10 synthetic corpus with train/test1/test2 assigned."""
    from opmark.harness.corpus import CorpusSpec, generate_corpus
    from opmark.harness.manifest import corpus_manifest, make_splits

    root = tmp_path_factory.mktemp("corpus")
    corpus = generate_corpus(CorpusSpec(benign=10, malicious=10), seed=3)
    corpus.write(root)
    manifest = make_splits(corpus_manifest(corpus, root), 0.7, seed=5)
    manifest.save(root / "manifest.json")
    return manifest


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
