import numpy as np
import pytest

from semkey.corpus import LEXICON_PATH, read_lexicon
from semkey.embed import FeatureHashEmbedder, concepts_from_lexicon
from semkey.keymod import make_key_module
from semkey.textmodel import load_builtin

# fixed before any statistical test was run; never tuned
TEST_SALT = b"semkey-acceptance"


@pytest.fixture(scope="session")
def builtin():
    return load_builtin()


@pytest.fixture(scope="session")
def vocab(builtin):
    return builtin[0]


@pytest.fixture(scope="session")
def lm(builtin):
    return builtin[1]


@pytest.fixture(scope="session")
def embedder(vocab):
    concepts, categories = concepts_from_lexicon(read_lexicon(LEXICON_PATH), vocab)
    return FeatureHashEmbedder(concepts=concepts, categories=categories)


@pytest.fixture(scope="session")
def simkey_module(embedder):
    return make_key_module("simkey", TEST_SALT, embedder)


@pytest.fixture(scope="session")
def std_module():
    return make_key_module("standard_hash", TEST_SALT, k=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one (criterion, passed, detail) entry per acceptance check, printed after the run
ACCEPTANCE_LOG: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LOG:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LOG:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
