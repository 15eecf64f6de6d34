import numpy as np
import pytest

from topicrefine import corpus as C
from topicrefine import net
from topicrefine.vocab import build_vocab


@pytest.fixture(scope="session")
def synth():
    return C.generate_synthetic(C.SyntheticConfig(n_dialogues=32, turns=4, vocab_size=64,
                                                  n_topics=8, stickiness=0.7, seed=7))


@pytest.fixture(scope="session")
def synth_vocab(synth):
    return build_vocab(synth)


@pytest.fixture
def tiny_cfg():
    return net.ModelConfig(vocab_size=24, n_topics=5, d_model=8, n_layers=2, n_heads=2,
                           max_positions=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dialogue(specs, profile=()):
    """specs: iterable of (speaker, text, topic ids)."""
    utts = tuple(C.Utterance(tuple(text.split()), spk, frozenset(t)) for spk, text, t in specs)
    return C.Dialogue(utts, tuple(tuple(p.split()) for p in profile))


_ACCEPTANCE = {}


@pytest.fixture
def acceptance():
    """Record ``(criterion, name, passed, detail)`` for the end-of-run summary."""
    def record(number, name, passed, detail=""):
        _ACCEPTANCE[number] = (name, bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        name, passed, detail = _ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number} [{status}] {name}: {detail}")
