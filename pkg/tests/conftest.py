import sys

import numpy as np
import pytest

from ecapa_tdnn.features import mfcc
from ecapa_tdnn.synth import SynthCorpusSpec, generate


def corpus_features(spec: SynthCorpusSpec):
    """In-memory ``(train, heldout)`` lists of ``(utt_id, mfcc, speaker_index)``."""
    train, held = [], []
    for uid, sid, audio, is_held in generate(spec):
        (held if is_held else train).append((uid, mfcc(audio), int(sid[3:])))
    return train, held


@pytest.fixture(scope="session")
def tiny_corpus():
    return corpus_features(SynthCorpusSpec(num_speakers=4, utts_per_speaker=6, heldout_per_speaker=2,
                                           duration=1.2, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("[")[1].split("]")[0])):
        terminalreporter.write_line(line)
