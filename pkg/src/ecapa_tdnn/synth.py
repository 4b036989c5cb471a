"""Synthetic speakers: tone-plus-tilt generators with per-utterance variation.

Each speaker owns a fixed set of formant-like tone frequencies and a
spectral tilt; utterances vary phase, a small frequency jitter, a syllabic
amplitude envelope and additive white noise at a given SNR. Separability is
dialed through ``snr_db`` and the frequency bands.
"""
from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import SAMPLE_RATE, write_wav
from .scoring import write_trials
from .seeding import stream

# one tone per band, Hz
TONE_BANDS = ((250.0, 700.0), (700.0, 1500.0), (1500.0, 2600.0), (2600.0, 4000.0), (4000.0, 6000.0))


@dataclass(frozen=True)
class SynthCorpusSpec:
    num_speakers: int = 32
    utts_per_speaker: int = 20
    heldout_per_speaker: int = 4
    duration: float = 3.0
    num_tones: int = 4
    snr_db: float = 15.0
    jitter: float = 0.015
    seed: int = 0
    sample_rate: int = SAMPLE_RATE
    # (source, target) pairs: target speaker reuses source's parameters
    clones: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.num_speakers < 1 or self.utts_per_speaker < 1:
            raise ValueError("need at least one speaker and one utterance")
        if not 0 <= self.heldout_per_speaker < self.utts_per_speaker:
            raise ValueError("heldout_per_speaker must leave training utterances")
        if not 1 <= self.num_tones <= len(TONE_BANDS):
            raise ValueError(f"num_tones must be in 1..{len(TONE_BANDS)}")


@dataclass(frozen=True)
class SpeakerParams:
    tones: tuple[float, ...]
    tilt_db_per_octave: float

    def amplitudes(self) -> np.ndarray:
        f = np.asarray(self.tones)
        return 10.0 ** (self.tilt_db_per_octave * np.log2(f / f[0]) / 20.0)


def draw_speaker(rng: np.random.Generator, num_tones: int = 4) -> SpeakerParams:
    tones = tuple(float(rng.uniform(lo, hi)) for lo, hi in TONE_BANDS[:num_tones])
    return SpeakerParams(tones, float(rng.uniform(-12.0, 0.0)))


def synth_utterance(p: SpeakerParams, rng: np.random.Generator, duration: float = 3.0, snr_db: float = 15.0,
                    jitter: float = 0.015, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    t = np.arange(int(round(duration * sample_rate))) / sample_rate
    sig = np.zeros_like(t)
    for f, a in zip(p.tones, p.amplitudes()):
        f = f * (1.0 + rng.uniform(-jitter, jitter))
        sig += a * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    rate = rng.uniform(2.0, 5.0)
    sig *= 0.6 + 0.4 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    noise_power = np.mean(sig ** 2) / 10.0 ** (snr_db / 10.0)
    sig = sig + rng.normal(0.0, np.sqrt(noise_power), size=t.shape)
    return 0.9 * sig / np.max(np.abs(sig))


def speaker_table(spec: SynthCorpusSpec) -> list[SpeakerParams]:
    rng = stream(spec.seed, "corpus-speakers")
    params = [draw_speaker(rng, spec.num_tones) for _ in range(spec.num_speakers)]
    for src, dst in spec.clones:
        params[dst] = params[src]
    return params


def spk_id(i: int) -> str:
    return f"spk{i:03d}"


def utt_id(i: int, j: int) -> str:
    return f"{spk_id(i)}_u{j:02d}"


def generate(spec: SynthCorpusSpec):
    """Yield ``(utt_id, speaker_id, samples, is_heldout)`` deterministically."""
    for i, p in enumerate(speaker_table(spec)):
        for j in range(spec.utts_per_speaker):
            rng = stream(spec.seed, "corpus-audio", i, j)
            audio = synth_utterance(p, rng, spec.duration, spec.snr_db, spec.jitter, spec.sample_rate)
            yield utt_id(i, j), spk_id(i), audio, j >= spec.utts_per_speaker - spec.heldout_per_speaker


def write_corpus(spec: SynthCorpusSpec, out_dir, manifest: dict | None = None) -> Path:
    """Write WAVs plus ``utt2spk``, ``train.scp``, ``test.scp``, ``trials`` and ``corpus.json``.

    ``*.scp`` lines are ``utt_id relative/path.wav``.
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    utt2spk, train, test = [], [], []
    for uid, sid, audio, held in generate(spec):
        write_wav(out / "wav" / f"{uid}.wav", audio, spec.sample_rate)
        utt2spk.append((uid, sid))
        (test if held else train).append(uid)
    (out / "utt2spk").write_text("".join(f"{u} {s}\n" for u, s in utt2spk))
    (out / "train.scp").write_text("".join(f"{u} wav/{u}.wav\n" for u in train))
    (out / "test.scp").write_text("".join(f"{u} wav/{u}.wav\n" for u in test))
    spk = dict(utt2spk)
    trials = [(int(spk[a] == spk[b]), a, b) for a, b in itertools.combinations(test, 2)]
    write_trials(out / "trials", trials)
    meta = {"spec": dataclasses.asdict(spec), "run_manifest": manifest or {}}
    (out / "corpus.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out


def read_utt2spk(path) -> dict[str, str]:
    with open(path) as fh:
        return dict(line.split() for line in fh if line.strip())


def read_scp(path) -> list[tuple[str, Path]]:
    """``utt_id path`` or bare ``path`` lines; relative paths resolve against the list's folder."""
    base = Path(path).parent
    out = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 1:
                parts = [Path(parts[0]).stem, parts[0]]
            p = Path(parts[1])
            out.append((parts[0], p if p.is_absolute() else base / p))
    return out
