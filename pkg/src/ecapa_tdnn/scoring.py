"""Trial scoring: cosine similarity, adaptive s-norm, EER and MinDCF."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np


def _unit(x: np.ndarray, what: str = "embedding") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError(f"zero-norm {what}")
    return x / n


def cosine_score(a, b) -> float:
    return float(np.clip(_unit(a) @ _unit(b), -1.0, 1.0))


@dataclass
class Cohort:
    """Unit-length speaker-average embeddings used as the imposter set."""
    vectors: np.ndarray
    speakers: list[str]
    top_n: int = 1000
    # "top_n": adaptive (N most similar per side); "all": every cohort member
    selection: str = "top_n"

    @property
    def n(self) -> int:
        return len(self.vectors) if self.selection == "all" else min(self.top_n, len(self.vectors))

    def stats(self, emb: np.ndarray) -> tuple[float, float]:
        """Mean and population std of the selected cohort scores for ``emb``."""
        return top_n_stats(self.vectors @ _unit(emb), self.n)


def build_cohort(embeddings_by_speaker: Mapping[str, np.ndarray], top_n: int = 1000,
                 selection: str = "top_n") -> Cohort:
    """Length-normalize each embedding, average per speaker, re-normalize."""
    if selection not in ("top_n", "all"):
        raise ValueError(f"unknown cohort selection {selection!r}")
    if top_n < 1:
        raise ValueError("top_n must be positive")
    speakers, vectors = [], []
    for spk, embs in embeddings_by_speaker.items():
        avg = _unit(np.atleast_2d(embs)).mean(axis=0)
        norm = np.linalg.norm(avg)
        if norm < 1e-12:
            raise ValueError(f"speaker {spk!r} averages to a zero vector")
        speakers.append(spk)
        vectors.append(avg / norm)
    if not speakers:
        raise ValueError("empty cohort")
    return Cohort(np.stack(vectors), speakers, top_n, selection)


def top_n_stats(scores: np.ndarray, n: int) -> tuple[float, float]:
    top = np.sort(np.asarray(scores, dtype=np.float64))[::-1][:n]
    return float(top.mean()), float(top.std())


def snorm(raw: float, enroll_stats: tuple[float, float], test_stats: tuple[float, float]) -> float:
    (mu_e, sd_e), (mu_t, sd_t) = enroll_stats, test_stats
    if sd_e <= 0 or sd_t <= 0:
        raise ValueError("degenerate cohort: zero score spread")
    return 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t)


def adaptive_snorm(raw: float, e, t, cohort: Cohort) -> float:
    """Average of enrollment-side and test-side z-scores over the top cohort scores."""
    return snorm(raw, cohort.stats(e), cohort.stats(t))


def score_trials(embeddings: Mapping[str, np.ndarray], trials: Sequence[tuple[int, str, str]],
                 cohort: Cohort | None = None) -> list[tuple[str, str, float, float]]:
    """Score ``(label, enroll, test)`` trials -> ``(enroll, test, raw, normalized)``."""
    missing = {u for _, e, t in trials for u in (e, t) if u not in embeddings}
    if missing:
        raise KeyError(f"trial ids without embeddings: {sorted(missing)[:5]}")
    stats: dict[str, tuple[float, float]] = {}
    out = []
    for _, e, t in trials:
        raw = cosine_score(embeddings[e], embeddings[t])
        if cohort is None:
            out.append((e, t, raw, raw))
            continue
        for u in (e, t):
            if u not in stats:
                stats[u] = cohort.stats(embeddings[u])
        out.append((e, t, raw, snorm(raw, stats[e], stats[t])))
    return out


# ---------------------------------------------------------------------------
# detection metrics

def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    tar, non = scores[labels], scores[~labels]
    if len(tar) == 0 or len(non) == 0:
        raise ValueError("need at least one target and one nontarget trial")
    return tar, non


def operating_points(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Miss and false-alarm rates at every distinct threshold, ascending.

    Accept iff score >= threshold. Thresholds are the sorted unique scores
    followed by +inf (reject everything).
    """
    tar, non = _split(scores, labels)
    thr = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    miss = np.searchsorted(np.sort(tar), thr, side="left") / len(tar)
    fa = (len(non) - np.searchsorted(np.sort(non), thr, side="left")) / len(non)
    return thr, miss, fa


def _crossing(miss: np.ndarray, fa: np.ndarray) -> tuple[int, float]:
    diff = fa - miss
    i = int(np.flatnonzero(diff <= 0)[0])
    if diff[i] == 0 or i == 0:
        return i, float(miss[i])
    d0, d1 = diff[i - 1], diff[i]
    w = d0 / (d0 - d1)
    return i, float(miss[i - 1] + w * (miss[i] - miss[i - 1]))


def eer(scores, labels, return_threshold: bool = False):
    """Equal error rate where the miss and false-alarm step curves cross.

    Between the two operating points bracketing the crossing the curves are
    interpolated linearly.
    """
    thr, miss, fa = operating_points(scores, labels)
    i, rate = _crossing(miss, fa)
    return (rate, float(thr[i])) if return_threshold else rate


@dataclass(frozen=True)
class DCFConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1 or self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("invalid detection cost parameters")


def min_dcf(scores, labels, cfg: DCFConfig = DCFConfig(), return_threshold: bool = False):
    """Minimum normalized detection cost over all thresholds."""
    thr, miss, fa = operating_points(scores, labels)
    cost = cfg.c_miss * miss * cfg.p_target + cfg.c_fa * fa * (1 - cfg.p_target)
    cost /= min(cfg.c_miss * cfg.p_target, cfg.c_fa * (1 - cfg.p_target))
    i = int(np.argmin(cost))
    return (float(cost[i]), float(thr[i])) if return_threshold else float(cost[i])


# ---------------------------------------------------------------------------
# text formats

def read_trials(path) -> list[tuple[int, str, str]]:
    """Lines ``label enroll_id test_id`` with label 1 (target) or 0."""
    trials = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ValueError(f"{path}:{n}: expected 'label enroll_id test_id'")
            trials.append((int(parts[0]), parts[1], parts[2]))
    return trials


def write_trials(path, trials: Iterable[tuple[int, str, str]]) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{lab} {e} {t}\n" for lab, e, t in trials)


def write_scores(path, rows: Iterable[tuple[str, str, float, float]]) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{e} {t} {raw:.8f} {norm:.8f}\n" for e, t, raw, norm in rows)


def read_scores(path) -> dict[tuple[str, str], tuple[float, float]]:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{n}: expected 'enroll_id test_id raw normalized'")
            out[(parts[0], parts[1])] = (float(parts[2]), float(parts[3]))
    return out
