"""Isolated-word and continuous recognition plus WER scoring.

Continuous decoding is a time-synchronous Viterbi over a word-loop graph
keeping one active history per (word, position) cell; with a bigram LM
the word-pair context is carried by the cell's word identity, so the
search is exact up to that single-best-history approximation at word
starts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NoPathError
from .hmm import Dictionary, NEG_INF, build_graph, viterbi

logger = logging.getLogger(__name__)

LN10 = math.log(10.0)


class LmOovError(DataError):
    """A query word is outside the language model vocabulary."""


@dataclass(frozen=True)
class BigramLm:
    """Bigram model with unigram backoff, natural-log probabilities."""

    unigram: dict[str, float]
    backoff: dict[str, float]
    bigram: dict[tuple[str, str], float]

    def __post_init__(self):
        for (w1, w2) in self.bigram:
            if w1 not in self.unigram or w2 not in self.unigram:
                raise DataError(f"bigram ({w1!r}, {w2!r}) uses a word "
                                "missing from the unigrams")

    @property
    def vocab(self) -> set[str]:
        return set(self.unigram)

    def unigram_logprob(self, word: str) -> float:
        if word not in self.unigram:
            raise LmOovError(f"word {word!r} not in LM vocabulary")
        return self.unigram[word]

    def query(self, w1: str, w2: str) -> float:
        """log P(w2 | w1): the bigram if present, else backoff + unigram."""
        if w1 not in self.unigram:
            raise LmOovError(f"word {w1!r} not in LM vocabulary")
        if w2 not in self.unigram:
            raise LmOovError(f"word {w2!r} not in LM vocabulary")
        if (w1, w2) in self.bigram:
            return self.bigram[(w1, w2)]
        return self.backoff.get(w1, 0.0) + self.unigram[w2]


def load_arpa_bigram(path) -> BigramLm:
    """Parse the 1- and 2-gram sections of an ARPA file (log10 inside,
    natural log in the returned model)."""
    counts: dict[int, int] = {}
    unigram: dict[str, float] = {}
    backoff: dict[str, float] = {}
    bigram: dict[tuple[str, str], float] = {}
    section = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line == "\\data\\":
                section = "data"
                continue
            if line == "\\1-grams:":
                section = 1
                continue
            if line == "\\2-grams:":
                section = 2
                continue
            if line == "\\end\\":
                section = "end"
                continue
            if line.startswith("\\"):
                raise DataError(f"{path}:{lineno}: malformed section "
                                f"header {line!r}")
            if section == "data":
                if not line.startswith("ngram "):
                    raise DataError(f"{path}:{lineno}: expected 'ngram N=C'")
                order, _, count = line[len("ngram "):].partition("=")
                counts[int(order)] = int(count)
            elif section == 1:
                parts = line.split()
                if len(parts) not in (2, 3):
                    raise DataError(f"{path}:{lineno}: bad 1-gram line")
                word = parts[1].upper()
                unigram[word] = float(parts[0]) * LN10
                if len(parts) == 3:
                    backoff[word] = float(parts[2]) * LN10
            elif section == 2:
                parts = line.split()
                if len(parts) != 3:
                    raise DataError(f"{path}:{lineno}: bad 2-gram line")
                key = (parts[1].upper(), parts[2].upper())
                bigram[key] = float(parts[0]) * LN10
            else:
                raise DataError(f"{path}:{lineno}: content outside any "
                                "section")
    if section != "end":
        raise DataError(f"{path}: missing \\end\\ marker")
    if 1 in counts and counts[1] != len(unigram):
        raise DataError(f"{path}: header promises {counts[1]} 1-grams, "
                        f"found {len(unigram)}")
    if 2 in counts and counts[2] != len(bigram):
        raise DataError(f"{path}: header promises {counts[2]} 2-grams, "
                        f"found {len(bigram)}")
    return BigramLm(unigram, backoff, bigram)


def write_arpa_bigram(lm: BigramLm, path) -> None:
    def log10(x: float) -> str:
        return f"{x / LN10:.6f}"

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\\data\\\n")
        fh.write(f"ngram 1={len(lm.unigram)}\n")
        fh.write(f"ngram 2={len(lm.bigram)}\n\n")
        fh.write("\\1-grams:\n")
        for word in sorted(lm.unigram):
            line = f"{log10(lm.unigram[word])}\t{word}"
            if word in lm.backoff:
                line += f"\t{log10(lm.backoff[word])}"
            fh.write(line + "\n")
        fh.write("\n\\2-grams:\n")
        for (w1, w2) in sorted(lm.bigram):
            fh.write(f"{log10(lm.bigram[(w1, w2)])}\t{w1} {w2}\n")
        fh.write("\n\\end\\\n")


def flat_bigram(vocabulary) -> BigramLm:
    """Uniform unigrams and backoffs, no explicit bigrams."""
    vocab = sorted(vocabulary)
    logp = math.log(1.0 / len(vocab))
    return BigramLm({w: logp for w in vocab}, {w: 0.0 for w in vocab}, {})


def bigram_from_transcripts(transcripts, smoothing: float = 0.5) -> BigramLm:
    """Count-based bigram with additive smoothing and unigram backoff."""
    vocab = sorted({w for sent in transcripts for w in sent})
    idx = {w: i for i, w in enumerate(vocab)}
    v = len(vocab)
    uni = np.full(v, smoothing)
    bi = np.full((v, v), smoothing)
    for sent in transcripts:
        for w in sent:
            uni[idx[w]] += 1
        for w1, w2 in zip(sent[:-1], sent[1:]):
            bi[idx[w1], idx[w2]] += 1
    unigram = {w: float(np.log(uni[idx[w]] / uni.sum())) for w in vocab}
    bigram = {}
    for w1 in vocab:
        row = bi[idx[w1]]
        for w2 in vocab:
            bigram[(w1, w2)] = float(np.log(row[idx[w2]] / row.sum()))
    return BigramLm(unigram, {w: 0.0 for w in vocab}, bigram)


# ---------------------------------------------------------------------------
# Isolated-word decoding


def decode_isolated(features: np.ndarray, dictionary: Dictionary, scorer):
    """Best word by constrained Viterbi score; ties break lexicographically.

    Returns (word, log-likelihood).  Words whose pronunciations are longer
    than the utterance are skipped; if every word is infeasible a
    :class:`NoPathError` is raised.
    """
    if not dictionary.entries:
        raise DataError("empty dictionary")
    frame_scores = scorer.frame_scores(features)
    best_word, best_score = None, NEG_INF
    for word in dictionary.words:
        graph = build_graph([word], dictionary, scorer)
        if graph.n_nodes > frame_scores.shape[0]:
            continue
        path = viterbi(graph, features, scorer, frame_scores=frame_scores)
        if path.loglik > best_score:
            best_word, best_score = word, path.loglik
    if best_word is None:
        raise NoPathError("utterance shorter than every pronunciation")
    return best_word, best_score


# ---------------------------------------------------------------------------
# Continuous decoding


@dataclass(frozen=True)
class RecognitionResult:
    words: tuple[str, ...]
    loglik: float
    boundaries: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        if self.boundaries:
            if self.boundaries[0][0] != 0:
                raise DataError("boundaries do not start at frame 0")
            for (a, b), (c, d) in zip(self.boundaries, self.boundaries[1:]):
                if b != c:
                    raise DataError("boundaries do not partition the frames")


def decode_continuous(features: np.ndarray, dictionary: Dictionary, scorer,
                      lm: BigramLm | None = None, lm_weight: float = 1.0,
                      word_insertion_penalty: float = 0.0
                      ) -> RecognitionResult:
    """Word-loop Viterbi decoding with an optional bigram LM.

    Word-to-word transitions add lm_weight * log P(next | prev) plus the
    insertion penalty; with an LM the first word adds its scaled unigram.
    When an LM is given, the loop runs over the LM vocabulary (which must
    be covered by the dictionary).
    """
    if lm is not None:
        words = sorted(lm.vocab)
        missing = [w for w in words if w not in dictionary]
        if missing:
            raise DataError(f"dictionary misses LM words: {missing[:5]}")
    else:
        words = dictionary.words
    if not words:
        raise DataError("empty vocabulary")

    frame_scores = scorer.frame_scores(features)
    T = frame_scores.shape[0]

    # flatten (word, position) cells
    units, starts, word_of = [], [], []
    for wi, word in enumerate(words):
        starts.append(len(units))
        for unit in dictionary[word]:
            units.append(unit)
            word_of.append(wi)
    units = np.array(units, dtype=np.int64)
    starts = np.array(starts + [len(units)], dtype=np.int64)
    word_of = np.array(word_of, dtype=np.int64)
    n_cells = len(units)
    last_of_word = starts[1:] - 1
    first_of_word = starts[:-1]
    stay = scorer.stay_logprob[units]
    advance = scorer.exit_logprob[units]
    emit = frame_scores[:, units]

    if lm is not None:
        entry_lm = lm_weight * np.array([lm.unigram_logprob(w)
                                         for w in words])
        trans_lm = lm_weight * np.array(
            [[lm.query(w1, w2) for w2 in words] for w1 in words])
    else:
        entry_lm = np.zeros(len(words))
        trans_lm = np.zeros((len(words), len(words)))

    score = np.full((T, n_cells), NEG_INF)
    back = np.full((T, n_cells), -1, dtype=np.int64)
    # jumps must be recorded: for one-unit words a word-loop re-entry is
    # otherwise indistinguishable from a self loop in the backtrace
    jumped = np.zeros((T, n_cells), dtype=bool)
    score[0, first_of_word] = emit[0, first_of_word] + entry_lm
    for t in range(1, T):
        prev = score[t - 1]
        best = prev + stay                        # self loops
        src = np.arange(n_cells)
        within = prev[:-1] + advance[:-1]         # within-word advance
        inside = (word_of[1:] == word_of[:-1])
        cand = np.where(inside, within, NEG_INF)
        upd = cand > best[1:]
        best[1:] = np.where(upd, cand, best[1:])
        src[1:] = np.where(upd, np.arange(n_cells - 1), src[1:])
        # word-end to word-start transitions
        end_scores = prev[last_of_word] + advance[last_of_word]
        jump = (end_scores[:, None] + trans_lm
                + word_insertion_penalty)          # (from_word, to_word)
        best_from = np.argmax(jump, axis=0)
        jump_best = jump[best_from, np.arange(len(words))]
        upd = jump_best > best[first_of_word]
        best[first_of_word] = np.where(upd, jump_best, best[first_of_word])
        src[first_of_word] = np.where(upd, last_of_word[best_from],
                                      src[first_of_word])
        jumped[t, first_of_word] = upd
        score[t] = best + emit[t]
        back[t] = src

    final = score[T - 1, last_of_word] + advance[last_of_word]
    wbest = int(np.argmax(final))
    total = float(final[wbest])
    if total == NEG_INF:
        raise NoPathError("utterance shorter than the shortest pronunciation")

    cells = np.empty(T, dtype=np.int64)
    cells[T - 1] = last_of_word[wbest]
    for t in range(T - 1, 0, -1):
        cells[t - 1] = back[t, cells[t]]
    hyp_words, bounds = [], []
    seg_start = 0
    for t in range(1, T + 1):
        if t == T or jumped[t, cells[t]]:
            hyp_words.append(words[word_of[cells[t - 1]]])
            bounds.append((seg_start, t))
            seg_start = t
    return RecognitionResult(tuple(hyp_words), total, tuple(bounds))


def wer(ref, hyp):
    """Word error rate with S/D/I counts from a minimum edit alignment.

    Among minimum-cost alignments the one with the fewest substitutions
    is chosen, which pins down D and I as well because D - I equals
    len(ref) - len(hyp) for every alignment.
    """
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise DataError("empty reference")
    R, H = len(ref), len(hyp)
    # DP over (cost, substitutions), lexicographic
    INF = (10 ** 9, 10 ** 9)
    table = [[INF] * (H + 1) for _ in range(R + 1)]
    table[0][0] = (0, 0)
    for i in range(1, R + 1):
        table[i][0] = (i, 0)
    for j in range(1, H + 1):
        table[0][j] = (j, 0)
    for i in range(1, R + 1):
        ri = ref[i - 1]
        for j in range(1, H + 1):
            sub = 0 if ri == hyp[j - 1] else 1
            c_diag, s_diag = table[i - 1][j - 1]
            c_del, s_del = table[i - 1][j]
            c_ins, s_ins = table[i][j - 1]
            table[i][j] = min((c_diag + sub, s_diag + sub),
                              (c_del + 1, s_del),
                              (c_ins + 1, s_ins))
    cost, subs = table[R][H]
    # D - I = R - H and S + D + I = cost
    dels = (cost - subs + (R - H)) // 2
    ins = (cost - subs - (R - H)) // 2
    rate = cost / R
    return rate, subs, dels, ins
