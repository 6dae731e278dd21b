"""Left-to-right decode graphs, Viterbi alignment and segmental training.

All arithmetic is in the log domain.  Viterbi ties are broken toward the
smaller chain position (prefer staying), which makes paths deterministic.

Emission scoring is pluggable: any object with ``n_units``,
``stay_logprob``, ``exit_logprob`` and ``frame_scores(features)`` works
(an :class:`~sublex.acoustic.AcousticModelSet`, or the network-posterior
scorer from :mod:`sublex.mlp`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .acoustic import (AcousticModelSet, em_reestimate, make_transitions)
from .corpus import Corpus, Utterance
from .errors import DataError, NoPathError, NumericError

logger = logging.getLogger(__name__)

NEG_INF = -np.inf


@dataclass(frozen=True)
class Dictionary:
    """Mapping word -> pronunciation, a nonempty sequence of unit ids."""

    entries: dict[str, tuple[int, ...]]

    def __post_init__(self):
        for word, pron in self.entries.items():
            if len(pron) == 0:
                raise DataError(f"empty pronunciation for word {word!r}")
            if any(u < 0 for u in pron):
                raise DataError(f"negative unit id in entry for {word!r}")

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __getitem__(self, word: str) -> tuple[int, ...]:
        return self.entries[word]

    @property
    def words(self) -> list[str]:
        return sorted(self.entries)

    def max_unit(self) -> int:
        return max(u for pron in self.entries.values() for u in pron)


def write_dictionary(dictionary: Dictionary, path) -> None:
    """One ``WORD<TAB>a3 a17 ...`` line per entry, sorted by word."""
    with open(path, "w", encoding="utf-8") as fh:
        for word in dictionary.words:
            units = " ".join(f"a{u}" for u in dictionary[word])
            fh.write(f"{word}\t{units}\n")


def read_dictionary(path) -> Dictionary:
    entries: dict[str, tuple[int, ...]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected "
                                "'WORD<TAB>a1 a2 ...'")
            word, text = line.split("\t", 1)
            units = []
            for tok in text.split():
                if not tok.startswith("a") or not tok[1:].isdigit():
                    raise DataError(f"{path}:{lineno}: bad unit token {tok!r}")
                units.append(int(tok[1:]))
            if not units:
                raise DataError(f"{path}:{lineno}: empty pronunciation")
            entries[word.upper()] = tuple(units)
    return Dictionary(entries)


# ---------------------------------------------------------------------------
# Decode graphs


@dataclass(frozen=True)
class DecodeGraph:
    """A linear left-to-right chain of HMM states.

    Per node: the unit id, the transcript word index it belongs to, the
    word string and the position inside the word's pronunciation.  Edges
    are the self-loop on each node (stay log prob) and the advance to the
    next node (exit log prob of the leaving node); the single start node
    is 0 and the single end node is the last one, which also carries the
    terminal exit cost.
    """

    units: np.ndarray            # (P,) unit id per chain position
    word_index: np.ndarray       # (P,) transcript position per node
    words: tuple[str, ...]       # transcript
    positions: np.ndarray        # (P,) position within the word
    stay: np.ndarray             # (P,) self-loop log prob
    advance: np.ndarray          # (P,) log prob of leaving node p

    @property
    def n_nodes(self) -> int:
        return len(self.units)


@dataclass(frozen=True)
class StatePath:
    """Per-frame chain positions plus the path log-likelihood."""

    nodes: np.ndarray
    loglik: float


def build_graph(transcript, dictionary: Dictionary, scorer) -> DecodeGraph:
    """Concatenate the left-to-right chains of the transcript's words."""
    units, word_index, positions = [], [], []
    for wi, word in enumerate(transcript):
        if word not in dictionary:
            raise DataError(f"word {word!r} not in dictionary")
        for pos, unit in enumerate(dictionary[word]):
            if unit >= scorer.n_units:
                raise DataError(f"word {word!r}: unit id {unit} out of "
                                f"range (model has {scorer.n_units})")
            units.append(unit)
            word_index.append(wi)
            positions.append(pos)
    units = np.array(units, dtype=np.int64)
    return DecodeGraph(
        units=units,
        word_index=np.array(word_index, dtype=np.int64),
        words=tuple(transcript),
        positions=np.array(positions, dtype=np.int64),
        stay=scorer.stay_logprob[units],
        advance=scorer.exit_logprob[units],
    )


def chain_graph(unit_seq, scorer) -> DecodeGraph:
    """A bare chain for an explicit unit sequence (no word structure)."""
    units = np.array(unit_seq, dtype=np.int64)
    if units.size == 0:
        raise DataError("empty unit sequence")
    return DecodeGraph(
        units=units,
        word_index=np.zeros(len(units), dtype=np.int64),
        words=("",),
        positions=np.arange(len(units), dtype=np.int64),
        stay=scorer.stay_logprob[units],
        advance=scorer.exit_logprob[units],
    )


def viterbi(graph: DecodeGraph, features: np.ndarray, scorer,
            frame_scores: np.ndarray | None = None) -> StatePath:
    """Exact best path through a chain graph.

    The log-likelihood is the sum of per-frame emissions plus stay
    transitions inside nodes, advance transitions between nodes and the
    terminal exit of the last node.  Raises :class:`NoPathError` when the
    utterance has fewer frames than the chain has positions.
    """
    if frame_scores is None:
        frame_scores = scorer.frame_scores(features)
    T = frame_scores.shape[0]
    P = graph.n_nodes
    if T < P:
        raise NoPathError(f"{T} frames cannot cover {P} chain positions")
    emit = frame_scores[:, graph.units]              # (T, P)
    if np.any(np.isnan(emit)):
        raise NumericError("NaN emission score")

    score = np.full((T, P), NEG_INF)
    came_from_prev = np.zeros((T, P), dtype=bool)
    score[0, 0] = emit[0, 0]
    for t in range(1, T):
        stay_sc = score[t - 1] + graph.stay
        adv_sc = np.full(P, NEG_INF)
        adv_sc[1:] = score[t - 1, :-1] + graph.advance[:-1]
        take_adv = adv_sc > stay_sc                  # tie prefers staying
        best = np.where(take_adv, adv_sc, stay_sc)
        score[t] = best + emit[t]
        came_from_prev[t] = take_adv

    final = score[T - 1, P - 1] + graph.advance[P - 1]
    if np.isnan(final):
        raise NumericError("NaN path score")
    if final == NEG_INF:
        raise NoPathError("no valid path through the graph")

    nodes = np.empty(T, dtype=np.int64)
    p = P - 1
    for t in range(T - 1, -1, -1):
        nodes[t] = p
        if t > 0 and came_from_prev[t, p]:
            p -= 1
    return StatePath(nodes=nodes, loglik=float(final))


def path_loglik(graph: DecodeGraph, nodes: np.ndarray,
                frame_scores: np.ndarray) -> float:
    """Recompute a path's log-likelihood from scratch (self-consistency)."""
    total = float(frame_scores[0, graph.units[nodes[0]]])
    for t in range(1, len(nodes)):
        p_prev, p = int(nodes[t - 1]), int(nodes[t])
        if p == p_prev:
            total += graph.stay[p]
        elif p == p_prev + 1:
            total += graph.advance[p_prev]
        else:
            raise DataError("path skips a chain position")
        total += float(frame_scores[t, graph.units[p]])
    total += graph.advance[int(nodes[-1])]
    return total


def chain_loglik(features: np.ndarray, unit_seq, scorer,
                 frame_scores: np.ndarray | None = None) -> float:
    """Constrained Viterbi score of one utterance for a unit sequence;
    -inf when the utterance is too short."""
    try:
        return viterbi(chain_graph(unit_seq, scorer), features, scorer,
                       frame_scores=frame_scores).loglik
    except NoPathError:
        return NEG_INF


# ---------------------------------------------------------------------------
# Free-loop decoding (any unit may follow any other unit)


def free_loop_decode(features: np.ndarray, scorer,
                     frame_scores: np.ndarray | None = None):
    """Unconstrained unit-level Viterbi.

    Returns (per-frame unit labels, log-likelihood).  Ties prefer staying
    in the current unit, then the lower unit id.
    """
    if frame_scores is None:
        frame_scores = scorer.frame_scores(features)
    T, N = frame_scores.shape
    stay = scorer.stay_logprob
    exit_ = scorer.exit_logprob

    score = np.empty((T, N))
    back = np.empty((T, N), dtype=np.int64)
    score[0] = frame_scores[0]
    back[0] = np.arange(N)
    for t in range(1, T):
        prev = score[t - 1]
        if N > 1:
            switch_base = prev + exit_
            order = np.argsort(-switch_base, kind="stable")
            b1, b2 = order[0], order[1]
            sw_val = np.full(N, switch_base[b1])
            sw_src = np.full(N, b1)
            sw_val[b1] = switch_base[b2]
            sw_src[b1] = b2
        else:
            sw_val = np.full(N, NEG_INF)
            sw_src = np.zeros(N, dtype=np.int64)
        stay_val = prev + stay
        take_switch = sw_val > stay_val               # tie prefers staying
        score[t] = np.where(take_switch, sw_val, stay_val) + frame_scores[t]
        back[t] = np.where(take_switch, sw_src, np.arange(N))

    final = score[T - 1] + exit_
    best = int(np.argmax(final))                      # first max: lowest id
    labels = np.empty(T, dtype=np.int64)
    labels[T - 1] = best
    for t in range(T - 1, 0, -1):
        labels[t - 1] = back[t, labels[t]]
    loglik = float(final[best])
    if np.isnan(loglik):
        raise NumericError("NaN free-loop score")
    return labels, loglik


def collapse_labels(labels) -> tuple[int, ...]:
    """Remove consecutive duplicates from a unit label sequence."""
    out = []
    for lab in labels:
        if not out or out[-1] != lab:
            out.append(int(lab))
    return tuple(out)


# ---------------------------------------------------------------------------
# Forced alignment and segmental training


@dataclass(frozen=True)
class WordSpan:
    word: str
    start: int      # first frame, inclusive
    end: int        # last frame, exclusive


def force_align(utterance: Utterance, dictionary: Dictionary, scorer,
                frame_scores: np.ndarray | None = None):
    """Viterbi alignment constrained to the utterance's transcript.

    Returns (per-frame unit labels, word spans, log-likelihood).
    """
    graph = build_graph(utterance.transcript, dictionary, scorer)
    path = viterbi(graph, utterance.features, scorer,
                   frame_scores=frame_scores)
    labels = graph.units[path.nodes]
    word_of_frame = graph.word_index[path.nodes]
    spans = []
    for wi, word in enumerate(utterance.transcript):
        here = np.nonzero(word_of_frame == wi)[0]
        spans.append(WordSpan(word, int(here[0]), int(here[-1]) + 1))
    return labels, spans, path.loglik


def transition_counts_from_labels(labels, n_units: int):
    """Per-unit (stay, exit) transition counts from a frame labeling."""
    stays = np.zeros(n_units)
    exits = np.zeros(n_units)
    labels = np.asarray(labels)
    run_unit = int(labels[0])
    run_len = 1
    for lab in labels[1:]:
        if lab == run_unit:
            run_len += 1
        else:
            stays[run_unit] += run_len - 1
            exits[run_unit] += 1
            run_unit = int(lab)
            run_len = 1
    stays[run_unit] += run_len - 1
    exits[run_unit] += 1
    return stays, exits


def viterbi_train_step(corpus: Corpus, dictionary: Dictionary,
                       models: AcousticModelSet):
    """One segmental training step.

    Force-aligns every utterance under the input models, pools the frames
    of each unit, applies one EM iteration per unit GMM and re-estimates
    stay/exit probabilities from segment-length counts.  Returns
    (new models, total Viterbi log-likelihood under the INPUT models,
    number of starved units).
    """
    n = models.n_units
    pooled: list[list[np.ndarray]] = [[] for _ in range(n)]
    stays = np.zeros(n)
    exits = np.zeros(n)
    total = 0.0
    for utt in corpus.utterances:
        labels, _, loglik = force_align(utt, dictionary, models)
        total += loglik
        for unit in range(n):
            sel = labels == unit
            if np.any(sel):
                pooled[unit].append(utt.features[sel])
        s, e = transition_counts_from_labels(labels, n)
        stays += s
        exits += e

    new_units = []
    starved = 0
    for unit in range(n):
        if not pooled[unit]:
            starved += 1
            new_units.append(models.units[unit])
            continue
        frames = np.vstack(pooled[unit])
        new_units.append(em_reestimate(models.units[unit], frames,
                                       var_floor=models.var_floor))
    if starved:
        logger.warning("viterbi_train_step: %d unit(s) received no frames",
                       starved)

    seen = (stays + exits) > 0
    stay_prob = np.exp(models.stay_logprob)
    stay_prob[seen] = stays[seen] / (stays[seen] + exits[seen])
    stay_lp, exit_lp = make_transitions(stay_prob, n)
    new_models = replace(models, units=tuple(new_units),
                         stay_logprob=stay_lp, exit_logprob=exit_lp)
    return new_models, total, starved
