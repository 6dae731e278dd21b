"""End-to-end orchestration: initialization, GMM loop, network loop, eval.

The outer loops alternate dictionary re-estimation with acoustic model
re-estimation, growing GMM capacity by mixture doubling until a cap and
then handing the labels to the network stage.  "Performance improved" is
made concrete as dev-set WER with a patience counter; the best-dev
snapshot is returned.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import acoustic, decoder, hmm, mlp as mlpmod, pronunciation
from .acoustic import AcousticModelSet
from .corpus import Corpus
from .errors import DataError, TrainingDivergedError, UsageError
from .hmm import Dictionary

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """All tunable knobs of a pipeline run."""

    n_units: int = 8
    max_mixtures: int = 4
    min_examples: int = 4
    max_units: int = 12            # pronunciation length cap
    dev_fraction: float = 0.2
    patience: int = 2
    seed: int = 0
    threads: int = 1

    gmm_max_iters: int = 10
    train_steps_per_iter: int = 5
    train_tol: float = 1e-6
    lbg_epsilon: float = 0.2
    split_epsilon: float = 0.2

    mlp_hidden: tuple[int, ...] = (64, 64)
    mlp_context: int = 5
    mlp_epochs: int = 15
    mlp_learning_rate: float = 0.05
    mlp_momentum: float = 0.9
    mlp_batch_size: int = 128
    mlp_dropout: float = 0.1
    mlp_l1: float = 1e-6
    mlp_max_iters: int = 3

    eval_mode: str = "isolated"    # or "continuous"
    lm_weight: float = 1.0
    word_insertion_penalty: float = 0.0

    def __post_init__(self):
        if self.n_units < 2:
            raise UsageError("n_units must be >= 2")
        if self.max_mixtures & (self.max_mixtures - 1):
            raise UsageError("max_mixtures must be a power of two")
        if not 0.0 < self.dev_fraction < 0.5:
            raise UsageError("dev_fraction must be in (0, 0.5)")
        if self.eval_mode not in ("isolated", "continuous"):
            raise UsageError(f"unknown eval_mode {self.eval_mode!r}")

    def train_config(self, seed_shift: int = 0) -> mlpmod.TrainConfig:
        return mlpmod.TrainConfig(
            learning_rate=self.mlp_learning_rate,
            momentum=self.mlp_momentum,
            batch_size=self.mlp_batch_size,
            dropout=self.mlp_dropout,
            l1=self.mlp_l1,
            epochs=self.mlp_epochs,
            seed=self.seed + 1000 + seed_shift,
        )


_TUPLE_KEYS = {"mlp_hidden", "frames_per_unit", "pron_len"}


def parse_config_file(path, cls=PipelineConfig, overrides=None):
    """Build a config from an ini-style ``key = value`` file.

    Unknown keys are usage errors.  ``overrides`` (a dict) wins over the
    file, which wins over the dataclass defaults.
    """
    values: dict[str, object] = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value")
                key, _, raw = line.partition("=")
                key = key.strip()
                if key not in fields:
                    raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _coerce(key, raw.strip(), cls)
    if overrides:
        for key, val in overrides.items():
            if val is None:
                continue
            if key not in fields:
                raise UsageError(f"unknown config key {key!r}")
            values[key] = val
    return cls(**values)


def _coerce(key, raw, cls):
    defaults = cls()
    current = getattr(defaults, key)
    if key in _TUPLE_KEYS:
        parts = raw.replace(",", " ").split()
        return tuple(int(p) for p in parts)
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


@dataclass(frozen=True)
class IterationReport:
    iteration: int
    stage: str                 # "gmm" or "mlp"
    capacity: int              # mixture count entering, or training epochs
    train_loglik: float
    dev_wer: float
    dict_changes: int
    n_units: int
    starved_units: int = 0


REPORT_HEADER = ("iteration,stage,capacity,train_loglik,dev_wer,"
                 "dict_changes,n_units,starved_units")


def reports_to_csv(reports, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(REPORT_HEADER + "\n")
        for r in reports:
            fh.write(f"{r.iteration},{r.stage},{r.capacity},"
                     f"{r.train_loglik:.6f},{r.dev_wer:.6f},"
                     f"{r.dict_changes},{r.n_units},{r.starved_units}\n")


def read_reports_csv(path) -> list[IterationReport]:
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != REPORT_HEADER:
            raise DataError(f"{path}: unexpected report header")
        for line in fh:
            it, stage, cap, ll, wer_, ch, n, sv = line.strip().split(",")
            out.append(IterationReport(int(it), stage, int(cap), float(ll),
                                       float(wer_), int(ch), int(n),
                                       int(sv)))
    return out


# ---------------------------------------------------------------------------
# Dev split


def split_dev(corpus: Corpus, dev_fraction: float, seed: int):
    """Seeded per-word split; every word keeps at least one training
    utterance.  Returns (train, dev); dev may be empty for tiny corpora."""
    rng = np.random.default_rng(seed)
    dev_idx: set[int] = set()
    assigned: set[int] = set()
    for word in corpus.vocabulary:
        cands = [i for i in sorted(corpus.word_index[word])
                 if i not in assigned]
        if len(cands) < 2:
            assigned.update(cands)
            continue
        k = min(int(dev_fraction * len(cands)), len(cands) - 1)
        picked = rng.permutation(len(cands))[:k]
        dev_idx.update(cands[i] for i in picked)
        assigned.update(cands)
    train_idx = [i for i in range(corpus.n_utterances) if i not in dev_idx]
    train = corpus.subset(train_idx)
    dev = corpus.subset(sorted(dev_idx)) if dev_idx else None
    return train, dev


# ---------------------------------------------------------------------------
# Initialization


def initialize(corpus: Corpus, cfg: PipelineConfig):
    """Cluster the acoustic space and bootstrap a first dictionary.

    Every unit starts as a single-Gaussian model on its LBG cluster.  The
    first dictionary estimates each word from whole utterances (single
    word transcripts) or uniform time slices (multi-word transcripts,
    bootstrap only).
    """
    all_frames = np.vstack([u.features for u in corpus.utterances])
    centroids = acoustic.lbg_cluster(all_frames, cfg.n_units, cfg.seed,
                                     epsilon=cfg.lbg_epsilon)
    var_floor = 1e-3 * np.maximum(all_frames.var(axis=0), 1e-12)
    assign = acoustic.nearest_centroid(all_frames, centroids)
    units = []
    for n in range(cfg.n_units):
        members = all_frames[assign == n]
        if members.shape[0] == 0:
            members = centroids[n][None, :]
        var = np.maximum(members.var(axis=0), var_floor)
        units.append(acoustic.GmmEmission(
            np.array([1.0]),
            (acoustic.DiagGaussian(centroids[n], var),)))
    stay, exit_ = acoustic.make_transitions(0.5, cfg.n_units)
    models = AcousticModelSet(tuple(units), stay, exit_, var_floor)

    entries: dict[str, tuple[int, ...]] = {}
    segments: dict[str, list[np.ndarray]] = {w: [] for w in corpus.vocabulary}
    for utt in corpus.utterances:
        if len(utt.transcript) == 1:
            segments[utt.transcript[0]].append(utt.features)
        else:
            cuts = np.linspace(0, utt.n_frames, len(utt.transcript) + 1)
            cuts = np.round(cuts).astype(int)
            for w, a, b in zip(utt.transcript, cuts[:-1], cuts[1:]):
                if b > a:
                    segments[w].append(utt.features[a:b])
    for word in sorted(corpus.vocabulary):
        if not segments[word]:
            raise DataError(f"word {word!r} has no usable bootstrap segment")
        pron, _ = pronunciation.estimate_pronunciation(
            segments[word], models, cfg.max_units)
        entries[word] = pron
    return models, Dictionary(entries)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class EvalRow:
    utt_id: str
    ref: tuple[str, ...]
    hyp: tuple[str, ...]
    subs: int
    dels: int
    ins: int


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[EvalRow, ...]
    mode: str

    @property
    def n_ref_words(self) -> int:
        return sum(len(r.ref) for r in self.rows)

    @property
    def totals(self) -> tuple[int, int, int]:
        return (sum(r.subs for r in self.rows),
                sum(r.dels for r in self.rows),
                sum(r.ins for r in self.rows))

    @property
    def wer(self) -> float:
        s, d, i = self.totals
        return (s + d + i) / self.n_ref_words

    def render(self) -> str:
        lines = [f"# mode={self.mode}",
                 "# utt\tS\tD\tI\tref_len\thyp"]
        for r in self.rows:
            lines.append(f"{r.utt_id}\t{r.subs}\t{r.dels}\t{r.ins}\t"
                         f"{len(r.ref)}\t{' '.join(r.hyp)}")
        s, d, i = self.totals
        lines.append(f"# total S={s} D={d} I={i} ref={self.n_ref_words} "
                     f"WER={self.wer:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(corpus: Corpus, dictionary: Dictionary, scorer,
             lm: decoder.BigramLm | None = None, mode: str = "isolated",
             lm_weight: float = 1.0,
             word_insertion_penalty: float = 0.0) -> EvalReport:
    """Decode every utterance and aggregate WER.  Read-only."""
    rows = []
    for utt in corpus.utterances:
        if mode == "isolated":
            word, _ = decoder.decode_isolated(utt.features, dictionary,
                                              scorer)
            hyp: tuple[str, ...] = (word,)
        else:
            result = decoder.decode_continuous(
                utt.features, dictionary, scorer, lm=lm,
                lm_weight=lm_weight,
                word_insertion_penalty=word_insertion_penalty)
            hyp = result.words
        _, s, d, i = decoder.wer(utt.transcript, hyp)
        rows.append(EvalRow(utt.id, utt.transcript, hyp, s, d, i))
    return EvalReport(tuple(rows), mode)


def write_eval_report(report: EvalReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.render())


def _dict_changes(old: Dictionary, new: Dictionary) -> int:
    return sum(1 for w in new.entries
               if w not in old.entries or old[w] != new[w])


def _dev_wer(dev, dictionary, scorer, cfg, lm=None):
    report = evaluate(dev, dictionary, scorer, lm=lm, mode=cfg.eval_mode,
                      lm_weight=cfg.lm_weight,
                      word_insertion_penalty=cfg.word_insertion_penalty)
    return report.wer


# ---------------------------------------------------------------------------
# GMM stage


def run_gmm_stage(train: Corpus, models: AcousticModelSet,
                  dictionary: Dictionary, cfg: PipelineConfig,
                  dev: Corpus | None = None, lm=None,
                  pron_report: list[str] | None = None):
    """Alternate dictionary updates, mixture doubling and segmental
    training until dev WER stops improving.  Returns the best-dev
    (models, dictionary, reports)."""
    dev_set = dev if dev is not None else train
    reports: list[IterationReport] = []
    best = (np.inf, models, dictionary)
    stall = 0
    for it in range(1, cfg.gmm_max_iters + 1):
        capacity = models.units[0].n_components
        new_dict = pronunciation.update_dictionary(
            train, models, dictionary, cfg.min_examples, cfg.max_units,
            report=pron_report, threads=cfg.threads)
        changes = _dict_changes(dictionary, new_dict)
        dictionary = new_dict
        if models.units[0].n_components < cfg.max_mixtures:
            models = acoustic.split_model_set(models, cfg.split_epsilon)
        loglik = -np.inf
        starved = 0
        for _ in range(cfg.train_steps_per_iter):
            models, new_loglik, starved = hmm.viterbi_train_step(
                train, dictionary, models)
            if (np.isfinite(loglik)
                    and new_loglik - loglik
                    <= cfg.train_tol * abs(loglik)):
                loglik = new_loglik
                break
            loglik = new_loglik
        dev_wer = _dev_wer(dev_set, dictionary, models, cfg, lm)
        reports.append(IterationReport(it, "gmm", capacity, loglik, dev_wer,
                                       changes, cfg.n_units, starved))
        logger.info("gmm iter %d: mixtures=%d loglik=%.2f dev_wer=%.4f "
                    "dict_changes=%d", it, capacity, loglik, dev_wer,
                    changes)
        if dev_wer < best[0]:
            best = (dev_wer, models, dictionary)
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
    _, best_models, best_dict = best
    return best_models, best_dict, reports


# ---------------------------------------------------------------------------
# Network stage


@dataclass(frozen=True)
class MlpStageResult:
    model: mlpmod.MlpModel
    priors: np.ndarray
    stay_logprob: np.ndarray
    exit_logprob: np.ndarray
    dictionary: Dictionary
    reports: tuple[IterationReport, ...]
    diverged: bool = False
    trace: tuple = ()

    def scorer(self) -> mlpmod.PosteriorScorer:
        return mlpmod.PosteriorScorer(self.model, self.priors,
                                      self.stay_logprob, self.exit_logprob)


def _align_corpus(train: Corpus, dictionary: Dictionary, scorer):
    feats, labels = [], []
    total = 0.0
    stays = np.zeros(scorer.n_units)
    exits = np.zeros(scorer.n_units)
    for utt in train.utterances:
        lab, _, ll = hmm.force_align(utt, dictionary, scorer)
        feats.append(utt.features)
        labels.append(lab)
        total += ll
        s, e = hmm.transition_counts_from_labels(lab, scorer.n_units)
        stays += s
        exits += e
    seen = (stays + exits) > 0
    stay_prob = np.exp(np.asarray(scorer.stay_logprob, dtype=np.float64))
    stay_prob[seen] = stays[seen] / (stays[seen] + exits[seen])
    stay_lp, exit_lp = acoustic.make_transitions(stay_prob, scorer.n_units)
    return feats, labels, total, stay_lp, exit_lp


def run_mlp_stage(train: Corpus, models: AcousticModelSet,
                  dictionary: Dictionary, cfg: PipelineConfig,
                  dev: Corpus | None = None, lm=None,
                  pron_report: list[str] | None = None) -> MlpStageResult:
    """Replace GMM emissions by network posteriors and keep refining.

    Labels for the first training round come from forced alignment under
    the converged GMM models; each refinement round re-estimates the
    dictionary with scaled-posterior scoring, re-aligns and re-trains.
    Divergence aborts the stage and returns the last good snapshot with
    the ``diverged`` flag set.
    """
    dev_set = dev if dev is not None else train
    input_dim = train.dim * (2 * cfg.mlp_context + 1)
    sizes = (input_dim,) + tuple(cfg.mlp_hidden) + (cfg.n_units,)
    reports: list[IterationReport] = []

    feats, labels, _, stay_lp, exit_lp = _align_corpus(train, dictionary,
                                                       models)
    best = None
    stall = 0
    diverged = False
    scorer = None
    for it in range(1, cfg.mlp_max_iters + 1):
        data = mlpmod.build_frame_set(feats, labels, cfg.mlp_context,
                                      cfg.n_units)
        try:
            net, trace = mlpmod.mlp_train(
                mlpmod.init_mlp(sizes, cfg.mlp_context,
                                cfg.seed + 1000 + it),
                data, cfg.train_config(seed_shift=it))
        except TrainingDivergedError as exc:
            logger.warning("mlp stage diverged at iteration %d: %s", it, exc)
            diverged = True
            break
        scorer = mlpmod.PosteriorScorer(net, data.priors, stay_lp, exit_lp)

        new_dict = pronunciation.update_dictionary(
            train, scorer, dictionary, cfg.min_examples, cfg.max_units,
            report=pron_report, threads=cfg.threads)
        changes = _dict_changes(dictionary, new_dict)
        dictionary = new_dict
        feats, labels, align_ll, stay_lp, exit_lp = _align_corpus(
            train, dictionary, scorer)
        scorer = mlpmod.PosteriorScorer(net, data.priors, stay_lp, exit_lp)

        dev_wer = _dev_wer(dev_set, dictionary, scorer, cfg, lm)
        reports.append(IterationReport(it, "mlp", cfg.mlp_epochs,
                                       align_ll, dev_wer, changes,
                                       cfg.n_units))
        logger.info("mlp iter %d: loss=%.4f dev_wer=%.4f dict_changes=%d",
                    it, trace[-1][1], dev_wer, changes)
        if best is None or dev_wer < best[0]:
            best = (dev_wer, net, data.priors.copy(), stay_lp.copy(),
                    exit_lp.copy(), dictionary, tuple(trace))
            stall = 0
        else:
            stall += 1
            if stall >= cfg.patience:
                break
        if changes == 0:
            break
    if best is None:
        raise TrainingDivergedError("network stage never completed an "
                                    "iteration")
    _, net, priors, stay_lp, exit_lp, dictionary, trace = best
    return MlpStageResult(net, priors, stay_lp, exit_lp, dictionary,
                          tuple(reports), diverged, trace)


# ---------------------------------------------------------------------------
# Whole pipeline


@dataclass(frozen=True)
class PipelineResult:
    gmm_models: AcousticModelSet
    gmm_dictionary: Dictionary
    mlp: MlpStageResult | None
    reports: tuple[IterationReport, ...]

    @property
    def dictionary(self) -> Dictionary:
        return self.mlp.dictionary if self.mlp else self.gmm_dictionary

    def scorer(self):
        return self.mlp.scorer() if self.mlp else self.gmm_models


def run_pipeline(corpus: Corpus, cfg: PipelineConfig, lm=None,
                 with_mlp: bool = True,
                 pron_report: list[str] | None = None) -> PipelineResult:
    train, dev = split_dev(corpus, cfg.dev_fraction, cfg.seed + 17)
    models, dictionary = initialize(train, cfg)
    models, dictionary, gmm_reports = run_gmm_stage(
        train, models, dictionary, cfg, dev=dev, lm=lm,
        pron_report=pron_report)
    reports = list(gmm_reports)
    mlp_result = None
    if with_mlp:
        mlp_result = run_mlp_stage(train, models, dictionary, cfg, dev=dev,
                                   lm=lm, pron_report=pron_report)
        reports.extend(mlp_result.reports)
    return PipelineResult(models, dictionary, mlp_result, tuple(reports))


# ---------------------------------------------------------------------------
# Report rendering


def render_summary(report_sets: dict[str, list[IterationReport]]) -> str:
    """Plain-text summary of one or more runs: per run the best dev WER
    per stage, plus a WER-versus-unit-count table across runs."""
    lines = []
    best_by_n: dict[tuple[int, str], float] = {}
    for name in sorted(report_sets):
        reports = report_sets[name]
        lines.append(f"run {name}")
        for stage in ("gmm", "mlp"):
            stage_reports = [r for r in reports if r.stage == stage]
            if not stage_reports:
                continue
            best = min(stage_reports, key=lambda r: r.dev_wer)
            lines.append(f"  {stage}: {len(stage_reports)} iterations, "
                         f"best dev WER {best.dev_wer:.4f} "
                         f"(iteration {best.iteration})")
            key = (best.n_units, stage)
            if key not in best_by_n or best.dev_wer < best_by_n[key]:
                best_by_n[key] = best.dev_wer
    if best_by_n:
        lines.append("")
        lines.append("units\tstage\tbest_dev_wer")
        for (n, stage) in sorted(best_by_n):
            lines.append(f"{n}\t{stage}\t{best_by_n[(n, stage)]:.4f}")
    return "\n".join(lines) + "\n"
