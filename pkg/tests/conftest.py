import numpy as np
import pytest

from sublex.acoustic import (AcousticModelSet, DiagGaussian, GmmEmission,
                             make_transitions)


def random_model_set(rng, n_units, dim, max_comps=2, spread=3.0):
    """A random diagonal-GMM model set for small DP instances."""
    units = []
    for _ in range(n_units):
        k = int(rng.integers(1, max_comps + 1))
        comps = tuple(
            DiagGaussian(rng.normal(size=dim) * spread,
                         rng.uniform(0.3, 2.0, size=dim))
            for _ in range(k))
        w = rng.uniform(0.2, 1.0, size=k)
        units.append(GmmEmission(w / w.sum(), comps))
    stay, exit_ = make_transitions(rng.uniform(0.2, 0.8, size=n_units),
                                   n_units)
    return AcousticModelSet(tuple(units), stay, exit_,
                            np.full(dim, 1e-8))


def sample_walk(models, seq, max_frames_per_unit, rng):
    """Emit an utterance by walking a unit sequence through the models."""
    rows = []
    for u in seq:
        gmm = models.units[u]
        k = rng.choice(len(gmm.weights), p=gmm.weights)
        comp = gmm.components[k]
        n = int(rng.integers(1, max_frames_per_unit + 1))
        rows.append(rng.normal(comp.mean, np.sqrt(comp.var),
                               size=(n, comp.dim)))
    return np.vstack(rows)


def random_no_repeat_seq(rng, n_units, length):
    seq = [int(rng.integers(n_units))]
    while len(seq) < length:
        nxt = int(rng.integers(n_units - 1))
        if nxt >= seq[-1]:
            nxt += 1
        seq.append(nxt)
    return tuple(seq)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
