"""Shared helpers for building synthetic segment lattices in tests."""

import numpy as np

from seggen.autograd import Tensor, parameter
from seggen.data import CopySpan
from seggen.inference import SegmentLattice, constraint_mask


def random_lattice(rng, T, K, L, kb=None, spans=None, leaf=False):
    """A lattice with random finite scores and optional copy-span masking.

    kb defaults to K (no state duplication).  With leaf=True the per-start
    blocks are created as gradient-requiring leaves so tests can inspect
    d log_marginal / d score.
    """
    kb = kb or K
    mask = constraint_mask(T, L, spans or [])
    pieces = []
    values = np.empty((T, L, kb))
    for t in range(T):
        block = rng.normal(scale=2.0, size=(kb, L))
        for l in range(1, L + 1):
            if t + l > T or not mask[t, l - 1]:
                block[:, l - 1] = -np.inf
        pieces.append(parameter(block) if leaf else Tensor(block))
        values[t] = block.T
    return SegmentLattice(
        scores=values, mask=mask, pieces=pieces, num_tokens=T, max_len=L, k_base=kb
    )


def random_transitions(rng, K):
    """Row-normalized random [(K+1) x K] log-transition tensor."""
    raw = rng.normal(scale=1.5, size=(K + 1, K))
    m = raw.max(axis=1, keepdims=True)
    logp = raw - (m + np.log(np.exp(raw - m).sum(axis=1, keepdims=True)))
    return Tensor(logp)


def random_spans(rng, T, L):
    """A few non-overlapping spans with lengths <= L (as copy constraints)."""
    spans = []
    t = 0
    while t < T:
        if rng.random() < 0.4:
            l = int(rng.integers(1, min(L, T - t) + 1))
            spans.append(CopySpan(start=t, end=t + l, record_indices=tuple()))
            t += l
        t += int(rng.integers(1, 3))
    return spans


def uniform_lengths(L):
    return np.full(L, -np.log(L))
