"""Exact dynamic programs over segment lattices.

The lattice holds log-probabilities of every candidate segment (start,
length, base state), with copy-constraint masking applied as -inf entries.
On top of it sit the backward recurrences for the log marginal likelihood
(differentiable, used as the training objective), the max-product analogue
with backpointers for MAP segmentation, and brute-force enumeration oracles
for testing both.
"""

import re
from dataclasses import dataclass

import numpy as np

from .autograd import (
    Tape,
    Tensor,
    concat,
    cumsum,
    index_select,
    log_sum_exp,
    logsumexp,
    parameter,
    reshape,
    split,
    stack,
    take_column,
    transpose,
)


@dataclass
class SegmentLattice:
    """Per-segment emission log-probs plus the constraint mask.

    scores[t][l-1][k] = log p(y_{t+1:t+l} | z=k_base, l); -inf where the
    segment runs off the end or violates a copy-span constraint.  `pieces`
    keeps the same numbers as tape tensors (one [k_base, L] block per start
    position) so the DP stays differentiable.
    """

    scores: np.ndarray  # [T, L, k_base]
    mask: np.ndarray  # [T, L] bool, True = allowed
    pieces: list  # T tensors of shape [k_base, L]
    num_tokens: int
    max_len: int
    k_base: int


@dataclass(frozen=True)
class Segment:
    state: int
    start: int
    length: int


@dataclass
class Segmentation:
    segments: list
    score: float

    def states(self):
        return [s.state for s in self.segments]

    def check_tiling(self, num_tokens, max_len):
        t = 0
        for s in self.segments:
            if s.start != t or not 1 <= s.length <= max_len:
                return False
            t += s.length
        return t == num_tokens


def constraint_mask(num_tokens, max_len, copy_spans):
    """Allowed flags per (start, length): a candidate segment may neither
    split a copy span nor contain one as a proper sub-span — each span must
    be realized exactly."""
    mask = np.zeros((num_tokens, max_len), dtype=bool)
    for t in range(num_tokens):
        for l in range(1, min(max_len, num_tokens - t) + 1):
            ok = True
            for span in copy_spans or ():
                overlaps = t < span.end and span.start < t + l
                exact = t == span.start and t + l == span.end
                if overlaps and not exact:
                    ok = False
                    break
            mask[t, l - 1] = ok
    return mask


def build_lattice(ex, model, src, rng=None):
    """Score every candidate segment of an example in one batched pass.

    Rows of the batch are (start position, base state) pairs sharing the
    segment-initial RNN state, so the whole lattice costs L+1 LSTM steps.
    Pass `rng` to enable dropout (training); omit it for deterministic
    evaluation scores.
    """
    cfg = model.cfg
    T = ex.num_tokens
    L, kb = cfg.max_len, cfg.k_base
    if T == 0:
        raise ValueError("cannot build a lattice over an empty token sequence")
    if ex.copy_matches is not None:
        matching = [
            [ex.records[j] for j in ex.copy_matches[t]] for t in range(T)
        ]
    else:
        matching = [
            [r for r, v in zip(src.records, src.values) if v == tok]
            for tok, t in zip(ex.tokens, range(T))
        ]
    slot_matrix = model.token_slots(
        ex.tokens, src, token_ids=ex.token_ids, copy_matches=ex.copy_matches
    )
    mask = constraint_mask(T, L, ex.copy_spans)

    reps = model.input_reps(
        [(tok, match) for tok, match in zip(ex.tokens, matching)], rng=rng
    )
    ar_mat = model.ar_states(reps, T) if cfg.autoregressive else None

    B = T * kb
    starts = np.repeat(np.arange(T), kb)
    k_rows = np.tile(np.arange(kb), T)
    h, c = model.start_segment(src, rows=B)

    token_lps = []
    eos_lps = []
    for i in range(1, L + 2):
        inp = None
        if i > 1:
            prev_pos = np.minimum(starts + i - 2, T - 1)
            inp = index_select(reps, prev_pos)
        ar_h = None
        if ar_mat is not None:
            ar_h = index_select(ar_mat, np.minimum(starts + i - 1, T))
        logp, h, c = model.batch_token_step(
            inp, h, c, k_rows, src, ar_h=ar_h, rng=rng
        )
        if i >= 2:
            eos_lps.append(take_column(logp, model.vocab.eos_id))
        if i <= L:
            pos = np.minimum(starts + i - 1, T - 1)
            token_lps.append(model.gather_token_logprobs(logp, slot_matrix[pos]))

    cum = cumsum(stack(token_lps, axis=1), axis=1)  # [B, L]
    seg_scores = cum + stack(eos_lps, axis=1)  # [B, L]
    blocks = split(seg_scores, T, axis=0)  # T blocks of [kb, L]

    pieces = []
    neg_inf = np.where(mask, 0.0, -np.inf)  # [T, L]
    for t in range(T):
        pieces.append(blocks[t] + Tensor(neg_inf[t : t + 1]))
    scores = np.transpose(
        np.stack([p.values for p in pieces], axis=0), (0, 2, 1)
    )
    return SegmentLattice(
        scores=scores,
        mask=mask,
        pieces=pieces,
        num_tokens=T,
        max_len=L,
        k_base=kb,
    )


def _dp_log_marginal(pieces, transitions, lengths, T, L, K, kb):
    """Backward recurrences on the tape; returns the scalar log marginal."""
    trans_body = index_select(transitions, np.arange(1, K + 1))  # [K, K]
    start_row = index_select(transitions, np.array([0]))  # [1, K]
    if K != kb:
        dup_idx = np.arange(K) % kb
        pieces = [index_select(p, dup_idx) for p in pieces]
    log1 = Tensor(np.zeros((1, K)))
    beta = [None] * (T + 1)
    beta[T] = log1
    beta_star0 = None
    for t in range(T - 1, -1, -1):
        lv = min(L, T - t)
        rows = concat([beta[t + l] for l in range(1, lv + 1)], axis=0)  # [lv, K]
        sc = pieces[t]
        if lv < L:
            sc = index_select(sc, np.arange(lv), axis=1)
        m = sc + transpose(rows) + Tensor(lengths[None, :lv])
        beta_star = reshape(logsumexp(m, axis=1), (1, K))
        if t == 0:
            beta_star0 = beta_star
            break
        beta[t] = reshape(logsumexp(trans_body + beta_star, axis=1), (1, K))
    return log_sum_exp(start_row + beta_star0)


def log_marginal(lattice, transitions, lengths):
    """Log p(y | x): sum over all segmentations, Eq-style backward pass.

    `transitions` is the [(K+1) x K] log matrix (row 0 = start);
    `lengths` the [L] log length vector.  Returns a scalar tensor on the
    active tape; -inf when constraints leave no feasible segmentation.
    """
    K = transitions.values.shape[1]
    return _dp_log_marginal(
        lattice.pieces,
        transitions,
        np.asarray(lengths),
        lattice.num_tokens,
        lattice.max_len,
        K,
        lattice.k_base,
    )


class InfeasibleError(RuntimeError):
    """No segmentation satisfies the constraints."""


def viterbi(lattice, transitions, lengths):
    """MAP segmentation by the max-product analogue of the backward pass.

    `transitions` may be the tape tensor or a plain array.  Ties break
    toward the smallest length/state index.
    """
    trans = transitions.values if isinstance(transitions, Tensor) else transitions
    lengths = np.asarray(lengths)
    T, L, kb = lattice.num_tokens, lattice.max_len, lattice.k_base
    K = trans.shape[1]
    scores = lattice.scores  # [T, L, kb]
    full = scores[:, :, np.arange(K) % kb]  # [T, L, K]
    trans_body = trans[1:, :]
    start_row = trans[0]

    beta = np.zeros((T + 1, K))
    beta[T] = 0.0
    beta_star = np.full((T, K), -np.inf)
    bp_len = np.zeros((T, K), dtype=int)
    bp_next = np.zeros((T, K), dtype=int)
    for t in range(T - 1, -1, -1):
        lv = min(L, T - t)
        cand = full[t, :lv, :] + lengths[:lv, None] + beta[t + 1 : t + lv + 1]
        bp_len[t] = np.argmax(cand, axis=0) + 1
        beta_star[t] = np.max(cand, axis=0)
        if t > 0:
            step = trans_body + beta_star[t][None, :]
            bp_next[t] = np.argmax(step, axis=1)
            beta[t] = np.max(step, axis=1)
    first = start_row + beta_star[0]
    k = int(np.argmax(first))
    best = float(first[k])
    if not np.isfinite(best):
        raise InfeasibleError("no feasible segmentation under the constraints")
    segments = []
    t = 0
    while t < T:
        l = int(bp_len[t, k])
        segments.append(Segment(state=k, start=t, length=l))
        t += l
        if t < T:
            k = int(bp_next[t, k])
    return Segmentation(segments=segments, score=best)


# ----------------------------------------------------------------------
# occupancy posteriors


def posterior_state_marginals(lattice, transitions, lengths):
    """Per-token state occupancy probabilities, [T, k_base].

    Computed as the gradient of the log marginal with respect to the lattice
    scores, aggregated over the segments covering each token; exact because
    d(log Z)/d(score of segment s) is the posterior probability that s is
    used.
    """
    trans = transitions.values if isinstance(transitions, Tensor) else transitions
    T, L, kb = lattice.num_tokens, lattice.max_len, lattice.k_base
    K = trans.shape[1]
    with Tape() as tape:
        leaves = [parameter(p.values) for p in lattice.pieces]
        total = _dp_log_marginal(
            leaves, Tensor(trans), np.asarray(lengths), T, L, K, kb
        )
        if not np.isfinite(total.values):
            raise InfeasibleError("posterior undefined: log marginal is -inf")
        tape.backward(total)
    occ = np.zeros((T, kb))
    for t in range(T):
        g = leaves[t].grad  # [kb, L]
        for l in range(1, min(L, T - t) + 1):
            occ[t : t + l] += g[:, l - 1][None, :]
    return occ


# ----------------------------------------------------------------------
# brute-force oracles


def compositions(total, max_part):
    """All ordered compositions of `total` into parts of size <= max_part."""
    if total == 0:
        yield ()
        return
    for first in range(1, min(max_part, total) + 1):
        for rest in compositions(total - first, max_part):
            yield (first,) + rest


def enumerate_segmentations(T, L, K):
    """Every (lengths, states) pair tiling T tokens."""
    from itertools import product

    for lens in compositions(T, L):
        for states in product(range(K), repeat=len(lens)):
            yield lens, states


def joint_log_score(lens, states, scores_full, mask, trans, lengths):
    """Log joint of one segmentation from raw arrays; -inf if masked."""
    lp = trans[0, states[0]]
    t = 0
    for i, (l, k) in enumerate(zip(lens, states)):
        if not mask[t, l - 1]:
            return -np.inf
        lp += lengths[l - 1] + scores_full[t, l - 1, k]
        if i + 1 < len(lens):
            lp += trans[1 + k, states[i + 1]]
        t += l
    return lp


def enumerate_marginal(lattice, transitions, lengths):
    """Exhaustive log marginal; exponential, for tiny instances only."""
    trans = transitions.values if isinstance(transitions, Tensor) else transitions
    lengths = np.asarray(lengths)
    T, L, kb = lattice.num_tokens, lattice.max_len, lattice.k_base
    K = trans.shape[1]
    if T > 10:
        raise ValueError(f"refusing exhaustive enumeration for T={T} > 10")
    full = lattice.scores[:, :, np.arange(K) % kb]
    total = -np.inf
    for lens, states in enumerate_segmentations(T, L, K):
        lp = joint_log_score(lens, states, full, lattice.mask, trans, lengths)
        total = np.logaddexp(total, lp)
    return total


def enumerate_viterbi(lattice, transitions, lengths):
    """Exhaustive MAP; returns (Segmentation, count of enumerated pairs)."""
    trans = transitions.values if isinstance(transitions, Tensor) else transitions
    lengths = np.asarray(lengths)
    T, L, kb = lattice.num_tokens, lattice.max_len, lattice.k_base
    K = trans.shape[1]
    if T > 10:
        raise ValueError(f"refusing exhaustive enumeration for T={T} > 10")
    full = lattice.scores[:, :, np.arange(K) % kb]
    best, best_lens, best_states, n = -np.inf, None, None, 0
    for lens, states in enumerate_segmentations(T, L, K):
        n += 1
        lp = joint_log_score(lens, states, full, lattice.mask, trans, lengths)
        if lp > best:
            best, best_lens, best_states = lp, lens, states
    if best_lens is None or not np.isfinite(best):
        raise InfeasibleError("no feasible segmentation under the constraints")
    segments = []
    t = 0
    for l, k in zip(best_lens, best_states):
        segments.append(Segment(state=int(k), start=t, length=int(l)))
        t += l
    return Segmentation(segments=segments, score=float(best)), n


def enumerate_posterior(lattice, transitions, lengths):
    """Exhaustive per-token occupancy posterior, [T, k_base]."""
    trans = transitions.values if isinstance(transitions, Tensor) else transitions
    lengths = np.asarray(lengths)
    T, L, kb = lattice.num_tokens, lattice.max_len, lattice.k_base
    K = trans.shape[1]
    full = lattice.scores[:, :, np.arange(K) % kb]
    logz = enumerate_marginal(lattice, transitions, lengths)
    occ = np.zeros((T, kb))
    for lens, states in enumerate_segmentations(T, L, K):
        lp = joint_log_score(lens, states, full, lattice.mask, trans, lengths)
        w = np.exp(lp - logz)
        if w == 0.0:
            continue
        t = 0
        for l, k in zip(lens, states):
            occ[t : t + l, k % kb] += w
            t += l
    return occ


def brute_force_marginal(ex, model, src=None, rng=None):
    """Model-driven exhaustive marginal for an example (oracle)."""
    if ex.num_tokens > 10:
        raise ValueError("brute_force_marginal is limited to T <= 10")
    if src is None:
        src = model.encode_kb(ex.records)
    lattice = build_lattice(ex, model, src, rng=rng)
    trans = model.transition_log_probs(src)
    return enumerate_marginal(lattice, trans, model.length_log_probs())


def brute_force_viterbi(ex, model, src=None):
    if ex.num_tokens > 10:
        raise ValueError("brute_force_viterbi is limited to T <= 10")
    if src is None:
        src = model.encode_kb(ex.records)
    lattice = build_lattice(ex, model, src)
    trans = model.transition_log_probs(src)
    seg, _ = enumerate_viterbi(lattice, trans, model.length_log_probs())
    return seg


# ----------------------------------------------------------------------
# bracketed serialization (one line per example)

_SEG_RE = re.compile(r"\[([^\[\]]*)\]_(\d+)")


def segmentation_to_text(seg, tokens):
    """Render `[tokens]_state` cells in order."""
    parts = []
    for s in seg.segments:
        chunk = " ".join(tokens[s.start : s.start + s.length])
        parts.append(f"[{chunk}]_{s.state}")
    return " ".join(parts)


def parse_segmentation(line):
    """Inverse of segmentation_to_text: returns (tokens, Segmentation).

    Raises ValueError if the line is not a sequence of bracketed cells.
    """
    stripped = line.strip()
    if not stripped:
        return [], Segmentation(segments=[], score=0.0)
    pos = 0
    tokens = []
    segments = []
    for m in _SEG_RE.finditer(stripped):
        if stripped[pos : m.start()].strip():
            raise ValueError(f"unparseable text before segment: {line!r}")
        seg_tokens = m.group(1).split()
        if not seg_tokens:
            raise ValueError(f"empty segment in {line!r}")
        segments.append(
            Segment(state=int(m.group(2)), start=len(tokens), length=len(seg_tokens))
        )
        tokens.extend(seg_tokens)
        pos = m.end()
    if stripped[pos:].strip() or not segments:
        raise ValueError(f"trailing junk or no segments in {line!r}")
    return tokens, Segmentation(segments=segments, score=0.0)
