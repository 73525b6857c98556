"""Corpus BLEU-4, ROUGE-L, and a nearest-neighbour substitution baseline."""

from __future__ import annotations

from collections import Counter

import numpy as np

from .data import group_fields

MAX_ORDER = 4


def _as_reference_groups(references):
    """Accept one reference per example or a list of alternatives each."""
    groups = []
    for refs in references:
        if refs and isinstance(refs[0], str):
            groups.append([list(refs)])
        else:
            groups.append([list(r) for r in refs])
        if not groups[-1]:
            raise ValueError(f"example {len(groups) - 1} has no references")
    return groups


def _ngram_counts(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def ngram_precisions(references, hypotheses, max_order=MAX_ORDER):
    """Corpus-level clipped n-gram precisions plus the two length totals."""
    groups = _as_reference_groups(references)
    if len(groups) != len(hypotheses):
        raise ValueError("reference and hypothesis counts differ")
    if not hypotheses:
        raise ValueError("nothing to score")
    matches = [0] * max_order
    totals = [0] * max_order
    hyp_len = 0
    ref_len = 0
    for refs, hyp in zip(groups, hypotheses):
        hyp = list(hyp)
        hyp_len += len(hyp)
        # closest reference length; ties go to the shorter one
        ref_len += min((len(r) for r in refs), key=lambda n: (abs(n - len(hyp)), n))
        for n in range(1, max_order + 1):
            counts = _ngram_counts(hyp, n)
            if not counts:
                continue
            limits = Counter()
            for r in refs:
                for gram, c in _ngram_counts(r, n).items():
                    limits[gram] = max(limits[gram], c)
            totals[n - 1] += sum(counts.values())
            matches[n - 1] += sum(min(c, limits[g]) for g, c in counts.items())
    precisions = [
        (m / t if t else 0.0) for m, t in zip(matches, totals)
    ]
    return precisions, hyp_len, ref_len


def brevity_penalty(hyp_len, ref_len):
    if hyp_len >= ref_len:
        return 1.0
    if hyp_len == 0:
        return 0.0
    return float(np.exp(1.0 - ref_len / hyp_len))


def bleu(references, hypotheses):
    """Corpus BLEU-4 on a 0-100 scale: geometric mean of clipped n-gram
    precisions times the brevity penalty.  No smoothing: a missing n-gram
    order anywhere in the corpus zeroes the score."""
    precisions, hyp_len, ref_len = ngram_precisions(references, hypotheses)
    if any(p == 0.0 for p in precisions):
        return 0.0
    log_mean = sum(np.log(p) for p in precisions) / len(precisions)
    return 100.0 * brevity_penalty(hyp_len, ref_len) * float(np.exp(log_mean))


def lcs_length(a, b):
    """Length of the longest common subsequence."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(references, hypotheses, beta=1.2):
    """Mean sentence-level ROUGE-L F on a 0-100 scale (best reference per
    example); beta > 1 weighs recall above precision."""
    groups = _as_reference_groups(references)
    if len(groups) != len(hypotheses):
        raise ValueError("reference and hypothesis counts differ")
    if not hypotheses:
        raise ValueError("nothing to score")
    scores = []
    for refs, hyp in zip(groups, hypotheses):
        hyp = list(hyp)
        best = 0.0
        for ref in refs:
            lcs = lcs_length(ref, hyp)
            if lcs == 0:
                continue
            p = lcs / len(hyp)
            r = lcs / len(ref)
            f = (1 + beta**2) * p * r / (r + beta**2 * p)
            best = max(best, f)
        scores.append(best)
    return 100.0 * float(np.mean(scores))


# ----------------------------------------------------------------------
# substitution baseline


def field_value_map(records):
    """field type -> its value tokens (first field of each type wins)."""
    fields = {}
    for group in group_fields(records):
        fields.setdefault(group[0].rtype, [r.value for r in group])
    return fields


def _replace_span(tokens, old, new):
    """First occurrence of the token span `old` replaced by `new`."""
    if not old:
        return tokens, False
    for i in range(len(tokens) - len(old) + 1):
        if tokens[i : i + len(old)] == old:
            return tokens[:i] + list(new) + tokens[i + len(old) :], True
    return tokens, False


def substitute_values(tokens, donor_fields, target_fields):
    """Rewrite a donor sentence for a new KB by swapping aligned spans."""
    out = list(tokens)
    for rtype, donor_value in donor_fields.items():
        target_value = target_fields.get(rtype)
        if target_value is None or target_value == donor_value:
            continue
        out, _ = _replace_span(out, donor_value, target_value)
    return out


def sub_baseline(train_corpus, records, seed=0, categorical=()):
    """Nearest-neighbour generation: borrow the training sentence whose
    record types overlap the query's most without introducing extra ones,
    then splice in the query's values.

    `categorical` names field types that must match by value for a sentence
    to be borrowed at all.  With no admissible candidate, the corpus's most
    frequent sentence is used.
    """
    if not train_corpus:
        raise ValueError("empty training corpus")
    target_fields = field_value_map(records)
    target_types = set(target_fields)
    candidates = []
    best_overlap = 0
    for ex in train_corpus:
        fields = field_value_map(ex.records)
        if not set(fields) <= target_types:
            continue
        if any(
            t in categorical and fields[t] != target_fields[t] for t in fields
        ):
            continue
        overlap = len(fields)
        if overlap > best_overlap:
            best_overlap, candidates = overlap, [ex]
        elif overlap == best_overlap and overlap > 0:
            candidates.append(ex)
    if candidates:
        rng = np.random.default_rng(seed)
        donor = candidates[int(rng.integers(len(candidates)))]
    else:
        counts = Counter(tuple(ex.tokens) for ex in train_corpus)
        top = max(counts, key=lambda s: (counts[s], -_first_index(train_corpus, s)))
        donor = next(ex for ex in train_corpus if tuple(ex.tokens) == top)
    return substitute_values(donor.tokens, field_value_map(donor.records), target_fields)


def _first_index(corpus, sentence):
    for i, ex in enumerate(corpus):
        if tuple(ex.tokens) == sentence:
            return i
    return len(corpus)
