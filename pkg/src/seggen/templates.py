"""Template extraction from MAP segmentations, plus per-state usage
profiles and the record-type purity analysis."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import tokenize
from .inference import InfeasibleError, build_lattice, viterbi

log = logging.getLogger(__name__)


@dataclass
class Template:
    """A collapsed latent-state sequence with its corpus statistics."""

    states: tuple
    count: int = 0
    example_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.states = tuple(int(s) for s in self.states)
        if not self.states:
            raise ValueError("a template needs at least one state")
        for a, b in zip(self.states, self.states[1:]):
            if a == b:
                raise ValueError("adjacent duplicate states; collapse first")


@dataclass
class StateProfile:
    state: int
    segment_counts: Counter = field(default_factory=Counter)
    total: int = 0
    word_total: int = 0
    copyable_words: int = 0
    type_votes: Counter = field(default_factory=Counter)

    @property
    def majority_type(self):
        """Most-voted record type, or None when the state's words mostly
        fall outside every record value."""
        if not self.type_votes or 2 * self.copyable_words <= self.word_total:
            return None
        return min(self.type_votes, key=lambda t: (-self.type_votes[t], t))

    @property
    def purity(self):
        winner = self.majority_type
        if winner is None:
            return None
        return 100.0 * self.type_votes[winner] / self.copyable_words

    def top_segments(self, n=3):
        return [list(seg) for seg, _ in self.segment_counts.most_common(n)]


def collapse_states(states):
    """Merge adjacent equal entries of a state sequence."""
    out = []
    for s in states:
        if not out or out[-1] != s:
            out.append(int(s))
    return tuple(out)


def collapse(segmentation):
    """Template states of a segmentation: one entry per run of equal-state
    segments."""
    return collapse_states(s.state for s in segmentation.segments)


def map_segmentation(model, ex, src=None):
    """Best segmentation of an example, or None when constraints exclude
    every tiling."""
    if src is None:
        src = model.encode_kb(ex.records)
    lattice = build_lattice(ex, model, src)
    try:
        return viterbi(
            lattice, model.transition_log_probs(src), model.length_log_probs()
        )
    except InfeasibleError:
        return None


def segment_corpus(model, corpus):
    """MAP-segment every example; infeasible ones come back as None."""
    out = []
    for i, ex in enumerate(corpus):
        seg = map_segmentation(model, ex)
        if seg is None:
            log.warning("example %d admits no segmentation, skipping", i)
        out.append(seg)
    return out


def extract_templates(corpus, model, top_n=100, segmentations=None):
    """The `top_n` most frequent collapsed state sequences in the corpus.

    Ordered by count, ties broken by first occurrence.  Pass precomputed
    `segmentations` (aligned with the corpus, None entries skipped) to avoid
    re-running Viterbi.
    """
    if segmentations is None:
        segmentations = segment_corpus(model, corpus)
    seen = {}
    for idx, seg in enumerate(segmentations):
        if seg is None:
            continue
        key = collapse(seg)
        t = seen.get(key)
        if t is None:
            seen[key] = t = Template(states=key)
        t.count += 1
        t.example_ids.append(idx)
    ranked = sorted(seen.values(), key=lambda t: (-t.count, t.example_ids[0]))
    return ranked[:top_n]


def _word_types(ex):
    """word -> set of record types whose value contains it (this example)."""
    table = {}
    for r in ex.records:
        for w in tokenize(r.value):
            table.setdefault(w, set()).add(r.rtype)
    return table


def state_profiles(corpus, segmentations, templates=None):
    """Aggregate per-state segment and record-type statistics.

    When `templates` is given, only examples whose collapsed sequence is
    one of them contribute (the usual "top-100 templates" restriction).
    """
    allowed = None if templates is None else {t.states for t in templates}
    profiles = {}
    for ex, seg in zip(corpus, segmentations):
        if seg is None:
            continue
        if allowed is not None and collapse(seg) not in allowed:
            continue
        word_types = _word_types(ex)
        for s in seg.segments:
            words = ex.tokens[s.start : s.start + s.length]
            prof = profiles.get(s.state)
            if prof is None:
                profiles[s.state] = prof = StateProfile(state=s.state)
            prof.segment_counts[tuple(words)] += 1
            prof.total += 1
            for w in words:
                prof.word_total += 1
                types = word_types.get(w)
                if types:
                    prof.copyable_words += 1
                    for rtype in types:
                        prof.type_votes[rtype] += 1
    return profiles


@dataclass
class PurityReport:
    per_state: dict
    mean: float
    stddev: float


def purity(corpus, segmentations, templates):
    """Record-type purity of each qualifying state.

    A state qualifies when most of its words appear in some record of their
    own example; its purity is the share of those copyable words explained
    by the state's single most frequent record type.
    """
    profiles = state_profiles(corpus, segmentations, templates)
    per_state = {
        k: p.purity for k, p in sorted(profiles.items()) if p.purity is not None
    }
    values = list(per_state.values())
    if values:
        mean, std = float(np.mean(values)), float(np.std(values))
    else:
        mean, std = float("nan"), float("nan")
    return PurityReport(per_state=per_state, mean=mean, stddev=std)


def render_template(template, profiles):
    """One bracketed cell per state showing its three most common segments."""
    cells = []
    for k in template.states:
        prof = profiles.get(k)
        if prof is None:
            cells.append(f"[]_{k}")
            continue
        variants = " | ".join(" ".join(seg) for seg in prof.top_segments(3))
        cells.append(f"[{variants}]_{k}")
    return " ".join(cells)


def save_templates(path, templates, profiles=None):
    """JSON-lines store: states, count, example ids, rendered preview."""
    with open(path, "w") as fh:
        for t in templates:
            row = {
                "states": list(t.states),
                "count": t.count,
                "example_ids": list(t.example_ids),
            }
            if profiles is not None:
                row["preview"] = render_template(t, profiles)
            fh.write(json.dumps(row) + "\n")


def load_templates(path):
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out.append(
                    Template(
                        states=tuple(row["states"]),
                        count=int(row.get("count", 0)),
                        example_ids=list(row.get("example_ids", [])),
                    )
                )
            except (KeyError, ValueError, TypeError) as err:
                raise ValueError(f"bad template on line {line_no}: {err}") from None
    return out
