"""Template-constrained generation by segment-wise beam search.

The search runs over words, not raw softmax slots: a candidate word's score
is the log-sum of its generation slot and every copy slot carrying the same
value, which keeps beam scores identical to what the scoring DP assigns the
finished sequence.  Hypotheses crossing a segment boundary pay the state
transition, and each finished segment pays the (uniform) length probability.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Tensor, index_select
from .inference import Segment, Segmentation

log = logging.getLogger(__name__)


class GenerationError(RuntimeError):
    pass


@dataclass
class Hypothesis:
    """One partial generation: surface tokens, how each was produced, and
    the recurrent states needed to extend it."""

    tokens: tuple = ()
    provenance: tuple = ()  # parallel to tokens: Record or None
    segments: tuple = ()  # completed (state, length) pairs
    score: float = 0.0
    ar_h: np.ndarray | None = None
    ar_c: np.ndarray | None = None
    pending: tuple | None = None  # (word, records) not yet consumed


@dataclass
class GenerationResult:
    tokens: list
    provenance: list
    segmentation: Segmentation
    score: float
    template_states: tuple
    template_index: int = None

    def text(self):
        return detokenize(self.tokens, self.provenance)


class _SlotGroups:
    """Static map from candidate words to the softmax slots that emit them."""

    def __init__(self, model, src):
        vocab = model.vocab
        V = len(vocab)
        self.vocab_extra = {}  # vocab id -> np slot ids
        self.vocab_records = {}  # vocab id -> record indices
        novel = {}
        for j, value in enumerate(src.values):
            vid = vocab.id(value)
            if vid is not None:
                self.vocab_extra.setdefault(vid, []).append(V + j)
                self.vocab_records.setdefault(vid, []).append(j)
            else:
                novel.setdefault(value, []).append(j)
        self.vocab_extra = {k: np.array(v) for k, v in self.vocab_extra.items()}
        self.novel_words = list(novel)
        self.novel_records = [novel[w] for w in self.novel_words]
        self.novel_slots = [
            np.array([V + j for j in idxs]) for idxs in self.novel_records
        ]
        self.width = V + len(self.novel_words)

    def aggregate(self, row, vocab_size):
        """Per-word log-probabilities from one slot-distribution row."""
        agg = row[:vocab_size].copy()
        agg[0] = -np.inf  # the unknown token is never generated
        agg[1] = -np.inf  # end-of-segment is handled as its own action
        for vid, slots in self.vocab_extra.items():
            agg[vid] = np.logaddexp(agg[vid], _lse(row[slots]))
        if not self.novel_words:
            return agg
        novel = np.array([_lse(row[s]) for s in self.novel_slots])
        return np.concatenate([agg, novel])

    def candidate(self, model, src, row, cand):
        """Resolve a candidate index to (word, map record, input entry)."""
        V = len(model.vocab)
        if cand < V:
            word = model.vocab.token(cand)
            rec_idxs = self.vocab_records.get(cand, ())
        else:
            word = self.novel_words[cand - V]
            rec_idxs = self.novel_records[cand - V]
        if rec_idxs:
            best = max(rec_idxs, key=lambda j: row[V + j])
            rec = src.records[best]
            return word, rec, (word, [rec])
        return word, None, (word, [])


def _lse(values):
    return float(np.logaddexp.reduce(values))


def generate_with_template(model, src, template, beam=5, max_seg_len=None):
    """Best completion of a template for one encoded KB.

    Beam width `beam` is used both for per-step pruning inside a segment
    and for the set of hypotheses carried across segment boundaries.
    """
    if beam < 1:
        raise ValueError("beam width must be at least 1")
    states = tuple(template.states) if hasattr(template, "states") else tuple(template)
    if not states:
        raise GenerationError("empty template")
    cfg = model.cfg
    L = cfg.max_len if max_seg_len is None else int(max_seg_len)
    if not 1 <= L <= cfg.max_len:
        raise ValueError(f"max_seg_len must lie in [1, {cfg.max_len}]")
    for k in states:
        if not 0 <= k < cfg.K:
            raise GenerationError(
                f"template state {k} outside the model's {cfg.K} states"
            )

    trans = model.transition_log_probs(src).values
    groups = _SlotGroups(model, src)
    V = len(model.vocab)
    ar = cfg.autoregressive

    start = Hypothesis()
    if ar:
        zeros = np.zeros(cfg.d)
        start = replace(start, ar_h=zeros, ar_c=zeros)
    carried = [start]

    for si, k in enumerate(states):
        kb = k % cfg.k_base
        step_in = trans[0, k] if si == 0 else trans[1 + states[si - 1], k]
        active = [
            replace(h, score=h.score + step_in, pending=None) for h in carried
        ]
        h_mat, c_mat = model.start_segment(src, rows=len(active))
        ar_h = ar_c = None
        if ar:
            ar_h = Tensor(np.stack([h.ar_h for h in active]))
            ar_c = Tensor(np.stack([h.ar_c for h in active]))
        finished = []

        for step in range(1, L + 2):
            if not active:
                break
            inp = None
            if step > 1:
                inp = model.input_reps([h.pending for h in active])
                if ar:
                    ar_h, ar_c = model.ar_step(inp, ar_h, ar_c)
            logp, h_mat, c_mat = model.batch_token_step(
                inp, h_mat, c_mat, np.full(len(active), kb), src,
                ar_h=ar_h if ar else None,
            )
            rows = logp.values

            if step >= 2:
                length = step - 1
                len_lp = model.length_log_prob(length)
                for i, hyp in enumerate(active):
                    done = replace(
                        hyp,
                        score=hyp.score + float(rows[i, 1]) + len_lp,
                        segments=hyp.segments + ((k, length),),
                        pending=None,
                    )
                    if ar:
                        done = replace(
                            done,
                            ar_h=ar_h.values[i].copy(),
                            ar_c=ar_c.values[i].copy(),
                        )
                    finished.append(done)

            if step > L:
                break
            scores = np.stack([groups.aggregate(rows[i], V) for i in range(len(active))])
            scores += np.array([h.score for h in active])[:, None]
            flat = scores.ravel()
            take = min(beam, flat.size)
            top = np.argpartition(-flat, take - 1)[:take]
            top = top[np.argsort(-flat[top], kind="stable")]
            parents, new_active = [], []
            for flat_idx in top:
                if not np.isfinite(flat[flat_idx]):
                    continue
                i, cand = divmod(int(flat_idx), groups.width)
                word, rec, entry = groups.candidate(model, src, rows[i], cand)
                parents.append(i)
                new_active.append(
                    replace(
                        active[i],
                        tokens=active[i].tokens + (word,),
                        provenance=active[i].provenance + (rec,),
                        score=float(flat[flat_idx]),
                        pending=entry,
                    )
                )
            if new_active:
                sel = np.array(parents)
                h_mat = index_select(h_mat, sel)
                c_mat = index_select(c_mat, sel)
                if ar:
                    ar_h = index_select(ar_h, sel)
                    ar_c = index_select(ar_c, sel)
            active = new_active

        finished.sort(key=lambda h: -h.score)
        carried = finished[:beam]
        if not carried:
            raise GenerationError(f"beam died in segment {si} (state {k})")

    best = carried[0]
    segs, pos = [], 0
    for state, length in best.segments:
        segs.append(Segment(state, pos, length))
        pos += length
    return GenerationResult(
        tokens=list(best.tokens),
        provenance=list(best.provenance),
        segmentation=Segmentation(segments=segs, score=best.score),
        score=best.score,
        template_states=states,
    )


def generate_best(model, src, templates, beam=5):
    """Highest-scoring generation across templates; failing ones are skipped."""
    if not templates:
        raise GenerationError("no templates supplied")
    best = None
    failures = 0
    for ti, template in enumerate(templates):
        try:
            result = generate_with_template(model, src, template, beam=beam)
        except GenerationError as err:
            failures += 1
            log.debug("template %d failed: %s", ti, err)
            continue
        result.template_index = ti
        if best is None or result.score > best.score:
            best = result
    if best is None:
        raise GenerationError(f"all {failures} templates failed")
    return best


def detokenize(tokens, provenance):
    """Surface string: copied tokens keep the casing of their source record."""
    parts = []
    for tok, rec in zip(tokens, provenance):
        parts.append(rec.raw if rec is not None and rec.raw else tok)
    return " ".join(parts)


def generation_row(example_id, result):
    """JSON-ready record of one generation."""
    return {
        "example_id": example_id,
        "text": result.text(),
        "template_states": list(result.template_states),
        "score": result.score,
        "segments": [
            {
                "state": s.state,
                "tokens": result.tokens[s.start : s.start + s.length],
            }
            for s in result.segmentation.segments
        ],
    }


def write_generations(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def load_generations(path):
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValueError(f"bad generation on line {line_no}: {err}") from None
            out.append(row)
    return out
