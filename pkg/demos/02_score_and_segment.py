"""
Scoring sentences and reading off segmentations
===============================================

Build a small untrained model, compute the exact probability that it assigns
to a sentence, and decode the best segmentation into bracket notation.
"""

import numpy as np

from seggen.data import Example, Vocab, index_example, parse_e2e_mr, tokenize
from seggen.inference import (
    build_lattice,
    log_marginal,
    parse_segmentation,
    segmentation_to_text,
    viterbi,
)
from seggen.model import HsmmModel, ModelConfig

# Eight latent states (four base states, each duplicated once), segments of
# up to three tokens.  Weights are random - none of this has been trained.
cfg = ModelConfig(k_base=4, dup=2, d=12, max_len=3, m1=6, m2=4, m3=6,
                  type_buckets=16, value_buckets=32, seed=1)
vocab = Vocab(["a", "restaurant", "in", "the", "centre", "serves", "food", "."])
model = HsmmModel(cfg, vocab)

ex = Example(
    records=parse_e2e_mr("name[zizzi], food[italian], area[city centre]"),
    tokens=tokenize("zizzi serves italian food in the city centre ."),
)
index_example(ex, vocab, cfg.max_len)

# The lattice scores every candidate segment in one batched pass; the log
# marginal then sums over every way of tiling the sentence with segments.
src = model.encode_kb(ex.records)
lattice = build_lattice(ex, model, src)
transitions = model.transition_log_probs(src)
lengths = model.length_log_probs()
print("log p(y|x) =", float(log_marginal(lattice, transitions, lengths).values))

# Viterbi picks the single best tiling.  Every copy-matched stretch - the
# name, the food, the two-word area - is forced to be one segment.
seg = viterbi(lattice, transitions, lengths)
line = segmentation_to_text(seg, ex.tokens)
print(line)

# Bracket lines are a real serialization, not just pretty-printing: they
# parse back into the same segmentation.
tokens, parsed = parse_segmentation(line)
print("round trip ok:", tokens == ex.tokens and parsed.segments == seg.segments)

# The score of the decoded segmentation never exceeds the marginal, which
# sums over all of them.
print("viterbi <= marginal:",
      seg.score <= float(log_marginal(lattice, transitions, lengths).values))
