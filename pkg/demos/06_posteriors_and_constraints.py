"""
State posteriors and copy constraints
=====================================

Where does each state think it lives in a sentence, and what do the copy
constraints cost in probability mass?
"""

import numpy as np

from seggen.data import Example, Vocab, index_example, parse_e2e_mr, tokenize
from seggen.inference import build_lattice, log_marginal, posterior_state_marginals
from seggen.model import HsmmModel, ModelConfig

cfg = ModelConfig(k_base=4, dup=1, d=12, max_len=3, m1=6, m2=4, m3=6,
                  type_buckets=16, value_buckets=32, seed=2)
vocab = Vocab(["is", "a", "nice", "spot", "near", "."])
model = HsmmModel(cfg, vocab)

ex = Example(
    records=parse_e2e_mr("name[fitzbillies], near[the mill]"),
    tokens=tokenize("fitzbillies is a nice spot near the mill ."),
)
index_example(ex, vocab, cfg.max_len)
src = model.encode_kb(ex.records)
transitions = model.transition_log_probs(src)
lengths = model.length_log_probs()

# The occupancy posterior p(state | token) comes out of the same machinery
# as the gradient: d log Z / d segment-score is exactly the probability that
# the segment is used.  Rows sum to one - and with untrained weights they
# sit near uniform, which is itself a useful sanity check.
lattice = build_lattice(ex, model, src)
occ = posterior_state_marginals(lattice, transitions, lengths)
print("token        " + "  ".join(f"k={k}" for k in range(cfg.k_base)))
for tok, row in zip(ex.tokens, occ):
    cells = "  ".join(f"{p:.2f}" for p in row)
    print(f"{tok:12s} {cells}")
print("row sums:", np.round(occ.sum(axis=1), 6))

# "the mill" was matched against the near-record, so segmentations that
# split it are excluded.  Dropping the constraint can only add probability
# mass: the constrained marginal is a sum over fewer segmentations.
constrained = float(log_marginal(lattice, transitions, lengths).values)
spans = ex.copy_spans
ex.copy_spans = []
free = float(log_marginal(build_lattice(ex, model, src), transitions, lengths).values)
ex.copy_spans = spans
print(f"log p(y|x) constrained {constrained:.4f}  unconstrained {free:.4f}")
print("constraint cost:", round(free - constrained, 4), "nats")
