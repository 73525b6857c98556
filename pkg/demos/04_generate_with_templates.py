"""
Template-constrained generation
===============================

Force the decoder through a chosen state sequence and watch the beam search
respect it exactly, whatever the beam width.
"""

from seggen.data import Vocab, parse_e2e_mr
from seggen.generation import generate_with_template
from seggen.model import HsmmModel, ModelConfig
from seggen.templates import collapse

# An untrained model is enough to show the machinery: the template fixes the
# route through the states, the beam only chooses words and segment lengths.
cfg = ModelConfig(k_base=3, dup=2, d=10, max_len=3, m1=5, m2=4, m3=5,
                  type_buckets=16, value_buckets=32, seed=4)
vocab = Vocab(["serves", "fine", "cooking", "by", "the", "water", "."])
model = HsmmModel(cfg, vocab)
src = model.encode_kb(parse_e2e_mr("name[Rialto Bridge], food[venetian]"))

# States are written collapsed: adjacent repeats merge, so (5, 0, 2) means
# "some state-5 segments, then state-0 segments, then state-2 segments".
template = (5, 0, 2)
result = generate_with_template(model, src, template, beam=5)
print("tokens:   ", result.tokens)
print("states:   ", [s.state for s in result.segmentation.segments])
print("collapsed:", collapse(result.segmentation), "== template:",
      collapse(result.segmentation) == template)

# text() joins the tokens; any copied word keeps the casing of its source
# record (this untrained model happens to prefer vocabulary words).
print("text:     ", result.text())

# Wider beams never score worse - they search a superset of hypotheses.
for width in (1, 2, 5, 10):
    r = generate_with_template(model, src, template, beam=width)
    print(f"beam {width:2d}: score {r.score:.4f}")
