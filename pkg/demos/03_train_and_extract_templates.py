"""
Training and template extraction
================================

Train a small model on sentences with a planted two-pattern structure and
watch the recovered templates line up with the patterns.
"""

import tempfile

import numpy as np

from seggen.data import Example, parse_e2e_mr, tokenize
from seggen.templates import (
    extract_templates,
    render_template,
    segment_corpus,
    state_profiles,
)
from seggen.training import TrainConfig, train

# Two sentence plans over a tiny world.  Every knowledge base lists all
# three fields so the only way to guess the right value is to commit to a
# record type.
rng = np.random.default_rng(0)
names = ["mira", "lodge", "fable", "arclight", "veda", "solstice"]
foods = ["korean", "persian", "galician"]
areas = ["harbour", "uptown"]


def sample(i):
    name = names[rng.integers(len(names))]
    food = foods[rng.integers(len(foods))]
    area = areas[rng.integers(len(areas))]
    if i % 2:
        text = f"{name} serves {food} cooking ."
    else:
        text = f"{name} is found in {area} ."
    mr = f"name[{name}], food[{food}], area[{area}]"
    return Example(records=parse_e2e_mr(mr), tokens=tokenize(text),
                   meta={"mr": mr, "ref": text})


corpus = [sample(i) for i in range(300)]
valid = [sample(i) for i in range(60)]

# Training maximizes the exact log marginal with plain SGD; the learning
# rate starts decaying once validation likelihood stops improving.
cfg = TrainConfig(k_base=8, d=24, max_len=3, m1=8, m2=6, m3=8,
                  type_buckets=16, value_buckets=64, batch_size=16,
                  max_epochs=8, decay=0.9, seed=0)
with tempfile.TemporaryDirectory() as out:
    result = train(corpus, valid, cfg, out)

# Segment the training corpus with the learned model, then group examples by
# their collapsed state sequence.  The top sequences are the templates.
model = result.model
segmentations = segment_corpus(model, corpus)
templates = extract_templates(corpus, model, top_n=4, segmentations=segmentations)
profiles = state_profiles(corpus, segmentations, templates)
for t in templates:
    print(f"{t.count:4d}x {t.states}")
    print("      ", render_template(t, profiles))

# With two planted plans, the two biggest templates should take most of the
# corpus between them.
covered = sum(t.count for t in templates[:2])
print(f"top-2 cover {covered}/{len(corpus)} examples")
