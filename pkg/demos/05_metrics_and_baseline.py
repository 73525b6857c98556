"""
Evaluation metrics and the substitution baseline
================================================

Corpus BLEU and ROUGE-L, plus the retrieve-and-substitute baseline that any
learned generator is expected to beat.
"""

from seggen.data import Example, parse_e2e_mr, tokenize
from seggen.evalkit import bleu, rouge_l, sub_baseline

# Metrics take one hypothesis per instance and a GROUP of references per
# instance, scored at the corpus level.
refs = [
    [tokenize("aromi is a coffee shop on the riverside .")],
    [tokenize("the mill serves cheap indian food ."),
     tokenize("cheap indian food is served at the mill .")],
]
hyps = [
    tokenize("aromi is a coffee shop on the riverside ."),
    tokenize("the mill serves cheap food ."),
]
print(f"bleu    {bleu(refs, hyps):6.2f}")
print(f"rouge-l {rouge_l(refs, hyps):6.2f}")

# Perfect hypotheses score exactly 100.
print("identity bleu:", bleu(refs, [g[0] for g in refs]))

# The substitution baseline answers a new meaning representation by finding
# a training sentence whose records look most similar, then splicing the new
# values into it.  No model, no learning - just retrieval plus string
# surgery.
train = [
    Example(records=parse_e2e_mr("name[zizzi], food[italian], area[city centre]"),
            tokens=tokenize("zizzi serves italian food in the city centre .")),
    Example(records=parse_e2e_mr("name[cotto], priceRange[cheap]"),
            tokens=tokenize("cotto is a cheap place to eat .")),
]
request = parse_e2e_mr("name[strada], food[french], area[riverside]")
print("baseline:", " ".join(sub_baseline(train, request, seed=0)))
