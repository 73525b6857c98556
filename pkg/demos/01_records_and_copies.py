"""
Records, tokenization, and copy matching
========================================

Parse a meaning representation into records, line its values up against a
reference sentence, and see which words the vocabulary keeps.
"""

from seggen.data import (
    build_vocab,
    find_copy_spans,
    index_example,
    parse_e2e_mr,
    tokenize,
    Example,
)

# A meaning representation is a flat "field[value]" list.  Each field value
# becomes one record per word, so multi-word values turn into several
# positional records of the same type.
mr = "name[The Golden Palace], food[Indian], priceRange[£ 20 - 25]"
records = parse_e2e_mr(mr)
for r in records:
    print(r.rtype, r.position, r.value)

# The reference sentence realizes some of those values verbatim.
text = "the golden palace serves indian food in the £ 20 - 25 price range ."
ex = Example(records=records, tokens=tokenize(text))

# Indexing finds every maximal alignment between record values and the
# sentence.  Aligned stretches become copy spans: each one must be produced
# by a single segment, and words inside it can be copied rather than
# generated from the vocabulary.
vocab = build_vocab([ex])
index_example(ex, vocab, max_len=4)
for span in ex.copy_spans:
    print("span", ex.tokens[span.start : span.end], "records", span.record_indices)

# Words that only ever occur inside copyable stretches are deliberately left
# out of the generation vocabulary: the model has to copy them, which is what
# makes its states line up with record types.  "serves" stays; "indian" goes.
print("in vocab:", "serves" in vocab, "- copy-only:", "indian" not in vocab)
