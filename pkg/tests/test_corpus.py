import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seggen.data import (
    CopySpan,
    CorpusError,
    Example,
    Record,
    Vocab,
    build_vocab,
    find_copy_spans,
    group_by_mr,
    index_example,
    load_e2e_csv,
    load_jsonl,
    parse_e2e_mr,
    serialize_mr,
    tokenize,
    write_jsonl,
)


def make_example(mr, text):
    ex = Example(records=parse_e2e_mr(mr), tokens=tokenize(text), meta={"mr": mr})
    return ex


class TestMrParsing:
    def test_multiword_value_becomes_positional_records(self):
        records = parse_e2e_mr("type[coffee shop]")
        assert [(r.rtype, r.position, r.value) for r in records] == [
            ("type", 1, "coffee"),
            ("type", 2, "shop"),
        ]
        assert [r.is_final_position for r in records] == [False, True]

    def test_three_word_value(self):
        records = parse_e2e_mr("near[The Portland Arms]")
        assert [(r.rtype, r.position, r.value) for r in records] == [
            ("near", 1, "the"),
            ("near", 2, "portland"),
            ("near", 3, "arms"),
        ]
        assert [r.raw for r in records] == ["The", "Portland", "Arms"]

    def test_empty_mr_gives_no_records(self):
        assert parse_e2e_mr("") == []
        assert parse_e2e_mr("   ") == []

    def test_multiple_fields(self):
        records = parse_e2e_mr("name[The Mill], area[riverside], familyFriendly[yes]")
        assert [r.display_type() for r in records] == [
            "name-1",
            "name-2",
            "area-1",
            "familyFriendly-1",
        ]

    def test_unclosed_bracket_reports_position(self):
        with pytest.raises(CorpusError, match="line 7"):
            parse_e2e_mr("name[The Mill", line_no=7)

    def test_stray_close_bracket(self):
        with pytest.raises(CorpusError, match="col 11"):
            parse_e2e_mr("name[ok], ] oops")

    def test_missing_brackets(self):
        with pytest.raises(CorpusError, match="expected 'field"):
            parse_e2e_mr("name The Mill")

    def test_serialization_round_trip_preserves_fields(self):
        mr = "name[The Mill], eatType[coffee shop], near[The Portland Arms]"
        assert serialize_mr(parse_e2e_mr(mr)) == mr


class TestFileFormats:
    def test_e2e_csv_loads_rows(self, tmp_path):
        path = tmp_path / "train.csv"
        path.write_text(
            'mr,ref\n"name[The Mill], area[riverside]",The Mill is in riverside .\n',
            encoding="utf-8",
        )
        examples = load_e2e_csv(path)
        assert len(examples) == 1
        assert examples[0].tokens == ["the", "mill", "is", "in", "riverside", "."]
        assert len(examples[0].records) == 3

    def test_e2e_csv_rejects_wrong_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\nx,y\n", encoding="utf-8")
        with pytest.raises(CorpusError, match="header"):
            load_e2e_csv(path)

    def test_jsonl_round_trip(self, tmp_path):
        examples = [
            make_example("name[The Mill], area[riverside]", "The Mill is in riverside ."),
            make_example("type[coffee shop]", "a coffee shop"),
        ]
        path = tmp_path / "corpus.jsonl"
        write_jsonl(examples, path)
        back = load_jsonl(path)
        assert len(back) == len(examples)
        for a, b in zip(examples, back):
            assert a.tokens == b.tokens
            assert [(r.rtype, r.position, r.value) for r in a.records] == [
                (r.rtype, r.position, r.value) for r in b.records
            ]
            assert [r.is_final_position for r in a.records] == [
                r.is_final_position for r in b.records
            ]

    def test_jsonl_entity_metadata_survives(self, tmp_path):
        ex = make_example("name[Cotto]", "Cotto is nice")
        ex.meta["entity"] = "cotto"
        path = tmp_path / "one.jsonl"
        write_jsonl([ex], path)
        assert load_jsonl(path)[0].meta["entity"] == "cotto"

    def test_jsonl_rejects_missing_keys(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps({"records": []}) + "\n", encoding="utf-8")
        with pytest.raises(CorpusError, match="line 1"):
            load_jsonl(path)

    def test_jsonl_rejects_invalid_json(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{not json\n", encoding="utf-8")
        with pytest.raises(CorpusError, match="line 1"):
            load_jsonl(path)


class TestVocab:
    def test_reserved_ids(self):
        v = Vocab(["hello"])
        assert v.unk_id == 0
        assert v.eos_id == 1
        assert v.id("hello") == 2
        assert v.id("missing") is None

    def test_copyable_tokens_are_excluded(self):
        corpus = [
            make_example("name[Cotto]", "Cotto is a nice place"),
            make_example("area[riverside]", "it is in riverside"),
        ]
        v = build_vocab(corpus, min_count=1)
        assert "cotto" not in v
        assert "riverside" not in v
        assert "is" in v and "nice" in v

    def test_token_copyable_anywhere_is_excluded_everywhere(self):
        # "mill" is a record value in the first example only, but that is
        # enough to drop it from the generation vocabulary.
        corpus = [
            make_example("name[The Mill]", "The Mill is great"),
            make_example("name[Cotto]", "not a mill at all"),
        ]
        v = build_vocab(corpus, min_count=1)
        assert "mill" not in v
        assert "great" in v

    def test_min_count_filters_rare_tokens(self):
        corpus = [
            make_example("name[Cotto]", "alpha alpha beta"),
        ]
        v = build_vocab(corpus, min_count=2)
        assert "alpha" in v
        assert "beta" not in v


class TestIndexing:
    def test_gen_ids_and_copy_matches(self):
        corpus = [make_example("name[Cotto]", "Cotto is nice")]
        v = build_vocab(corpus, min_count=1)
        ex = index_example(corpus[0], v, max_len=4)
        # "cotto" is copy-only, the rest are ordinary vocab words
        assert ex.token_ids[0] == -1
        assert ex.token_ids[1] == v.id("is")
        assert ex.copy_matches == [[0], [], []]

    def test_unknown_noncopyable_token_maps_to_unk(self):
        corpus = [make_example("name[Cotto]", "Cotto is nice")]
        v = build_vocab(corpus, min_count=1)
        ex = index_example(make_example("name[Cotto]", "Cotto was shut"), v, max_len=4)
        assert ex.token_ids == [-1, v.unk_id, v.unk_id]

    def test_repeated_value_matches_all_records(self):
        ex = make_example("near[the river], name[the hut]", "by the hut")
        v = build_vocab([ex], min_count=1)
        index_example(ex, v, max_len=4)
        # "the" appears as position-1 value of both fields
        assert ex.copy_matches[1] == [0, 2]


class TestCopySpans:
    def test_full_field_match_is_one_span(self):
        ex = make_example("near[The Portland Arms]", "near the portland arms tonight")
        spans = find_copy_spans(ex, max_len=4)
        assert spans == [CopySpan(start=1, end=4, record_indices=(0, 1, 2))]

    def test_long_span_is_chunked(self):
        ex = make_example("near[The Portland Arms]", "near the portland arms tonight")
        spans = find_copy_spans(ex, max_len=2)
        assert [(s.start, s.end) for s in spans] == [(1, 3), (3, 4)]
        assert spans[0].record_indices == (0, 1)
        assert spans[1].record_indices == (2,)

    def test_partial_suffix_mention_matches(self):
        ex = make_example("near[The Portland Arms]", "beside portland arms now")
        spans = find_copy_spans(ex, max_len=4)
        assert [(s.start, s.end) for s in spans] == [(1, 3)]
        assert spans[0].record_indices == (1, 2)

    def test_leftmost_longest_wins_on_overlap(self):
        # "coffee shop" as a field; text repeats "shop coffee shop":
        # the leftmost candidate is the single "shop", then "coffee shop".
        ex = make_example("type[coffee shop]", "shop coffee shop")
        spans = find_copy_spans(ex, max_len=4)
        assert [(s.start, s.end) for s in spans] == [(0, 1), (1, 3)]

    def test_no_match_means_no_spans(self):
        ex = make_example("name[Cotto]", "an unrelated sentence")
        assert find_copy_spans(ex, max_len=4) == []


def oracle_spans(tokens, fields, max_len):
    """Quadratic oracle for span finding: test every substring directly.

    fields is a list of (record index list, value list).  A span candidate is
    any maximal substring equal to a run of consecutive values of one field;
    selection is greedy leftmost-longest, then chunked to max_len.
    """
    T = len(tokens)
    best = {}
    for start in range(T):
        for end in range(start + 1, T + 1):
            seg = tokens[start:end]
            for idxs, values in fields:
                n = len(values)
                for a in range(n - len(seg) + 1):
                    if values[a : a + len(seg)] == seg:
                        cur = best.get(start)
                        if cur is None or end - start > cur[0]:
                            best[start] = (end - start, tuple(idxs[a : a + len(seg)]))
                        break
    chosen = []
    covered = -1
    for start in sorted(best):
        length, ridx = best[start]
        if start <= covered:
            continue
        chosen.append((start, length, ridx))
        covered = start + length - 1
    out = []
    for start, length, ridx in chosen:
        off = 0
        while off < length:
            step = min(max_len, length - off)
            out.append((start + off, start + off + step, tuple(ridx[off : off + step])))
            off += step
    return out


class TestCopySpanOracle:
    def test_random_tiny_cases_match_exhaustive_matcher(self):
        rng = np.random.default_rng(20260818)
        alphabet = ["a", "b", "c"]
        for _ in range(300):
            T = int(rng.integers(1, 9))
            tokens = [alphabet[i] for i in rng.integers(0, len(alphabet), size=T)]
            n_fields = int(rng.integers(1, 3))
            records = []
            fields = []
            for _f in range(n_fields):
                flen = int(rng.integers(1, 4))
                vals = [alphabet[i] for i in rng.integers(0, len(alphabet), size=flen)]
                idxs = list(range(len(records), len(records) + flen))
                fields.append((idxs, vals))
                for p, v in enumerate(vals):
                    records.append(
                        Record(
                            rtype=f"f{_f}",
                            position=p + 1,
                            value=v,
                            is_final_position=(p + 1 == flen),
                            raw=v,
                        )
                    )
            max_len = int(rng.integers(1, 5))
            ex = Example(records=records, tokens=tokens)
            got = [(s.start, s.end, s.record_indices) for s in find_copy_spans(ex, max_len)]
            assert got == oracle_spans(tokens, fields, max_len)


@st.composite
def random_example(draw):
    alphabet = ["x", "y", "z", "w"]
    tokens = draw(st.lists(st.sampled_from(alphabet), min_size=1, max_size=10))
    n_fields = draw(st.integers(min_value=0, max_value=3))
    records = []
    for f in range(n_fields):
        vals = draw(st.lists(st.sampled_from(alphabet), min_size=1, max_size=3))
        for p, v in enumerate(vals):
            records.append(
                Record(
                    rtype=f"f{f}",
                    position=p + 1,
                    value=v,
                    is_final_position=(p + 1 == len(vals)),
                    raw=v,
                )
            )
    return Example(records=records, tokens=tokens)


class TestCorpusProperties:
    @settings(max_examples=200, deadline=None)
    @given(random_example(), st.integers(min_value=1, max_value=4))
    def test_spans_are_sorted_disjoint_and_bounded(self, ex, max_len):
        spans = find_copy_spans(ex, max_len)
        values = {r.value for r in ex.records}
        prev_end = 0
        for s in spans:
            assert 0 <= s.start < s.end <= len(ex.tokens)
            assert s.start >= prev_end
            assert len(s) <= max_len
            assert len(s.record_indices) == len(s)
            for t in range(s.start, s.end):
                assert ex.tokens[t] in values
            prev_end = s.end

    @settings(max_examples=200, deadline=None)
    @given(random_example())
    def test_serialize_parse_round_trip(self, ex):
        back = parse_e2e_mr(serialize_mr(ex.records))
        assert [(r.rtype, r.position, r.value) for r in back] == [
            (r.rtype, r.position, r.value) for r in ex.records
        ]


class TestGrouping:
    def test_group_by_mr_collects_references(self):
        a1 = make_example("name[Cotto]", "Cotto is nice")
        a2 = make_example("name[Cotto]", "a nice place called Cotto")
        b = make_example("name[The Mill]", "The Mill is fine")
        uniques, refs = group_by_mr([a1, a2, b])
        assert len(uniques) == 2
        assert refs[0] == [a1.tokens, a2.tokens]
        assert refs[1] == [b.tokens]
