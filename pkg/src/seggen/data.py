"""Corpus loading, preprocessing and indexing.

Knowledge bases arrive either as E2E-style CSV (``mr,ref`` with meaning
representations like ``name[The Mill], area[riverside]``) or as generic
JSON-lines.  Multi-word field values are split into positional single-token
records so the copy mechanism can point at individual words: ``type[coffee
shop]`` yields a position-1 record for ``coffee`` and a position-2 record
for ``shop``.

Indexing against a vocabulary computes, per example, the generation-vocab id
of every target token, the records each token could have been copied from,
and the copy-constraint spans that must be emitted as single segments.
"""

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass, field

UNK_TOKEN = "<unk>"
EOS_TOKEN = "</seg>"


class CorpusError(ValueError):
    """Malformed input data; carries enough position info to find the spot."""


@dataclass(frozen=True)
class Record:
    """One positional fact: a base field type, a 1-based word position within
    the original field value, and a single lowercased token."""

    rtype: str
    position: int
    value: str
    is_final_position: bool = True
    raw: str = ""

    def display_type(self):
        return f"{self.rtype}-{self.position}"


@dataclass(frozen=True)
class CopySpan:
    """Half-open token range [start, end) that must be one segment, with the
    indices of the records its tokens were matched against."""

    start: int
    end: int
    record_indices: tuple

    def __len__(self):
        return self.end - self.start


@dataclass
class Example:
    records: list
    tokens: list
    meta: dict = field(default_factory=dict)
    # filled by index_example
    token_ids: list = None
    copy_matches: list = None
    copy_spans: list = None

    @property
    def num_tokens(self):
        return len(self.tokens)


class Vocab:
    """Bijective token <-> id map for the generation vocabulary.

    Ids 0 and 1 are reserved for the unknown token and the end-of-segment
    marker; corpus tokens start at 2.
    """

    def __init__(self, tokens=()):
        self._tokens = [UNK_TOKEN, EOS_TOKEN]
        self._ids = {UNK_TOKEN: 0, EOS_TOKEN: 1}
        for t in tokens:
            if t in self._ids:
                raise ValueError(f"duplicate vocabulary token {t!r}")
            self._ids[t] = len(self._tokens)
            self._tokens.append(t)

    unk_id = 0
    eos_id = 1

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def id(self, token):
        return self._ids.get(token)

    def token(self, idx):
        return self._tokens[idx]

    def tokens(self):
        return list(self._tokens)

    def corpus_tokens(self):
        return self._tokens[2:]


def tokenize(text):
    """Lowercase whitespace tokenization; values and references share it."""
    return text.lower().split()


def _positional_records(rtype, value_text):
    words = value_text.split()
    out = []
    for i, w in enumerate(words):
        out.append(
            Record(
                rtype=rtype,
                position=i + 1,
                value=w.lower(),
                is_final_position=(i + 1 == len(words)),
                raw=w,
            )
        )
    return out


_FIELD_RE = re.compile(r"^\s*([^\[\]]+?)\s*\[(.*)\]\s*$")


def parse_e2e_mr(mr_line, line_no=1):
    """Parse ``field1[value 1], field2[value 2]`` into positional records.

    Raises CorpusError with line/column on unbalanced brackets or fields
    that do not follow the ``name[value]`` shape.
    """
    records = []
    if not mr_line.strip():
        return records
    depth = 0
    start = 0
    pieces = []
    for col, ch in enumerate(mr_line):
        if ch == "[":
            depth += 1
            if depth > 1:
                raise CorpusError(f"line {line_no}, col {col + 1}: nested '[' in MR")
        elif ch == "]":
            depth -= 1
            if depth < 0:
                raise CorpusError(f"line {line_no}, col {col + 1}: unmatched ']' in MR")
        elif ch == "," and depth == 0:
            pieces.append((start, mr_line[start:col]))
            start = col + 1
    if depth != 0:
        raise CorpusError(f"line {line_no}, col {len(mr_line)}: unclosed '[' in MR")
    pieces.append((start, mr_line[start:]))
    for col, piece in pieces:
        if not piece.strip():
            continue
        m = _FIELD_RE.match(piece)
        if m is None:
            raise CorpusError(
                f"line {line_no}, col {col + 1}: expected 'field[value]', got {piece.strip()!r}"
            )
        records.extend(_positional_records(m.group(1), m.group(2)))
    return records


def serialize_mr(records):
    """Inverse of parse_e2e_mr; regroups positional records into fields."""
    parts = []
    for recs in group_fields(records):
        value = " ".join(r.raw or r.value for r in recs)
        parts.append(f"{recs[0].rtype}[{value}]")
    return ", ".join(parts)


def group_fields(records):
    """Split a record list into original fields: runs of one rtype whose
    positions increase by 1."""
    groups = []
    for j, r in enumerate(records):
        prev = records[j - 1] if j > 0 else None
        if (
            prev is not None
            and prev.rtype == r.rtype
            and r.position == prev.position + 1
        ):
            groups[-1].append(r)
        else:
            groups.append([r])
    return groups


def load_e2e_csv(path):
    """Load an ``mr,ref`` CSV into Examples (tokens unindexed)."""
    examples = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return examples
        header = [h.strip().lower() for h in header]
        if header[:2] != ["mr", "ref"]:
            raise CorpusError(f"{path}: expected header 'mr,ref', got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise CorpusError(f"{path} line {line_no}: expected two columns")
            mr, ref = row[0], row[1]
            examples.append(
                Example(
                    records=parse_e2e_mr(mr, line_no=line_no),
                    tokens=tokenize(ref),
                    meta={"mr": mr.strip(), "ref": ref, "line": line_no},
                )
            )
    return examples


def load_jsonl(path):
    """Load generic JSON-lines examples.

    Each line holds ``{"records": [{"type", "pos", "value"}...],
    "text": [token...]}`` plus optional ``"entity"`` metadata.
    """
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path} line {line_no}: invalid JSON ({e})") from e
            if "records" not in obj or "text" not in obj:
                raise CorpusError(f"{path} line {line_no}: missing 'records' or 'text'")
            tokens = obj["text"]
            if not all(isinstance(t, str) for t in tokens):
                raise CorpusError(f"{path} line {line_no}: non-string token in 'text'")
            raw_records = []
            for r in obj["records"]:
                for key in ("type", "pos", "value"):
                    if key not in r:
                        raise CorpusError(
                            f"{path} line {line_no}: record missing {key!r}"
                        )
                if not isinstance(r["value"], str):
                    raise CorpusError(f"{path} line {line_no}: record value not a string")
                raw_records.append((str(r["type"]), int(r["pos"]), r["value"]))
            records = []
            for j, (rtype, pos, value) in enumerate(raw_records):
                nxt = raw_records[j + 1] if j + 1 < len(raw_records) else None
                is_final = not (nxt is not None and nxt[0] == rtype and nxt[1] == pos + 1)
                records.append(
                    Record(
                        rtype=rtype,
                        position=pos,
                        value=value.lower(),
                        is_final_position=is_final,
                        raw=value,
                    )
                )
            meta = {"line": line_no}
            if "entity" in obj:
                meta["entity"] = obj["entity"]
            examples.append(
                Example(records=records, tokens=[t.lower() for t in tokens], meta=meta)
            )
    return examples


def write_jsonl(examples, path):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            obj = {
                "records": [
                    {"type": r.rtype, "pos": r.position, "value": r.raw or r.value}
                    for r in ex.records
                ],
                "text": list(ex.tokens),
            }
            if "entity" in ex.meta:
                obj["entity"] = ex.meta["entity"]
            fh.write(json.dumps(obj) + "\n")


def copyable_values(ex):
    return {r.value for r in ex.records}


def build_vocab(corpus, min_count=1):
    """Generation vocabulary: target tokens that are never copyable.

    A token qualifies only if in *every* training example where it occurs it
    does not match any of that example's record values; qualifying tokens
    below min_count fall back to the unknown id.  Copyable tokens are left
    out entirely so copy attention has to explain them.
    """
    counts = Counter()
    ever_copyable = set()
    for ex in corpus:
        values = copyable_values(ex)
        for tok in ex.tokens:
            counts[tok] += 1
            if tok in values:
                ever_copyable.add(tok)
    kept = [
        tok
        for tok, n in counts.items()
        if tok not in ever_copyable and n >= min_count
    ]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept)


def _field_match_candidates(tokens, fields):
    """All maximal (start, length, record indices) matches of consecutive
    positional values of one field against the token sequence."""
    out = {}
    T = len(tokens)
    for recs, idxs in fields:
        values = [r.value for r in recs]
        n = len(values)
        for start in range(T):
            best_len = 0
            best_idxs = None
            for align in range(n):
                length = 0
                while (
                    align + length < n
                    and start + length < T
                    and tokens[start + length] == values[align + length]
                ):
                    length += 1
                if length > best_len:
                    best_len = length
                    best_idxs = tuple(idxs[align : align + length])
            if best_len > 0:
                prev = out.get(start)
                if prev is None or best_len > prev[0]:
                    out[start] = (best_len, best_idxs)
    return [(s, ln, ri) for s, (ln, ri) in sorted(out.items())]


def find_copy_spans(ex, max_len):
    """Copy-constraint spans: greedy leftmost-longest non-overlapping matches
    of record-field values in the target, chunked to length <= max_len.

    Each resulting span must be realized as exactly one segment, so spans
    longer than the maximum segment length are split into forced chunks.
    """
    fields = []
    j = 0
    for recs in group_fields(ex.records):
        idxs = list(range(j, j + len(recs)))
        fields.append((recs, idxs))
        j += len(recs)
    candidates = _field_match_candidates(ex.tokens, fields)
    chosen = []
    covered_until = -1
    for start, length, ridx in candidates:
        if start <= covered_until:
            continue
        chosen.append((start, length, ridx))
        covered_until = start + length - 1
    spans = []
    for start, length, ridx in chosen:
        off = 0
        while off < length:
            step = min(max_len, length - off)
            spans.append(
                CopySpan(
                    start=start + off,
                    end=start + off + step,
                    record_indices=tuple(ridx[off : off + step]),
                )
            )
            off += step
    return spans


def index_example(ex, vocab, max_len):
    """Annotate an example with vocab ids, per-token copy matches and spans.

    Tokens outside the vocabulary that cannot be copied anywhere in this
    example map to the unknown id; copyable out-of-vocab tokens keep id -1
    and are explained purely through copy slots.
    """
    token_ids = []
    copy_matches = []
    for tok in ex.tokens:
        matches = [j for j, r in enumerate(ex.records) if r.value == tok]
        vid = vocab.id(tok)
        if vid is None:
            vid = -1 if matches else vocab.unk_id
        token_ids.append(vid)
        copy_matches.append(matches)
    ex.token_ids = token_ids
    ex.copy_matches = copy_matches
    ex.copy_spans = find_copy_spans(ex, max_len)
    return ex


def index_corpus(corpus, vocab, max_len):
    for ex in corpus:
        index_example(ex, vocab, max_len)
    return corpus


def group_by_mr(examples):
    """Group examples sharing one meaning representation (for multi-ref eval).

    Returns (unique examples, references) where references[i] is the list of
    token sequences attached to unique example i.  Falls back to one group
    per example when no 'mr' metadata is present.
    """
    order = []
    groups = {}
    for ex in examples:
        key = ex.meta.get("mr")
        if key is None:
            key = object()
        if key not in groups:
            groups[key] = ([], ex)
            order.append(key)
        groups[key][0].append(list(ex.tokens))
    uniques = [groups[k][1] for k in order]
    refs = [groups[k][0] for k in order]
    return uniques, refs
