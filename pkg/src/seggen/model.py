"""Neural parameterization of the segmental (semi-Markov) decoder.

The joint model factors into a state-transition distribution conditioned on
the record types present in the source, a uniform segment-length
distribution, and a per-segment emission RNN with attention and copy
attention over record embeddings.  Emission parameters are tied across
duplicated states: a model with `k_base` base states duplicated `dup` times
has K = k_base * dup transition states but only k_base emission behaviours.

Everything here builds on the tape in `autograd`; run without an active tape
for cheap forward-only evaluation (Viterbi, generation).
"""

import json
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .autograd import (
    Tensor,
    concat,
    index_select,
    log_softmax,
    lstm_cell,
    matmul,
    parameter,
    relu,
    reshape,
    softmax,
    tanh,
    tensor_max,
    tensor_sum,
    transpose,
    dropout as dropout_op,
)

CHECKPOINT_VERSION = 1

# reserved rows in the feature tables
DUMMY_ROW = 0
FLAG_NOT_FINAL = 1
FLAG_FINAL = 2


@dataclass
class ModelConfig:
    k_base: int
    dup: int = 1
    d: int = 64
    max_len: int = 4
    m1: int = 64
    m2: int = 32
    m3: int = 64
    autoregressive: bool = False
    dropout: float = 0.0
    type_buckets: int = 64
    value_buckets: int = 512
    max_position: int = 16
    seed: int = 0

    @property
    def K(self):
        return self.k_base * self.dup

    def validate(self):
        if self.k_base < 1 or self.dup < 1:
            raise ValueError("k_base and dup must be positive")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        return self


@dataclass
class EncodedSource:
    """A knowledge base pushed through the record encoder."""

    records: list
    values: list
    r_vecs: Tensor  # [J, d]
    x_a: Tensor  # [1, d], coordinatewise max over r_vecs
    x_u: Tensor  # [1, d], ReLU(sum of unique type embeddings + bias)

    @property
    def num_records(self):
        return len(self.records)


def _hash_bucket(text, buckets):
    return zlib.crc32(text.encode("utf-8")) % buckets


class HsmmModel:
    """Holds all trainable tensors and the forward computations."""

    def __init__(self, cfg: ModelConfig, vocab):
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        self.V = len(vocab)
        rng = np.random.default_rng(cfg.seed)
        d, K, kb = cfg.d, cfg.K, cfg.k_base
        out_d = 3 * d if cfg.autoregressive else 2 * d

        def emb(rows, cols, name):
            return parameter(rng.uniform(-0.1, 0.1, size=(rows, cols)), name=name)

        def mat(rows, cols, name):
            s = 1.0 / np.sqrt(rows)
            return parameter(rng.uniform(-s, s, size=(rows, cols)), name=name)

        def vec(n, name):
            return parameter(np.zeros(n), name=name)

        def gate(rows, cols, name):
            # state-conditional gates start wide: states that are born
            # distinguishable claim separate niches instead of collapsing
            # onto a shared average during the first epochs
            return parameter(rng.uniform(-1.0, 1.0, size=(rows, cols)), name=name)

        # feature tables; row 0 of type/pos tables and flag row 0 are the
        # dummy features used for non-copyable tokens
        self.word_emb = emb(self.V + cfg.value_buckets, d, "word_emb")
        self.type_emb = emb(cfg.type_buckets + 1, d, "type_emb")
        self.pos_emb = emb(cfg.max_position + 1, d, "pos_emb")
        self.flag_emb = emb(3, d, "flag_emb")
        # record encoder and LSTM-input encoder MLPs
        self.rec_w = mat(3 * d, d, "rec_w")
        self.rec_b = vec(d, "rec_b")
        self.in_w = mat(4 * d, d, "in_w")
        self.in_b = vec(d, "in_b")
        self.xu_b = vec(d, "xu_b")
        # transitions: row 0 of the factorized matrix is the start state
        self.trans_a = emb(K + 1, cfg.m1, "trans_a")
        self.trans_b = emb(cfg.m1, K, "trans_b")
        self.c_u1 = mat(d, cfg.m3, "c_u1")
        self.c_u2 = mat(cfg.m3, (K + 1) * cfg.m2, "c_u2")
        self.d_u1 = mat(d, cfg.m3, "d_u1")
        self.d_u2 = mat(cfg.m3, cfg.m2 * K, "d_u2")
        # emission RNN
        self.state_in_emb = gate(kb, d, "state_in_emb")
        self.q1 = mat(d, d, "q1")
        self.q2 = mat(d, d, "q2")
        self.lstm_wx = mat(2 * d, 4 * d, "lstm_wx")
        self.lstm_wh = mat(d, 4 * d, "lstm_wh")
        self.lstm_b = vec(4 * d, "lstm_b")
        self.attn_m = mat(d, d, "attn_m")
        self.w_out = mat(out_d, self.V, "w_out")
        self.g1 = gate(kb, out_d, "g1")
        self.g2 = gate(kb, d, "g2")
        self._ar_names = []
        if cfg.autoregressive:
            self.ar_wx = mat(d, 4 * d, "ar_wx")
            self.ar_wh = mat(d, 4 * d, "ar_wh")
            self.ar_b = vec(4 * d, "ar_b")
            self._ar_names = ["ar_wx", "ar_wh", "ar_b"]
        self._param_names = [
            "word_emb", "type_emb", "pos_emb", "flag_emb",
            "rec_w", "rec_b", "in_w", "in_b", "xu_b",
            "trans_a", "trans_b", "c_u1", "c_u2", "d_u1", "d_u2",
            "state_in_emb", "q1", "q2", "lstm_wx", "lstm_wh", "lstm_b",
            "attn_m", "w_out", "g1", "g2",
        ] + self._ar_names

    # ------------------------------------------------------------------
    # parameter access

    def params(self):
        return [getattr(self, n) for n in self._param_names]

    def named_params(self):
        return {n: getattr(self, n) for n in self._param_names}

    def ar_params(self):
        return [getattr(self, n) for n in self._ar_names]

    # ------------------------------------------------------------------
    # feature-row lookups

    def _type_row(self, rtype):
        return 1 + _hash_bucket(rtype, self.cfg.type_buckets)

    def _pos_row(self, position):
        return min(max(position, 1), self.cfg.max_position)

    def _value_row(self, token):
        vid = self.vocab.id(token)
        if vid is not None:
            return vid
        return self.V + _hash_bucket(token, self.cfg.value_buckets)

    def _record_feature_rows(self, r):
        return (
            self._type_row(r.rtype),
            self._value_row(r.value),
            self._pos_row(r.position),
            FLAG_FINAL if r.is_final_position else FLAG_NOT_FINAL,
        )

    # ------------------------------------------------------------------
    # source encoding

    def embed_records(self, records):
        """Record embeddings, [J, d]: ReLU MLP over type/pos/value features."""
        t_idx = np.array([self._type_row(r.rtype) for r in records])
        p_idx = np.array([self._pos_row(r.position) for r in records])
        v_idx = np.array([self._value_row(r.value) for r in records])
        feats = concat(
            [
                index_select(self.type_emb, t_idx),
                index_select(self.pos_emb, p_idx),
                index_select(self.word_emb, v_idx),
            ],
            axis=1,
        )
        return relu(matmul(feats, self.rec_w) + self.rec_b)

    def embed_record(self, record):
        return self.embed_records([record])

    def encode_kb(self, records):
        if not records:
            raise ValueError("cannot encode an empty record list")
        r_vecs = self.embed_records(records)
        x_a = tensor_max(r_vecs, axis=0, keepdims=True)
        seen, uniq_rows = set(), []
        for r in records:
            if r.rtype not in seen:
                seen.add(r.rtype)
                uniq_rows.append(self._type_row(r.rtype))
        type_sum = tensor_sum(
            index_select(self.type_emb, np.array(uniq_rows)), axis=0, keepdims=True
        )
        x_u = relu(type_sum + self.xu_b)
        return EncodedSource(
            records=list(records),
            values=[r.value for r in records],
            r_vecs=r_vecs,
            x_a=x_a,
            x_u=x_u,
        )

    # ------------------------------------------------------------------
    # transitions and lengths

    def transition_log_probs(self, src):
        """[(K+1) x K] log-probabilities; row 0 is the start-state row."""
        cfg = self.cfg
        K = cfg.K
        ch = relu(matmul(src.x_u, self.c_u1))
        c_mat = reshape(matmul(ch, self.c_u2), (K + 1, cfg.m2))
        dh = relu(matmul(src.x_u, self.d_u1))
        d_mat = reshape(matmul(dh, self.d_u2), (cfg.m2, K))
        scores = matmul(self.trans_a, self.trans_b) + matmul(c_mat, d_mat)
        return log_softmax(scores, axis=1)

    def length_log_probs(self):
        L = self.cfg.max_len
        return np.full(L, -np.log(L))

    def length_log_prob(self, l, k=0):
        if not 1 <= l <= self.cfg.max_len:
            raise ValueError(f"segment length {l} outside [1, {self.cfg.max_len}]")
        return -np.log(self.cfg.max_len)

    # ------------------------------------------------------------------
    # token inputs

    def _input_rows_for(self, token, matching_records):
        """Feature index rows (type, value, pos, flag) per contributing source."""
        if matching_records:
            return [self._record_feature_rows(r) for r in matching_records]
        vid = self.vocab.id(token)
        word_row = vid if vid is not None else self.vocab.unk_id
        return [(DUMMY_ROW, word_row, DUMMY_ROW, DUMMY_ROW)]

    def input_reps(self, entries, rng=None):
        """Batched LSTM-input representations, [len(entries), d].

        Each entry is (token, matching_records); copyable tokens embed their
        matching records' type/value/position/final-flag features through the
        input MLP, averaged when several records match.
        """
        rows = []
        owners = []
        for i, (token, matching) in enumerate(entries):
            for tup in self._input_rows_for(token, matching):
                rows.append(tup)
                owners.append(i)
        rows = np.array(rows, dtype=int)
        feats = concat(
            [
                index_select(self.type_emb, rows[:, 0]),
                index_select(self.word_emb, rows[:, 1]),
                index_select(self.pos_emb, rows[:, 2]),
                index_select(self.flag_emb, rows[:, 3]),
            ],
            axis=1,
        )
        reps = relu(matmul(feats, self.in_w) + self.in_b)
        n = len(entries)
        if len(rows) != n:
            avg = np.zeros((n, len(rows)))
            for r, i in enumerate(owners):
                avg[i, r] = 1.0
            avg /= avg.sum(axis=1, keepdims=True)
            reps = matmul(Tensor(avg), reps)
        if rng is not None and self.cfg.dropout > 0.0:
            reps = dropout_op(reps, self.cfg.dropout, True, rng)
        return reps

    def next_input(self, token, matching_records, map_record=None, rng=None):
        """Single-token input vector [1, d]; at generation time pass the MAP
        record instead of averaging."""
        if map_record is not None:
            matching_records = [map_record]
        return self.input_reps([(token, matching_records)], rng=rng)

    # ------------------------------------------------------------------
    # emission RNN

    def start_segment(self, src, rows=1):
        """Fresh per-segment LSTM state (h, c), identical for every state."""
        c0 = matmul(src.x_a, self.q1)
        h0 = tanh(matmul(src.x_a, self.q2))
        if rows != 1:
            idx = np.zeros(rows, dtype=int)
            h0 = index_select(h0, idx)
            c0 = index_select(c0, idx)
        return h0, c0

    def ar_init(self):
        d = self.cfg.d
        return Tensor(np.zeros((1, d))), Tensor(np.zeros((1, d)))

    def ar_step(self, rep, h, c):
        return lstm_cell(rep, h, c, self.ar_wx, self.ar_wh, self.ar_b)

    def ar_states(self, token_reps, T):
        """AR LSTM hidden states over the whole sequence: [T+1, d], row t
        holding the state after consuming t tokens."""
        h, c = self.ar_init()
        rows = [h]
        steps = split_rows(token_reps, T)
        for t in range(T):
            h, c = self.ar_step(steps[t], h, c)
            rows.append(h)
        return concat(rows, axis=0)

    def _distributions(self, h, src, k_rows, ar_h=None, rng=None):
        """Joint gen+copy log-distribution [R, V+J] from hidden states h."""
        att = matmul(matmul(h, self.attn_m), transpose(src.r_vecs))
        alpha = softmax(att, axis=1)
        ctx = matmul(alpha, src.r_vecs)
        parts = [h, ctx]
        if ar_h is not None:
            parts.append(ar_h)
        feat = concat(parts, axis=1)
        if rng is not None and self.cfg.dropout > 0.0:
            feat = dropout_op(feat, self.cfg.dropout, True, rng)
        g1 = index_select(self.g1, k_rows)
        v = matmul(tanh(g1 * feat), self.w_out)
        g2 = index_select(self.g2, k_rows)
        rho = matmul(tanh(g2 * h), transpose(src.r_vecs))
        return log_softmax(concat([v, rho], axis=1), axis=1)

    def batch_token_step(self, inp, h, c, k_rows, src, ar_h=None, rng=None):
        """Consume `inp` (or nothing when None), then emit the next-token
        distribution.  k_rows holds each row's base state."""
        if inp is not None:
            state_part = index_select(self.state_in_emb, k_rows)
            x = concat([state_part, inp], axis=1)
            h, c = lstm_cell(x, h, c, self.lstm_wx, self.lstm_wh, self.lstm_b)
        logp = self._distributions(h, src, k_rows, ar_h=ar_h, rng=rng)
        return logp, h, c

    def token_step(self, prev_token_info, h, c, k_base, src, ar_h=None):
        """Single-hypothesis step: prev_token_info is None at segment start,
        else (token, matching_records, map_record or None)."""
        inp = None
        if prev_token_info is not None:
            token, matching, map_record = prev_token_info
            inp = self.next_input(token, matching, map_record=map_record)
        k_rows = np.array([k_base])
        return self.batch_token_step(inp, h, c, k_rows, src, ar_h=ar_h)

    # ------------------------------------------------------------------
    # slot bookkeeping for observed tokens

    def token_slots(self, tokens, src, token_ids=None, copy_matches=None):
        """Joint-softmax slot ids explaining each observed token.

        Returns an int matrix [T, M] padded with -1; row t lists the
        generation slot (if the token is in vocab) and every copy slot whose
        record value equals the token.  An all-pad row means the token is
        inexplicable (log-prob -inf).
        """
        T = len(tokens)
        rows = []
        for t in range(T):
            slots = []
            if token_ids is not None and copy_matches is not None:
                gid = token_ids[t]
                matches = copy_matches[t]
            else:
                # ad-hoc scoring: a token neither in vocab nor copyable has
                # no explanation (the unk fallback is a corpus-indexing
                # decision, not a scoring one)
                vid = self.vocab.id(tokens[t])
                matches = [j for j, v in enumerate(src.values) if v == tokens[t]]
                gid = vid if vid is not None else -1
            if gid >= 0:
                slots.append(gid)
            slots.extend(self.V + j for j in matches)
            rows.append(slots)
        width = max(1, max(len(r) for r in rows))
        out = np.full((T, width), -1, dtype=int)
        for t, r in enumerate(rows):
            out[t, : len(r)] = r
        return out

    def gather_token_logprobs(self, logp, slot_rows):
        """Aggregate joint-softmax probabilities over each row's slots.

        logp is [R, V+J]; slot_rows is an int matrix [R, M] padded with -1.
        Returns a [R] tensor of log p(token) = LSE over the row's slots;
        all-pad rows come out -inf (token inexplicable).
        """
        from .autograd import gather_lse

        R, width = logp.values.shape
        pad_col = Tensor(np.full((R, 1), -np.inf))
        padded = concat([logp, pad_col], axis=1)
        idx = np.where(slot_rows < 0, width, slot_rows)
        return gather_lse(padded, idx)

    def segment_log_prob(self, tokens, k_base, src, ar_states=None, ar_offset=0):
        """Log-probability of emitting `tokens` then the end-of-segment
        marker under base state k_base.  -inf when some token can be neither
        generated nor copied.  `ar_states` ([T+1, d]) and `ar_offset` (tokens
        preceding the segment) supply autoregressive conditioning."""
        from .autograd import take_column

        if not 1 <= len(tokens) <= self.cfg.max_len:
            raise ValueError(
                f"segment length {len(tokens)} outside [1, {self.cfg.max_len}]"
            )
        slot_matrix = self.token_slots(tokens, src)
        h, c = self.start_segment(src)
        k_rows = np.array([k_base])
        total = None
        ar_rows = None
        if ar_states is not None:
            ar_rows = split_rows(ar_states, ar_states.values.shape[0])
        for i, token in enumerate(tokens):
            ar_h = ar_rows[ar_offset + i] if ar_rows is not None else None
            logp, h, c = self.batch_token_step(
                None if i == 0 else self._consume(tokens[i - 1], src),
                h,
                c,
                k_rows,
                src,
                ar_h=ar_h,
            )
            piece = self.gather_token_logprobs(logp, slot_matrix[i : i + 1])
            total = piece if total is None else total + piece
        ar_h = ar_rows[ar_offset + len(tokens)] if ar_rows is not None else None
        logp, h, c = self.batch_token_step(
            self._consume(tokens[-1], src), h, c, k_rows, src, ar_h=ar_h
        )
        eos = take_column(logp, self.vocab.eos_id)
        return reshape(total + eos, ())

    def _consume(self, token, src):
        matching = [r for r, v in zip(src.records, src.values) if v == token]
        return self.next_input(token, matching)


def split_rows(mat, n):
    """Split an [n, d] tensor into n [1, d] row tensors."""
    from .autograd import split

    return split(mat, n, axis=0)


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, train_state=None):
    """Write a versioned archive of every named tensor plus metadata.

    Metadata covers the model config and vocabulary so a checkpoint is
    self-contained; optional train_state carries optimizer/schedule info for
    exact resumption.
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "vocab": model.vocab.corpus_tokens(),
        "train_state": train_state or {},
    }
    arrays = {"t:" + n: p.values for n, p in model.named_params().items()}
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta).encode("utf-8"), dtype=np.uint8
    ).copy()
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


class CheckpointError(RuntimeError):
    pass


def load_checkpoint(path):
    """Rebuild (model, train_state) from a checkpoint file.

    Rejects unknown versions and any tensor whose stored shape disagrees
    with the reconstructed architecture.
    """
    from .data import Vocab

    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if "__meta__" not in archive:
        raise CheckpointError(f"{path}: missing metadata block")
    meta = json.loads(bytes(archive["__meta__"]).decode("utf-8"))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {meta.get('version')}"
        )
    cfg = ModelConfig(**meta["config"])
    vocab = Vocab(meta["vocab"])
    model = HsmmModel(cfg, vocab)
    for name, p in model.named_params().items():
        key = "t:" + name
        if key not in archive:
            raise CheckpointError(f"{path}: missing tensor {name}")
        stored = archive[key]
        if stored.shape != p.values.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {stored.shape}, "
                f"expected {p.values.shape}"
            )
        p.values = stored.astype(np.float64)
    return model, meta.get("train_state", {})
