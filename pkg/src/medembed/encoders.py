"""Event-vector encoders.

Two families produce one 128-d vector per clinical event:

* code lookup ("codeemb"): one learned row per code (or per code+value
  composite under VA/DSVA), optionally Word2Vec-pretrained;
* description encoders ("rnn" / "transformer"): a shared sub-word text
  encoder over the event description, optionally MLM-pretrained.

Value fusion under VC concatenates a small value-MLP output (64-d) to the
event vector, giving 192-d inputs to the predictor.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, InputError, VocabularyError
from .tensor import RngStream, Tensor
from .textproc import (N_PLACES, PLACE_MIN, PLACE_NONE, ValueStrategy,
                       Vocabulary)

EMB_DIM = 128
RNN_HIDDEN = 128
TF_LAYERS = 2
TF_HEADS = 2
TF_FF = 512
VC_HIDDEN = 64
FUSED_DIM = EMB_DIM + VC_HIDDEN

INIT_SCALE = 0.02


def event_dim(strategy: ValueStrategy) -> int:
    return FUSED_DIM if strategy == ValueStrategy.VC else EMB_DIM


# ---------------------------------------------------------------------------
# code-lookup embedding
# ---------------------------------------------------------------------------

def code_key(code: str, value: str | None, strategy: ValueStrategy) -> str:
    """Lookup key: composite with the value under VA/DSVA, bare code under VC.

    Composite keys reproduce the vocabulary blow-up that code-lookup models
    suffer when values are folded into the code space.
    """
    if strategy in (ValueStrategy.VA, ValueStrategy.DSVA) and value is not None:
        return f"{code}={value}"
    return code


class CodeVocab:
    def __init__(self, keys: list[str]):
        self.key_to_id = {k: i for i, k in enumerate(sorted(set(keys)))}

    def __len__(self):
        return len(self.key_to_id)

    @classmethod
    def from_records(cls, records, strategy: ValueStrategy) -> "CodeVocab":
        keys = [code_key(e.code, e.value, strategy)
                for r in records for e in r.events]
        return cls(keys)

    def lookup(self, key: str) -> int:
        try:
            return self.key_to_id[key]
        except KeyError:
            raise VocabularyError(f"unknown code key {key!r}")


def init_code_embedding(vocab: CodeVocab, rng: RngStream,
                        dim: int = EMB_DIM) -> dict[str, Tensor]:
    return {"code_emb": Tensor(rng.normal(INIT_SCALE, (len(vocab), dim)),
                               requires_grad=True)}


def extend_code_vocab(params: dict[str, Tensor], vocab: CodeVocab,
                      new_keys: list[str], rng: RngStream) -> tuple[CodeVocab, int]:
    """Grow the vocabulary for transfer: unseen keys get fresh random rows.

    Returns the extended vocab and the number of freshly initialized rows.
    """
    fresh = sorted(set(k for k in new_keys if k not in vocab.key_to_id))
    merged = CodeVocab(list(vocab.key_to_id) + fresh)
    dim = params["code_emb"].shape[1]
    new_rows = rng.normal(INIT_SCALE, (len(merged), dim))
    for k, old_id in vocab.key_to_id.items():
        new_rows[merged.key_to_id[k]] = params["code_emb"].data[old_id]
    params["code_emb"] = Tensor(new_rows, requires_grad=True)
    return merged, len(fresh)


def code_embed(ids: np.ndarray, params: dict[str, Tensor]) -> Tensor:
    return T.embedding_lookup(params["code_emb"], ids)


# ---------------------------------------------------------------------------
# Word2Vec (skip-gram, negative sampling) pretraining of the code table
# ---------------------------------------------------------------------------

def w2v_pretrain(sequences: list[list[str]], rng: RngStream, dim: int = EMB_DIM,
                 window: int = 5, negatives: int = 5, epochs: int = 5,
                 lr: float = 0.025) -> tuple[np.ndarray, dict[str, int]]:
    """Skip-gram with negative sampling over code sequences (plain numpy SGD)."""
    counts = Counter(c for seq in sequences for c in seq)
    if len(counts) < 2:
        raise InputError("word2vec needs at least 2 distinct codes")
    vocab = {c: i for i, c in enumerate(sorted(counts))}
    n = len(vocab)
    gen = rng.generator()
    w_in = gen.normal(0.0, 0.5 / math.sqrt(dim), size=(n, dim))
    w_out = np.zeros((n, dim))

    freqs = np.array([counts[c] for c in sorted(counts)], dtype=np.float64)
    noise = freqs ** 0.75
    noise /= noise.sum()

    id_seqs = [[vocab[c] for c in seq] for seq in sequences]
    for _ in range(epochs):
        for seq in id_seqs:
            for pos, center in enumerate(seq):
                span = int(gen.integers(1, window + 1))
                lo, hi = max(0, pos - span), min(len(seq), pos + span + 1)
                for ctx_pos in range(lo, hi):
                    if ctx_pos == pos:
                        continue
                    ctx = seq[ctx_pos]
                    targets = np.concatenate([
                        [ctx], gen.choice(n, size=negatives, p=noise)])
                    labels = np.zeros(len(targets))
                    labels[0] = 1.0
                    v = w_in[center]
                    u = w_out[targets]
                    scores = 1.0 / (1.0 + np.exp(-(u @ v)))
                    g = (scores - labels) * lr
                    w_in[center] -= g @ u
                    w_out[targets] -= np.outer(g, v)
    return w_in, vocab


# ---------------------------------------------------------------------------
# GRU building block (shared by the text encoder and the predictor)
# ---------------------------------------------------------------------------

def init_gru(name: str, in_dim: int, hidden: int, rng: RngStream) -> dict[str, Tensor]:
    return {
        f"{name}.wx": Tensor(rng.normal(INIT_SCALE, (in_dim, 3 * hidden)),
                             requires_grad=True),
        f"{name}.wh": Tensor(rng.normal(INIT_SCALE, (hidden, 3 * hidden)),
                             requires_grad=True),
        f"{name}.b": Tensor(np.zeros(3 * hidden), requires_grad=True),
    }


def gru_sequence(x: Tensor, mask: np.ndarray, params: dict[str, Tensor],
                 name: str, hidden: int, reverse: bool = False,
                 return_states: bool = False):
    """Run a GRU over [B, T, D]; masked steps leave the hidden state unchanged.

    Returns the final hidden state [B, hidden]; with return_states also the
    per-step states as a [B, T, hidden] Tensor.
    """
    b, t, d = x.shape
    wx, wh, bias = params[f"{name}.wx"], params[f"{name}.wh"], params[f"{name}.b"]
    xp = T.add(T.matmul(T.reshape(x, (b * t, d)), wx), bias)
    xp = T.reshape(xp, (b, t, 3 * hidden))
    h = Tensor(np.zeros((b, hidden)))
    states = []
    steps = range(t - 1, -1, -1) if reverse else range(t)
    for step in steps:
        xs = T.tslice(xp, (slice(None), step, slice(None)))
        hp = T.matmul(h, wh)
        r = T.sigmoid(T.add(T.tslice(xs, (slice(None), slice(0, hidden))),
                            T.tslice(hp, (slice(None), slice(0, hidden)))))
        z = T.sigmoid(T.add(T.tslice(xs, (slice(None), slice(hidden, 2 * hidden))),
                            T.tslice(hp, (slice(None), slice(hidden, 2 * hidden)))))
        n = T.tanh(T.add(T.tslice(xs, (slice(None), slice(2 * hidden, 3 * hidden))),
                         T.mul(r, T.tslice(hp, (slice(None), slice(2 * hidden, 3 * hidden))))))
        h_new = T.add(n, T.mul(z, T.sub(h, n)))
        m = Tensor(mask[:, step][:, None])
        h = T.add(h, T.mul(m, T.sub(h_new, h)))
        states.append(h)
    if not return_states:
        return h
    if reverse:
        states = states[::-1]
    stacked = T.concat([T.reshape(s, (b, 1, hidden)) for s in states], axis=1)
    return h, stacked


# ---------------------------------------------------------------------------
# description encoders
# ---------------------------------------------------------------------------

@dataclass
class TextEncoderConfig:
    vocab_size: int
    kind: str = "rnn"              # "rnn" | "transformer"
    dim: int = EMB_DIM
    max_len: int = 48
    dropout: float = 0.1


def init_text_encoder(cfg: TextEncoderConfig, rng: RngStream) -> dict[str, Tensor]:
    p = {
        "tok_emb": Tensor(rng.normal(INIT_SCALE, (cfg.vocab_size, cfg.dim)),
                          requires_grad=True),
        "dpe": Tensor(rng.normal(INIT_SCALE, (N_PLACES, cfg.dim)),
                      requires_grad=True),
    }
    if cfg.kind == "rnn":
        p.update(init_gru("enc.fwd", cfg.dim, RNN_HIDDEN, rng))
        p.update(init_gru("enc.bwd", cfg.dim, RNN_HIDDEN, rng))
        p["enc.proj_w"] = Tensor(rng.normal(INIT_SCALE, (2 * RNN_HIDDEN, cfg.dim)),
                                 requires_grad=True)
        p["enc.proj_b"] = Tensor(np.zeros(cfg.dim), requires_grad=True)
    elif cfg.kind == "transformer":
        p["pos_emb"] = Tensor(rng.normal(INIT_SCALE, (cfg.max_len, cfg.dim)),
                              requires_grad=True)
        for layer in range(TF_LAYERS):
            pre = f"enc.l{layer}"
            for nm in ("q", "k", "v", "o"):
                p[f"{pre}.{nm}_w"] = Tensor(
                    rng.normal(INIT_SCALE, (cfg.dim, cfg.dim)), requires_grad=True)
                p[f"{pre}.{nm}_b"] = Tensor(np.zeros(cfg.dim), requires_grad=True)
            p[f"{pre}.ff1_w"] = Tensor(rng.normal(INIT_SCALE, (cfg.dim, TF_FF)),
                                       requires_grad=True)
            p[f"{pre}.ff1_b"] = Tensor(np.zeros(TF_FF), requires_grad=True)
            p[f"{pre}.ff2_w"] = Tensor(rng.normal(INIT_SCALE, (TF_FF, cfg.dim)),
                                       requires_grad=True)
            p[f"{pre}.ff2_b"] = Tensor(np.zeros(cfg.dim), requires_grad=True)
            for ln in ("ln1", "ln2"):
                p[f"{pre}.{ln}_g"] = Tensor(np.ones(cfg.dim), requires_grad=True)
                p[f"{pre}.{ln}_b"] = Tensor(np.zeros(cfg.dim), requires_grad=True)
        p["enc.lnf_g"] = Tensor(np.ones(cfg.dim), requires_grad=True)
        p["enc.lnf_b"] = Tensor(np.zeros(cfg.dim), requires_grad=True)
    else:
        raise ConfigError(f"unknown text encoder kind '{cfg.kind}'")
    return p


def _embed_tokens(params: dict[str, Tensor], ids: np.ndarray,
                  places: np.ndarray) -> Tensor:
    """Token embeddings with the digit-place embedding added at digit positions."""
    has_place = places != PLACE_NONE
    if (has_place & ((places < PLACE_MIN) | (places > PLACE_MIN + N_PLACES - 1))).any():
        raise ContractError("place index outside clamp range")
    x = T.embedding_lookup(params["tok_emb"], ids)
    if has_place.any():
        idx = np.where(has_place, places - PLACE_MIN, 0)
        dpe = T.embedding_lookup(params["dpe"], idx)
        x = T.add(x, T.mul(dpe, Tensor(has_place[..., None].astype(np.float64))))
    return x


def _transformer_layer(x: Tensor, params, pre: str, pad_mask: np.ndarray,
                       cfg: TextEncoderConfig, train: bool, gen) -> Tensor:
    b, t, d = x.shape
    hd = d // TF_HEADS

    def heads(m):
        return T.transpose(T.reshape(m, (b, t, TF_HEADS, hd)), (0, 2, 1, 3))

    # pre-activation layer norm
    xn = T.layer_norm(x, params[f"{pre}.ln1_g"], params[f"{pre}.ln1_b"])
    q = heads(T.add(T.matmul(xn, params[f"{pre}.q_w"]), params[f"{pre}.q_b"]))
    k = heads(T.add(T.matmul(xn, params[f"{pre}.k_w"]), params[f"{pre}.k_b"]))
    v = heads(T.add(T.matmul(xn, params[f"{pre}.v_w"]), params[f"{pre}.v_b"]))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))),
                   Tensor(1.0 / math.sqrt(hd)))
    neg = np.where(pad_mask[:, None, None, :] > 0, 0.0, -1e9)
    att = T.softmax(T.add(scores, Tensor(neg)), axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
    ctx = T.add(T.matmul(ctx, params[f"{pre}.o_w"]), params[f"{pre}.o_b"])
    ctx = T.dropout(ctx, cfg.dropout, train, gen)
    x = T.add(x, ctx)

    xn = T.layer_norm(x, params[f"{pre}.ln2_g"], params[f"{pre}.ln2_b"])
    ff = T.relu(T.add(T.matmul(xn, params[f"{pre}.ff1_w"]), params[f"{pre}.ff1_b"]))
    ff = T.add(T.matmul(ff, params[f"{pre}.ff2_w"]), params[f"{pre}.ff2_b"])
    ff = T.dropout(ff, cfg.dropout, train, gen)
    return T.add(x, ff)


def encode_description(params: dict[str, Tensor], cfg: TextEncoderConfig,
                       ids: np.ndarray, places: np.ndarray,
                       pad_mask: np.ndarray, train: bool = False,
                       gen=None, return_sequence: bool = False):
    """Encode [N, L] token batches into [N, 128] event vectors.

    With return_sequence, per-position vectors [N, L, 128] are returned
    instead (used by MLM pretraining).
    """
    if ids.ndim != 2 or ids.shape[1] < 1:
        raise InputError("token batch must be [N, L] with L >= 1")
    x = _embed_tokens(params, ids, places)
    n, t, d = x.shape
    if cfg.kind == "transformer":
        pos = T.tslice(params["pos_emb"], (slice(0, t),))
        x = T.add(x, T.reshape(pos, (1, t, d)))
        x = T.dropout(x, cfg.dropout, train, gen)
        for layer in range(TF_LAYERS):
            x = _transformer_layer(x, params, f"enc.l{layer}", pad_mask, cfg,
                                   train, gen)
        x = T.layer_norm(x, params["enc.lnf_g"], params["enc.lnf_b"])
        if return_sequence:
            return x
        return T.tslice(x, (slice(None), 0, slice(None)))  # [CLS] position

    # bidirectional GRU
    if return_sequence:
        _, fwd = gru_sequence(x, pad_mask, params, "enc.fwd", RNN_HIDDEN,
                              return_states=True)
        _, bwd = gru_sequence(x, pad_mask, params, "enc.bwd", RNN_HIDDEN,
                              reverse=True, return_states=True)
        both = T.concat([fwd, bwd], axis=2)
        flat = T.reshape(both, (n * t, 2 * RNN_HIDDEN))
        proj = T.add(T.matmul(flat, params["enc.proj_w"]), params["enc.proj_b"])
        return T.reshape(proj, (n, t, d))
    hf = gru_sequence(x, pad_mask, params, "enc.fwd", RNN_HIDDEN)
    hb = gru_sequence(x, pad_mask, params, "enc.bwd", RNN_HIDDEN, reverse=True)
    h = T.concat([hf, hb], axis=1)
    return T.add(T.matmul(h, params["enc.proj_w"]), params["enc.proj_b"])


# ---------------------------------------------------------------------------
# masked language model pretraining
# ---------------------------------------------------------------------------

@dataclass
class MlmConfig:
    mask_fraction: float = 0.15
    frac_mask: float = 0.8
    frac_random: float = 0.1
    frac_keep: float = 0.1
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3

    def __post_init__(self):
        if not 0.0 < self.mask_fraction < 1.0:
            raise ConfigError("mask_fraction must lie in (0, 1)")
        if abs(self.frac_mask + self.frac_random + self.frac_keep - 1.0) > 1e-9:
            raise ConfigError("mask/random/keep fractions must sum to 1")


def mlm_pretrain(params: dict[str, Tensor], cfg: TextEncoderConfig,
                 token_rows: list[list[int]], vocab: Vocabulary,
                 mlm: MlmConfig, rng: RngStream) -> list[float]:
    """Masked-token pretraining in place; returns the per-batch loss curve.

    The whole-vocabulary softmax head is local to this function, so encoder
    parameter shapes are untouched and fine-tuning loads them verbatim.
    """
    gen = rng.generator()
    head_w = Tensor(gen.normal(0.0, INIT_SCALE, size=(cfg.dim, cfg.vocab_size)),
                    requires_grad=True)
    head_b = Tensor(np.zeros(cfg.vocab_size), requires_grad=True)
    trainable = dict(params)
    trainable["mlm.head_w"] = head_w
    trainable["mlm.head_b"] = head_b
    state = T.AdamState(lr=mlm.lr)

    max_len = max(len(r) for r in token_rows)
    ids = np.full((len(token_rows), max_len), vocab.pad_id, dtype=np.int64)
    pad_mask = np.zeros((len(token_rows), max_len))
    for i, row in enumerate(token_rows):
        ids[i, :len(row)] = row
        pad_mask[i, :len(row)] = 1.0
    places = np.full_like(ids, PLACE_NONE)

    losses: list[float] = []
    n = len(token_rows)
    for _ in range(mlm.epochs):
        order = gen.permutation(n)
        for lo in range(0, n, mlm.batch_size):
            sel = order[lo:lo + mlm.batch_size]
            batch = ids[sel].copy()
            mask = pad_mask[sel]
            # choose maskable positions (real tokens, excluding [CLS])
            maskable = (mask > 0) & (batch != vocab.cls_id)
            choose = (gen.random(batch.shape) < mlm.mask_fraction) & maskable
            if not choose.any():
                continue
            targets = ids[sel].copy()
            r = gen.random(batch.shape)
            batch[choose & (r < mlm.frac_mask)] = vocab.mask_id
            randomize = choose & (r >= mlm.frac_mask) \
                & (r < mlm.frac_mask + mlm.frac_random)
            batch[randomize] = gen.integers(0, cfg.vocab_size,
                                            size=int(randomize.sum()))

            T.zero_grads(trainable)
            seq = encode_description(params, cfg, batch, places[sel], mask,
                                     train=True, gen=gen, return_sequence=True)
            flat = T.reshape(seq, (-1, cfg.dim))
            logits = T.add(T.matmul(flat, head_w), head_b)
            loss = T.cross_entropy(logits, targets.reshape(-1),
                                   choose.reshape(-1).astype(np.float64))
            T.backward(loss)
            T.adam_step(trainable, T.collect_grads(trainable), state)
            losses.append(loss.item())
    return losses


# ---------------------------------------------------------------------------
# value fusion
# ---------------------------------------------------------------------------

def init_value_mlp(rng: RngStream) -> dict[str, Tensor]:
    return {
        "vmlp.w1": Tensor(rng.normal(0.3, (2, VC_HIDDEN)), requires_grad=True),
        "vmlp.b1": Tensor(np.zeros(VC_HIDDEN), requires_grad=True),
        "vmlp.w2": Tensor(rng.normal(0.1, (VC_HIDDEN, VC_HIDDEN)),
                          requires_grad=True),
        "vmlp.b2": Tensor(np.zeros(VC_HIDDEN), requires_grad=True),
    }


def fuse_value(event_vec: Tensor, values: np.ndarray, present: np.ndarray,
               strategy: ValueStrategy,
               mlp: dict[str, Tensor] | None = None) -> Tensor:
    """VC: concat(event vector, value MLP) -> 192-d; other strategies: identity."""
    if strategy != ValueStrategy.VC:
        return event_vec
    if mlp is None:
        raise ConfigError("VC strategy requires value-MLP parameters")
    feats = Tensor(np.stack([values, present.astype(np.float64)], axis=-1))
    h = T.relu(T.add(T.matmul(feats, mlp["vmlp.w1"]), mlp["vmlp.b1"]))
    h = T.relu(T.add(T.matmul(h, mlp["vmlp.w2"]), mlp["vmlp.b2"]))
    return T.concat([event_vec, h], axis=-1)
