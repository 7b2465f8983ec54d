"""Full model assembly: encoder + value fusion + predictor, with training.

A Model owns every trainable parameter plus the frozen preprocessing state
(sub-word vocabulary, code vocabulary, value normalizer). Training is
mini-batch Adam with best-validation-AUPRC checkpoint selection, and is
deterministic for a fixed seed.

Event texts repeat heavily inside a batch, so description encoding runs once
per unique token sequence and the per-event vectors are gathered from that
table; gradients scatter back through the gather.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import (CodeVocab, MlmConfig, TextEncoderConfig, code_embed,
                       code_key, event_dim, extend_code_vocab, fuse_value,
                       init_code_embedding, init_text_encoder, init_value_mlp,
                       encode_description, mlm_pretrain, w2v_pretrain)
from .errors import ConfigError, InputError
from .etl import CohortSample, DatasetSplits
from .metrics import auprc, micro_auprc
from .predictor import (N_DX_CLASSES, init_predictor, labels_matrix, predict,
                        task_loss)
from .tensor import RngStream, Tensor
from .textproc import (PLACE_NONE, ValueNormalizer, ValueStrategy,
                       EventDescription, render_description, tokenize,
                       train_tokenizer, Vocabulary)

ENCODER_KINDS = ("codeemb", "rnn", "transformer")
PRETRAIN_KINDS = ("none", "w2v", "mlm")


@dataclass
class ModelConfig:
    encoder: str = "rnn"
    strategy: ValueStrategy = ValueStrategy.DSVA_DPE
    pretrain: str = "none"
    task: str = "mort"
    vocab_size: int = 2048
    max_tokens: int = 48
    lr: float = 1e-4
    batch_size: int = 64
    epochs: int = 50
    patience: int = 10
    mlm_epochs: int = 15
    w2v_epochs: int = 3

    def validate(self) -> None:
        if self.encoder not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder '{self.encoder}'")
        if self.pretrain not in PRETRAIN_KINDS:
            raise ConfigError(f"unknown pretrain '{self.pretrain}'")
        if self.encoder == "codeemb" and self.strategy == ValueStrategy.DSVA_DPE:
            raise ConfigError("DSVA_DPE requires a text encoder, not codeemb")
        if self.encoder == "codeemb" and self.pretrain == "mlm":
            raise ConfigError("MLM pretraining requires a text encoder")
        if self.encoder != "codeemb" and self.pretrain == "w2v":
            raise ConfigError("w2v pretraining applies to codeemb only")


@dataclass
class PreparedEvent:
    tokens: tuple[int, ...] | None = None
    places: tuple[int, ...] | None = None
    code: str | None = None
    value: float = 0.0
    present: bool = False


@dataclass
class Model:
    cfg: ModelConfig
    params: dict[str, Tensor]
    vocab: Vocabulary | None = None
    enc_cfg: TextEncoderConfig | None = None
    code_vocab: CodeVocab | None = None
    normalizer: ValueNormalizer | None = None
    mlm_losses: list[float] = field(default_factory=list)
    _token_cache: dict[str, tuple] = field(default_factory=dict)
    _prep_cache: dict[str, list[PreparedEvent]] = field(default_factory=dict)

    # -- event preparation --

    def _tokens_for(self, event: EventDescription) -> tuple[tuple, tuple]:
        text = render_description(event, self.cfg.strategy)
        hit = self._token_cache.get(text)
        if hit is None:
            seq = tokenize(text, self.vocab, self.cfg.max_tokens,
                           with_places=self.cfg.strategy == ValueStrategy.DSVA_DPE)
            hit = (tuple(seq.ids), tuple(seq.places))
            self._token_cache[text] = hit
        return hit

    def prepare(self, record: CohortSample) -> list[PreparedEvent]:
        got = self._prep_cache.get(record.stay_id)
        if got is not None:
            return got
        out = []
        for e in record.events:
            ed = EventDescription(e.description, e.value, e.unit)
            pe = PreparedEvent()
            if self.cfg.encoder == "codeemb":
                pe.code = code_key(e.code, e.value, self.cfg.strategy)
            else:
                pe.tokens, pe.places = self._tokens_for(ed)
            if self.cfg.strategy == ValueStrategy.VC:
                pe.value, pe.present = self.normalizer.transform(e.code, e.value)
            out.append(pe)
        self._prep_cache[record.stay_id] = out
        return out

    def invalidate_caches(self) -> None:
        self._prep_cache.clear()


def build_model(cfg: ModelConfig, train_records: list[CohortSample],
                rng: RngStream) -> Model:
    cfg.validate()
    if not train_records:
        raise InputError("cannot build a model from an empty training split")
    model = Model(cfg=cfg, params={})

    if cfg.strategy == ValueStrategy.VC:
        pairs = [(e.code, float(e.value)) for r in train_records
                 for e in r.events if e.value is not None]
        model.normalizer = ValueNormalizer().fit(pairs)
        model.params.update(init_value_mlp(rng.child("vmlp")))

    if cfg.encoder == "codeemb":
        model.code_vocab = CodeVocab.from_records(train_records, cfg.strategy)
        model.params.update(init_code_embedding(model.code_vocab,
                                                rng.child("codeemb")))
        if cfg.pretrain == "w2v":
            seqs = [[code_key(e.code, e.value, cfg.strategy)
                     for e in sorted(r.events, key=lambda e: e.offset)]
                    for r in train_records]
            mat, w2v_vocab = w2v_pretrain(seqs, rng.child("w2v"),
                                          epochs=cfg.w2v_epochs)
            emb = model.params["code_emb"].data
            for key, row in w2v_vocab.items():
                emb[model.code_vocab.key_to_id[key]] = mat[row]
    else:
        corpus = sorted({
            render_description(EventDescription(e.description, None, e.unit),
                               ValueStrategy.VC)
            for r in train_records for e in r.events})
        model.vocab = train_tokenizer(corpus, cfg.vocab_size)
        model.enc_cfg = TextEncoderConfig(vocab_size=len(model.vocab),
                                          kind=cfg.encoder,
                                          max_len=cfg.max_tokens)
        model.params.update(init_text_encoder(model.enc_cfg, rng.child("enc")))
        if cfg.pretrain == "mlm":
            texts = sorted({
                render_description(EventDescription(e.description, e.value, e.unit),
                                   cfg.strategy)
                for r in train_records for e in r.events})
            rows = [list(tokenize(t, model.vocab, cfg.max_tokens).ids)
                    for t in texts]
            model.mlm_losses = mlm_pretrain(
                model.params, model.enc_cfg, rows, model.vocab,
                MlmConfig(epochs=cfg.mlm_epochs), rng.child("mlm"))

    model.params.update(init_predictor(event_dim(cfg.strategy), cfg.task,
                                       rng.child("pred")))
    return model


# ---------------------------------------------------------------------------
# batched forward pass
# ---------------------------------------------------------------------------

def forward_batch(model: Model, records: list[CohortSample], train: bool = False,
                  gen=None, return_hidden: bool = False):
    cfg = model.cfg
    prepped = [model.prepare(r) for r in records]
    b = len(records)
    t_max = max(len(p) for p in prepped)
    mask = np.zeros((b, t_max))
    for i, p in enumerate(prepped):
        mask[i, :len(p)] = 1.0

    if cfg.encoder == "codeemb":
        ids = np.zeros((b, t_max), dtype=np.int64)
        for i, p in enumerate(prepped):
            for j, pe in enumerate(p):
                ids[i, j] = model.code_vocab.lookup(pe.code)
        vecs = code_embed(ids, model.params)
    else:
        uniq: dict[tuple, int] = {}
        uniq_places: list[tuple] = []
        index = np.zeros((b, t_max), dtype=np.int64)
        for i, p in enumerate(prepped):
            for j, pe in enumerate(p):
                row = uniq.get(pe.tokens)
                if row is None:
                    row = uniq[pe.tokens] = len(uniq)
                    uniq_places.append(pe.places)
                index[i, j] = row
        seqs = list(uniq.keys())
        l_max = max(len(s) for s in seqs)
        tok = np.full((len(seqs), l_max), model.vocab.pad_id, dtype=np.int64)
        plc = np.full((len(seqs), l_max), PLACE_NONE, dtype=np.int64)
        pad = np.zeros((len(seqs), l_max))
        for row, (s, pl) in enumerate(zip(seqs, uniq_places)):
            tok[row, :len(s)] = s
            pad[row, :len(s)] = 1.0
            plc[row, :len(s)] = pl
        z = encode_description(model.params, model.enc_cfg, tok, plc, pad,
                               train=train, gen=gen)
        # pad events gather row len(uniq), a zero vector
        table = T.concat([z, Tensor(np.zeros((1, z.shape[1])))], axis=0)
        index[mask == 0] = len(uniq)
        vecs = T.embedding_lookup(table, index)

    if cfg.strategy == ValueStrategy.VC:
        values = np.zeros((b, t_max))
        present = np.zeros((b, t_max))
        for i, p in enumerate(prepped):
            for j, pe in enumerate(p):
                values[i, j] = pe.value
                present[i, j] = float(pe.present)
        vecs = fuse_value(vecs, values, present, cfg.strategy,
                          {k: v for k, v in model.params.items()
                           if k.startswith("vmlp.")})

    return predict(vecs, mask, model.params, train=train, gen=gen,
                   return_hidden=return_hidden)


def score_records(model: Model, records: list[CohortSample],
                  batch_size: int | None = None) -> np.ndarray:
    bs = batch_size or model.cfg.batch_size
    chunks = []
    for lo in range(0, len(records), bs):
        probs = forward_batch(model, records[lo:lo + bs], train=False)
        chunks.append(probs.data)
    return np.concatenate(chunks, axis=0)


def evaluate_metric(model: Model, records: list[CohortSample],
                    tie_seed: int = 0) -> float:
    scores = score_records(model, records)
    labels = labels_matrix(records, model.cfg.task)
    if model.cfg.task == "dx":
        return micro_auprc(scores, labels, tie_seed=tie_seed)
    return auprc(scores[:, 0], labels[:, 0], tie_seed=tie_seed)


def extract_representation(model: Model, record: CohortSample) -> np.ndarray:
    """256-d final predictor hidden state, dropout disabled."""
    _, h = forward_batch(model, [record], train=False, return_hidden=True)
    return h.data[0].copy()


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainHistory:
    train_losses: list[float] = field(default_factory=list)
    val_metrics: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("-inf")


def train_model(model: Model, splits: DatasetSplits, rng: RngStream,
                epochs: int | None = None) -> TrainHistory:
    """Mini-batch Adam with best-validation-AUPRC checkpoint selection."""
    cfg = model.cfg
    train_recs = splits.records("train", "train")
    valid_recs = splits.records("valid", "select")
    if not train_recs or not valid_recs:
        raise InputError("train/valid splits must be non-empty")
    epochs = epochs if epochs is not None else cfg.epochs
    gen = rng.child("train").generator()
    state = T.AdamState(lr=cfg.lr)
    hist = TrainHistory()
    best_snapshot = T.snapshot(model.params)
    stale = 0
    n = len(train_recs)
    for epoch in range(epochs):
        order = gen.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            batch = [train_recs[i] for i in order[lo:lo + cfg.batch_size]]
            T.zero_grads(model.params)
            probs = forward_batch(model, batch, train=True, gen=gen)
            loss = task_loss(probs, labels_matrix(batch, cfg.task))
            T.backward(loss)
            T.adam_step(model.params, T.collect_grads(model.params), state)
            losses.append(loss.item())
        hist.train_losses.append(float(np.mean(losses)))
        val = evaluate_metric(model, valid_recs)
        hist.val_metrics.append(val)
        if val > hist.best_val:
            hist.best_val = val
            hist.best_epoch = epoch
            best_snapshot = T.snapshot(model.params)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for k, arr in best_snapshot.items():
        model.params[k].data = arr
    return hist


# ---------------------------------------------------------------------------
# transfer adaptation
# ---------------------------------------------------------------------------

@dataclass
class TransferStats:
    n_codes: int
    n_fresh: int

    @property
    def fresh_fraction(self) -> float:
        return self.n_fresh / self.n_codes if self.n_codes else 0.0


def adapt_to_target(model: Model, target_records: list[CohortSample],
                    rng: RngStream) -> TransferStats:
    """Prepare a source-trained model for a new hospital.

    Description encoders carry over with no new parameters. The code-lookup
    model must freshly initialize a row for every unseen code key.
    """
    model.invalidate_caches()
    if model.cfg.encoder != "codeemb":
        keys = {e.code for r in target_records for e in r.events}
        return TransferStats(n_codes=len(keys), n_fresh=0)
    keys = sorted({code_key(e.code, e.value, model.cfg.strategy)
                   for r in target_records for e in r.events})
    model.code_vocab, n_fresh = extend_code_vocab(
        model.params, model.code_vocab, keys, rng.child("transfer-init"))
    return TransferStats(n_codes=len(keys), n_fresh=n_fresh)
