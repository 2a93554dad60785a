"""Base predictor: encode each (step, entity) pair and emit a 4-way
state-change distribution.

Per token the input is its word vector plus two indicator reals (is this
token a mention of the conditioned entity / is it a verb).  A bidirectional
LSTM produces contextual vectors; a bilinear attention conditioned on the
mean entity-mention vector and mean verb vector pools them; a single affine
layer plus softmax yields the cell distribution.  Every grid cell is
predicted independently.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import (N_CHANGES, ChangeGrid, EmbeddingTable, ProcessExample,
                     TopicGroup)

UNK_TOKEN = "<unk>"

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or internally inconsistent."""


@dataclass
class LstmWeights:
    """Packed single-direction LSTM weights; gate order is [input, forget, cell, output]."""

    wx: Tensor  # [input_dim, 4*hidden]
    wh: Tensor  # [hidden, 4*hidden]
    b: Tensor   # [4*hidden]


@dataclass
class StepEntityEncoding:
    pooled: Tensor     # attention-weighted sum of contextual vectors, [hidden_size]
    attention: Tensor  # per-token weights, sums to 1


@dataclass
class ModelParams:
    vocab: dict[str, int]
    embedding: Tensor  # [V, embedding_dim]
    embedding_frozen: bool
    fwd: LstmWeights
    bwd: LstmWeights
    attn_w: Tensor  # [hidden_size, 2*hidden_size]
    attn_b: Tensor  # scalar
    dec_w: Tensor   # [hidden_size, 4]
    dec_b: Tensor   # [4]
    hidden_size: int
    embedding_dim: int

    def named_tensors(self) -> dict[str, Tensor]:
        return {
            "embedding": self.embedding,
            "fwd_wx": self.fwd.wx, "fwd_wh": self.fwd.wh, "fwd_b": self.fwd.b,
            "bwd_wx": self.bwd.wx, "bwd_wh": self.bwd.wh, "bwd_b": self.bwd.b,
            "attn_w": self.attn_w, "attn_b": self.attn_b,
            "dec_w": self.dec_w, "dec_b": self.dec_b,
        }

    def trainable(self) -> list[Tensor]:
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def copy(self) -> "ModelParams":
        def dup(t: Tensor) -> Tensor:
            return Tensor(t.values.copy(), requires_grad=t.requires_grad)

        return ModelParams(
            vocab=dict(self.vocab),
            embedding=dup(self.embedding),
            embedding_frozen=self.embedding_frozen,
            fwd=LstmWeights(dup(self.fwd.wx), dup(self.fwd.wh), dup(self.fwd.b)),
            bwd=LstmWeights(dup(self.bwd.wx), dup(self.bwd.wh), dup(self.bwd.b)),
            attn_w=dup(self.attn_w), attn_b=dup(self.attn_b),
            dec_w=dup(self.dec_w), dec_b=dup(self.dec_b),
            hidden_size=self.hidden_size, embedding_dim=self.embedding_dim,
        )


def build_vocab(groups: Iterable[TopicGroup]) -> dict[str, int]:
    """Sorted training vocabulary with the unknown token at index 0."""
    tokens: set[str] = set()
    for g in groups:
        for ex in g.members:
            for sent in ex.steps:
                tokens.update(sent)
    vocab = {UNK_TOKEN: 0}
    for tok in sorted(tokens):
        if tok != UNK_TOKEN:
            vocab[tok] = len(vocab)
    return vocab


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    r = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-r, r, size=shape), requires_grad=True)


def init_params(vocab: dict[str, int], embedding_dim: int, hidden_size: int,
                seed: int, embeddings: EmbeddingTable | None = None) -> ModelParams:
    """Seeded parameter init: weights uniform in [-1/sqrt(fan_in), +], biases zero.

    With an embedding table the word vectors are copied from it and frozen;
    otherwise they are randomly initialized and trained.
    """
    if hidden_size % 2 != 0:
        raise ValueError("hidden_size must be even (half per direction)")
    rng = np.random.default_rng(seed)
    if embeddings is not None:
        if embeddings.dimension != embedding_dim:
            raise ValueError(
                f"embedding file dimension {embeddings.dimension} != configured {embedding_dim}")
        mat = np.stack([embeddings.lookup(tok) if tok != UNK_TOKEN else embeddings.unk_vector
                        for tok in vocab])
        emb = Tensor(mat, requires_grad=False)
        frozen = True
    else:
        emb = _uniform(rng, (len(vocab), embedding_dim), embedding_dim)
        frozen = False

    hd = hidden_size // 2
    in_dim = embedding_dim + 2

    def lstm() -> LstmWeights:
        return LstmWeights(
            wx=_uniform(rng, (in_dim, 4 * hd), in_dim),
            wh=_uniform(rng, (hd, 4 * hd), hd),
            b=Tensor(np.zeros(4 * hd), requires_grad=True),
        )

    return ModelParams(
        vocab=vocab,
        embedding=emb,
        embedding_frozen=frozen,
        fwd=lstm(),
        bwd=lstm(),
        attn_w=_uniform(rng, (hidden_size, 2 * hidden_size), 2 * hidden_size),
        attn_b=Tensor(np.zeros(()), requires_grad=True),
        dec_w=_uniform(rng, (hidden_size, N_CHANGES), hidden_size),
        dec_b=Tensor(np.zeros(N_CHANGES), requires_grad=True),
        hidden_size=hidden_size,
        embedding_dim=embedding_dim,
    )


# ---------------------------------------------------------------------------
# forward pass

def _lstm_run(w: LstmWeights, xs: Sequence[Tensor], hidden: int) -> list[Tensor]:
    h = ad.zeros(hidden)
    c = ad.zeros(hidden)
    outs = []
    for x in xs:
        gates = ad.add(ad.add(ad.matvec_t(w.wx, x), ad.matvec_t(w.wh, h)), w.b)
        i = ad.sigmoid(ad.narrow(gates, 0, hidden))
        f = ad.sigmoid(ad.narrow(gates, hidden, hidden))
        g = ad.tanh(ad.narrow(gates, 2 * hidden, hidden))
        o = ad.sigmoid(ad.narrow(gates, 3 * hidden, hidden))
        c = ad.add(ad.mul(f, c), ad.mul(i, g))
        h = ad.mul(o, ad.tanh(c))
        outs.append(h)
    return outs


def _mean_of(vectors: list[Tensor], size: int) -> Tensor:
    # mean over an empty selection is the zero vector by convention
    if not vectors:
        return ad.zeros(size)
    acc = vectors[0]
    for v in vectors[1:]:
        acc = ad.add(acc, v)
    return ad.scale(acc, 1.0 / len(vectors)) if len(vectors) > 1 else acc


def encode(params: ModelParams, example: ProcessExample, step: int, entity: int) -> StepEntityEncoding:
    """Contextual encoding of one sentence conditioned on one entity."""
    if not (0 <= step < example.n_steps and 0 <= entity < example.n_entities):
        raise IndexError(f"step {step} / entity {entity} out of range for {example.id}")
    tokens = example.steps[step]
    mention = set(example.entities[entity].mention_tokens(step))
    verbs = set(example.verb_tokens(step))
    unk = params.vocab[UNK_TOKEN]
    hd = params.hidden_size // 2

    xs = []
    for i, tok in enumerate(tokens):
        word = ad.row(params.embedding, params.vocab.get(tok, unk))
        flags = ad.constant([1.0 if i in mention else 0.0, 1.0 if i in verbs else 0.0])
        xs.append(ad.concat(word, flags))

    h_fwd = _lstm_run(params.fwd, xs, hd)
    h_bwd = list(reversed(_lstm_run(params.bwd, list(reversed(xs)), hd)))
    ctx = [ad.concat(a, b) for a, b in zip(h_fwd, h_bwd)]
    ctx_mat = ad.reshape(ad.concat(*ctx), (len(tokens), params.hidden_size))

    entity_mean = _mean_of([ctx[i] for i in sorted(mention)], params.hidden_size)
    verb_mean = _mean_of([ctx[i] for i in sorted(verbs)], params.hidden_size)
    focus = ad.concat(entity_mean, verb_mean)

    scores = ad.add(ad.matvec(ctx_mat, ad.matvec(params.attn_w, focus)), params.attn_b)
    attention = ad.softmax(scores)
    pooled = ad.matvec_t(ctx_mat, attention)
    return StepEntityEncoding(pooled=pooled, attention=attention)


def decode(params: ModelParams, enc: StepEntityEncoding) -> Tensor:
    """Distribution over the four state changes for one encoded cell."""
    logits = ad.add(ad.matvec_t(params.dec_w, enc.pooled), params.dec_b)
    return ad.softmax(logits)


def grid_distributions(params: ModelParams, example: ProcessExample,
                       entities: Sequence[int] | None = None) -> dict[int, list[Tensor]]:
    """Per-entity columns of cell distribution tensors, keyed by entity index.

    `entities` restricts which columns are computed (the consistency loss only
    needs the shared ones); None means all.
    """
    cols = range(example.n_entities) if entities is None else entities
    out: dict[int, list[Tensor]] = {}
    for j in cols:
        out[j] = [decode(params, encode(params, example, t, j))
                  for t in range(example.n_steps)]
    return out


def predict_grid(params: ModelParams, example: ProcessExample) -> ChangeGrid:
    """Distribution grid for a whole paragraph.

    Pure function of (params, example): given immutable params it is safe to
    call concurrently across examples.
    """
    cols = grid_distributions(params, example)
    arr = np.empty((example.n_steps, example.n_entities, N_CHANGES))
    for j, col in cols.items():
        for t, cell in enumerate(col):
            arr[t, j] = cell.values
    return ChangeGrid.from_dists(arr)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: ModelParams, path) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "hidden_size": params.hidden_size,
        "embedding_dim": params.embedding_dim,
        "embedding_frozen": params.embedding_frozen,
        "vocab": list(params.vocab),
        "tensors": {
            name: {"shape": list(t.shape), "values": t.values.reshape(-1).tolist()}
            for name, t in params.named_tensors().items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> ModelParams:
    """Rebuild params from a checkpoint, rejecting shape mismatches."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: invalid JSON: {exc.msg}") from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    try:
        hidden = int(payload["hidden_size"])
        emb_dim = int(payload["embedding_dim"])
        frozen = bool(payload["embedding_frozen"])
        vocab = {tok: i for i, tok in enumerate(payload["vocab"])}
        raw = payload["tensors"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: missing checkpoint field: {exc}") from exc

    hd = hidden // 2
    expected = {
        "embedding": (len(vocab), emb_dim),
        "fwd_wx": (emb_dim + 2, 4 * hd), "fwd_wh": (hd, 4 * hd), "fwd_b": (4 * hd,),
        "bwd_wx": (emb_dim + 2, 4 * hd), "bwd_wh": (hd, 4 * hd), "bwd_b": (4 * hd,),
        "attn_w": (hidden, 2 * hidden), "attn_b": (),
        "dec_w": (hidden, N_CHANGES), "dec_b": (N_CHANGES,),
    }
    tensors: dict[str, Tensor] = {}
    for name, shape in expected.items():
        if name not in raw:
            raise CheckpointError(f"{path}: missing tensor '{name}'")
        got = tuple(raw[name]["shape"])
        if got != shape:
            raise CheckpointError(
                f"{path}: tensor '{name}' has shape {list(got)}, expected {list(shape)}")
        values = np.asarray(raw[name]["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"{path}: tensor '{name}' has wrong number of values")
        trainable = not (name == "embedding" and frozen)
        tensors[name] = Tensor(values.reshape(shape), requires_grad=trainable)

    return ModelParams(
        vocab=vocab,
        embedding=tensors["embedding"],
        embedding_frozen=frozen,
        fwd=LstmWeights(tensors["fwd_wx"], tensors["fwd_wh"], tensors["fwd_b"]),
        bwd=LstmWeights(tensors["bwd_wx"], tensors["bwd_wh"], tensors["bwd_b"]),
        attn_w=tensors["attn_w"], attn_b=tensors["attn_b"],
        dec_w=tensors["dec_w"], dec_b=tensors["dec_b"],
        hidden_size=hidden, embedding_dim=emb_dim,
    )
