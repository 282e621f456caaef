"""The trainable filled-pause tagger.

A pluggable embedding provider feeds a single-layer bidirectional LSTM
whose per-slot hidden states are projected to one logit per tag class.
Everything is plain numpy: forward, exact reverse-mode gradients,
frequency-weighted cross entropy, global-norm clipping, and Adam.

Batched code paths operate on rectangular [batch, time, dim] arrays of
equal-length sequences; callers bucket ragged data by length so no
padding ever enters the loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .corpus import Sentence

GATE_ORDER = ("i", "f", "g", "o")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

EMBEDDING_MAGIC = b"FPEMB1"


class DivergenceError(RuntimeError):
    """Raised when non-finite values show up in training or inference."""


class MissingEmbeddingError(KeyError):
    """Raised when a precomputed-embedding file lacks a requested sentence."""


@dataclass(frozen=True)
class Hyper:
    d_emb: int
    hidden_size: int
    num_classes: int
    seed: int
    dropout: float = 0.0


class TrainableLookup:
    """Static trainable embedding table with an OOV bucket.

    Row 0 is the OOV bucket, row 1 the sentence-end marker, and rows 2+
    hold the known tokens in the order given at construction.
    """

    OOV_ROW = 0
    EOS_ROW = 1

    def __init__(self, tokens: Sequence[str], table: np.ndarray):
        if table.shape[0] != len(tokens) + 2:
            raise ValueError(
                f"table has {table.shape[0]} rows, expected {len(tokens) + 2} "
                "(OOV + EOS + tokens)"
            )
        self.tokens = tuple(tokens)
        self.table = table
        self.token_rows = {tok: i + 2 for i, tok in enumerate(self.tokens)}

    @classmethod
    def create(
        cls, tokens: Sequence[str], d_emb: int, rng: np.random.Generator,
        dtype=np.float32,
    ) -> "TrainableLookup":
        limit = np.sqrt(1.0 / d_emb)
        table = rng.uniform(-limit, limit, size=(len(tokens) + 2, d_emb)).astype(dtype)
        return cls(tokens, table)

    @property
    def d_emb(self) -> int:
        return self.table.shape[1]

    def row_ids(self, sentence: Sentence) -> np.ndarray:
        ids = [self.token_rows.get(m, self.OOV_ROW) for m in sentence.morphemes]
        ids.append(self.EOS_ROW)
        return np.array(ids, dtype=np.int64)


class PrecomputedEmbeddings:
    """Per-sentence embedding matrices loaded from a binary sidecar file.

    Sentences are keyed by "<speaker id>:<sentence index>". Each stored
    matrix has one row per morpheme; the sentence-end sentinel slot gets
    a zero vector at embed time.
    """

    def __init__(self, d_emb: int, vectors: dict[str, np.ndarray]):
        self._d_emb = d_emb
        for key, mat in vectors.items():
            if mat.ndim != 2 or mat.shape[1] != d_emb:
                raise ValueError(f"sentence {key!r}: expected [n, {d_emb}] matrix, got {mat.shape}")
        self.vectors = vectors

    @property
    def d_emb(self) -> int:
        return self._d_emb

    def matrix_for(self, key: str, morpheme_count: int) -> np.ndarray:
        if key not in self.vectors:
            raise MissingEmbeddingError(f"no precomputed vectors for sentence {key!r}")
        mat = self.vectors[key]
        if mat.shape[0] != morpheme_count:
            raise ValueError(
                f"sentence {key!r}: {mat.shape[0]} vectors for {morpheme_count} morphemes"
            )
        return mat

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            f.write(EMBEDDING_MAGIC)
            f.write(struct.pack("<I", self._d_emb))
            f.write(struct.pack("<Q", len(self.vectors)))
            for key, mat in self.vectors.items():
                enc = key.encode("utf-8")
                f.write(struct.pack("<I", len(enc)))
                f.write(enc)
                f.write(struct.pack("<I", mat.shape[0]))
                f.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "PrecomputedEmbeddings":
        data = Path(path).read_bytes()
        if data[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
            raise ValueError(f"{path}: not an embedding sidecar file")
        off = len(EMBEDDING_MAGIC)
        d_emb = struct.unpack_from("<I", data, off)[0]
        off += 4
        count = struct.unpack_from("<Q", data, off)[0]
        off += 8
        vectors: dict[str, np.ndarray] = {}
        for _ in range(count):
            klen = struct.unpack_from("<I", data, off)[0]
            off += 4
            key = data[off : off + klen].decode("utf-8")
            off += klen
            n = struct.unpack_from("<I", data, off)[0]
            off += 4
            nbytes = n * d_emb * 4
            mat = np.frombuffer(data[off : off + nbytes], dtype="<f4").reshape(n, d_emb)
            off += nbytes
            vectors[key] = mat.astype(np.float32)
        if off != len(data):
            raise ValueError(f"{path}: trailing bytes after declared sentences")
        return cls(d_emb, vectors)


EmbeddingProvider = Union[TrainableLookup, PrecomputedEmbeddings]


def sentence_key(speaker_id: str, index: int) -> str:
    return f"{speaker_id}:{index}"


def embed(provider: EmbeddingProvider, sentence: Sentence, key: str | None = None) -> np.ndarray:
    """Embedding matrix for a sentence, one row per slot (morphemes + sentinel)."""
    if isinstance(provider, TrainableLookup):
        return provider.table[provider.row_ids(sentence)]
    if key is None:
        raise MissingEmbeddingError("precomputed embeddings need a sentence key")
    mat = provider.matrix_for(key, len(sentence.morphemes))
    return np.concatenate([mat, np.zeros((1, provider.d_emb), dtype=mat.dtype)])


@dataclass
class GateParams:
    """One LSTM direction: per-gate weights [h, d+h] and biases [h]."""

    w_i: np.ndarray
    w_f: np.ndarray
    w_g: np.ndarray
    w_o: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_g: np.ndarray
    b_o: np.ndarray

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        w = np.concatenate([self.w_i, self.w_f, self.w_g, self.w_o])
        b = np.concatenate([self.b_i, self.b_f, self.b_g, self.b_o])
        return w, b

    @classmethod
    def create(cls, d_in: int, h: int, rng: np.random.Generator, dtype=np.float32) -> "GateParams":
        limit = np.sqrt(1.0 / (d_in + h))
        mats = [rng.uniform(-limit, limit, size=(h, d_in + h)).astype(dtype) for _ in GATE_ORDER]
        biases = [np.zeros(h, dtype=dtype) for _ in GATE_ORDER]
        biases[1] = np.ones(h, dtype=dtype)  # forget gate starts open
        return cls(*mats, *biases)


@dataclass
class BlstmParams:
    fwd: GateParams
    bwd: GateParams
    w_out: np.ndarray  # [2h, C]
    b_out: np.ndarray  # [C]

    @classmethod
    def create(
        cls, d_emb: int, h: int, num_classes: int, rng: np.random.Generator, dtype=np.float32
    ) -> "BlstmParams":
        fwd = GateParams.create(d_emb, h, rng, dtype)
        bwd = GateParams.create(d_emb, h, rng, dtype)
        limit = np.sqrt(1.0 / (2 * h))
        w_out = rng.uniform(-limit, limit, size=(2 * h, num_classes)).astype(dtype)
        b_out = np.zeros(num_classes, dtype=dtype)
        return cls(fwd, bwd, w_out, b_out)


@dataclass
class TaggerModel:
    embedding: EmbeddingProvider
    params: BlstmParams
    class_weights: np.ndarray
    hyper: Hyper

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays in a fixed, stable order."""
        named: dict[str, np.ndarray] = {}
        for direction, gp in (("fwd", self.params.fwd), ("bwd", self.params.bwd)):
            for gate in GATE_ORDER:
                named[f"{direction}.w_{gate}"] = getattr(gp, f"w_{gate}")
            for gate in GATE_ORDER:
                named[f"{direction}.b_{gate}"] = getattr(gp, f"b_{gate}")
        named["w_out"] = self.params.w_out
        named["b_out"] = self.params.b_out
        if isinstance(self.embedding, TrainableLookup):
            named["embedding.table"] = self.embedding.table
        return named

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name == "w_out":
            self.params.w_out = value
        elif name == "b_out":
            self.params.b_out = value
        elif name == "embedding.table":
            self.embedding.table = value
        else:
            direction, field = name.split(".")
            setattr(getattr(self.params, direction), field, value)


def init_model(
    tokens: Sequence[str], vocab_size: int, hyper: Hyper, dtype=np.float32
) -> TaggerModel:
    """Seeded model with a trainable lookup over the given token list."""
    rng = np.random.default_rng(hyper.seed)
    lookup = TrainableLookup.create(tokens, hyper.d_emb, rng, dtype)
    params = BlstmParams.create(hyper.d_emb, hyper.hidden_size, hyper.num_classes, rng, dtype)
    weights = np.ones(hyper.num_classes, dtype=dtype)
    if hyper.num_classes != vocab_size + 1:
        raise ValueError(
            f"num_classes {hyper.num_classes} != vocabulary size {vocab_size} + 1"
        )
    return TaggerModel(lookup, params, weights, hyper)


def class_weights_from_counts(counts: Sequence[int], floor: float = 1e-6) -> np.ndarray:
    """Reciprocal-frequency class weights, rescaled to mean 1.

    The floor bounds the frequency from below so zero-count classes get a
    large finite weight instead of dividing by zero.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or np.any(counts < 0):
        raise ValueError("counts must be a vector of non-negative integers")
    total = counts.sum()
    if total <= 0:
        raise ValueError("all class counts are zero")
    if floor <= 0:
        raise ValueError(f"floor must be positive, got {floor}")
    raw = 1.0 / np.maximum(counts / total, floor)
    return raw / raw.mean()


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _direction_forward(gp: GateParams, xs: np.ndarray) -> tuple[np.ndarray, dict]:
    """Run one LSTM direction over xs [B, T, D]; returns hs [B, T, H] + cache."""
    w, b = gp.stacked()
    batch, steps, d_in = xs.shape
    h = gp.b_i.shape[0]
    dtype = xs.dtype
    hs = np.zeros((batch, steps, h), dtype=dtype)
    cache = {
        "z": np.zeros((batch, steps, d_in + h), dtype=dtype),
        "i": np.zeros((batch, steps, h), dtype=dtype),
        "f": np.zeros((batch, steps, h), dtype=dtype),
        "g": np.zeros((batch, steps, h), dtype=dtype),
        "o": np.zeros((batch, steps, h), dtype=dtype),
        "c": np.zeros((batch, steps, h), dtype=dtype),
        "tau": np.zeros((batch, steps, h), dtype=dtype),
    }
    h_prev = np.zeros((batch, h), dtype=dtype)
    c_prev = np.zeros((batch, h), dtype=dtype)
    for t in range(steps):
        z = np.concatenate([xs[:, t], h_prev], axis=1)
        pre = z @ w.T + b
        gi = _sigmoid(pre[:, :h])
        gf = _sigmoid(pre[:, h : 2 * h])
        gg = np.tanh(pre[:, 2 * h : 3 * h])
        go = _sigmoid(pre[:, 3 * h :])
        c = gf * c_prev + gi * gg
        tau = np.tanh(c)
        h_t = go * tau
        cache["z"][:, t] = z
        cache["i"][:, t] = gi
        cache["f"][:, t] = gf
        cache["g"][:, t] = gg
        cache["o"][:, t] = go
        cache["c"][:, t] = c
        cache["tau"][:, t] = tau
        hs[:, t] = h_t
        h_prev, c_prev = h_t, c
    return hs, cache


def _direction_backward(
    gp: GateParams, cache: dict, d_hs: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Backpropagate one direction; returns per-gate grads and d_xs [B, T, D]."""
    w, _ = gp.stacked()
    batch, steps, h = d_hs.shape
    d_in = cache["z"].shape[2] - h
    dtype = d_hs.dtype
    dw = np.zeros_like(w)
    db = np.zeros(4 * h, dtype=dtype)
    d_xs = np.zeros((batch, steps, d_in), dtype=dtype)
    dh_next = np.zeros((batch, h), dtype=dtype)
    dc_next = np.zeros((batch, h), dtype=dtype)
    for t in range(steps - 1, -1, -1):
        gi, gf, gg, go = (cache[k][:, t] for k in ("i", "f", "g", "o"))
        tau = cache["tau"][:, t]
        c_prev = cache["c"][:, t - 1] if t > 0 else np.zeros((batch, h), dtype=dtype)
        dh = d_hs[:, t] + dh_next
        do = dh * tau
        dc = dh * go * (1.0 - tau * tau) + dc_next
        di = dc * gg
        dg = dc * gi
        df = dc * c_prev
        dc_next = dc * gf
        dpre = np.concatenate(
            [
                di * gi * (1.0 - gi),
                df * gf * (1.0 - gf),
                dg * (1.0 - gg * gg),
                do * go * (1.0 - go),
            ],
            axis=1,
        )
        z = cache["z"][:, t]
        dw += dpre.T @ z
        db += dpre.sum(axis=0)
        dz = dpre @ w
        d_xs[:, t] = dz[:, :d_in]
        dh_next = dz[:, d_in:]
    grads = {}
    for k, gate in enumerate(GATE_ORDER):
        grads[f"w_{gate}"] = dw[k * h : (k + 1) * h]
        grads[f"b_{gate}"] = db[k * h : (k + 1) * h]
    return grads, d_xs


def forward_batch(
    model: TaggerModel, xs: np.ndarray, dropout_mask: np.ndarray | None = None
) -> tuple[np.ndarray, dict]:
    """Logits [B, T, C] for a rectangular batch of embedded sequences."""
    hs_f, cache_f = _direction_forward(model.params.fwd, xs)
    hs_b_rev, cache_b = _direction_forward(model.params.bwd, xs[:, ::-1])
    hidden = np.concatenate([hs_f, hs_b_rev[:, ::-1]], axis=2)
    if dropout_mask is not None:
        hidden = hidden * dropout_mask
    logits = hidden @ model.params.w_out + model.params.b_out
    if not np.all(np.isfinite(logits)):
        raise DivergenceError("non-finite logits in forward pass")
    cache = {"fwd": cache_f, "bwd": cache_b, "hidden": hidden, "mask": dropout_mask}
    return logits, cache


def backward_batch(model: TaggerModel, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients for a batch; includes d_embeddings [B, T, D]."""
    batch, steps, _ = dlogits.shape
    hidden = cache["hidden"]
    two_h = hidden.shape[2]
    h = two_h // 2
    flat_h = hidden.reshape(batch * steps, two_h)
    flat_dl = dlogits.reshape(batch * steps, -1)
    grads: dict[str, np.ndarray] = {
        "w_out": flat_h.T @ flat_dl,
        "b_out": flat_dl.sum(axis=0),
    }
    d_hidden = dlogits @ model.params.w_out.T
    if cache["mask"] is not None:
        d_hidden = d_hidden * cache["mask"]
    g_f, dx_f = _direction_backward(model.params.fwd, cache["fwd"], d_hidden[:, :, :h])
    g_b, dx_b_rev = _direction_backward(
        model.params.bwd, cache["bwd"], d_hidden[:, ::-1, h:]
    )
    for gate_name, arr in g_f.items():
        grads[f"fwd.{gate_name}"] = arr
    for gate_name, arr in g_b.items():
        grads[f"bwd.{gate_name}"] = arr
    grads["d_embeddings"] = dx_f + dx_b_rev[:, ::-1]
    return grads


def forward(
    model: TaggerModel, embeddings: np.ndarray, dropout_mask: np.ndarray | None = None,
    return_cache: bool = False,
):
    """Logits [T, C] for one embedded sentence."""
    if embeddings.ndim != 2 or embeddings.shape[1] != model.hyper.d_emb:
        raise ValueError(f"expected [T, {model.hyper.d_emb}] embeddings, got {embeddings.shape}")
    mask3 = dropout_mask[None] if dropout_mask is not None else None
    logits, cache = forward_batch(model, embeddings[None], mask3)
    return (logits[0], cache) if return_cache else logits[0]


def backward(
    model: TaggerModel,
    embeddings: np.ndarray,
    dlogits: np.ndarray,
    cache: dict | None = None,
    row_ids: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss with dlogits = dL/dlogits for one sentence.

    With a TrainableLookup and the sentence's row_ids, the embedding-table
    gradient is scattered onto the touched rows only.
    """
    if cache is None:
        _, cache = forward_batch(model, embeddings[None])
    grads = backward_batch(model, cache, dlogits[None])
    grads["d_embeddings"] = grads["d_embeddings"][0]
    if isinstance(model.embedding, TrainableLookup) and row_ids is not None:
        table_grad = np.zeros_like(model.embedding.table)
        np.add.at(table_grad, row_ids, grads["d_embeddings"])
        grads["embedding.table"] = table_grad
    return grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def ce_terms(
    logits: np.ndarray, gold: np.ndarray, weights: np.ndarray
) -> tuple[float, float, np.ndarray]:
    """Weighted cross-entropy pieces for pooled reductions.

    Returns (sum of w[y]*nll, sum of w[y], unnormalized dlogits); dividing
    the first and last by any common denominator yields a valid loss and
    its exact gradient, which lets batches pool slots across sub-batches.
    """
    logp = log_softmax(logits)
    p = np.exp(logp)
    w_y = weights[gold]
    num = float(-(w_y * np.take_along_axis(logp, gold[..., None], axis=-1)[..., 0]).sum())
    den = float(w_y.sum())
    dlogits = p * w_y[..., None]
    np.subtract.at(dlogits, (*np.indices(gold.shape), gold), w_y)
    return num, den, dlogits


def weighted_ce_loss(
    logits: np.ndarray, gold: Sequence[int], weights: np.ndarray
) -> tuple[float, np.ndarray]:
    """Weighted mean cross entropy over slots and its gradient.

    loss = sum_t w[y_t] * (-log softmax(logits_t)[y_t]) / sum_t w[y_t]
    """
    gold = np.asarray(gold, dtype=np.int64)
    if logits.ndim != 2 or gold.shape != (logits.shape[0],):
        raise ValueError(f"shape mismatch: logits {logits.shape} vs {gold.shape[0]} gold tags")
    weights = np.asarray(weights)
    if weights.shape != (logits.shape[1],):
        raise ValueError(f"expected {logits.shape[1]} class weights, got {weights.shape}")
    num, den, dlogits = ce_terms(logits, gold, weights)
    return num / den, dlogits / den


def global_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        flat = g.ravel().astype(np.float64)
        total += float(flat @ flat)
    return float(np.sqrt(total))


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def clip_and_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    max_norm: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Global-norm clip, then one bias-corrected Adam update (in place)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r}")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
    return params, state


def make_dropout_mask(
    rng: np.random.Generator, shape: tuple[int, ...], p: float, dtype=np.float32
) -> np.ndarray | None:
    """Inverted-dropout mask, or None when p == 0."""
    if p <= 0.0:
        return None
    keep = 1.0 - p
    return (rng.random(shape) < keep).astype(dtype) / dtype(keep)


def predict_tags(model: TaggerModel, sentence: Sentence, key: str | None = None) -> list[int]:
    """Most likely tag per slot; argmax ties go to the smaller class index."""
    logits = forward(model, embed(model.embedding, sentence, key))
    return [int(t) for t in np.argmax(logits, axis=1)]
