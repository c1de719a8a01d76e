"""Hashed character n-gram sentence encoder and the two task heads.

Texts are padded with ``^``/``$``, cut into character n-grams and hashed
(CRC-32) into ``hash_size`` buckets. A row-sparse embedding table projects the
L2-normalized count vector to ``dim``; ``tanh`` hidden layers follow and the
output is L2-normalized, so every embedding has unit norm.
"""
from __future__ import annotations

import io
import json
import zlib
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from recruitenc._io import atomic_write_bytes
from recruitenc.numcore import DenseLayer, SparseRows, dense_backward, dense_forward

CHECKPOINT_VERSION = 1
DEFAULT_HASH_SIZE = 2 ** 18
DEFAULT_DIM = 128
DEFAULT_ORDERS = (2, 3, 4)
HEAD_WIDTH = 512


@dataclass(frozen=True)
class FeatureVector:
    indices: np.ndarray
    counts: np.ndarray
    hash_size: int

    def __eq__(self, other):
        return (isinstance(other, FeatureVector) and self.hash_size == other.hash_size
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.counts, other.counts))

    __hash__ = None


def _lower_latin(text: str) -> str:
    return "".join(c.lower() if "A" <= c <= "Z" else c for c in text)


def char_ngrams(text: str, orders: Sequence[int] = DEFAULT_ORDERS) -> list[str]:
    padded = "^" + _lower_latin(text) + "$"
    return [padded[i:i + n] for n in orders for i in range(len(padded) - n + 1)]


@lru_cache(maxsize=200_000)
def _featurize_cached(text: str, orders: tuple[int, ...], hash_size: int) -> FeatureVector:
    grams = char_ngrams(text, orders)
    buckets = np.fromiter((zlib.crc32(g.encode("utf-8")) % hash_size for g in grams),
                          dtype=np.int64, count=len(grams))
    idx, counts = np.unique(buckets, return_counts=True)
    return FeatureVector(idx, counts.astype(np.int64), hash_size)


def featurize(text: str, orders: Sequence[int] = DEFAULT_ORDERS,
              hash_size: int = DEFAULT_HASH_SIZE) -> FeatureVector:
    """Hashed, padded character n-gram counts of ``text`` (Latin letters lowercased)."""
    if not text or not text.strip():
        raise ValueError("cannot featurize empty text")
    return _featurize_cached(text, tuple(orders), hash_size)


def feature_matrix(texts: Sequence[str], orders, hash_size: int, dtype=np.float32) -> sp.csr_matrix:
    """CSR batch of L2-normalized count rows."""
    indptr = [0]
    indices, data = [], []
    for t in texts:
        fv = featurize(t, orders, hash_size)
        c = fv.counts.astype(np.float64)
        indices.append(fv.indices)
        data.append(c / np.sqrt(c @ c))
        indptr.append(indptr[-1] + len(c))
    return sp.csr_matrix((np.concatenate(data).astype(dtype), np.concatenate(indices), indptr),
                         shape=(len(texts), hash_size))


@dataclass
class EncoderModel:
    """Embedding table (hash_size x dim) + bias, then dense hidden layers."""

    embedding: np.ndarray
    proj_bias: np.ndarray
    hidden: list[DenseLayer]
    ngram_orders: tuple[int, ...] = DEFAULT_ORDERS

    @property
    def hash_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.hidden[-1].out_dim if self.hidden else self.embedding.shape[1]

    @property
    def dtype(self):
        return self.embedding.dtype

    @classmethod
    def init(cls, dim: int = DEFAULT_DIM, hash_size: int = DEFAULT_HASH_SIZE, n_hidden: int = 1,
             ngram_orders: Sequence[int] = DEFAULT_ORDERS, seed: int = 0, dtype=np.float32) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        # rows scaled so a unit-norm count vector projects to roughly unit norm
        limit = np.sqrt(3.0 / dim)
        emb = rng.uniform(-limit, limit, size=(hash_size, dim)).astype(dtype)
        hidden = [DenseLayer.glorot(dim, dim, "tanh", rng, dtype) for _ in range(n_hidden)]
        return cls(emb, np.zeros(dim, dtype=dtype), hidden, tuple(ngram_orders))

    def parameters(self) -> dict[str, np.ndarray]:
        out = {"encoder.embedding": self.embedding, "encoder.proj_bias": self.proj_bias}
        for k, layer in enumerate(self.hidden):
            out[f"encoder.hidden.{k}.weights"] = layer.weights
            out[f"encoder.hidden.{k}.bias"] = layer.bias
        return out

    def astype(self, dtype) -> "EncoderModel":
        return EncoderModel(self.embedding.astype(dtype), self.proj_bias.astype(dtype),
                            [l.astype(dtype) for l in self.hidden], self.ngram_orders)

    def features(self, texts: Sequence[str]) -> sp.csr_matrix:
        return feature_matrix(texts, self.ngram_orders, self.hash_size, self.dtype)

    def __call__(self, texts: Sequence[str]) -> np.ndarray:
        return encode(self, texts)


@dataclass
class EncodeCache:
    x: sp.csr_matrix
    layer_inputs: list[np.ndarray]
    pre_norm: np.ndarray
    norms: np.ndarray
    out: np.ndarray


def encode_forward(model: EncoderModel, texts: Sequence[str]) -> tuple[np.ndarray, EncodeCache]:
    if len(texts) == 0:
        raise ValueError("cannot encode an empty batch")
    x = model.features(texts)
    h = np.asarray(x @ model.embedding) + model.proj_bias
    inputs = []
    for layer in model.hidden:
        inputs.append(h)
        h = dense_forward(layer, h)
    norms = np.sqrt(np.sum(h * h, axis=1, keepdims=True))
    out = h / norms
    return out, EncodeCache(x, inputs, h, norms, out)


def encode(model: EncoderModel, texts: Sequence[str]) -> np.ndarray:
    """Unit-norm embeddings, one row per text."""
    return encode_forward(model, texts)[0]


def encode_backward(model: EncoderModel, cache: EncodeCache, grad_out: np.ndarray) -> dict:
    """Parameter gradients of ``sum(grad_out * encode(texts))``."""
    e = cache.out
    g = (grad_out - e * np.sum(e * grad_out, axis=1, keepdims=True)) / cache.norms
    grads = {}
    for k in range(len(model.hidden) - 1, -1, -1):
        gw, gb, g = dense_backward(model.hidden[k], cache.layer_inputs[k], g)
        grads[f"encoder.hidden.{k}.weights"] = gw
        grads[f"encoder.hidden.{k}.bias"] = gb
    grads["encoder.proj_bias"] = g.sum(axis=0)
    x = cache.x
    rows, local = np.unique(x.indices, return_inverse=True)
    sub = sp.csr_matrix((x.data, local.reshape(-1), x.indptr), shape=(x.shape[0], len(rows)))
    grads["encoder.embedding"] = SparseRows(rows, np.asarray(sub.T @ g))
    return grads


# ---------------------------------------------------------------------------
# heads


def nli_combine(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``[u; v; |u - v|; u * v]`` along the last axis."""
    u, v = np.asarray(u), np.asarray(v)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch {u.shape} vs {v.shape}")
    return np.concatenate([u, v, np.abs(u - v), u * v], axis=-1)


def nli_combine_backward(u, v, grad):
    d = u.shape[-1]
    ga, gb, gc, gd = grad[..., :d], grad[..., d:2 * d], grad[..., 2 * d:3 * d], grad[..., 3 * d:]
    s = np.sign(u - v)
    return ga + gc * s + gd * v, gb - gc * s + gd * u


@dataclass
class Head:
    """Stack of dense layers ending in linear logits; ``name`` prefixes parameter keys."""

    layers: list[DenseLayer]
    name: str

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"{self.name}.{k}.weights"] = layer.weights
            out[f"{self.name}.{k}.bias"] = layer.bias
        return out

    def logits(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"head {self.name} expects width {self.in_dim}, got {x.shape[-1]}")
        inputs = []
        for layer in self.layers:
            inputs.append(x)
            x = dense_forward(layer, x)
        return x, inputs

    def backward(self, inputs: list[np.ndarray], grad: np.ndarray) -> tuple[dict, np.ndarray]:
        grads = {}
        for k in range(len(self.layers) - 1, -1, -1):
            gw, gb, grad = dense_backward(self.layers[k], inputs[k], grad)
            grads[f"{self.name}.{k}.weights"] = gw
            grads[f"{self.name}.{k}.bias"] = gb
        return grads, grad

    def astype(self, dtype) -> "Head":
        return Head([l.astype(dtype) for l in self.layers], self.name)

    def zeroed(self) -> "Head":
        return Head([DenseLayer.zeros(l.in_dim, l.out_dim, l.activation, l.weights.dtype)
                     for l in self.layers], self.name)


def _head(in_dim: int, out_dim: int, width: int, name: str, rng, dtype) -> Head:
    return Head([DenseLayer.glorot(in_dim, width, "relu", rng, dtype),
                 DenseLayer.glorot(width, width, "relu", rng, dtype),
                 DenseLayer.glorot(width, out_dim, "identity", rng, dtype)], name)


def match_head(dim: int, width: int = HEAD_WIDTH, seed: int = 0, dtype=np.float32) -> Head:
    """Description/title matching head over the 4*dim combined vector, one logit."""
    return _head(4 * dim, 1, width, "match", np.random.default_rng(seed), dtype)


def field_head(dim: int, n_fields: int = 28, width: int = HEAD_WIDTH, seed: int = 0,
               dtype=np.float32) -> Head:
    """Multi-label job field head, one logit per field."""
    return _head(dim, n_fields, width, "field", np.random.default_rng(seed), dtype)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def match_forward(head: Head, description_embedding: np.ndarray, title_embedding: np.ndarray) -> np.ndarray:
    """Probability that description and title belong together."""
    logit, _ = head.logits(nli_combine(description_embedding, title_embedding))
    return sigmoid(logit[..., 0])


def field_forward(head: Head, title_embedding: np.ndarray) -> np.ndarray:
    """Independent per-field probabilities (element-wise sigmoid)."""
    logit, _ = head.logits(np.asarray(title_embedding))
    return sigmoid(logit)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: EncoderModel, heads: Sequence[Head] = (), metadata: dict | None = None) -> None:
    """Write an ``.npz`` checkpoint; arrays are row-major with explicit shapes in the header."""
    arrays = dict(model.parameters())
    for h in heads:
        arrays.update(h.parameters())
    header = {
        "format_version": CHECKPOINT_VERSION,
        "ngram_orders": list(model.ngram_orders),
        "hidden_activations": [l.activation for l in model.hidden],
        "heads": {h.name: [l.activation for l in h.layers] for h in heads},
        "shapes": {k: list(v.shape) for k, v in arrays.items()},
        "metadata": metadata or {},
    }
    buf = io.BytesIO()
    np.savez(buf, __header__=np.array(json.dumps(header, sort_keys=True)),
             **{k: np.ascontiguousarray(v) for k, v in arrays.items()})
    atomic_write_bytes(path, buf.getvalue())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[EncoderModel, dict[str, Head], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint format_version {header.get('format_version')} "
                                  f"is not supported (expected {CHECKPOINT_VERSION})")
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    for k, shape in header["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise CheckpointError(f"array {k} has shape {arrays[k].shape}, header says {shape}")
    hidden = [DenseLayer(arrays[f"encoder.hidden.{k}.weights"], arrays[f"encoder.hidden.{k}.bias"], act)
              for k, act in enumerate(header["hidden_activations"])]
    model = EncoderModel(arrays["encoder.embedding"], arrays["encoder.proj_bias"], hidden,
                         tuple(header["ngram_orders"]))
    heads = {}
    for name, acts in header["heads"].items():
        heads[name] = Head([DenseLayer(arrays[f"{name}.{k}.weights"], arrays[f"{name}.{k}.bias"], a)
                            for k, a in enumerate(acts)], name)
    return model, heads, header["metadata"]
