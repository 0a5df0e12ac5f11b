"""Frozen random-feature encoder and the one-shot client upload.

The encoder is tanh(W x + b) with fixed W, b. Clients never send raw
samples; each one uploads a single message holding the mean embedding
per class of its shard, so the upload costs |classes| * dim_e floats.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .datagen import Sample
from .errors import ProtocolError
from .rng import stream


@dataclass(frozen=True, eq=False)
class FrozenEncoder:
    dim_e: int
    dim_x: int
    weight: np.ndarray  # (dim_e, dim_x)
    bias: np.ndarray  # (dim_e,)

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim_x,):
            raise ValueError(
                f"expected input of shape ({self.dim_x},), got {x.shape}")
        return np.tanh(self.weight @ x + self.bias)

    def encode_batch(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        if xs.ndim != 2 or xs.shape[1] != self.dim_x:
            raise ValueError(
                f"expected batch of shape (n, {self.dim_x}), got {xs.shape}")
        return np.tanh(xs @ self.weight.T + self.bias)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.weight).tobytes())
        h.update(np.ascontiguousarray(self.bias).tobytes())
        return h.hexdigest()


def make_encoder(dim_e: int, dim_x: int, seed: int) -> FrozenEncoder:
    """Build the shared frozen encoder for a run. Same seed, same encoder."""
    if dim_e < 1 or dim_x < 1:
        raise ValueError(f"bad encoder dims dim_e={dim_e} dim_x={dim_x}")
    w = stream(seed, "encoder", "weight").standard_normal(
        (dim_e, dim_x)) / np.sqrt(dim_x)
    b = 0.1 * stream(seed, "encoder", "bias").standard_normal(dim_e)
    w.flags.writeable = False
    b.flags.writeable = False
    return FrozenEncoder(dim_e=dim_e, dim_x=dim_x, weight=w, bias=b)


@dataclass(eq=False)
class ClientMessage:
    """The single upload a client ever makes for its task."""

    client_id: int
    task_id: int
    class_means: dict[int, np.ndarray]
    class_counts: dict[int, int]

    @property
    def dim_e(self) -> int:
        first = next(iter(self.class_means.values()))
        return int(first.shape[0])

    @property
    def upload_floats(self) -> int:
        return len(self.class_means) * self.dim_e


def class_mean_embeddings(encoder: FrozenEncoder, samples: list[Sample]
                          ) -> tuple[dict[int, np.ndarray], dict[int, int]]:
    """Per-class mean of the encoded samples, keyed by ascending class id."""
    if not samples:
        raise ProtocolError("cannot build class means from an empty shard")
    by_class: dict[int, list[np.ndarray]] = {}
    for s in samples:
        by_class.setdefault(s.y, []).append(s.x)
    means: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for k in sorted(by_class):
        emb = encoder.encode_batch(np.stack(by_class[k]))
        means[k] = emb.mean(axis=0)
        counts[k] = len(by_class[k])
    return means, counts


def pair_mean_embeddings(encoder: FrozenEncoder, samples: list[Sample]
                         ) -> dict[tuple[int, int], np.ndarray]:
    """Mean embedding per (class, domain) pair, used as the conditioning
    vocabulary during generator pretraining."""
    if not samples:
        raise ProtocolError("cannot build pair means from an empty pool")
    by_pair: dict[tuple[int, int], list[np.ndarray]] = {}
    for s in samples:
        by_pair.setdefault((s.y, s.domain), []).append(s.x)
    return {pair: encoder.encode_batch(np.stack(xs)).mean(axis=0)
            for pair, xs in sorted(by_pair.items())}


def build_client_message(encoder: FrozenEncoder, shard) -> ClientMessage:
    """Summarize a shard into its one-shot upload."""
    means, counts = class_mean_embeddings(encoder, shard.samples)
    if not means:
        raise ProtocolError("client message must cover at least one class")
    return ClientMessage(client_id=shard.client_id, task_id=shard.task_id,
                         class_means=means, class_counts=counts)


# Wire format, all little-endian:
#   header: client_id u32, task_id u32, dim_e u32, class_count u32
#   per class (ascending class id): class_id u32, count u32, dim_e f64
_HEADER = struct.Struct("<IIII")
_CLASS_HEAD = struct.Struct("<II")


def serialize_message(msg: ClientMessage) -> bytes:
    if not msg.class_means:
        raise ProtocolError("refusing to serialize an empty message")
    dim_e = msg.dim_e
    out = [_HEADER.pack(msg.client_id, msg.task_id, dim_e,
                        len(msg.class_means))]
    for k in sorted(msg.class_means):
        vec = np.ascontiguousarray(msg.class_means[k], dtype="<f8")
        if vec.shape != (dim_e,):
            raise ValueError(f"class {k} mean has shape {vec.shape}, "
                             f"expected ({dim_e},)")
        out.append(_CLASS_HEAD.pack(k, msg.class_counts[k]))
        out.append(vec.tobytes())
    return b"".join(out)


def parse_message(blob: bytes) -> ClientMessage:
    if len(blob) < _HEADER.size:
        raise ProtocolError("message blob shorter than its header")
    client_id, task_id, dim_e, n_classes = _HEADER.unpack_from(blob, 0)
    offset = _HEADER.size
    record = _CLASS_HEAD.size + 8 * dim_e
    if len(blob) != _HEADER.size + n_classes * record:
        raise ProtocolError(
            f"message blob has {len(blob)} bytes, expected "
            f"{_HEADER.size + n_classes * record}")
    means: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for _ in range(n_classes):
        k, count = _CLASS_HEAD.unpack_from(blob, offset)
        offset += _CLASS_HEAD.size
        vec = np.frombuffer(blob, dtype="<f8", count=dim_e, offset=offset)
        offset += 8 * dim_e
        means[k] = vec.astype(float)
        counts[k] = count
    return ClientMessage(client_id=client_id, task_id=task_id,
                         class_means=means, class_counts=counts)
