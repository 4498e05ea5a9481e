"""Image embedding backends and the keyed binary embedding store.

Two backends ship:

``HashBackend``
    Deterministic stand-in that expands a SHA-256 of the tensor bytes into a
    vector of uniform values in [-1, 1]. Identical images get identical
    vectors, distinct images get unrelated ones. Lets the whole pipeline run
    without downloading a model.

``OnnxBackend``
    Runs a pretrained convolutional network from an ONNX file, optionally cut
    at a named intermediate tensor (the 2048-d global pool for Inception-v3).
    Needs the ``onnx`` and ``onnxruntime`` packages.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .imagery import TENSOR_SHAPE, check_tensor

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 2048

STORE_MAGIC = b"GVES"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sHIQ")  # magic, version, dim, count
_KEYLEN = struct.Struct("<H")
_U64 = struct.Struct("<Q")


class EncoderError(RuntimeError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"item {index}: {message}")
        self.index = index


class EmbeddingBackend(Protocol):
    name: str
    output_dim: int

    def embed(self, batch: np.ndarray) -> np.ndarray:
        """Map a ``[b, 299, 299, 3]`` float batch to ``[b, output_dim]``."""
        ...


@dataclass(frozen=True)
class Embedding:
    id: str
    vec: np.ndarray


class HashBackend:
    name = "hash"

    def __init__(self, output_dim: int = EMBEDDING_DIM, seed: int = 0):
        self.output_dim = output_dim
        self.seed = seed

    def vector(self, tensor: np.ndarray) -> np.ndarray:
        data = np.ascontiguousarray(tensor, dtype="<f4")
        h = hashlib.sha256()
        h.update(struct.pack("<Q", self.seed))
        h.update(struct.pack("<3Q", *data.shape))
        h.update(data.tobytes())
        words = np.frombuffer(h.digest(), dtype="<u4")
        rng = np.random.default_rng(words)
        return rng.uniform(-1.0, 1.0, self.output_dim).astype(np.float32)

    def embed(self, batch: np.ndarray) -> np.ndarray:
        return np.stack([self.vector(t) for t in batch]) if len(batch) else \
            np.zeros((0, self.output_dim), np.float32)


class OnnxBackend:
    """Pretrained CNN inference through onnxruntime.

    ``layer`` names the tensor to read out (e.g. the global-average-pool
    output); when it is not already a graph output, the graph is cut there.
    ``layout`` is ``NHWC`` or ``NCHW``; ``scaling`` adapts the [0, 1] input:
    ``none`` keeps it, ``tf`` maps to [-1, 1], ``torch`` applies ImageNet
    mean/std.
    """

    name = "onnx"

    def __init__(self, model_path, layer: str | None = None, output_dim: int = EMBEDDING_DIM,
                 layout: str = "NHWC", scaling: str = "none"):
        try:
            import onnx
            import onnxruntime as ort
        except ImportError as exc:
            raise EncoderError("the onnx backend needs 'onnx' and 'onnxruntime' installed") from exc
        path = Path(model_path)
        if not path.is_file():
            raise EncoderError(f"model file not found: {path}")
        if layout not in ("NHWC", "NCHW") or scaling not in ("none", "tf", "torch"):
            raise EncoderError(f"bad layout/scaling: {layout}/{scaling}")
        try:
            model = onnx.load(str(path))
            outputs = [o.name for o in model.graph.output]
            if layer is not None and layer not in outputs:
                inits = {i.name for i in model.graph.initializer}
                inputs = [i.name for i in model.graph.input if i.name not in inits]
                model = onnx.utils.Extractor(model).extract_model(inputs, [layer])
            self._session = ort.InferenceSession(model.SerializeToString(),
                                                 providers=["CPUExecutionProvider"])
        except Exception as exc:  # onnx raises a variety of types for bad files
            raise EncoderError(f"cannot load model {path}: {exc}") from exc
        self._input = self._session.get_inputs()[0].name
        self._output = layer or self._session.get_outputs()[0].name
        self.output_dim = output_dim
        self.layout = layout
        self.scaling = scaling

    def _prepare(self, batch: np.ndarray) -> np.ndarray:
        x = batch.astype(np.float32)
        if self.scaling == "tf":
            x = x * 2.0 - 1.0
        elif self.scaling == "torch":
            x = (x - np.array([0.485, 0.456, 0.406], np.float32)) / \
                np.array([0.229, 0.224, 0.225], np.float32)
        if self.layout == "NCHW":
            x = x.transpose(0, 3, 1, 2)
        return np.ascontiguousarray(x)

    def embed(self, batch: np.ndarray) -> np.ndarray:
        out = self._session.run([self._output], {self._input: self._prepare(batch)})[0]
        out = out.reshape(out.shape[0], -1).astype(np.float32)
        if out.shape[1] != self.output_dim:
            raise EncoderError(f"model yields {out.shape[1]}-d vectors, expected {self.output_dim}")
        return out


def make_backend(name: str, **options) -> EmbeddingBackend:
    if name == "hash":
        return HashBackend(int(options.get("output_dim", EMBEDDING_DIM)), int(options.get("seed", 0)))
    if name == "onnx":
        return OnnxBackend(options["model_path"], options.get("layer") or None,
                           int(options.get("output_dim", EMBEDDING_DIM)),
                           options.get("layout", "NHWC"), options.get("scaling", "none"))
    raise EncoderError(f"unknown backend {name!r}")


def _run(backend: EmbeddingBackend, batch: np.ndarray, first_index: int) -> np.ndarray:
    try:
        out = backend.embed(batch)
    except EncoderError as exc:
        raise EncoderError(str(exc), first_index) from exc
    except Exception as exc:
        raise EncoderError(f"{backend.name} backend failed: {exc}", first_index) from exc
    out = np.asarray(out, dtype=np.float32)
    if out.shape != (len(batch), backend.output_dim):
        raise EncoderError(f"backend returned shape {out.shape}", first_index)
    bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1))
    if bad.size:
        raise EncoderError("backend produced non-finite values", first_index + int(bad[0]))
    return out


def encode(backend: EmbeddingBackend, tensor: np.ndarray) -> np.ndarray:
    check_tensor(tensor)
    return _run(backend, np.asarray(tensor)[None], 0)[0]


def encode_batch(backend: EmbeddingBackend, tensors: Sequence[np.ndarray],
                 batch_size: int = 32) -> list[np.ndarray]:
    """Encode in order; the result does not depend on ``batch_size``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    out: list[np.ndarray] = []
    for start in range(0, len(tensors), batch_size):
        chunk = tensors[start:start + batch_size]
        for k, t in enumerate(chunk):
            try:
                check_tensor(t)
            except ValueError as exc:
                raise EncoderError(str(exc), start + k) from exc
        out.extend(_run(backend, np.stack(chunk), start))
    return out


class DuplicateIdError(KeyError):
    pass


class EmbeddingStore:
    """Append-only file of ``id -> float32[dim]`` records.

    Layout (little-endian)::

        header   "GVES" | u16 version | u32 dim | u64 count
        records  u16 key length | UTF-8 key | dim x f32        (count times)
        index    u64 record offset                            (count times)
        footer   u64 offset of the index section

    One writer at a time; lookups use positional reads so any number of
    threads can read concurrently once the index is loaded.
    """

    def __init__(self, path, dim: int, index: dict[str, int], index_start: int):
        self.path = Path(path)
        self.dim = dim
        self._index = index
        self._order = list(index)
        self._index_start = index_start
        self._fd = os.open(self.path, os.O_RDONLY)
        self._lock = threading.Lock()

    @classmethod
    def create(cls, path, dim: int = EMBEDDING_DIM) -> "EmbeddingStore":
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, dim, 0))
            f.write(_U64.pack(_HEADER.size))
        return cls(path, dim, {}, _HEADER.size)

    @classmethod
    def open(cls, path) -> "EmbeddingStore":
        path = Path(path)
        with open(path, "rb") as f:
            magic, version, dim, count = _HEADER.unpack(f.read(_HEADER.size))
            if magic != STORE_MAGIC:
                raise ValueError(f"{path}: not an embedding store")
            if version != STORE_VERSION:
                raise ValueError(f"{path}: unsupported store version {version}")
            f.seek(-_U64.size, os.SEEK_END)
            (index_start,) = _U64.unpack(f.read(_U64.size))
            f.seek(index_start)
            offsets = np.frombuffer(f.read(8 * count), dtype="<u8")
            index = {}
            for off in offsets:
                f.seek(int(off))
                (klen,) = _KEYLEN.unpack(f.read(_KEYLEN.size))
                index[f.read(klen).decode("utf-8")] = int(off)
        return cls(path, dim, index, index_start)

    @classmethod
    def open_or_create(cls, path, dim: int = EMBEDDING_DIM) -> "EmbeddingStore":
        path = Path(path)
        if path.exists():
            store = cls.open(path)
            if store.dim != dim:
                store.close()
                raise ValueError(f"{path}: store dim {store.dim}, expected {dim}")
            return store
        return cls.create(path, dim)

    @staticmethod
    def file_size(key_lengths: Iterable[int], dim: int) -> int:
        """Expected file size for records with the given UTF-8 key lengths."""
        lengths = list(key_lengths)
        return (_HEADER.size + sum(_KEYLEN.size + k + 4 * dim for k in lengths)
                + _U64.size * len(lengths) + _U64.size)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, rid: str) -> bool:
        return rid in self._index

    def ids(self) -> list[str]:
        return list(self._order)

    def write(self, embeddings: Iterable[Embedding]) -> int:
        """Append embeddings; rejects duplicates (within the batch or the store)."""
        pending = []
        seen = set()
        for e in embeddings:
            vec = np.asarray(e.vec)
            if vec.shape != (self.dim,):
                raise ValueError(f"embedding {e.id!r} has shape {vec.shape}, store dim is {self.dim}")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"embedding {e.id!r} has non-finite values")
            if e.id in self._index or e.id in seen:
                raise DuplicateIdError(e.id)
            key = e.id.encode("utf-8")
            if len(key) > 0xFFFF:
                raise ValueError("id longer than 65535 bytes")
            seen.add(e.id)
            pending.append((e.id, key, np.ascontiguousarray(vec, dtype="<f4").tobytes()))
        if not pending:
            return 0
        with self._lock, open(self.path, "r+b") as f:
            f.seek(self._index_start)
            pos = self._index_start
            for rid, key, payload in pending:
                self._index[rid] = pos
                self._order.append(rid)
                f.write(_KEYLEN.pack(len(key)) + key + payload)
                pos += _KEYLEN.size + len(key) + len(payload)
            self._index_start = pos
            f.write(np.asarray([self._index[r] for r in self._order], dtype="<u8").tobytes())
            f.write(_U64.pack(pos))
            f.truncate()
            f.seek(0)
            f.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, self.dim, len(self._order)))
        return len(pending)

    def lookup(self, rid: str) -> Embedding | None:
        """The stored embedding, or ``None`` when ``rid`` is absent."""
        off = self._index.get(rid)
        if off is None:
            return None
        klen = len(rid.encode("utf-8"))
        raw = os.pread(self._fd, 4 * self.dim, off + _KEYLEN.size + klen)
        return Embedding(rid, np.frombuffer(raw, dtype="<f4").copy())

    def vector(self, rid: str) -> np.ndarray | None:
        e = self.lookup(rid)
        return None if e is None else e.vec

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def store_write(store: EmbeddingStore, embeddings: Iterable[Embedding]) -> int:
    return store.write(embeddings)


def store_lookup(store: EmbeddingStore, rid: str) -> Embedding | None:
    return store.lookup(rid)


__all__ = [
    "EMBEDDING_DIM", "TENSOR_SHAPE", "Embedding", "EmbeddingBackend", "EmbeddingStore",
    "EncoderError", "DuplicateIdError", "HashBackend", "OnnxBackend", "encode",
    "encode_batch", "make_backend", "store_lookup", "store_write",
]
