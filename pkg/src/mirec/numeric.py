"""Dense float64 kernel: parameter blocks, MLP and embedding layers with
explicit backward passes, Adam, gradient clipping and the checkpoint format.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block_name: str):
        super().__init__(f"non-finite gradient in parameter block {block_name!r}")
        self.block_name = block_name


class ChecksumError(ValueError):
    pass


@dataclass(eq=False)
class ParamBlock:
    name: str
    values: np.ndarray
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.values = np.array(self.values, dtype=DTYPE)
        self.grad = np.zeros_like(self.values)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self):
        self.grad.fill(0.0)

    def copy(self, name: str | None = None) -> ParamBlock:
        return ParamBlock(self.name if name is None else name, self.values.copy())


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def halving_widths(embedding_dim: int, hidden_layers: int) -> list[int]:
    """Hidden widths for a tower whose layers halve down to ``embedding_dim``.

    >>> halving_widths(64, 3)
    [512, 256, 128]
    """
    return [embedding_dim * 2 ** (hidden_layers - i) for i in range(hidden_layers)]


class MLP:
    """ReLU stack ending in a plain affine layer."""

    def __init__(self, layers: list[tuple[ParamBlock, ParamBlock]]):
        for i, (w, b) in enumerate(layers):
            if w.values.ndim != 2 or b.values.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and layers[i - 1][0].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i}: input width {w.shape[0]} != previous output {layers[i - 1][0].shape[1]}"
                )
        self.layers = layers

    @classmethod
    def init(cls, prefix: str, widths: list[int], rng: np.random.Generator) -> MLP:
        layers = []
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            layers.append((
                ParamBlock(f"{prefix}/dense{i}/weight", glorot_uniform(rng, n_in, n_out)),
                ParamBlock(f"{prefix}/dense{i}/bias", np.zeros(n_out)),
            ))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def blocks(self) -> list[ParamBlock]:
        return [blk for pair in self.layers for blk in pair]

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"input width {x.shape[-1]} != {self.in_dim}")
        cache = []
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            z = h @ w.values + b.values
            cache.append((h, z))
            h = z if i == last else np.maximum(z, 0.0)
        return h, cache

    def backward(self, cache, dout: np.ndarray) -> np.ndarray:
        if cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        d = dout
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            w, b = self.layers[i]
            h, z = cache[i]
            if i != last:
                d = d * (z > 0)
            w.grad += h.T @ d
            b.grad += d.sum(axis=0)
            d = d @ w.values.T
        return d


def embed_forward(x: sp.csr_matrix, table: ParamBlock) -> np.ndarray:
    """Embedding lookup (or bag sum) as a sparse-dense product."""
    if x.shape[1] != table.shape[0]:
        raise ShapeError(f"{table.name}: input width {x.shape[1]} != table rows {table.shape[0]}")
    return np.asarray(x @ table.values)


def embed_backward(x: sp.csr_matrix, table: ParamBlock, dout: np.ndarray):
    # only rows referenced by x receive a nonzero gradient
    table.grad += np.asarray(x.T @ dout)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(state: AdamState, blocks: list[ParamBlock]):
    """One bias-corrected Adam update; gradients are zeroed afterwards.

    Raises NonFiniteGradientError before touching anything if any gradient
    is non-finite.
    """
    for blk in blocks:
        if not np.all(np.isfinite(blk.grad)):
            raise NonFiniteGradientError(blk.name)
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for blk in blocks:
        m = state.first_moment.get(blk.name)
        if m is None:
            m = state.first_moment[blk.name] = np.zeros_like(blk.values)
            state.second_moment[blk.name] = np.zeros_like(blk.values)
        v = state.second_moment[blk.name]
        if m.shape != blk.shape:
            raise ShapeError(f"moment shape {m.shape} != block {blk.name} {blk.shape}")
        g = blk.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        blk.values -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        blk.zero_grad()


def global_grad_norm(blocks: list[ParamBlock]) -> float:
    return float(np.sqrt(sum(float(np.sum(b.grad * b.grad)) for b in blocks)))


def clip_grad_norm(blocks: list[ParamBlock], max_norm: float) -> float:
    norm = global_grad_norm(blocks)
    if norm > max_norm:
        scale = max_norm / norm
        for b in blocks:
            b.grad *= scale
    return norm


def zero_grads(blocks: list[ParamBlock]):
    for b in blocks:
        b.zero_grad()


# Checkpoint container, all integers little-endian:
#   magic        8 bytes  b"MIRECKP1"
#   version      u32
#   header_len   u64
#   header       header_len bytes of UTF-8 JSON:
#                {"metadata": {...},
#                 "blocks": [{"name", "shape", "offset", "count"}, ...]}
#                offset/count are in float64 elements from the payload start
#   payload      float64 little-endian values, each block row-major
#   checksum     32 bytes, SHA-256 of every preceding byte
MAGIC = b"MIRECKP1"
FORMAT_VERSION = 1


def save_checkpoint(path, blocks: list[ParamBlock], metadata: dict | None = None):
    entries, chunks, offset = [], [], 0
    for blk in blocks:
        arr = np.ascontiguousarray(blk.values, dtype="<f8")
        entries.append({"name": blk.name, "shape": list(arr.shape), "offset": offset, "count": arr.size})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"metadata": metadata or {}, "blocks": entries}, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise ChecksumError(f"{path}: not a checkpoint file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")
    version, header_len = struct.unpack_from("<IQ", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ChecksumError(f"{path}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    header = json.loads(body[start : start + header_len])
    payload = np.frombuffer(body, dtype="<f8", offset=start + header_len)
    arrays = {}
    for e in header["blocks"]:
        arr = payload[e["offset"] : e["offset"] + e["count"]]
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(DTYPE)
    return arrays, header["metadata"]


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` w.r.t. array ``x`` (perturbed in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """||a - b|| / max(||a|| + ||b||, floor).

    The floor keeps blocks whose true gradient is exactly zero (e.g. a bias
    every softmax logit shares) from being judged on round-off alone.
    """
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = float(np.linalg.norm(np.ravel(a)) + np.linalg.norm(np.ravel(b)))
    return num / max(den, floor)
