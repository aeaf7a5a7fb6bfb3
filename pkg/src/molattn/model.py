"""The Molecule Attention Transformer network.

Embedding (27 -> d_model: 26 atom features plus the mask-token channel),
``n_layers`` post-norm encoder blocks whose self-attention mixes a
softmax term, a distance kernel and the adjacency matrix, masked global
mean pooling and a linear head.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .featurize import N_BOND_FEATURES, N_FEATURES, Batch, Kernel, distance_kernel
from .tensor import Tensor

N_INPUTS = N_FEATURES + 1

TASKS = ("regression", "binary", "node_pretrain")


class NumericError(FloatingPointError):
    """NaN/inf met inside the network."""


@dataclass
class MatConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    n_pff: int = 1
    lambda_a: float = 0.33
    lambda_d: float = 0.33
    lambda_g: float = 0.33
    kernel: str = "exp"
    dropout: float = 0.0
    adjacency_source: str = "A"
    task: str = "regression"
    ff_activation: str = "relu"
    leaky_slope: float = 0.0
    pool_dummy: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if min(self.lambda_a, self.lambda_d, self.lambda_g) < 0:
            raise ValueError("lambda weights must be non-negative")
        self.kernel = Kernel(self.kernel).value
        if self.adjacency_source not in ("A", "EdgeFeatures"):
            raise ValueError(f"unknown adjacency_source {self.adjacency_source!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.ff_activation not in ("relu", "tanh", "none"):
            raise ValueError(f"unknown ff_activation {self.ff_activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_dict(cls, d: dict) -> "MatConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: MatConfig, rng: np.random.Generator) -> dict:
    """Glorot-uniform weights, zero biases, unit LayerNorm gains."""
    params = {}

    def dense(name, fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.w"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), True, f"{name}.w")
        params[f"{name}.b"] = Tensor(np.zeros(fan_out), True, f"{name}.b")

    def norm(name, d):
        params[f"{name}.gamma"] = Tensor(np.ones(d), True, f"{name}.gamma")
        params[f"{name}.beta"] = Tensor(np.zeros(d), True, f"{name}.beta")

    d = cfg.d_model
    dense("embed", N_INPUTS, d)
    if cfg.adjacency_source == "EdgeFeatures":
        dense("edge", N_BOND_FEATURES, 1)
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}"
        for proj in ("q", "k", "v", "o"):
            dense(f"{p}.attn.{proj}", d, d)
        norm(f"{p}.ln1", d)
        for k in range(cfg.n_pff):
            dense(f"{p}.ff.{k}", d, d)
        norm(f"{p}.ln2", d)
    if cfg.task == "node_pretrain":
        dense("node_head", d, N_FEATURES)
    else:
        dense("head", d, 1)
    return params


def head_names(cfg_task: str) -> tuple:
    return ("node_head.w", "node_head.b") if cfg_task == "node_pretrain" else ("head.w", "head.b")


@dataclass
class ForwardResult:
    output: Tensor                 # [B] for graph tasks, [B, n, 26] for node_pretrain
    nodes: Tensor                  # final node embeddings [B, n, d]
    attention: Optional[list] = None


def structural_terms(batch: Batch, cfg: MatConfig):
    """Kernel-transformed distances g(D) and adjacency A, masked on padding."""
    if cfg.lambda_d != 0 and "zero" in batch.distance_sources:
        raise ValueError("zero-distance fallback is only valid with lambda_d == 0")
    gD = distance_kernel(batch.distance, cfg.kernel, batch.mask)
    A = batch.adjacency * batch.mask[:, None, :] * batch.mask[:, :, None]
    return gD, A


def _edge_matrix(batch: Batch, params: dict) -> Tensor:
    B, n = batch.features.shape[:2]
    e = T.relu(T.linear(Tensor(batch.bond_features), params["edge.w"], params["edge.b"]))
    e = T.reshape(e, (B, n, n))
    col = batch.mask[:, None, :].astype(float)
    return T.mul(e, col)


def molecule_attention(hid: Tensor, adjacency, gD, mask: np.ndarray, params: dict, prefix: str,
                       cfg: MatConfig, record: Optional[list] = None, layer: int = 0) -> Tensor:
    """Multi-head attention whose weights are la*softmax(QK^T/sqrt(dk)) + ld*g(D) + lg*A.

    ``adjacency`` is either an ndarray [B, n, n] or a Tensor (learned edge
    matrix); ``gD`` is already kernel-transformed.
    """
    B, n, d = hid.shape
    H, dk = cfg.n_heads, cfg.d_k

    def heads(x):
        return T.transpose(T.reshape(x, (B, n, H, dk)), (0, 2, 1, 3))

    v = heads(T.linear(hid, params[f"{prefix}.v.w"], params[f"{prefix}.v.b"]))
    col_mask = mask[:, None, None, :]
    terms = []
    soft = None
    if cfg.lambda_a != 0 or record is not None:
        q = heads(T.linear(hid, params[f"{prefix}.q.w"], params[f"{prefix}.q.b"]))
        k = heads(T.linear(hid, params[f"{prefix}.k.w"], params[f"{prefix}.k.b"]))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        soft = T.masked_softmax_rows(scores, col_mask)
        if cfg.lambda_a != 0:
            terms.append(T.scale(soft, cfg.lambda_a))
    const = np.zeros((B, 1, n, n))
    if cfg.lambda_d != 0:
        const = const + cfg.lambda_d * gD[:, None]
    adj_is_tensor = isinstance(adjacency, Tensor)
    if cfg.lambda_g != 0 and not adj_is_tensor:
        const = const + cfg.lambda_g * np.asarray(adjacency)[:, None]
    if cfg.lambda_d != 0 or (cfg.lambda_g != 0 and not adj_is_tensor):
        terms.append(Tensor(const))
    if cfg.lambda_g != 0 and adj_is_tensor:
        terms.append(T.scale(T.reshape(adjacency, (B, 1, n, n)), cfg.lambda_g))
    if not terms:
        attn = Tensor(np.zeros((B, 1, n, n)))
    else:
        attn = terms[0]
        for term in terms[1:]:
            attn = T.add(attn, term)
    bad = ~np.isfinite(attn.data)
    if bad.any():
        b_idx, h_idx = np.argwhere(bad)[0][:2]
        raise NumericError(f"non-finite attention weight in layer {layer}, head {int(h_idx)} (sample {int(b_idx)})")
    if record is not None:
        adj_data = adjacency.data if adj_is_tensor else np.asarray(adjacency)
        record.append({
            "softmax": soft.data.copy(),
            "distance": np.broadcast_to(gD[:, None], (B, H, n, n)).copy(),
            "adjacency": np.broadcast_to(adj_data[:, None], (B, H, n, n)).copy(),
            "composite": np.broadcast_to(attn.data, (B, H, n, n)).copy(),
        })
    out = T.matmul(attn, v)                                   # [B, H, n, dk]
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, n, d))
    return T.linear(out, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"])


def _feed_forward(x: Tensor, params: dict, prefix: str, cfg: MatConfig, rng, train: bool) -> Tensor:
    for k in range(cfg.n_pff):
        x = T.linear(x, params[f"{prefix}.{k}.w"], params[f"{prefix}.{k}.b"])
        last = k == cfg.n_pff - 1
        if not last:
            x = T.leaky_relu(x, cfg.leaky_slope)
        elif cfg.ff_activation == "relu":
            x = T.leaky_relu(x, cfg.leaky_slope)
        elif cfg.ff_activation == "tanh":
            x = T.tanh(x)
        x = T.dropout(x, cfg.dropout, rng, train)
    return x


def model_inputs(batch: Batch) -> np.ndarray:
    return np.concatenate([batch.features, batch.node_masked[..., None].astype(float)], axis=-1)


def mat_forward(batch: Batch, params: dict, cfg: MatConfig, mode: str = "eval",
                rng: Optional[np.random.Generator] = None, record: bool = False) -> ForwardResult:
    """Run the network on a batch.

    Returns per-molecule outputs (raw value for regression, a logit for
    binary) or per-node 26-way logits for ``node_pretrain``.  With
    ``record`` the per-layer attention addends are returned as well.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    gD, A = structural_terms(batch, cfg)
    adjacency = _edge_matrix(batch, params) if cfg.adjacency_source == "EdgeFeatures" else A
    records = [] if record else None

    x = T.linear(Tensor(model_inputs(batch)), params["embed.w"], params["embed.b"])
    x = T.dropout(x, cfg.dropout, rng, train)
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}"
        att = molecule_attention(x, adjacency, gD, batch.mask, params, f"{p}.attn", cfg,
                                 records, layer)
        x = T.layer_norm(T.add(x, T.dropout(att, cfg.dropout, rng, train)),
                         params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"], cfg.ln_eps)
        ff = _feed_forward(x, params, f"{p}.ff", cfg, rng, train)
        x = T.layer_norm(T.add(x, T.dropout(ff, cfg.dropout, rng, train)),
                         params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"], cfg.ln_eps)

    if cfg.task == "node_pretrain":
        out = T.linear(x, params["node_head.w"], params["node_head.b"])
    else:
        pool_mask = batch.mask if cfg.pool_dummy else batch.mask & ~batch.dummy
        pooled = T.masked_mean_pool(x, pool_mask)
        out = T.reshape(T.linear(pooled, params["head.w"], params["head.b"]), (len(batch),))
    if not np.all(np.isfinite(out.data)):
        raise NumericError("non-finite model output")
    return ForwardResult(out, x, records)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MATW"
VERSION = 1


@dataclass
class Checkpoint:
    config: MatConfig
    params: dict                              # name -> ndarray
    standardization: Optional[tuple] = None   # (mean, std) of regression targets
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_params(cls, cfg, params, standardization=None, meta=None) -> "Checkpoint":
        return cls(cfg, {k: v.data.copy() for k, v in params.items()}, standardization, dict(meta or {}))

    def tensors(self) -> dict:
        return {k: Tensor(np.array(v, dtype=np.float64), True, k) for k, v in self.params.items()}

    def save(self, path) -> None:
        blob = json.dumps({
            "config": self.config.to_dict(),
            "standardization": list(self.standardization) if self.standardization else None,
            "meta": self.meta,
        }, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", len(self.params)))
            for name in sorted(self.params):
                arr = np.asarray(self.params[name])
                encoded = name.encode()
                fh.write(struct.pack("<H", len(encoded)))
                fh.write(encoded)
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[:4] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack_from("<I", data, 8)
        off = 12
        header = json.loads(data[off:off + blob_len])
        off += blob_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + name_len].decode()
            off += name_len
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if name in params:
                raise ValueError(f"{path}: parameter {name!r} appears twice")
            params[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 4 * size
        std = header.get("standardization")
        return cls(MatConfig.from_dict(header["config"]), params,
                   tuple(std) if std else None, header.get("meta", {}))


# ---------------------------------------------------------------- attention record files

def write_attention_file(path, array: np.ndarray, kind: str) -> None:
    """layers x heads x n x n as row-major little-endian f32 after a text header line."""
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim != 4:
        raise ValueError("attention record must be 4-D (layers, heads, n, n)")
    L, H, n, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"MATATTN kind={kind} layers={L} heads={H} n={n} dtype=f32le\n".encode())
        fh.write(arr.tobytes())


def read_attention_file(path) -> tuple:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    fields_ = dict(tok.split("=") for tok in raw[:nl].decode().split()[1:])
    shape = (int(fields_["layers"]), int(fields_["heads"]), int(fields_["n"]), int(fields_["n"]))
    arr = np.frombuffer(raw, dtype="<f4", offset=nl + 1).reshape(shape)
    return fields_["kind"], arr.astype(np.float64)
