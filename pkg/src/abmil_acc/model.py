"""ABMIL network: MLP instance encoder, non-gated attention pooling, BCE loss.

Pooling follows the standard non-gated form::

    e_i = w . tanh(V z_i)      a = softmax(e)      m = sum_i a_i z_i
    y'  = sigmoid(c . m + b)
"""
from __future__ import annotations

import copy
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import graphcore as gc
from .graphcore import LeafKind, Tape, Var


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass
class ModelConfig:
    input_dim: int
    hidden: tuple[int, ...] = (64, 32)
    attn_dim: int = 16
    batch_norm: bool = False
    final_activation: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.input_dim < 1 or not self.hidden or min(self.hidden) < 1 or self.attn_dim < 1:
            raise ValueError(f"invalid model dimensions: {self}")

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


@dataclass
class EncoderParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    norms: list[BatchNorm] | None = None
    final_activation: bool = True

    def __post_init__(self):
        for k in range(1, len(self.weights)):
            if self.weights[k].shape[0] != self.weights[k - 1].shape[1]:
                raise gc.ShapeError(
                    f"encoder layer {k} expects width {self.weights[k].shape[0]}, "
                    f"previous layer outputs {self.weights[k - 1].shape[1]}"
                )

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1]

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Trainable tensors in declaration order."""
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"enc.{k}.W"] = w
            out[f"enc.{k}.b"] = b
            if self.norms is not None:
                out[f"enc.{k}.gamma"] = self.norms[k].gamma
                out[f"enc.{k}.beta"] = self.norms[k].beta
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for k, bn in enumerate(self.norms or []):
            out[f"enc.{k}.running_mean"] = bn.running_mean
            out[f"enc.{k}.running_var"] = bn.running_var
        return out

    def replace(self, tensors: dict[str, np.ndarray]) -> EncoderParams:
        new = copy.deepcopy(self)
        for k in range(len(new.weights)):
            new.weights[k] = tensors.get(f"enc.{k}.W", new.weights[k])
            new.biases[k] = tensors.get(f"enc.{k}.b", new.biases[k])
            if new.norms is not None:
                new.norms[k].gamma = tensors.get(f"enc.{k}.gamma", new.norms[k].gamma)
                new.norms[k].beta = tensors.get(f"enc.{k}.beta", new.norms[k].beta)
        return new


@dataclass
class PoolerParams:
    V: np.ndarray  # [L, M]
    w: np.ndarray  # [L]
    c: np.ndarray  # [M]
    b: np.ndarray  # [1]

    def __post_init__(self):
        L, M = self.V.shape
        if self.w.shape != (L,) or self.c.shape != (M,) or self.b.shape != (1,):
            raise gc.ShapeError(
                f"pooler shapes inconsistent: V {self.V.shape}, w {self.w.shape}, "
                f"c {self.c.shape}, b {self.b.shape}"
            )

    @property
    def feature_dim(self) -> int:
        return self.V.shape[1]

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {"pool.V": self.V, "pool.w": self.w, "pool.c": self.c, "pool.b": self.b}

    def replace(self, tensors: dict[str, np.ndarray]) -> PoolerParams:
        cur = self.named_tensors()
        cur.update({k: v for k, v in tensors.items() if k in cur})
        return PoolerParams(*(cur[k].copy() for k in ("pool.V", "pool.w", "pool.c", "pool.b")))


@dataclass
class ParamSet:
    encoder: EncoderParams
    pooler: PoolerParams

    def __post_init__(self):
        if self.encoder.output_dim != self.pooler.feature_dim:
            raise gc.ShapeError(
                f"encoder outputs {self.encoder.output_dim} features, "
                f"pooler expects {self.pooler.feature_dim}"
            )

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {**self.encoder.named_tensors(), **self.pooler.named_tensors()}

    def copy(self) -> ParamSet:
        return copy.deepcopy(self)

    def n_parameters(self) -> int:
        return int(np.sum([t.size for t in self.named_tensors().values()]))


@dataclass
class BagForwardResult:
    bag_score: float
    attention_weights: np.ndarray
    features: np.ndarray
    output: Var = field(repr=False)
    attention: Var = field(repr=False)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; BN starts at identity."""

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    widths = (config.input_dim, *config.hidden)
    weights, biases, norms = [], [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(uniform((fan_in, fan_out), fan_in))
        biases.append(uniform((fan_out,), fan_in))
        norms.append(BatchNorm(np.ones(fan_out), np.zeros(fan_out), np.zeros(fan_out),
                               np.ones(fan_out), config.bn_momentum, config.bn_eps))
    encoder = EncoderParams(weights, biases, norms if config.batch_norm else None,
                            config.final_activation)
    M, L = config.feature_dim, config.attn_dim
    pooler = PoolerParams(uniform((L, M), M), uniform((L,), L), uniform((M,), M), uniform((1,), M))
    return ParamSet(encoder, pooler)


def _bind(tape: Tape | None, name: str, value: np.ndarray, kind: LeafKind):
    return value if tape is None else tape.bind(name, value, kind)


def encode(theta: EncoderParams, X, mode: Mode = Mode.TRAIN, tape: Tape | None = None,
           kind: LeafKind = LeafKind.PARAMETER) -> Var:
    """Map instances ``X`` [k, input_dim] to features [k, M].

    With a tape, the encoder tensors are bound on it under their names with
    leaf kind ``kind`` and ``X`` enters as a constant. Train-mode batch norm
    normalizes with batch statistics and updates the running statistics in
    ``theta``; Infer mode uses the running statistics and changes nothing.
    """
    X = X.value if isinstance(X, Var) else np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty instance batch" if X.ndim == 2 else
                         f"encode: expected [k, input_dim], got shape {X.shape}")
    if X.shape[1] != theta.weights[0].shape[0]:
        raise gc.ShapeError(
            f"encode: instances have {X.shape[1]} features, encoder expects {theta.weights[0].shape[0]}"
        )
    h = tape.constant(X) if tape is not None else gc.Var(X)
    last = len(theta.weights) - 1
    for k, (W, b) in enumerate(zip(theta.weights, theta.biases)):
        h = gc.add(gc.matmul(h, _bind(tape, f"enc.{k}.W", W, kind)),
                   _bind(tape, f"enc.{k}.b", b, kind))
        if theta.norms is not None:
            h = _batchnorm(theta.norms[k], h, mode, tape, k, kind)
        if k < last or theta.final_activation:
            h = gc.relu(h)
    return h


def _batchnorm(bn: BatchNorm, h: Var, mode: Mode, tape, k: int, kind) -> Var:
    if mode is Mode.TRAIN:
        xhat, mu, var = gc.batchnorm(h, bn.eps)
        n = h.shape[0]
        unbiased = var * n / (n - 1) if n > 1 else var
        m = bn.momentum
        bn.running_mean = (1 - m) * bn.running_mean + m * mu
        bn.running_var = (1 - m) * bn.running_var + m * unbiased
    else:
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
        xhat = gc.mul(gc.add(h, -bn.running_mean), inv_std)
    return gc.add(gc.mul(xhat, _bind(tape, f"enc.{k}.gamma", bn.gamma, kind)),
                  _bind(tape, f"enc.{k}.beta", bn.beta, kind))


def attention_pool(phi: PoolerParams, Z, tape: Tape | None = None,
                   kind: LeafKind = LeafKind.PARAMETER) -> BagForwardResult:
    """Attention-weighted pooling of features ``Z`` [n, M] and bag score."""
    if not isinstance(Z, Var):
        Z = tape.constant(Z) if tape is not None else gc.Var(gc.tensor(Z))
    if Z.value.ndim != 2 or Z.shape[0] == 0:
        raise gc.ShapeError(f"attention_pool: expected features [n, M], got shape {Z.shape}")
    if Z.shape[1] != phi.feature_dim:
        raise gc.ShapeError(
            f"attention_pool: features have shape {Z.shape}, V has shape {phi.V.shape}"
        )
    V = _bind(tape, "pool.V", phi.V, kind)
    hidden = gc.tanh(gc.matmul(Z, gc.transpose(V)))
    logits = gc.matmul(hidden, _bind(tape, "pool.w", phi.w, kind))
    a = gc.softmax(logits, axis=0)
    m = gc.matmul(a, Z)
    score = gc.sigmoid(gc.add(gc.matmul(m, _bind(tape, "pool.c", phi.c, kind)),
                              _bind(tape, "pool.b", phi.b, kind)))
    return BagForwardResult(float(score.value.reshape(())), a.value, Z.value, score, a)


def bce_loss(score, y) -> Var:
    if isinstance(score, BagForwardResult):
        score = score.output
    if not isinstance(score, Var):
        score = gc.Var(gc.tensor(np.reshape(score, (1,))))
    return gc.bce(score, y)


def bag_label(instance_labels: Sequence[int]) -> int:
    labels = np.asarray(instance_labels)
    if labels.size == 0:
        raise ValueError("bag_label: empty instance label list")
    return int(np.any(labels != 0))


def forward(params: ParamSet, X, mode: Mode = Mode.INFER) -> BagForwardResult:
    """Untaped bag forward pass."""
    return attention_pool(params.pooler, encode(params.encoder, X, mode))


# ---------------------------------------------------------------- serialization
# Binary layout, little-endian: u32 tensor count, then per tensor u32 ndim and
# u32 dims; then every tensor's float64 payload in the same order. A text
# manifest next to the file lists names and shapes.


def _write_tensors(path: Path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(tensors)))
        for t in tensors.values():
            fh.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def _read_tensors(path: Path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError(f"{path}: truncated header at byte {pos}")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    (count,) = take("<I")
    shapes = []
    for _ in range(count):
        (ndim,) = take("<I")
        shapes.append(take(f"<{ndim}I"))
    out = []
    for shape in shapes:
        n = int(np.prod(shape, dtype=np.int64))
        if pos + 8 * n > len(data):
            raise ValueError(f"{path}: payload truncated at byte {pos}, needs {8 * n} more bytes")
        out.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape))
        pos += 8 * n
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes after payload")
    return out


def write_tensor_file(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    _write_tensors(path, tensors)
    lines = [f"{name}\t{'x'.join(map(str, t.shape))}" for name, t in tensors.items()]
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n")


def read_tensor_file(path) -> dict[str, np.ndarray]:
    path = Path(path)
    names = [ln.split("\t")[0] for ln in path.with_suffix(".txt").read_text().splitlines() if ln.strip()]
    tensors = _read_tensors(path)
    if len(names) != len(tensors):
        raise ValueError(f"{path}: manifest lists {len(names)} tensors, file holds {len(tensors)}")
    return dict(zip(names, tensors))


def save_params(params: ParamSet, path) -> None:
    tensors = {**params.named_tensors(), **params.encoder.named_buffers()}
    if params.encoder.norms is not None:
        # eps/momentum travel in the payload so checkpoints round-trip exactly.
        bn = params.encoder.norms[0]
        tensors["enc.bn_config"] = np.array([bn.eps, bn.momentum])
    tensors["enc.final_activation"] = np.array([1.0 if params.encoder.final_activation else 0.0])
    write_tensor_file(path, tensors)


def load_params(path) -> ParamSet:
    t = read_tensor_file(path)
    n_layers = len([k for k in t if k.startswith("enc.") and k.endswith(".W")])
    weights = [t[f"enc.{k}.W"] for k in range(n_layers)]
    biases = [t[f"enc.{k}.b"] for k in range(n_layers)]
    norms = None
    if "enc.bn_config" in t:
        eps, momentum = t["enc.bn_config"]
        norms = [BatchNorm(t[f"enc.{k}.gamma"], t[f"enc.{k}.beta"], t[f"enc.{k}.running_mean"],
                           t[f"enc.{k}.running_var"], float(momentum), float(eps))
                 for k in range(n_layers)]
    encoder = EncoderParams(weights, biases, norms, bool(t["enc.final_activation"][0]))
    pooler = PoolerParams(t["pool.V"], t["pool.w"], t["pool.c"], t["pool.b"])
    return ParamSet(encoder, pooler)
