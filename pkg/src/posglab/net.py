"""Causal transformer backbone, exact-gradient losses for both heads, an Adam
optimizer with L2 weight decay and global-norm clipping, and checkpoints.

Everything runs in float64 on the CPU.  Parameters live in numpy arrays
(``ModelParams``); torch is only used for the batched forward/backward.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import BOS_ID, EOS_ID, PAD_ID, SPECIAL_POS_ID, PosPartition

MLE = "mle"
POSG = "posg"
HEAD_KINDS = (MLE, POSG)

DTYPE = torch.float64
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    pos_count: int
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 64
    d_ff: int = 256
    context_len: int = 64
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "pos_count", "n_layers", "n_heads", "d_model", "d_ff", "context_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.context_len, d)}
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "w_qkv": (d, 3 * d), p + "b_qkv": (3 * d,),
            p + "w_o": (d, d), p + "b_o": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w_ff1": (d, f), p + "b_ff1": (f,),
            p + "w_ff2": (f, d), p + "b_ff2": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,),
                   "tok_out": (cfg.vocab_size, d), "pos_out": (cfg.pos_count, d)})
    return shapes


@dataclass
class ModelParams:
    """Named float64 tensors; ``tok_out`` rows are the token output embeddings
    w_x and ``pos_out`` rows the POS output embeddings o_rho."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if list(shapes) != list(self.tensors):
            raise ValueError("parameter names do not match the config")
        for name, shape in shapes.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {shape}")
            if arr.dtype != np.float64:
                raise ValueError(f"{name}: dtype must be float64")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def tok_out(self) -> np.ndarray:
        return self.tensors["tok_out"]

    @property
    def pos_out(self) -> np.ndarray:
        return self.tensors["pos_out"]

    def n_parameters(self) -> int:
        return sum(a.size for a in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.tensors.values())


def init_params(cfg: ModelConfig, std: float = 0.02) -> ModelParams:
    gen = torch.Generator().manual_seed(cfg.seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            t = torch.ones(shape, dtype=DTYPE)
        elif leaf.startswith("b_") or leaf.endswith("_b"):
            t = torch.zeros(shape, dtype=DTYPE)
        else:
            t = torch.randn(shape, generator=gen, dtype=DTYPE) * std
        tensors[name] = t.numpy()
    return ModelParams(cfg, tensors)


# --------------------------------------------------------------------------
# forward


def _dropout(x: torch.Tensor, rate: float, gen: torch.Generator | None) -> torch.Tensor:
    if gen is None or rate == 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def _hidden(t: dict[str, torch.Tensor], cfg: ModelConfig, ids: torch.Tensor,
            gen: torch.Generator | None = None) -> torch.Tensor:
    """(B, T) ids -> (B, T, d) final hidden states.  ``gen`` enables dropout."""
    B, T = ids.shape
    d, nh = cfg.d_model, cfg.n_heads
    dh = d // nh
    rate = cfg.dropout_rate
    x = t["tok_emb"][ids] + t["pos_emb"][:T]
    x = _dropout(x, rate, gen)
    causal = torch.ones(T, T, dtype=torch.bool).triu(1)
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        a = F.layer_norm(x, (d,), t[p + "ln1_g"], t[p + "ln1_b"], LN_EPS)
        qkv = a @ t[p + "w_qkv"] + t[p + "b_qkv"]
        q, k, v = (z.reshape(B, T, nh, dh).transpose(1, 2) for z in qkv.split(d, dim=-1))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        att = torch.softmax(scores.masked_fill(causal, float("-inf")), dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + _dropout(y @ t[p + "w_o"] + t[p + "b_o"], rate, gen)
        f = F.layer_norm(x, (d,), t[p + "ln2_g"], t[p + "ln2_b"], LN_EPS)
        f = F.gelu(f @ t[p + "w_ff1"] + t[p + "b_ff1"]) @ t[p + "w_ff2"] + t[p + "b_ff2"]
        x = x + _dropout(f, rate, gen)
    return F.layer_norm(x, (d,), t["lnf_g"], t["lnf_b"], LN_EPS)


def _as_torch(params: ModelParams, requires_grad: bool = False) -> dict[str, torch.Tensor]:
    out = {}
    for k, v in params.tensors.items():
        tv = torch.from_numpy(v)
        if requires_grad:
            tv = tv.clone().requires_grad_(True)
        out[k] = tv
    return out


def _check_ids(cfg: ModelConfig, ids: np.ndarray) -> None:
    if ids.shape[-1] > cfg.context_len:
        raise ValueError(f"input length {ids.shape[-1]} exceeds context_len {cfg.context_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("token id out of range")


def forward(params: ModelParams, tokens: Sequence[int], train_mode: bool = False,
            generator: torch.Generator | None = None) -> np.ndarray:
    """Hidden states h_0..h_{T-1} (shape (T, d_model)); h_t summarises tokens[:t+1]."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("tokens must be a non-empty 1-d sequence")
    return forward_batch(params, ids[None, :], train_mode, generator)[0]


def forward_batch(params: ModelParams, ids: np.ndarray, train_mode: bool = False,
                  generator: torch.Generator | None = None) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    _check_ids(params.config, ids)
    if train_mode and generator is None:
        generator = torch.Generator().manual_seed(params.config.seed)
    with torch.no_grad():
        h = _hidden(_as_torch(params), params.config, torch.from_numpy(ids),
                    generator if train_mode else None)
    return h.numpy()


# --------------------------------------------------------------------------
# batches and losses


class GoldConsistencyError(ValueError):
    """A training pair (x, rho) with x outside V_rho."""


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray      # (B, T) int64
    targets: np.ndarray     # (B, T) int64
    target_pos: np.ndarray  # (B, T) int64
    mask: np.ndarray        # (B, T) bool

    @property
    def n_targets(self) -> int:
        return int(self.mask.sum())


Window = tuple[np.ndarray, np.ndarray, np.ndarray]


def make_windows(encoded: Sequence[tuple[Sequence[int], Sequence[int]]], context_len: int) -> list[Window]:
    """Split each ``[BOS] + seq + [EOS]`` into contiguous non-overlapping
    windows of at most ``context_len`` prediction steps."""
    windows = []
    for toks, tags in encoded:
        s = np.array([BOS_ID, *toks, EOS_ID], dtype=np.int64)
        sp = np.array([SPECIAL_POS_ID, *tags, SPECIAL_POS_ID], dtype=np.int64)
        for start in range(0, len(s) - 1, context_len):
            stop = min(start + context_len, len(s) - 1)
            windows.append((s[start:stop], s[start + 1:stop + 1], sp[start + 1:stop + 1]))
    return windows


def collate(windows: Sequence[Window]) -> Batch:
    T = max(len(w[0]) for w in windows)
    B = len(windows)
    inputs = np.full((B, T), PAD_ID, dtype=np.int64)
    targets = np.full((B, T), PAD_ID, dtype=np.int64)
    tpos = np.full((B, T), SPECIAL_POS_ID, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    for b, (i, t, p) in enumerate(windows):
        n = len(i)
        inputs[b, :n], targets[b, :n], tpos[b, :n], mask[b, :n] = i, t, p, True
    return Batch(inputs, targets, tpos, mask)


def check_gold_consistency(batch: Batch, partition: PosPartition) -> None:
    for b, t in zip(*np.nonzero(batch.mask)):
        x, rho = int(batch.targets[b, t]), int(batch.target_pos[b, t])
        if not partition.contains(x, rho):
            raise GoldConsistencyError(f"row {b}, position {t}: token {x} not in partition cell {rho}")


def _nll_sum(t: dict[str, torch.Tensor], cfg: ModelConfig, batch: Batch, head_kind: str,
             cells: Sequence[torch.Tensor] | None, gen: torch.Generator | None) -> torch.Tensor:
    """Sum over non-padded targets of the per-token negative log-likelihood."""
    H = _hidden(t, cfg, torch.from_numpy(batch.inputs), gen)
    m = torch.from_numpy(batch.mask)
    H = H[m]
    gold = torch.from_numpy(batch.targets)[m]
    W = t["tok_out"]
    if head_kind == MLE:
        logits = H @ W.T
        return (torch.logsumexp(logits, -1) - logits.gather(1, gold[:, None])[:, 0]).sum()
    if head_kind != POSG:
        raise ValueError(f"unknown head kind {head_kind!r}")
    gold_pos = torch.from_numpy(batch.target_pos)[m]
    pos_logits = H @ t["pos_out"].T
    total = (torch.logsumexp(pos_logits, -1) - pos_logits.gather(1, gold_pos[:, None])[:, 0]).sum()
    gold_logit = (H * W[gold]).sum(-1)
    for rho in torch.unique(gold_pos).tolist():
        sel = gold_pos == rho
        lse = torch.logsumexp(H[sel] @ W[cells[rho]].T, -1)
        total = total + (lse - gold_logit[sel]).sum()
    return total


def _cells(partition: PosPartition | None) -> list[torch.Tensor] | None:
    if partition is None:
        return None
    return [torch.from_numpy(np.array(c)) for c in partition.members]


def loss_and_grads(params: ModelParams, batch: Batch, head_kind: str,
                   partition: PosPartition | None = None,
                   generator: torch.Generator | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-token loss of the MLE or POS-guided objective and its exact
    gradient.  Dropout is active only when ``generator`` is given."""
    if head_kind == POSG:
        if partition is None:
            raise ValueError("POSG loss needs the POS partition")
        check_gold_consistency(batch, partition)
    _check_ids(params.config, batch.inputs)
    t = _as_torch(params, requires_grad=True)
    loss = _nll_sum(t, params.config, batch, head_kind, _cells(partition), generator) / batch.n_targets
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss {loss.item()}")
    loss.backward()
    return loss.item(), {k: np.zeros_like(params.tensors[k]) if v.grad is None else v.grad.numpy()
                         for k, v in t.items()}


def evaluate_loss(params: ModelParams, windows: Sequence[Window], head_kind: str,
                  partition: PosPartition | None = None, batch_size: int = 64) -> float:
    """Mean per-token loss (no dropout) over ``windows``."""
    t = _as_torch(params)
    cells = _cells(partition)
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(windows), batch_size):
            batch = collate(windows[i:i + batch_size])
            if head_kind == POSG:
                check_gold_consistency(batch, partition)
            total += _nll_sum(t, params.config, batch, head_kind, cells, None).item()
            count += batch.n_targets
    return total / count


# --------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.25
    weight_decay: float = 1e-3
    batch_size: int = 12


@dataclass
class OptimizerState:
    hparams: AdamConfig
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_update(t: dict[str, torch.Tensor], state: OptimizerState) -> float:
    """One in-place Adam step from the ``.grad`` fields.  Gradients are
    clipped by global norm, then L2 decay is added.  Returns the pre-clip norm."""
    hp = state.hparams
    with torch.no_grad():
        grads = {k: p.grad for k, p in t.items() if p.grad is not None}
        norm = torch.sqrt(sum((g * g).sum() for g in grads.values())).item()
        scale = hp.clip_norm / (norm + 1e-6) if hp.clip_norm > 0 and norm > hp.clip_norm else 1.0
        state.step += 1
        c1 = 1.0 - hp.beta1 ** state.step
        c2 = 1.0 - hp.beta2 ** state.step
        for k, g in grads.items():
            p = t[k]
            g = g * scale + hp.weight_decay * p
            if k not in state.m:
                state.m[k] = torch.zeros_like(p)
                state.v[k] = torch.zeros_like(p)
            m, v = state.m[k], state.v[k]
            m.mul_(hp.beta1).add_(g, alpha=1 - hp.beta1)
            v.mul_(hp.beta2).addcmul_(g, g, value=1 - hp.beta2)
            p.sub_(hp.lr * (m / c1) / ((v / c2).sqrt() + hp.eps))
            p.grad = None
    return norm


# --------------------------------------------------------------------------
# training


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: ModelParams, log: list[dict]):
        super().__init__(message)
        self.last_good = last_good
        self.log = log


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    optimizer: OptimizerState


def train(config: ModelConfig, train_data: Sequence[tuple[Sequence[int], Sequence[int]]],
          head_kind: str, epochs: int, partition: PosPartition | None = None,
          valid_data: Sequence[tuple[Sequence[int], Sequence[int]]] | None = None,
          opt: AdamConfig = AdamConfig(), params: ModelParams | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Train for ``epochs`` passes.  The log has an epoch-0 entry holding the
    initial validation loss, then one entry per epoch."""
    torch.set_num_threads(1)
    params = init_params(config) if params is None else params.copy()
    windows = make_windows(train_data, config.context_len)
    valid_windows = make_windows(valid_data, config.context_len) if valid_data else None
    cells = _cells(partition)
    if head_kind == POSG:
        if partition is None:
            raise ValueError("POSG training needs the POS partition")
        for i in range(0, len(windows), 256):
            check_gold_consistency(collate(windows[i:i + 256]), partition)

    state = OptimizerState(opt)
    dropout_gen = torch.Generator().manual_seed(config.seed + 1)
    log: list[dict] = []

    def record(entry: dict) -> None:
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)

    t0 = time.perf_counter()
    valid0 = evaluate_loss(params, valid_windows, head_kind, partition) if valid_windows else None
    record({"epoch": 0, "train_loss": None, "valid_loss": valid0,
            "wall_seconds": time.perf_counter() - t0})

    last_good = params.copy()
    t = _as_torch(params)  # shares memory with params.tensors
    for p in t.values():
        p.requires_grad_(True)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, epoch]).permutation(len(windows))
        total, count = 0.0, 0
        for i in range(0, len(order), opt.batch_size):
            batch = collate([windows[j] for j in order[i:i + opt.batch_size]])
            nll = _nll_sum(t, config, batch, head_kind, cells, dropout_gen)
            loss = nll / batch.n_targets
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {state.step}",
                                       last_good, log)
            loss.backward()
            adam_update(t, state)
            total += nll.item()
            count += batch.n_targets
        if not params.all_finite():
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch}", last_good, log)
        with torch.no_grad():
            valid = evaluate_loss(params, valid_windows, head_kind, partition) if valid_windows else None
        record({"epoch": epoch, "train_loss": total / count, "valid_loss": valid,
                "wall_seconds": time.perf_counter() - t0})
        last_good = params.copy()
    for p in t.values():
        p.requires_grad_(False)
    return TrainResult(params, log, state)


# --------------------------------------------------------------------------
# checkpoints

MAGIC = b"POSGCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(params: ModelParams, version: int = FORMAT_VERSION) -> bytes:
    """Magic, u32 version, u32-length config JSON, u32 tensor count, then per
    tensor: u32-length name, u32 ndim, u32 dims, little-endian float64 data."""
    if not params.all_finite():
        raise ValueError("refusing to checkpoint non-finite parameters")
    out = io.BytesIO()
    out.write(MAGIC)
    cfg = params.config.to_json().encode()
    out.write(struct.pack("<II", version, len(cfg)))
    out.write(cfg)
    out.write(struct.pack("<I", len(params.tensors)))
    for name, arr in params.tensors.items():
        nb = name.encode()
        out.write(struct.pack("<I", len(nb)) + nb)
        out.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return out.getvalue()


def load_checkpoint(data: bytes, expected_version: int = FORMAT_VERSION) -> tuple[ModelParams, ModelConfig]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedCheckpoint(f"checkpoint truncated at byte {len(view)} (needed {pos + n})")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("bad magic bytes")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != expected_version:
        raise CheckpointVersionError(f"checkpoint version {version}, reader expects {expected_version}")
    config = ModelConfig.from_json(bytes(take(cfg_len)).decode())
    expected = param_shapes(config)
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        if name not in expected or expected[name] != tuple(shape):
            raise CheckpointShapeError(f"tensor {name!r} shape {shape} does not match the embedded config")
        tensors[name] = arr
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last tensor")
    if list(tensors) != list(expected):
        raise CheckpointShapeError("tensor set does not match the embedded config")
    return ModelParams(config, tensors), config
