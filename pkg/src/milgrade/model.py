"""Class-specific gated-attention MIL head.

Each patch embedding h_i is projected to z_i = act(W_proj h_i + b_proj). A shared
gated branch g_i = tanh(V z_i) * sigmoid(U z_i) is scored per class with
w_attn[c], normalised over patches by softmax, and the resulting weights pool
z into one bag representation per class. Class c's logit is its own linear head
applied to its own bag representation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from milgrade.errors import ContractError, DimensionError, FormatError
from milgrade.numerics import cross_entropy_from_logits, softmax

ACTIVATIONS = ("linear", "rectified")
BLOCKS = ("W_proj", "b_proj", "V", "U", "w_attn", "W_clf", "b_clf")

_MAGIC = b"MILP"
_VERSION = 1


@dataclass(frozen=True)
class MilConfig:
    input_dim: int
    proj_dim: int = 512
    attn_dim: int = 256
    n_classes: int = 5
    proj_activation: str = "rectified"

    def __post_init__(self):
        if min(self.input_dim, self.proj_dim, self.attn_dim) < 1:
            raise ContractError(f"all dimensions must be >= 1: {self}")
        if self.n_classes < 2:
            raise ContractError("need at least two classes")
        if self.proj_activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.proj_activation!r}")


@dataclass
class MilParams:
    W_proj: np.ndarray
    b_proj: np.ndarray
    V: np.ndarray
    U: np.ndarray
    w_attn: np.ndarray
    W_clf: np.ndarray
    b_clf: np.ndarray
    config: MilConfig = field(repr=False)

    def blocks(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in BLOCKS}

    def replace(self, **arrays) -> "MilParams":
        kw = self.blocks()
        kw.update(arrays)
        return MilParams(config=self.config, **kw)

    def copy(self) -> "MilParams":
        return MilParams(config=self.config, **{k: v.copy() for k, v in self.blocks().items()})

    def zeros_like(self) -> "MilParams":
        return MilParams(config=self.config, **{k: np.zeros_like(v) for k, v in self.blocks().items()})


@dataclass
class Bag:
    slide_id: str
    patient_id: str
    embeddings: np.ndarray
    coords: np.ndarray
    patch_size: int = 448
    label: Optional[int] = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        if self.embeddings.ndim != 2:
            raise DimensionError(f"bag embeddings must be N x D, got {self.embeddings.shape}")
        if len(self.coords) != len(self.embeddings):
            raise ContractError(
                f"bag {self.slide_id}: {len(self.coords)} coords for {len(self.embeddings)} embeddings"
            )

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class MilOutput:
    logits: np.ndarray  # (K,)
    attention: np.ndarray  # (N, K), columns sum to one
    bag_reps: np.ndarray  # (K, P)


def _block_shapes(cfg: MilConfig) -> dict[str, tuple[int, ...]]:
    P, L, K, D = cfg.proj_dim, cfg.attn_dim, cfg.n_classes, cfg.input_dim
    return {
        "W_proj": (P, D),
        "b_proj": (P,),
        "V": (L, P),
        "U": (L, P),
        "w_attn": (K, L),
        "W_clf": (K, P),
        "b_clf": (K,),
    }


def init_params(config: MilConfig, seed: int) -> MilParams:
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in _block_shapes(config).items():
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return MilParams(config=config, **arrays)


def _sigmoid(x):
    # tanh form never overflows
    out = np.tanh(0.5 * x)
    out += 1.0
    out *= 0.5
    return out


def _check_bag(params: MilParams, bag: Bag) -> np.ndarray:
    H = np.asarray(bag.embeddings, dtype=np.float64)
    if H.shape[0] == 0:
        raise ContractError(f"bag {bag.slide_id} is empty")
    if H.shape[1] != params.config.input_dim:
        raise DimensionError(
            f"bag {bag.slide_id} has dim {H.shape[1]}, model expects {params.config.input_dim}"
        )
    return H


def _forward(params: MilParams, H: np.ndarray):
    pre = H @ params.W_proj.T + params.b_proj
    Z = np.maximum(pre, 0.0) if params.config.proj_activation == "rectified" else pre
    T = np.tanh(Z @ params.V.T)
    S = _sigmoid(Z @ params.U.T)
    G = T * S
    scores = G @ params.w_attn.T  # (N, K)
    A = softmax(scores, axis=0)
    reps = A.T @ Z  # (K, P)
    logits = np.einsum("kp,kp->k", params.W_clf, reps) + params.b_clf
    return logits, A, reps, (pre, Z, T, S, G)


def mil_forward(params: MilParams, bag: Bag) -> MilOutput:
    H = _check_bag(params, bag)
    logits, A, reps, _ = _forward(params, H)
    return MilOutput(logits=logits, attention=A, bag_reps=reps)


def mil_loss_and_grad(params: MilParams, bag: Bag) -> tuple[float, MilParams]:
    if bag.label is None:
        raise ContractError(f"bag {bag.slide_id} has no label")
    H = _check_bag(params, bag)
    logits, A, reps, (pre, Z, T, S, G) = _forward(params, H)
    loss = cross_entropy_from_logits(logits, bag.label)

    d_logits = softmax(logits)
    d_logits[bag.label] -= 1.0
    dW_clf = d_logits[:, None] * reps
    db_clf = d_logits
    d_reps = d_logits[:, None] * params.W_clf  # (K, P)

    dA = Z @ d_reps.T  # (N, K)
    dZ = A @ d_reps  # pooling path
    d_scores = A * (dA - np.sum(A * dA, axis=0, keepdims=True))
    dw_attn = d_scores.T @ G
    dG = d_scores @ params.w_attn  # (N, L)
    d_pre_v = dG * S * (1.0 - T * T)
    d_pre_u = dG * T * S * (1.0 - S)
    dV = d_pre_v.T @ Z
    dU = d_pre_u.T @ Z
    dZ += d_pre_v @ params.V + d_pre_u @ params.U

    d_pre = dZ * (pre > 0) if params.config.proj_activation == "rectified" else dZ
    dW_proj = d_pre.T @ H
    db_proj = d_pre.sum(axis=0)

    grads = MilParams(
        W_proj=dW_proj, b_proj=db_proj, V=dV, U=dU, w_attn=dw_attn, W_clf=dW_clf, b_clf=db_clf,
        config=params.config,
    )
    return loss, grads


def mil_loss(params: MilParams, bag: Bag) -> float:
    if bag.label is None:
        raise ContractError(f"bag {bag.slide_id} has no label")
    return cross_entropy_from_logits(mil_forward(params, bag).logits, bag.label)


def predict(params: MilParams, bag: Bag) -> tuple[int, np.ndarray, np.ndarray]:
    out = mil_forward(params, bag)
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(out.logits)), out.logits, out.attention


def save_params(params: MilParams, path) -> None:
    cfg = params.config
    tag = ACTIVATIONS.index(cfg.proj_activation)
    parts = [
        _MAGIC,
        struct.pack("<IIIIIB", _VERSION, cfg.input_dim, cfg.proj_dim, cfg.attn_dim, cfg.n_classes, tag),
    ]
    for name in BLOCKS:
        parts.append(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_params(path) -> MilParams:
    raw = Path(path).read_bytes()
    head = struct.calcsize("<IIIIIB")
    if len(raw) < 4 + head or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a MIL checkpoint (bad magic)")
    version, D, P, L, K, tag = struct.unpack_from("<IIIIIB", raw, 4)
    if version != _VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if tag >= len(ACTIVATIONS):
        raise FormatError(f"{path}: unknown activation tag {tag}")
    try:
        cfg = MilConfig(D, P, L, K, ACTIVATIONS[tag])
    except ContractError as e:
        raise FormatError(f"{path}: invalid config in header: {e}") from None
    shapes = _block_shapes(cfg)
    expected = 4 + head + 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    offset = 4 + head
    arrays = {}
    for name, shape in shapes.items():
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    return MilParams(config=cfg, **arrays)
