"""Patch-level softmax-regression probe and majority-vote slide aggregation."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from milgrade.errors import ContractError, DimensionError, FormatError
from milgrade.numerics import AdamState, adam_update_, logsumexp, softmax
from milgrade.training import IMPROVEMENT_EPS, EpochLog, TrainConfig, check_finite, weighted_sample_indices

N_PATCH_CLASSES = 6
BACKGROUND = 0

_MAGIC = b"PRB1"
_VERSION = 1


@dataclass
class ProbeParams:
    W: np.ndarray  # (6, D)
    b: np.ndarray  # (6,)

    def __post_init__(self):
        if self.W.ndim != 2 or self.W.shape[0] != N_PATCH_CLASSES or self.b.shape != (N_PATCH_CLASSES,):
            raise DimensionError(f"probe expects W (6, D) and b (6,), got {self.W.shape} and {self.b.shape}")

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    @classmethod
    def zeros(cls, dim: int) -> "ProbeParams":
        return cls(np.zeros((N_PATCH_CLASSES, dim)), np.zeros(N_PATCH_CLASSES))


@dataclass
class PatchPrediction:
    coord: tuple[int, int]
    probs: np.ndarray
    pred: int


def _logits(params: ProbeParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.dim:
        raise DimensionError(f"probe expects dim {params.dim}, got embeddings of shape {X.shape}")
    return X @ params.W.T + params.b


def probe_forward(params: ProbeParams, embedding, coord=(0, 0)) -> PatchPrediction:
    h = np.asarray(embedding, dtype=np.float64).reshape(1, -1)
    probs = softmax(_logits(params, h)[0])
    return PatchPrediction(tuple(int(c) for c in coord), probs, int(np.argmax(probs)))


def probe_predict_bag(params: ProbeParams, embeddings, coords) -> list[PatchPrediction]:
    P = softmax(_logits(params, embeddings), axis=1)
    preds = np.argmax(P, axis=1)
    return [PatchPrediction((int(c[0]), int(c[1])), P[i], int(preds[i])) for i, c in enumerate(np.asarray(coords))]


def probe_loss(params: ProbeParams, X, y) -> float:
    Z = _logits(params, X)
    y = np.asarray(y, dtype=np.int64)
    return float(np.mean(logsumexp(Z, axis=1) - Z[np.arange(len(y)), y]))


def _probe_grad(params: ProbeParams, X: np.ndarray, y: np.ndarray):
    P = softmax(_logits(params, X), axis=1)
    P[np.arange(len(y)), y] -= 1.0
    P /= len(y)
    return P.T @ X, P.sum(axis=0)


def train_probe(train, val, cfg: TrainConfig = None) -> tuple[ProbeParams, list[EpochLog]]:
    """Minibatch Adam with class-balanced sampling; returns the best-validation checkpoint.

    ``train`` and ``val`` are (embeddings, labels) pairs with labels in 0..5.
    """
    cfg = cfg or TrainConfig.probe()
    Xtr, ytr = np.asarray(train[0], dtype=np.float64), np.asarray(train[1], dtype=np.int64)
    Xva, yva = np.asarray(val[0], dtype=np.float64), np.asarray(val[1], dtype=np.int64)
    if len(ytr) == 0 or len(yva) == 0:
        raise ContractError("probe training needs non-empty train and validation patch sets")
    for y in (ytr, yva):
        if y.min() < 0 or y.max() >= N_PATCH_CLASSES:
            raise ContractError("patch labels must lie in 0..5")
    if Xtr.ndim != 2 or Xva.ndim != 2 or Xtr.shape[1] != Xva.shape[1]:
        raise DimensionError(f"train {Xtr.shape} and val {Xva.shape} embeddings disagree")

    params = ProbeParams.zeros(Xtr.shape[1])
    sW = AdamState.zeros_like(params.W, learning_rate=cfg.learning_rate)
    sb = AdamState.zeros_like(params.b, learning_rate=cfg.learning_rate)

    val0 = check_finite(probe_loss(params, Xva, yva), 0, "validation patches")
    best, best_val, best_epoch = params, val0, 0
    ref_val, ref_epoch = val0, 0
    logs = [EpochLog(0, probe_loss(params, Xtr, ytr), val0, 0)]
    for epoch in range(1, cfg.max_epochs + 1):
        order = weighted_sample_indices(ytr, len(ytr), [cfg.seed, epoch])
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            Xb, yb = Xtr[idx], ytr[idx]
            batch_losses.append(probe_loss(params, Xb, yb))
            gW, gb = _probe_grad(params, Xb, yb)
            W, b = params.W.copy(), params.b.copy()
            adam_update_(W, gW, sW)
            adam_update_(b, gb, sb)
            params = ProbeParams(W, b)
        val = check_finite(probe_loss(params, Xva, yva), epoch, "validation patches")
        if val < best_val:
            best, best_val, best_epoch = params, val, epoch
        if val < ref_val - IMPROVEMENT_EPS:
            ref_val, ref_epoch = val, epoch
        logs.append(EpochLog(epoch, float(np.mean(batch_losses)), val, best_epoch))
        if epoch - ref_epoch >= cfg.patience:
            break
    return best, logs


def majority_vote(preds: Sequence[PatchPrediction]) -> int:
    """Modal non-background patch class mapped to a 0..4 slide class.

    Ties go to the larger probability summed over the voting patches, then the
    lower index. If every
    patch is background, the slide takes the class with the largest summed
    non-background probability.
    """
    if len(preds) == 0:
        raise ContractError("majority vote over an empty prediction list")
    probs = np.array([p.probs for p in preds], dtype=np.float64)
    labels = np.array([p.pred for p in preds], dtype=np.int64)
    tumor = labels != BACKGROUND
    if not tumor.any():
        return int(np.argmax(probs[:, 1:].sum(axis=0)))
    counts = np.bincount(labels[tumor], minlength=N_PATCH_CLASSES)[1:]
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1:
        return int(tied[0])
    # tie mass comes from voting patches only, so background patches can never swing it
    mass = probs[tumor][:, 1:].sum(axis=0)[tied]
    return int(tied[np.argmax(mass)])


def save_probe(params: ProbeParams, path) -> None:
    head = _MAGIC + struct.pack("<III", _VERSION, N_PATCH_CLASSES, params.dim)
    body = np.ascontiguousarray(params.W, dtype="<f8").tobytes() + np.ascontiguousarray(params.b, dtype="<f8").tobytes()
    Path(path).write_bytes(head + body)


def load_probe(path) -> ProbeParams:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a probe checkpoint (bad magic)")
    version, k, dim = struct.unpack_from("<III", raw, 4)
    if version != _VERSION or k != N_PATCH_CLASSES:
        raise FormatError(f"{path}: unsupported probe header (version {version}, classes {k})")
    if len(raw) != 16 + 8 * k * (dim + 1):
        raise FormatError(f"{path}: truncated probe payload")
    W = np.frombuffer(raw, dtype="<f8", count=k * dim, offset=16).astype(np.float64).reshape(k, dim)
    b = np.frombuffer(raw, dtype="<f8", count=k, offset=16 + 8 * k * dim).astype(np.float64)
    return ProbeParams(W, b)
