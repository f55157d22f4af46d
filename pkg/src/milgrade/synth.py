"""Seeded synthetic cohorts standing in for encoder features.

Patch class p (0 background, 1..5 growth patterns) is a Gaussian centred on
``separation * e_p`` with isotropic ``noise_sigma``. A slide of class c draws a
fraction rho of its patches from pattern c + 1. In the default mode the rest
come uniformly from background and the other four patterns. In confuser mode
they all come from one shared component at
``separation * (confuser_alignment * e_1 + e_6)``. Those patches resemble
lepidic tissue without being labeled as it, so they are left unlabeled in the
patch set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from milgrade.errors import ContractError
from milgrade.io import UNLABELED
from milgrade.model import Bag

N_SLIDE_CLASSES = 5
N_PATCH_CLASSES = 6
CONFUSER_AXIS = 6


@dataclass(frozen=True)
class SyntheticSpec:
    n_slides: int = 100
    dim: int = 64
    patches_per_slide: tuple[int, int] = (50, 200)
    predominant_fraction: tuple[float, float] = (0.5, 0.8)
    class_separation: float = 6.0
    noise_sigma: float = 1.0
    class_weights: Optional[Sequence[float]] = None
    seed: int = 0
    confuser: bool = False
    confuser_alignment: float = 0.75
    slides_per_patient: int = 1
    patch_size: int = 448

    def __post_init__(self):
        lo, hi = self.patches_per_slide
        if self.n_slides < 1 or lo < 1 or hi < lo:
            raise ContractError(f"invalid slide/patch counts in {self}")
        flo, fhi = self.predominant_fraction
        if not 0 < flo <= fhi <= 1:
            raise ContractError(f"predominant_fraction must satisfy 0 < lo <= hi <= 1, got {self.predominant_fraction}")
        if self.class_separation <= 0 or self.noise_sigma <= 0:
            raise ContractError("class_separation and noise_sigma must be positive")
        need = CONFUSER_AXIS + 1 if self.confuser else N_PATCH_CLASSES
        if self.dim < need:
            raise ContractError(f"dim must be >= {need} for this mode")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=float)
            if w.shape != (N_SLIDE_CLASSES,) or np.any(w < 0) or w.sum() <= 0:
                raise ContractError("class_weights must be 5 non-negative numbers with positive sum")
        if self.slides_per_patient < 1:
            raise ContractError("slides_per_patient must be >= 1")


@dataclass
class PatchSet:
    """Pooled patch-level data: embeddings, labels 0..5 and owning slide index."""

    embeddings: np.ndarray
    labels: np.ndarray
    slide_index: np.ndarray


def component_means(spec: SyntheticSpec) -> np.ndarray:
    means = np.zeros((N_PATCH_CLASSES + 1, spec.dim))
    for p in range(N_PATCH_CLASSES):
        means[p, p] = spec.class_separation
    if spec.confuser:
        means[N_PATCH_CLASSES, 1] = spec.confuser_alignment * spec.class_separation
        means[N_PATCH_CLASSES, CONFUSER_AXIS] = spec.class_separation
    return means


def _n_predominant(n: int, rho: float, lo: float, hi: float) -> int:
    k = int(round(rho * n))
    k_lo = int(np.ceil(lo * n - 1e-9))
    k_hi = int(np.floor(hi * n + 1e-9))
    if k_lo <= k_hi:
        k = min(max(k, k_lo), k_hi)
    return min(max(k, 1), n)


def synth_generate(spec: SyntheticSpec) -> tuple[list[Bag], PatchSet, list[np.ndarray]]:
    """Returns bags, the pooled labeled patch set, and per-bag patch labels (255 = unlabeled)."""
    rng = np.random.default_rng(spec.seed)
    means = component_means(spec)
    probs = None
    if spec.class_weights is not None:
        w = np.asarray(spec.class_weights, dtype=float)
        probs = w / w.sum()

    bags, per_bag_labels = [], []
    label = 0
    for i in range(spec.n_slides):
        if i % spec.slides_per_patient == 0:
            label = int(rng.choice(N_SLIDE_CLASSES, p=probs))
        n = int(rng.integers(spec.patches_per_slide[0], spec.patches_per_slide[1] + 1))
        rho = rng.uniform(*spec.predominant_fraction)
        k = _n_predominant(n, rho, *spec.predominant_fraction)

        comp = np.empty(n, dtype=np.int64)
        comp[:k] = label + 1
        if spec.confuser:
            comp[k:] = N_PATCH_CLASSES
        else:
            others = [p for p in range(N_PATCH_CLASSES) if p != label + 1]
            comp[k:] = rng.choice(others, size=n - k)
        comp = rng.permutation(comp)
        emb = means[comp] + spec.noise_sigma * rng.standard_normal((n, spec.dim))

        # scatter patches over a square-ish grid without repeats
        side = int(np.ceil(np.sqrt(n * 1.5)))
        cells = rng.choice(side * side, size=n, replace=False)
        coords = np.stack([cells % side, cells // side], axis=1) * spec.patch_size

        plabels = np.where(comp == N_PATCH_CLASSES, UNLABELED, comp)
        bags.append(
            Bag(
                slide_id=f"S{i:04d}",
                patient_id=f"P{i // spec.slides_per_patient:04d}",
                embeddings=emb.astype(np.float32),
                coords=coords,
                patch_size=spec.patch_size,
                label=label,
            )
        )
        per_bag_labels.append(plabels)

    return bags, pooled_patches(bags, per_bag_labels), per_bag_labels


def pooled_patches(bags: Sequence[Bag], per_bag_labels: Sequence[np.ndarray]) -> PatchSet:
    xs, ys, owner = [], [], []
    for i, (bag, lab) in enumerate(zip(bags, per_bag_labels)):
        if lab is None:
            continue
        keep = lab != UNLABELED
        xs.append(np.asarray(bag.embeddings, dtype=np.float64)[keep])
        ys.append(lab[keep])
        owner.append(np.full(int(keep.sum()), i))
    if not xs:
        return PatchSet(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    return PatchSet(np.concatenate(xs), np.concatenate(ys).astype(np.int64), np.concatenate(owner))
