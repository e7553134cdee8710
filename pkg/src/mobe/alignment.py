"""Simulated anatomical alignment.

Each subject's raw grid is flattened and its voxels are assigned to slots of a
shared template by a monotone stretch (plus optional +-1 slot jitter). Slots
average their sources, an ROI mask selects the visually responsive slots, and
the survivors form the aligned 1-D voxel sequence.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class SubjectGeometry:
    subject_id: int
    grid_dims: tuple[int, int, int]

    def __post_init__(self):
        if len(self.grid_dims) != 3 or min(self.grid_dims) < 1:
            raise ValueError(f"grid_dims must be three positive ints, got {self.grid_dims}")

    @property
    def voxel_count(self) -> int:
        L, H, W = self.grid_dims
        return L * H * W


@dataclass(frozen=True, eq=False)
class TemplateSpec:
    template_size: int
    roi_mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.roi_mask, dtype=bool)
        if mask.shape != (self.template_size,):
            raise ValueError(f"roi_mask length {mask.shape} != template size {self.template_size}")
        if not mask.any():
            raise ValueError("roi_mask selects no template slot")
        object.__setattr__(self, "roi_mask", mask)

    @classmethod
    def centered(cls, template_size: int, roi_fraction: float = 0.75) -> "TemplateSpec":
        """ROI = one contiguous central block covering ``roi_fraction`` of the template."""
        n = max(1, int(round(template_size * roi_fraction)))
        start = (template_size - n) // 2
        mask = np.zeros(template_size, dtype=bool)
        mask[start:start + n] = True
        return cls(template_size, mask)

    @property
    def roi_size(self) -> int:
        return int(self.roi_mask.sum())


@dataclass(eq=False)
class IndexMap:
    subject_id: int
    template_size: int
    assignment: np.ndarray  # slot of every source voxel
    slots: list[list[int]] = field(repr=False)

    @classmethod
    def from_assignment(cls, subject_id: int, template_size: int, assignment) -> "IndexMap":
        assignment = np.asarray(assignment, dtype=np.int64)
        order = np.argsort(assignment, kind="stable")
        bounds = np.searchsorted(assignment[order], np.arange(template_size + 1))
        slots = [order[bounds[j]:bounds[j + 1]].tolist() for j in range(template_size)]
        return cls(subject_id, template_size, assignment, slots)

    @property
    def voxel_count(self) -> int:
        return len(self.assignment)

    @cached_property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.template_size)

    @cached_property
    def averaging_matrix(self) -> sp.csr_matrix:
        """Sparse (voxel_count x template_size) operator: raw @ M gives slot means."""
        n = self.voxel_count
        w = 1.0 / self.counts[self.assignment]
        return sp.csr_matrix((w, (np.arange(n), self.assignment)), shape=(n, self.template_size))

    def validate(self) -> None:
        seen = sorted(i for slot in self.slots for i in slot)
        if seen != list(range(self.voxel_count)):
            raise ValueError("index map does not assign every source voxel exactly once")
        if self.assignment.min() < 0 or self.assignment.max() >= self.template_size:
            raise ValueError("index map points outside the template")

    def to_json(self) -> str:
        return json.dumps({"subject_id": self.subject_id, "template_size": self.template_size,
                           "slots": self.slots})

    @classmethod
    def from_json(cls, text: str) -> "IndexMap":
        obj = json.loads(text)
        assignment = np.empty(sum(len(s) for s in obj["slots"]), dtype=np.int64)
        for j, slot in enumerate(obj["slots"]):
            assignment[slot] = j
        return cls.from_assignment(obj["subject_id"], obj["template_size"], assignment)


def build_index_map(geometry: SubjectGeometry, template: TemplateSpec, seed: int,
                    jitter: float = 0.2) -> IndexMap:
    """Stretch source voxel ``i`` to slot ``floor(i * d0 / n)``; with probability
    ``jitter`` nudge it one slot left or right (clipped to the template)."""
    d0 = template.template_size
    if d0 < 1:
        raise ValueError("template must have at least one slot")
    n = geometry.voxel_count
    base = (np.arange(n, dtype=np.int64) * d0) // n
    if jitter > 0:
        rng = np.random.default_rng([seed, geometry.subject_id])
        move = rng.random(n) < jitter
        step = np.where(rng.random(n) < 0.5, -1, 1)
        base = np.clip(base + move * step, 0, d0 - 1)
    return IndexMap.from_assignment(geometry.subject_id, d0, base)


def anatomical_align(raw, index_map: IndexMap, template: TemplateSpec) -> np.ndarray:
    """Slot means of ``raw`` (one sample or a batch of rows), ROI-filtered."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != index_map.voxel_count:
        raise ValueError(f"raw length {raw.shape[-1]} != subject voxel count {index_map.voxel_count}")
    if index_map.template_size != template.template_size:
        raise ValueError("index map and template disagree on template size")
    single = raw.ndim == 1
    rows = np.atleast_2d(raw)
    full = np.asarray(index_map.averaging_matrix.T @ rows.T).T
    out = full[:, template.roi_mask]
    return out[0] if single else out


def inverse_align(template_values, index_map: IndexMap) -> np.ndarray:
    """Give each source voxel the value of its slot (exact inverse for bijections)."""
    vals = np.asarray(template_values, dtype=np.float64)
    return vals[..., index_map.assignment]


def simulate_misalignment(aligned, keep_length: int, seed: int) -> np.ndarray:
    """Random voxel dropout to ``keep_length`` positions, original order kept.

    One index subset per call: apply it to every sample of a subject and use a
    different seed per subject so cross-subject correspondence is destroyed.
    """
    aligned = np.asarray(aligned)
    keep = misalignment_indices(aligned.shape[-1], keep_length, seed)
    return aligned[..., keep]


def misalignment_indices(length: int, keep_length: int, seed: int) -> np.ndarray:
    if keep_length < 1:
        raise ValueError("keep_length must be positive")
    if keep_length > length:
        raise ValueError(f"keep_length {keep_length} exceeds sequence length {length}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(length, size=keep_length, replace=False))
