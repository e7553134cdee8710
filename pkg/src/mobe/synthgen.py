"""Synthetic multi-subject fMRI data.

Stimuli have a Gaussian latent ``z``; the image embedding is a fixed random
projection of ``z`` (unit norm) and label ``c`` is the sign of ``z[c]``. Each
subject owns a differently sized voxel grid and responds with
``tanh(W_s z + b_s) + noise``. ``W_s`` reads a smooth spatial field that is
shared in template coordinates through a subject-specific tuning matrix
``cos(t) I + sin(t) Q_s`` (``Q_s`` random orthogonal), so aligned sequences
agree on *where* responses live but not on *which* latent features drive them.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from . import autodiff
from .alignment import (IndexMap, SubjectGeometry, TemplateSpec, anatomical_align,
                        build_index_map, misalignment_indices)
from .rng import stream, substream_seed


@dataclass
class SynthConfig:
    n_subjects: int = 4
    latent_dim: int = 16
    embed_dim: int = 64
    n_classes: int = 8
    template_size: int = 512
    roi_fraction: float = 0.75
    n_train: int = 1500
    n_test: int = 200
    noise_sigma: float = 0.05
    grid_dims: list | None = None
    jitter: float = 0.2
    # angle t = pattern_shift * pi/2 of the subject-specific tuning (0 = identical subjects)
    pattern_shift: float = 0.6
    smooth_width: float = 2.0
    bias_scale: float = 0.5
    # scale of the stimulus drive W_s z inside the tanh
    signal_gain: float = 0.025

    def validate(self) -> None:
        if self.n_subjects < 1:
            raise ValueError("need at least one subject")
        if self.n_classes < 2 or self.embed_dim < 2:
            raise ValueError("need n_classes >= 2 and embed_dim >= 2")
        if self.latent_dim < self.n_classes:
            raise ValueError(f"latent_dim {self.latent_dim} < n_classes {self.n_classes}: labels read latent signs")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("train and test counts must be at least 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.grid_dims is not None and len(self.grid_dims) != self.n_subjects:
            raise ValueError("grid_dims needs one (L, H, W) triple per subject")

    def geometries(self) -> list[SubjectGeometry]:
        if self.grid_dims is not None:
            return [SubjectGeometry(s, tuple(int(v) for v in g)) for s, g in enumerate(self.grid_dims)]
        # every grid a bit larger than the template so all slots are covered
        base = math.ceil(self.template_size * 1.05 / 90)
        return [SubjectGeometry(s, (base + s, 9, 10)) for s in range(self.n_subjects)]


@dataclass
class StimulusTable:
    latent: np.ndarray      # (n, k)
    embedding: np.ndarray   # (n, e), unit rows
    labels: np.ndarray      # (n, C) in {0, 1}

    def __len__(self) -> int:
        return len(self.latent)


@dataclass
class SubjectProfile:
    subject_id: int
    geometry: SubjectGeometry
    mixing: np.ndarray      # (voxel_count, k)
    bias: np.ndarray        # (voxel_count,)
    noise_sigma: float

    def respond(self, latent: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        raw = np.tanh(latent @ self.mixing.T + self.bias)
        if self.noise_sigma > 0 and rng is not None:
            raw = raw + self.noise_sigma * rng.standard_normal(raw.shape)
        return raw


@dataclass
class SubjectData:
    profile: SubjectProfile
    index_map: IndexMap
    train_x: np.ndarray
    train_stim: np.ndarray
    test_x: np.ndarray
    test_stim: np.ndarray

    @property
    def subject_id(self) -> int:
        return self.profile.subject_id


@dataclass
class Dataset:
    config: SynthConfig
    seed: int
    template: TemplateSpec
    stimuli: StimulusTable
    subjects: list[SubjectData]
    provenance: dict = field(default_factory=dict)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def input_dim(self) -> int:
        return self.subjects[0].train_x.shape[1]

    def subject(self, subject_id: int) -> SubjectData:
        for sd in self.subjects:
            if sd.subject_id == subject_id:
                return sd
        raise KeyError(f"unknown subject {subject_id}")

    def identities(self, position: int, n: int) -> np.ndarray:
        """One-hot identity rows for subject at list ``position``."""
        out = np.zeros((n, self.n_subjects))
        out[:, position] = 1.0
        return out

    def train_counts(self) -> dict[int, int]:
        return {sd.subject_id: len(sd.train_stim) for sd in self.subjects}

    def digest(self) -> str:
        h = hashlib.sha256()
        for sd in self.subjects:
            for arr in (sd.train_x, sd.train_stim, sd.test_x, sd.test_stim):
                h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.stimuli.embedding, dtype="<f8").tobytes())
        return h.hexdigest()


def _smooth_field(rng, d0: int, k: int, width: float) -> np.ndarray:
    raw = rng.standard_normal((d0, k))
    if width > 0:
        raw = gaussian_filter1d(raw, width, axis=0, mode="wrap")
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def generate_dataset(cfg: SynthConfig, seed: int) -> Dataset:
    cfg.validate()
    k, e, C, S = cfg.latent_dim, cfg.embed_dim, cfg.n_classes, cfg.n_subjects
    template = TemplateSpec.centered(cfg.template_size, cfg.roi_fraction)

    rng = stream(seed, "data")
    n_stim = S * cfg.n_train + cfg.n_test
    latent = rng.standard_normal((n_stim, k))
    proj = rng.standard_normal((e, k))
    emb = latent @ proj.T
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    labels = (latent[:, :C] > 0).astype(np.float64)
    stimuli = StimulusTable(latent, emb, labels)
    shared = _smooth_field(rng, cfg.template_size, k, cfg.smooth_width)

    test_stim = np.arange(S * cfg.n_train, n_stim)
    map_seed = substream_seed(seed, "alignment")
    c, s_ = math.cos(cfg.pattern_shift * math.pi / 2), math.sin(cfg.pattern_shift * math.pi / 2)
    subjects = []
    for s, geom in enumerate(cfg.geometries()):
        srng = stream(seed, "subject", s)
        imap = build_index_map(geom, template, map_seed, cfg.jitter)
        q, r = np.linalg.qr(srng.standard_normal((k, k)))
        tuning = c * np.eye(k) + s_ * q * np.sign(np.diag(r))
        mixing = cfg.signal_gain * shared[imap.assignment] @ tuning
        bias = cfg.bias_scale * srng.standard_normal(geom.voxel_count)
        prof = SubjectProfile(s, geom, mixing, bias, cfg.noise_sigma)
        train_stim = np.arange(s * cfg.n_train, (s + 1) * cfg.n_train)
        train_x = anatomical_align(prof.respond(latent[train_stim], srng), imap, template)
        test_x = anatomical_align(prof.respond(latent[test_stim], srng), imap, template)
        subjects.append(SubjectData(prof, imap, train_x, train_stim, test_x, test_stim.copy()))
    return Dataset(cfg, seed, template, stimuli, subjects)


# ---------------------------------------------------------------- transforms


def few_shot_subsample(data: Dataset, subject_id: int, ratio: float, seed: int) -> Dataset:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"few-shot ratio must lie in (0, 1], got {ratio}")
    target = data.subject(subject_id)
    n = len(target.train_stim)
    if ratio * n < 1 - 1e-9:
        raise ValueError(f"ratio {ratio} keeps less than one of {n} training samples")
    keep_n = math.ceil(ratio * n - 1e-9)
    if keep_n == n:
        return data
    rng = stream(seed, "fewshot", subject_id)
    keep = np.sort(rng.choice(n, size=keep_n, replace=False))
    subjects = [dataclasses.replace(sd, train_x=sd.train_x[keep], train_stim=sd.train_stim[keep])
                if sd is target else sd for sd in data.subjects]
    prov = dict(data.provenance)
    prov.setdefault("few_shot", []).append({"subject": subject_id, "ratio": ratio, "kept": keep_n})
    return dataclasses.replace(data, subjects=subjects, provenance=prov)


def restrict_subjects(data: Dataset, subject_ids) -> Dataset:
    wanted = list(subject_ids)
    subjects = [data.subject(s) for s in wanted]
    prov = dict(data.provenance, subjects=wanted)
    return dataclasses.replace(data, subjects=subjects, provenance=prov)


def misalign_dataset(data: Dataset, keep_length: int, seed: int) -> Dataset:
    """Independent per-subject voxel dropout, applied identically to train and test."""
    subjects = []
    for sd in data.subjects:
        keep = misalignment_indices(sd.train_x.shape[1], keep_length, substream_seed(seed, "misalign", sd.subject_id))
        subjects.append(dataclasses.replace(sd, train_x=sd.train_x[:, keep], test_x=sd.test_x[:, keep]))
    prov = dict(data.provenance, misalignment={"keep_length": keep_length, "seed": seed})
    return dataclasses.replace(data, subjects=subjects, provenance=prov)


def default_keep_length(roi_size: int) -> int:
    # same kept fraction as the 12k-of-37984 voxel dropout used on real data
    return max(1, int(round(roi_size * 12000 / 37984)))


# ---------------------------------------------------------------- disk format


def save_dataset(data: Dataset, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    st = data.stimuli
    autodiff.save_tensor(out / "stimuli_latent.mbt", st.latent)
    autodiff.save_tensor(out / "stimuli_embedding.mbt", st.embedding)
    autodiff.save_tensor(out / "stimuli_labels.mbt", st.labels)
    subjects = []
    for pos, sd in enumerate(data.subjects):
        sid = sd.subject_id
        tensors = {
            "train_x": sd.train_x, "train_stim": sd.train_stim,
            "test_x": sd.test_x, "test_stim": sd.test_stim,
            "train_identity": data.identities(pos, len(sd.train_stim)),
            "test_identity": data.identities(pos, len(sd.test_stim)),
            "mixing": sd.profile.mixing, "bias": sd.profile.bias,
        }
        for name, arr in tensors.items():
            autodiff.save_tensor(out / f"subject{sid}_{name}.mbt", arr)
        (out / f"subject{sid}_index_map.json").write_text(sd.index_map.to_json())
        subjects.append({"subject_id": sid, "grid_dims": list(sd.profile.geometry.grid_dims),
                         "voxel_count": sd.profile.geometry.voxel_count,
                         "noise_sigma": sd.profile.noise_sigma,
                         "n_train": len(sd.train_stim), "n_test": len(sd.test_stim)})
    manifest = {
        "format": "mobe-dataset/1",
        "seed": data.seed,
        "config": dataclasses.asdict(data.config),
        "config_hash": hashlib.sha256(json.dumps(dataclasses.asdict(data.config), sort_keys=True).encode()
                                      ).hexdigest()[:16],
        "roi_mask": data.template.roi_mask.astype(int).tolist(),
        "subjects": subjects,
        "provenance": data.provenance,
        "dataset_hash": data.digest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(in_dir) -> Dataset:
    src = Path(in_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    man = json.loads(manifest_path.read_text())
    cfg = SynthConfig(**man["config"])
    mask = np.asarray(man["roi_mask"], dtype=bool)
    template = TemplateSpec(len(mask), mask)
    ld = autodiff.load_tensor
    stimuli = StimulusTable(ld(src / "stimuli_latent.mbt"), ld(src / "stimuli_embedding.mbt"),
                            ld(src / "stimuli_labels.mbt"))
    subjects = []
    for entry in man["subjects"]:
        sid = entry["subject_id"]

        def t(name):
            return ld(src / f"subject{sid}_{name}.mbt")

        prof = SubjectProfile(sid, SubjectGeometry(sid, tuple(entry["grid_dims"])), t("mixing"), t("bias"),
                              entry["noise_sigma"])
        imap = IndexMap.from_json((src / f"subject{sid}_index_map.json").read_text())
        subjects.append(SubjectData(prof, imap, t("train_x"), t("train_stim").astype(np.int64),
                                    t("test_x"), t("test_stim").astype(np.int64)))
    return Dataset(cfg, man["seed"], template, stimuli, subjects, man.get("provenance", {}))
