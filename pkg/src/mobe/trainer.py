"""Two-phase training: commonality learning, router fitting, then alternating
meta steps (adapters on per-subject support sets, backbone on the pooled query
set). The inner and outer loops are first-order: each only updates its own
parameter group while the others stay frozen.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses, metrics
from .config import ExperimentConfig, TrainConfig
from .model import TASK_HEADS, MoBEModel, build_model, route
from .optim import OptState, adamw_step, zero_grad
from .rng import stream, substream_seed
from .synthgen import (Dataset, default_keep_length, few_shot_subsample, generate_dataset,
                       misalign_dataset, restrict_subjects)

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class SplitArrays:
    """Training split of every subject, concatenated in subject order."""
    x: np.ndarray
    y: np.ndarray
    labels: np.ndarray
    identity: np.ndarray
    owner: np.ndarray           # subject position of each row
    spans: list[np.ndarray]     # row indices belonging to each subject position

    @classmethod
    def from_dataset(cls, data: Dataset, split: str = "train") -> "SplitArrays":
        xs, stims, owners = [], [], []
        for pos, sd in enumerate(data.subjects):
            x = sd.train_x if split == "train" else sd.test_x
            stim = sd.train_stim if split == "train" else sd.test_stim
            xs.append(x)
            stims.append(stim)
            owners.append(np.full(len(stim), pos))
        stim = np.concatenate(stims)
        owner = np.concatenate(owners)
        identity = np.zeros((len(owner), data.n_subjects))
        identity[np.arange(len(owner)), owner] = 1.0
        spans = [np.flatnonzero(owner == p) for p in range(data.n_subjects)]
        return cls(np.concatenate(xs), data.stimuli.embedding[stim], data.stimuli.labels[stim],
                   identity, owner, spans)


def stratified_batches(spans: list[np.ndarray], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Split every subject's rows over the same number of batches so each batch
    mixes subjects in proportion to their sizes."""
    total = sum(len(s) for s in spans)
    n_batches = max(1, math.ceil(total / batch_size))
    chunks = [np.array_split(rng.permutation(s), n_batches) for s in spans]
    return [np.concatenate([c[b] for c in chunks]) for b in range(n_batches)]


def plain_batches(rows: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    n_batches = max(1, math.ceil(len(rows) / batch_size))
    return np.array_split(rng.permutation(rows), n_batches)


def set_trainable(model: MoBEModel, params: list[ad.Tensor]) -> None:
    chosen = {id(p) for p in params}
    for p in model.parameters():
        p.requires_grad = id(p) in chosen


def group_hashes(model: MoBEModel) -> dict[str, str]:
    def digest(ps):
        h = hashlib.sha256()
        for p in ps:
            h.update(p.data.tobytes())
        return h.hexdigest()

    out = {"backbone_and_heads": digest(model.backbone_and_heads()), "router": digest(model.router.parameters())}
    for s in range(model.n_subjects):
        out[f"adapters{s}"] = digest(model.adapters(s))
    return out


class Trainer:
    def __init__(self, model: MoBEModel, data: Dataset, cfg: TrainConfig, log_path=None):
        self.model = model
        self.data = data
        self.cfg = cfg.resolved()
        self.task = self.cfg.task
        self.heads = TASK_HEADS[self.task]
        self.schedule = self.cfg.schedule()
        self.train = SplitArrays.from_dataset(data, "train")
        self.test = SplitArrays.from_dataset(data, "test")
        seed = self.cfg.seed
        self.batch_rng = stream(seed, "batches")
        self.dropout = ad.DropoutRNG(substream_seed(seed, "dropout"))
        self.states: dict[str, OptState] = {}
        self.steps: dict[str, int] = {}
        self.omega_train: np.ndarray | None = None
        self.records: list[dict] = []
        self.log_path = Path(log_path) if log_path else None
        self.router_trained = False
        self.meta_steps_done = 0
        self.track_hashes = False
        self.hash_trace: list[dict] = []

    # ------------------------------------------------------------ plumbing

    def _log(self, record: dict) -> None:
        self.records.append(record)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _step(self, key: str, params, loss: ad.Tensor, total: int, lr_fn) -> float:
        if not np.isfinite(loss.data):
            raise NumericalError(f"non-finite loss in {key} at step {self.steps.get(key, 0)}")
        zero_grad(params)
        loss.backward()
        step = self.steps.get(key, 0)
        lr = lr_fn(step, total)
        adamw_step(params, lr, self.cfg.weight_decay, self.states.setdefault(key, OptState()))
        self.steps[key] = step + 1
        return lr

    def _task_loss(self, out, rows) -> ad.Tensor:
        loss = losses.task_loss(self.task, out, self.train.y[rows], self.train.labels[rows], self.cfg.temperature)
        if self.task != "classification":
            # contrastive terms are batch sums; train on the per-sample value
            loss = ad.scale(loss, 1.0 / len(rows))
        return loss

    def _objective(self, out, rows, with_sra: bool) -> tuple[ad.Tensor, dict]:
        lt = self._task_loss(out, rows)
        parts = {"task": float(lt.data)}
        if with_sra:
            ls = losses.sra_loss(out.features, self.train.y[rows], self.train.identity[rows])
            parts["sra"] = float(ls.data)
            lt = ad.add(lt, ad.scale(ls, self.cfg.alpha))
        parts["total"] = float(lt.data)
        return lt, parts

    def _use_sra(self) -> bool:
        if not self.cfg.sra_enabled:
            return False
        if self.data.n_subjects < 2:
            raise ValueError("SRA needs at least two subjects in the training data")
        return True

    def _omega(self, rows):
        if self.omega_train is None:
            return None
        return self.omega_train[rows]

    # ------------------------------------------------------------ phases

    def phase1_epoch_count(self) -> int:
        n = self.cfg.phase1_epochs
        if not self.cfg.mobe_enabled and self.cfg.match_epochs:
            n += self.cfg.meta_steps * self.cfg.query_epochs
        return n

    def train_phase1(self, epochs: int | None = None) -> list[dict]:
        """Commonality learning: backbone and task heads, adapters off."""
        epochs = self.phase1_epoch_count() if epochs is None else epochs
        use_sra = self._use_sra()
        params = self.model.backbone_and_heads(self.task)
        set_trainable(self.model, params)
        self.model.set_adapters_enabled(False)
        n_batches = max(1, math.ceil(len(self.train.x) / self.cfg.batch_size))
        total = epochs * n_batches
        out_records = []
        for epoch in range(epochs):
            sums: dict[str, float] = {}
            for rows in stratified_batches(self.train.spans, self.cfg.batch_size, self.batch_rng):
                out = self.model.forward(self.train.x[rows], None, self.heads, True, self.dropout)
                loss, parts = self._objective(out, rows, use_sra)
                lr = self._step("phase1", params, loss, total, self.schedule.lr)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v / n_batches
            rec = {"phase": "phase1", "step": 0, "epoch": epoch, "lr": lr, **sums}
            self._log(rec)
            out_records.append(rec)
        return out_records

    def train_router(self, epochs: int | None = None) -> dict:
        if self.data.n_subjects < 2:
            raise ValueError("router training needs at least two subjects")
        epochs = self.cfg.router_epochs if epochs is None else epochs
        router = self.model.router
        params = router.parameters()
        set_trainable(self.model, params)
        n_batches = max(1, math.ceil(len(self.train.x) / self.cfg.batch_size))
        total = epochs * n_batches
        curve = []
        for epoch in range(epochs):
            acc = 0.0
            for rows in stratified_batches(self.train.spans, self.cfg.batch_size, self.batch_rng):
                loss = losses.router_loss(router.logits(ad.Tensor(self.train.x[rows])), self.train.identity[rows])
                self._step("router", params, loss, total, lambda s, t: self.cfg.router_lr)
                acc += float(loss.data) / n_batches
            curve.append(acc)
            self._log({"phase": "router", "step": 0, "epoch": epoch, "lr": self.cfg.router_lr, "router": acc})
        set_trainable(self.model, [])
        stats = router_stats(self.model, self.test.x, self.test.owner)
        stats["loss_curve"] = curve
        self._log({"phase": "router_eval", **{k: v for k, v in stats.items() if k != "loss_curve"}})
        self.router_trained = True
        self.refresh_routing()
        return stats

    def refresh_routing(self) -> None:
        with ad.no_grad():
            self.omega_train = route(self.model, self.train.x).data

    def run_meta_step(self) -> dict:
        """One alternation: every subject's adapters on its own data (task loss
        only), then backbone and heads on the union (task + SRA)."""
        if not self.cfg.mobe_enabled:
            raise ValueError("meta steps need MoBE adapters enabled")
        if not self.router_trained:
            raise ValueError("train the router before running meta steps")
        cfg = self.cfg
        self.model.set_adapters_enabled(True)
        meta = self.meta_steps_done
        summary = {}
        trace = {"start": group_hashes(self.model), "after_support": []} if self.track_hashes else None
        for pos, rows_all in enumerate(self.train.spans):
            params = self.model.adapters(pos, self.task)
            set_trainable(self.model, params)
            n_batches = max(1, math.ceil(len(rows_all) / cfg.batch_size))
            total = cfg.meta_steps * cfg.support_epochs * n_batches
            key = f"support{pos}"
            for epoch in range(cfg.support_epochs):
                acc = 0.0
                for rows in plain_batches(rows_all, cfg.batch_size, self.batch_rng):
                    out = self.model.forward(self.train.x[rows], self._omega(rows), self.heads, True, self.dropout)
                    loss = self._task_loss(out, rows)
                    lr = self._step(key, params, loss, total, self.schedule.lr)
                    acc += float(loss.data) / n_batches
                self._log({"phase": "support", "subject": pos, "step": meta, "epoch": epoch, "lr": lr, "task": acc})
                summary[f"support{pos}"] = acc
            if trace is not None:
                trace["after_support"].append(group_hashes(self.model))
        use_sra = self._use_sra()
        params = self.model.backbone_and_heads(self.task)
        set_trainable(self.model, params)
        n_batches = max(1, math.ceil(len(self.train.x) / cfg.batch_size))
        total = cfg.meta_steps * cfg.query_epochs * n_batches
        for epoch in range(cfg.query_epochs):
            sums: dict[str, float] = {}
            for rows in stratified_batches(self.train.spans, cfg.batch_size, self.batch_rng):
                out = self.model.forward(self.train.x[rows], self._omega(rows), self.heads, True, self.dropout)
                loss, parts = self._objective(out, rows, use_sra)
                lr = self._step("query", params, loss, total, self.schedule.lr)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v / n_batches
            self._log({"phase": "query", "step": meta, "epoch": epoch, "lr": lr, **sums})
            summary["query"] = sums
        set_trainable(self.model, [])
        if trace is not None:
            trace["after_query"] = group_hashes(self.model)
            self.hash_trace.append(trace)
        self.meta_steps_done += 1
        return summary

    # ------------------------------------------------------------ evaluation

    def query_task_loss(self) -> float:
        """Task loss on the full training union in evaluation mode."""
        with ad.no_grad():
            out = self.model.forward(self.train.x, self._omega(np.arange(len(self.train.x))), self.heads)
            return float(self._task_loss(out, np.arange(len(self.train.x))).data)


def router_stats(model: MoBEModel, x: np.ndarray, owner: np.ndarray) -> dict:
    with ad.no_grad():
        probs = route(model, x).data
    pred = probs.argmax(axis=1)
    return {"accuracy": float((pred == owner).mean()),
            "mean_confidence": float(probs.max(axis=1).mean()),
            "mean_true_prob": float(probs[np.arange(len(owner)), owner].mean())}


def evaluate(model: MoBEModel, data: Dataset, task: str, eval_cfg, seed: int) -> dict:
    """Per-subject metrics on the shared test split."""
    pool_seed = substream_seed(seed, "pools")
    per_subject = {}
    use_routing = model.adapters_enabled
    for pos, sd in enumerate(data.subjects):
        x = sd.test_x
        with ad.no_grad():
            omega = route(model, x) if use_routing else None
            out = model.forward(x, omega, TASK_HEADS[task])
        labels = data.stimuli.labels[sd.test_stim]
        emb = data.stimuli.embedding[sd.test_stim]
        row = {m: None for m in metrics.METRIC_FIELDS}
        if task == "classification":
            scores = out.class_logits.data
            row["mAP"] = metrics.mean_average_precision(scores, labels)
            row["AUC"] = metrics.roc_auc(scores, labels)
            row["hamming"] = metrics.hamming_distance(scores, labels)
        else:
            h = out.retrieval.data
            pool = eval_cfg.pool_size
            row["image_retrieval_acc"] = metrics.retrieval_accuracy(h, emb, pool, eval_cfg.repeats, "image",
                                                                    pool_seed + pos)
            row["fmri_retrieval_acc"] = metrics.retrieval_accuracy(emb, h, pool, eval_cfg.repeats, "fmri",
                                                                   pool_seed + pos)
        per_subject[sd.subject_id] = row
    return per_subject


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: MoBEModel, out_dir, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for name, group, subject, p in model.named_parameters():
        fname = name + ".mbt"
        ad.save_tensor(out / fname, p.data)
        layer = name.rsplit(".", 2 if ".adapter" in name else 1)[0]
        index.append({"name": name, "file": fname, "group": group, "layer": layer, "subject": subject,
                      "shape": list(p.shape)})
    (out / "index.json").write_text(json.dumps({"tensors": index, **(extra or {})}, indent=2, sort_keys=True))


def load_checkpoint(model: MoBEModel, in_dir) -> dict:
    src = Path(in_dir)
    index = json.loads((src / "index.json").read_text())
    params = {name: p for name, _, _, p in model.named_parameters()}
    for entry in index["tensors"]:
        arr = ad.load_tensor(src / entry["file"])
        p = params[entry["name"]]
        if arr.shape != p.shape:
            raise ad.ShapeError(f"checkpoint tensor {entry['name']} has shape {arr.shape}, model wants {p.shape}")
        p.data[...] = arr
    return index


# ---------------------------------------------------------------- pipeline


def prepare_data(cfg: ExperimentConfig, data: Dataset | None = None) -> Dataset:
    tcfg = cfg.train
    if data is None:
        data = generate_dataset(cfg.data, tcfg.seed)
    if tcfg.misalign:
        keep = tcfg.keep_length or default_keep_length(data.input_dim)
        data = misalign_dataset(data, keep, substream_seed(tcfg.seed, "misalign"))
    if tcfg.few_shot_subject is not None and tcfg.few_shot_ratio < 1.0:
        data = few_shot_subsample(data, tcfg.few_shot_subject, tcfg.few_shot_ratio, tcfg.seed)
    if tcfg.single_subject is not None:
        data = restrict_subjects(data, [tcfg.single_subject])
    return data


class Experiment:
    """Runs phase 1 -> router -> meta steps and evaluates on the test split."""

    def __init__(self, cfg: ExperimentConfig, data: Dataset | None = None, out_dir=None):
        self.cfg = cfg
        tcfg = cfg.train.resolved()
        if tcfg.single_subject is not None and tcfg.mobe_enabled:
            raise ValueError("single-subject training cannot route between experts; disable MoBE")
        if tcfg.single_subject is not None and tcfg.sra_enabled:
            raise ValueError("single-subject training leaves the SRA identity relation constant; disable SRA")
        self.data = prepare_data(cfg, data)
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            (self.out_dir / "train_log.jsonl").write_text("")
        d = self.data
        self.model = build_model(d.input_dim, d.n_subjects, d.config.n_classes, d.config.embed_dim, cfg.model,
                                 stream(tcfg.seed, "init"))
        self.trainer = Trainer(self.model, d, cfg.train, self.out_dir / "train_log.jsonl" if self.out_dir else None)
        self.router_stats: dict | None = None

    def _checkpoint(self, name: str) -> None:
        if self.out_dir:
            save_checkpoint(self.model, self.out_dir / f"ckpt_{name}",
                            {"config_hash": self.cfg.digest(), "seed": self.cfg.seed,
                             "dataset_hash": self.data.digest()})

    def run(self, track_hashes: bool = False) -> metrics.MetricsReport:
        start = time.perf_counter()
        tr = self.trainer
        tr.track_hashes = track_hashes
        tcfg = tr.cfg
        tr.train_phase1()
        self._checkpoint("phase1")
        if tcfg.mobe_enabled:
            self.router_stats = tr.train_router()
            self._checkpoint("router")
            for _ in range(tcfg.meta_steps):
                tr.run_meta_step()
            self._checkpoint("meta")
        else:
            self.model.set_adapters_enabled(False)
        per_subject = evaluate(self.model, self.data, tcfg.task, self.cfg.eval, tcfg.seed)
        report = metrics.MetricsReport.from_subjects(
            per_subject, label=tcfg.label, config=self.cfg.to_dict(), config_hash=self.cfg.digest(),
            dataset_hash=self.data.digest(), seed=tcfg.seed, wall_clock_s=time.perf_counter() - start)
        if self.out_dir:
            (self.out_dir / "report.json").write_text(report.to_json())
            (self.out_dir / "report.csv").write_text(report.to_csv())
        return report


def run_experiment(cfg: ExperimentConfig, data: Dataset | None = None, out_dir=None) -> metrics.MetricsReport:
    return Experiment(cfg, data, out_dir).run()
