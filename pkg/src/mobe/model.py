"""Decoding network with mixture-of-brain-expert (MoBE) adapters.

Every MoBE linear layer keeps one shared weight and, per subject, a LoRA-style
pair ``A_s`` (rank x in, Gaussian) and ``B_s`` (out x rank, zeros). A single
global router maps the aligned voxel sequence to routing weights that every
adapter layer reuses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SIMPLEX_TOL = 1e-9


@dataclass
class ModelConfig:
    hidden: int = 256
    n_blocks: int = 4
    rank: int = 16
    adapter_scale: float = 1.0
    adapters_on_heads: bool = True
    dropout: float = 0.1
    router_hidden: int = 256
    # retrieval projector widens by 8/3 before contracting back to the embedding size
    projector_expand: float = 8 / 3


class Linear:
    """Plain affine layer (router only)."""

    def __init__(self, rng, n_in: int, n_out: int, name: str, zero: bool = False):
        bound = 1.0 / math.sqrt(n_in)
        w = np.zeros((n_out, n_in)) if zero else rng.uniform(-bound, bound, (n_out, n_in))
        b = np.zeros(n_out) if zero else rng.uniform(-bound, bound, n_out)
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(b, requires_grad=True, name=f"{name}.bias")
        self.name = name

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[1]:
            raise ad.ShapeError(f"{self.name}: input shape {x.shape} vs weight {self.weight.shape}")
        return ad.add(ad.matmul(x, ad.transpose(self.weight)), self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class MoBELinear:
    def __init__(self, rng, n_in: int, n_out: int, n_subjects: int, rank: int, name: str,
                 scale: float = 1.0, enabled: bool = True):
        if rank > min(n_in, n_out):
            raise ValueError(f"{name}: rank {rank} exceeds min(in={n_in}, out={n_out})")
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_out, n_in)), requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(rng.uniform(-bound, bound, n_out), requires_grad=True, name=f"{name}.bias")
        self.A = [Tensor(rng.standard_normal((rank, n_in)) / math.sqrt(n_in), requires_grad=True,
                         name=f"{name}.adapter{s}.A") for s in range(n_subjects)]
        self.B = [Tensor(np.zeros((n_out, rank)), requires_grad=True, name=f"{name}.adapter{s}.B")
                  for s in range(n_subjects)]
        self.rank, self.scale, self.enabled = rank, scale, enabled
        self.n_in, self.n_out = n_in, n_out
        self.name = name

    @property
    def n_subjects(self) -> int:
        return len(self.A)

    def shared_parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def adapter_parameters(self, subject: int) -> list[Tensor]:
        return [self.A[subject], self.B[subject]]

    def __call__(self, x: Tensor, omega: Tensor | None) -> Tensor:
        return mobe_forward(self, x, omega)


def check_simplex(omega: np.ndarray, n_subjects: int) -> None:
    if omega.ndim != 2 or omega.shape[1] != n_subjects:
        raise ad.ShapeError(f"routing weights shape {omega.shape} != (batch, {n_subjects})")
    if (omega < -SIMPLEX_TOL).any() or np.abs(omega.sum(axis=1) - 1.0).max() > SIMPLEX_TOL:
        raise ValueError("routing weights are not on the probability simplex")


def mobe_forward(layer: MoBELinear, x: Tensor, omega: Tensor | None) -> Tensor:
    """o = x W^T + b + sum_s omega_s * (x A_s^T) B_s^T, batched over rows of x."""
    if x.shape[-1] != layer.n_in:
        raise ad.ShapeError(f"{layer.name}: input shape {x.shape} vs weight {layer.weight.shape}")
    out = ad.add(ad.matmul(x, ad.transpose(layer.weight)), layer.bias)
    if not layer.enabled or omega is None:
        return out
    check_simplex(omega.data, layer.n_subjects)
    if omega.shape[0] != x.shape[0]:
        raise ad.ShapeError(f"{layer.name}: routing batch {omega.shape[0]} vs input batch {x.shape[0]}")
    ad.count_op("adapter")
    # stacked low-rank path: (n, S*r) codes weighted per subject block
    A_all = ad.concat(layer.A, axis=0)                       # (S*r, in)
    B_all = ad.concat(layer.B, axis=1)                       # (out, S*r)
    codes = ad.matmul(x, ad.transpose(A_all))
    w = np.repeat(omega.data, layer.rank, axis=1)
    weights = Tensor(w) if not omega.requires_grad else _repeat_cols(omega, layer.rank)
    delta = ad.matmul(ad.mul(codes, weights), ad.transpose(B_all))
    if layer.scale != 1.0:
        delta = ad.scale(delta, layer.scale)
    return ad.add(out, delta)


def _repeat_cols(omega: Tensor, r: int) -> Tensor:
    idx = np.repeat(np.arange(omega.shape[1]), r)
    return ad.index_select(omega, 1, idx)


class Router:
    """Two-layer MLP from the aligned voxel sequence to subject logits."""

    def __init__(self, rng, n_in: int, n_subjects: int, hidden: int):
        self.fc1 = Linear(rng, n_in, hidden, "router.fc1")
        self.fc2 = Linear(rng, hidden, n_subjects, "router.fc2", zero=True)
        self.n_in, self.n_subjects = n_in, n_subjects

    def logits(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ad.ShapeError(f"router expects (batch, {self.n_in}) input, got {x.shape}")
        return self.fc2(ad.gelu(self.fc1(x)))

    def parameters(self) -> list[Tensor]:
        return self.fc1.parameters() + self.fc2.parameters()


class LayerNorm:
    def __init__(self, dim: int, name: str):
        self.gain = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.gain")
        self.bias = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.gain, self.bias]


@dataclass
class Outputs:
    features: Tensor
    class_logits: Tensor | None
    retrieval: Tensor | None
    prior: Tensor | None


TASK_HEADS = {
    "classification": ("classifier",),
    "retrieval": ("projector",),
    "reconstruction": ("projector", "prior"),
}


class MoBEModel:
    def __init__(self, n_in: int, n_subjects: int, n_classes: int, embed_dim: int,
                 cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.n_in, self.n_subjects = n_in, n_subjects
        h, r = cfg.hidden, cfg.rank

        def mobe(i, o, name, on_head=False):
            enabled = cfg.adapters_on_heads or not on_head
            return MoBELinear(rng, i, o, n_subjects, min(r, i, o), name, cfg.adapter_scale, enabled)

        self.proj = mobe(n_in, h, "backbone.proj")
        self.proj_norm = LayerNorm(h, "backbone.proj_norm")
        self.blocks = [mobe(h, h, f"backbone.block{j}") for j in range(cfg.n_blocks)]
        self.block_norms = [LayerNorm(h, f"backbone.block{j}_norm") for j in range(cfg.n_blocks)]
        self.classifier = mobe(h, n_classes, "heads.classifier", True)
        p = max(embed_dim, int(round(embed_dim * cfg.projector_expand)))
        self.projector = [mobe(h, p, "heads.projector0", True), mobe(p, p, "heads.projector1", True),
                          mobe(p, embed_dim, "heads.projector2", True)]
        self.projector_norms = [LayerNorm(p, "heads.projector0_norm"), LayerNorm(p, "heads.projector1_norm")]
        self.prior = mobe(h, embed_dim, "heads.prior", True)
        self.router = Router(rng, n_in, n_subjects, cfg.router_hidden)
        self.adapters_enabled = True

    # ------------------------------------------------------------ structure

    def mobe_layers(self, task: str | None = None) -> list[MoBELinear]:
        layers = [self.proj, *self.blocks]
        heads = TASK_HEADS[task] if task else ("classifier", "projector", "prior")
        if "classifier" in heads:
            layers.append(self.classifier)
        if "projector" in heads:
            layers.extend(self.projector)
        if "prior" in heads:
            layers.append(self.prior)
        return layers

    def backbone_and_heads(self, task: str | None = None) -> list[Tensor]:
        params = self.proj.shared_parameters() + self.proj_norm.parameters()
        for blk, norm in zip(self.blocks, self.block_norms):
            params += blk.shared_parameters() + norm.parameters()
        heads = TASK_HEADS[task] if task else ("classifier", "projector", "prior")
        if "classifier" in heads:
            params += self.classifier.shared_parameters()
        if "projector" in heads:
            for layer in self.projector:
                params += layer.shared_parameters()
            for norm in self.projector_norms:
                params += norm.parameters()
        if "prior" in heads:
            params += self.prior.shared_parameters()
        return params

    def adapters(self, subject: int, task: str | None = None) -> list[Tensor]:
        return [p for layer in self.mobe_layers(task) if layer.enabled for p in layer.adapter_parameters(subject)]

    def parameters(self) -> list[Tensor]:
        groups = parameter_groups(self)
        out = list(groups["backbone_and_heads"])
        for s in range(self.n_subjects):
            out += groups["adapters_by_subject"][s]
        return out + groups["router"]

    def named_parameters(self) -> list[tuple[str, str, int | None, Tensor]]:
        """(name, group, subject, tensor) for every trainable tensor."""
        groups = parameter_groups(self)
        rows = [(p.name, "backbone_and_heads", None, p) for p in groups["backbone_and_heads"]]
        for s in range(self.n_subjects):
            rows += [(p.name, "adapters", s, p) for p in groups["adapters_by_subject"][s]]
        rows += [(p.name, "router", None, p) for p in groups["router"]]
        return rows

    def set_adapters_enabled(self, flag: bool) -> None:
        self.adapters_enabled = flag

    # ------------------------------------------------------------ forward

    def route(self, x) -> Tensor:
        return route(self, x)

    def forward(self, x, omega=None, heads=("classifier", "projector", "prior"),
                training: bool = False, rng: ad.DropoutRNG | None = None) -> Outputs:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ad.ShapeError(f"model expects (batch, {self.n_in}) input, got {x.shape}")
        if not self.adapters_enabled:
            omega = None
        elif omega is not None:
            omega = ad.as_tensor(omega)
        p = self.cfg.dropout
        hcur = ad.dropout(ad.gelu(self.proj_norm(self.proj(x, omega))), p, rng, training)
        for blk, norm in zip(self.blocks, self.block_norms):
            hcur = ad.add(hcur, ad.dropout(ad.gelu(norm(blk(hcur, omega))), p, rng, training))
        logits = retr = prior = None
        if "classifier" in heads:
            logits = self.classifier(hcur, omega)
        if "projector" in heads:
            z = hcur
            for j, layer in enumerate(self.projector):
                z = layer(z, omega)
                if j < len(self.projector_norms):
                    z = ad.gelu(self.projector_norms[j](z))
            retr = ad.l2_normalize(z, axis=1)
        if "prior" in heads:
            prior = self.prior(hcur, omega)
        return Outputs(hcur, logits, retr, prior)

    __call__ = forward


def route(model: MoBEModel, x) -> Tensor:
    """Routing weights (softmax of router logits), one simplex row per sample."""
    return ad.softmax(model.router.logits(ad.as_tensor(x)), axis=1)


def parameter_groups(model: MoBEModel) -> dict:
    return {
        "backbone_and_heads": model.backbone_and_heads(),
        "adapters_by_subject": {s: model.adapters(s) for s in range(model.n_subjects)},
        "router": model.router.parameters(),
    }


def adapter_share(model: MoBEModel) -> dict:
    """Parameter counts per group and the adapter fraction of the MoBE layers."""
    groups = parameter_groups(model)
    n_backbone = sum(p.data.size for p in groups["backbone_and_heads"])
    n_adapters = sum(p.data.size for ps in groups["adapters_by_subject"].values() for p in ps)
    n_router = sum(p.data.size for p in groups["router"])
    layers = [layer for layer in model.mobe_layers() if layer.enabled]
    dense = sum(layer.n_in * layer.n_out for layer in layers)
    lowrank = sum(layer.rank * (layer.n_in + layer.n_out) * layer.n_subjects for layer in layers)
    return {"backbone_and_heads": n_backbone, "adapters": n_adapters, "router": n_router,
            "total": n_backbone + n_adapters + n_router, "mobe_layers": len(layers),
            "adapter_share": lowrank / dense,
            "adapter_fraction_of_total": n_adapters / (n_backbone + n_adapters + n_router)}


def build_model(n_in: int, n_subjects: int, n_classes: int, embed_dim: int, cfg: ModelConfig,
                rng: np.random.Generator) -> MoBEModel:
    return MoBEModel(n_in, n_subjects, n_classes, embed_dim, cfg, rng)
