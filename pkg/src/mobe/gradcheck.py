"""Finite-difference checks of every engine op, loss and the MoBE layers.

A case draws random leaf tensors and returns ``(leaves, fn)`` where ``fn()`` is
a scalar Tensor computed from the leaves. The analytic gradient from
``backward`` is compared with central differences taken by perturbing each
leaf in place. The error of one trial is

    max |g_analytic - g_numeric| / max(max |g_numeric|, max |g_analytic|, 1e-8)

over all leaves, and a case reports its worst trial.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor

TOLERANCE = 1e-4
STEP = 1e-6

Case = Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], Tensor]]]


@dataclass
class CheckResult:
    name: str
    module: str
    trials: int
    worst: float

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE


def numeric_gradient(leaves: list[Tensor], fn, step: float = STEP) -> list[np.ndarray]:
    grads = []
    with ad.no_grad():
        for t in leaves:
            g = np.zeros_like(t.data)
            for idx in np.ndindex(t.data.shape):
                orig = t.data[idx]
                t.data[idx] = orig + step
                fp = float(fn().data)
                t.data[idx] = orig - step
                fm = float(fn().data)
                t.data[idx] = orig
                g[idx] = (fp - fm) / (2 * step)
            grads.append(g)
    return grads


def analytic_gradient(leaves: list[Tensor], fn) -> list[np.ndarray]:
    for t in leaves:
        t.requires_grad = True
        t.zero_grad()
    fn().backward()
    return [t.grad.copy() for t in leaves]


def relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    pairs = [(a, n) for a, n in zip(analytic, numeric) if a.size]
    diff = max(float(np.max(np.abs(a - n))) for a, n in pairs)
    scale = max(max(float(np.max(np.abs(a))), float(np.max(np.abs(n)))) for a, n in pairs)
    return diff / max(scale, 1e-8)


def check_case(case: Case, trials: int, seed: int = 0) -> float:
    """Worst relative error of ``case`` over ``trials`` random draws (0.0 if none)."""
    worst = 0.0
    for trial in range(trials):
        leaves, fn = case(np.random.default_rng([seed, trial]))
        numeric = numeric_gradient(leaves, fn)
        worst = max(worst, relative_error(analytic_gradient(leaves, fn), numeric))
    return worst


def _leaves(*arrays) -> list[Tensor]:
    return [Tensor(np.array(a, dtype=np.float64)) for a in arrays]


def _weighted(t: Tensor, w: np.ndarray) -> Tensor:
    """Scalar summary of a non-scalar output through fixed random weights."""
    return ad.tsum(ad.mul(t, Tensor(w)))


# ---------------------------------------------------------------- op cases


def _unary(op, positive=False, shape=(3, 4)):
    def case(rng):
        x = rng.standard_normal(shape)
        if positive:
            x = np.abs(x) + 0.1
        (a,) = _leaves(x)
        w = rng.standard_normal(shape)
        return [a], lambda: _weighted(op(a), w)
    return case


def _binary(op, bshape=(3, 4), positive_b=False):
    def case(rng):
        b = rng.standard_normal(bshape)
        a, b = _leaves(rng.standard_normal((3, 4)), np.abs(b) + 0.5 if positive_b else b)
        w = rng.standard_normal((3, 4))
        return [a, b], lambda: _weighted(op(a, b), w)
    return case


def _clamp_case(rng):
    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 0.05] += 0.2   # stay off the kink at 0
    (a,) = _leaves(x)
    w = rng.standard_normal((3, 4))
    return [a], lambda: _weighted(ad.clamp_min(a, 0.0), w)


def _matmul_case(rng):
    a, b = _leaves(rng.standard_normal((3, 5)), rng.standard_normal((5, 2)))
    w = rng.standard_normal((3, 2))
    return [a, b], lambda: _weighted(ad.matmul(a, b), w)


def _matvec_case(rng):
    a, v = _leaves(rng.standard_normal((4, 3)), rng.standard_normal(3))
    w = rng.standard_normal(4)
    return [a, v], lambda: _weighted(ad.matmul(a, v), w)


def _shape_case(rng):
    (a,) = _leaves(rng.standard_normal((2, 6)))
    w = rng.standard_normal((4, 3))
    return [a], lambda: _weighted(ad.transpose(ad.reshape(a, (3, 4))), w)


def _concat_case(rng):
    a, b = _leaves(rng.standard_normal((2, 3)), rng.standard_normal((2, 2)))
    w = rng.standard_normal((2, 5))
    return [a, b], lambda: _weighted(ad.concat([a, b], axis=1), w)


def _index_case(rng):
    (a,) = _leaves(rng.standard_normal((5, 3)))
    idx = np.array([0, 2, 2, 4])
    w = rng.standard_normal((4, 3))
    return [a], lambda: _weighted(ad.index_select(a, 0, idx), w)


def _reduce_case(reducer, out_shape):
    def case(rng):
        (a,) = _leaves(rng.standard_normal((3, 4)))
        w = rng.standard_normal(out_shape)
        return [a], lambda: _weighted(reducer(a), w)
    return case


def _layer_norm_case(rng):
    x, g, b = _leaves(rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal(5))
    w = rng.standard_normal((3, 5))
    return [x, g, b], lambda: _weighted(ad.layer_norm(x, g, b), w)


def _dropout_case(rng):
    (a,) = _leaves(rng.standard_normal((4, 5)))
    seed = int(rng.integers(1 << 31))
    w = rng.standard_normal((4, 5))
    # a fresh mask source per call so every perturbed forward sees the same mask
    return [a], lambda: _weighted(ad.dropout(a, 0.3, ad.DropoutRNG(seed), True), w)


OP_CASES: dict[str, Case] = {
    "add": _binary(ad.add, bshape=(4,)),
    "sub": _binary(ad.sub, bshape=(3, 1)),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, positive_b=True),
    "scale": _unary(lambda a: ad.scale(a, -1.7)),
    "tanh": _unary(ad.tanh),
    "gelu": _unary(ad.gelu),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "sqrt": _unary(ad.sqrt, positive=True),
    "sigmoid": _unary(ad.sigmoid),
    "softplus": _unary(ad.softplus),
    "clamp_min": _clamp_case,
    "matmul": _matmul_case,
    "matvec": _matvec_case,
    "reshape_transpose": _shape_case,
    "concat": _concat_case,
    "index_select": _index_case,
    "sum": _reduce_case(lambda a: ad.tsum(a, axis=1), (3,)),
    "mean": _reduce_case(lambda a: ad.mean(a, axis=0, keepdims=True), (1, 4)),
    "softmax": _reduce_case(lambda a: ad.softmax(a, axis=1), (3, 4)),
    "log_softmax": _reduce_case(lambda a: ad.log_softmax(a, axis=0), (3, 4)),
    "l2_normalize": _reduce_case(lambda a: ad.l2_normalize(a, axis=1), (3, 4)),
    "layer_norm": _layer_norm_case,
    "dropout": _dropout_case,
}


# ---------------------------------------------------------------- loss cases


def _onehot(rng, n: int, k: int) -> np.ndarray:
    ids = rng.integers(k, size=n)
    ids[:k] = np.arange(k)   # every subject present
    return np.eye(k)[ids]


def _router_case(rng):
    (z,) = _leaves(rng.standard_normal((6, 3)))
    ident = _onehot(rng, 6, 3)
    return [z], lambda: losses.router_loss(z, ident)


def _bce_case(rng):
    (z,) = _leaves(2 * rng.standard_normal((5, 4)))
    labels = (rng.random((5, 4)) > 0.5).astype(np.float64)
    return [z], lambda: losses.classification_loss(z, labels)


def _retrieval_case(rng):
    h, y = _leaves(rng.standard_normal((5, 3)), rng.standard_normal((5, 3)))
    tau = float(rng.uniform(0.1, 1.0))
    return [h, y], lambda: losses.retrieval_loss(h, y, tau)


def _prior_case(rng):
    p, y = _leaves(rng.standard_normal((4, 3)), rng.standard_normal((4, 3)))
    return [p, y], lambda: losses.prior_loss(p, y)


def _reconstruction_case(rng):
    p, y, h = _leaves(*(rng.standard_normal((4, 3)) for _ in range(3)))
    return [p, y, h], lambda: losses.reconstruction_loss(p, y, h)


def _sra_case(rng):
    F, Y = _leaves(rng.standard_normal((6, 4)), rng.standard_normal((6, 3)))
    ident = _onehot(rng, 6, 3)
    return [F, Y], lambda: losses.sra_loss(F, Y, ident)


LOSS_CASES: dict[str, Case] = {
    "router_loss": _router_case,
    "classification_loss": _bce_case,
    "retrieval_loss": _retrieval_case,
    "prior_loss": _prior_case,
    "reconstruction_loss": _reconstruction_case,
    "sra_loss": _sra_case,
}


# ---------------------------------------------------------------- model cases


def _mobe_case(rng):
    from .model import MoBELinear, mobe_forward

    S, r, n_in, n_out, n = 3, 2, 5, 4, 6
    layer = MoBELinear(rng, n_in, n_out, S, r, "check")
    for p in layer.shared_parameters() + [q for s in range(S) for q in layer.adapter_parameters(s)]:
        p.data = rng.standard_normal(p.shape)   # B starts at zero; randomize to exercise every path
    x, z = _leaves(rng.standard_normal((n, n_in)), rng.standard_normal((n, S)))
    w = rng.standard_normal((n, n_out))
    leaves = [x, z, *layer.shared_parameters(), *[q for s in range(S) for q in layer.adapter_parameters(s)]]
    return leaves, lambda: _weighted(mobe_forward(layer, x, ad.softmax(z, axis=1)), w)


def _router_net_case(rng):
    from .model import Router

    router = Router(rng, 5, 3, 4)
    for p in router.parameters():
        p.data = rng.standard_normal(p.shape)
    (x,) = _leaves(rng.standard_normal((6, 5)))
    ident = _onehot(rng, 6, 3)
    return [x, *router.parameters()], lambda: losses.router_loss(router.logits(x), ident)


def _model_case(rng):
    """Full forward with routed adapters through every loss at once."""
    from .model import ModelConfig, build_model

    S, n_in, n = 3, 6, 6
    cfg = ModelConfig(hidden=5, n_blocks=1, rank=2, dropout=0.0, router_hidden=4, projector_expand=1.5)
    model = build_model(n_in, S, 3, 4, cfg, rng)
    params = model.backbone_and_heads() + [q for s in range(S) for q in model.adapters(s)]
    for p in params:
        p.data = rng.standard_normal(p.shape) * 0.5
    (x,) = _leaves(rng.standard_normal((n, n_in)))
    omega = rng.dirichlet(np.ones(S), size=n)
    y = rng.standard_normal((n, 4))
    labels = (rng.random((n, 3)) > 0.5).astype(np.float64)
    ident = _onehot(rng, n, S)

    def fn():
        out = model.forward(x, omega)
        total = ad.add(losses.classification_loss(out.class_logits, labels),
                       losses.reconstruction_loss(out.prior, y, out.retrieval))
        return ad.add(total, losses.sra_loss(out.features, y, ident))
    return [x, *params], fn


MODEL_CASES: dict[str, Case] = {
    "mobe_forward": _mobe_case,
    "router": _router_net_case,
    "model_forward": _model_case,
}

MODULES = {"autodiff": OP_CASES, "losses": LOSS_CASES, "model": MODEL_CASES}


def run_checks(modules=None, trials: int = 20, seed: int = 0,
               extra: dict[str, Case] | None = None) -> list[CheckResult]:
    """Check every case of the selected modules (all by default).

    ``extra`` adds cases under module ``"extra"``; tests use it to inject a
    deliberately wrong gradient as a negative control.
    """
    if trials < 0:
        raise ValueError("trials must be >= 0")
    selected = dict(MODULES) if not modules else {m: MODULES[m] for m in modules}
    if extra:
        selected["extra"] = extra
    results = []
    if trials == 0:
        return results
    for module, cases in selected.items():
        for name, case in cases.items():
            results.append(CheckResult(name, module, trials, check_case(case, trials, seed)))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'module':<9} {'case':<20} {'trials':>6} {'worst_rel_err':>14}  status"]
    for r in results:
        lines.append(f"{r.module:<9} {r.name:<20} {r.trials:>6} {r.worst:>14.3e}  {'ok' if r.passed else 'FAIL'}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results)} cases, {n_fail} failed (tolerance {TOLERANCE:g})")
    return "\n".join(lines)
