"""Training objectives. All return scalar Tensors averaged (or summed) as noted."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SRA_EPS = 1e-6


def router_loss(logits: Tensor, identities) -> Tensor:
    """Mean cross-entropy of softmax(logits) against one-hot subject identities."""
    onehot = np.asarray(identities.data if isinstance(identities, Tensor) else identities, dtype=np.float64)
    if onehot.shape != logits.shape:
        raise ad.ShapeError(f"router_loss: logits {logits.shape} vs identities {onehot.shape}")
    logp = ad.log_softmax(logits, axis=1)
    return ad.scale(ad.tsum(ad.mul(logp, Tensor(onehot))), -1.0 / logits.shape[0])


def classification_loss(logits: Tensor, labels) -> Tensor:
    """Per-label sigmoid binary cross-entropy, averaged over batch and labels."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ad.ShapeError(f"classification_loss: logits {logits.shape} vs labels {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("classification_loss: labels must be 0 or 1")
    # BCE(x, y) = softplus(x) - x*y
    return ad.mean(ad.sub(ad.softplus(logits), ad.mul(logits, Tensor(y))))


def retrieval_loss(h: Tensor, y, temperature: float = 1.0) -> Tensor:
    """Bidirectional InfoNCE over the in-batch logits h @ y^T / temperature.

    Each direction is summed over the batch (not averaged); the result is the
    sum of the fMRI->image and image->fMRI terms.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    y = ad.as_tensor(y)
    if h.shape != y.shape:
        raise ad.ShapeError(f"retrieval_loss: projections {h.shape} vs image embeddings {y.shape}")
    logits = ad.matmul(h, ad.transpose(y))
    if temperature != 1.0:
        logits = ad.scale(logits, 1.0 / temperature)
    eye = Tensor(np.eye(h.shape[0]))
    l_fmri = ad.tsum(ad.mul(ad.log_softmax(logits, axis=1), eye))
    l_image = ad.tsum(ad.mul(ad.log_softmax(logits, axis=0), eye))
    return ad.scale(ad.add(l_fmri, l_image), -1.0)


def prior_loss(prior_out: Tensor, y) -> Tensor:
    y = ad.as_tensor(y)
    if prior_out.shape != y.shape:
        raise ad.ShapeError(f"prior_loss: prior output {prior_out.shape} vs targets {y.shape}")
    d = ad.sub(prior_out, y)
    return ad.mean(ad.mul(d, d))


def reconstruction_loss(prior_out: Tensor, y, h: Tensor, temperature: float = 1.0) -> Tensor:
    return ad.add(prior_loss(prior_out, y), retrieval_loss(h, y, temperature))


def gram(x: Tensor) -> Tensor:
    ad.count_op("gram")
    return ad.matmul(x, ad.transpose(x))


def _matrix_cosine(a: Tensor, b: Tensor) -> Tensor:
    n = a.shape[0] * a.shape[1]
    fa = ad.l2_normalize(ad.reshape(a, (1, n)), axis=1)
    fb = ad.l2_normalize(ad.reshape(b, (1, n)), axis=1)
    return ad.tsum(ad.mul(fa, fb))


def relation_matrices(F: Tensor, Y, identities) -> tuple[Tensor, Tensor, Tensor]:
    fn = ad.l2_normalize(F, axis=1)
    yn = ad.l2_normalize(ad.as_tensor(Y), axis=1)
    ident = ad.as_tensor(identities)
    return gram(fn), gram(yn), gram(ident)


def sra_loss(F: Tensor, Y, identities, eps: float = SRA_EPS) -> Tensor:
    """Semantic relation alignment: -log(a / (a + b)) with a = cos(M_F, M_Y),
    b = cos(M_F, M_I), each clamped below at ``eps``. Gram matrices use
    L2-normalized rows of F and Y; diagonals are kept."""
    ident = np.asarray(identities.data if isinstance(identities, Tensor) else identities, dtype=np.float64)
    if F.shape[0] < 2:
        raise ValueError("sra_loss: needs at least two samples")
    if len(np.unique(ident.argmax(axis=1))) < 2:
        raise ValueError("sra_loss: batch holds a single subject, so the identity relation is constant; "
                         "use a stratified multi-subject sampler")
    MF, MY, MI = relation_matrices(F, Y, ident)
    a = ad.clamp_min(_matrix_cosine(MF, MY), eps)
    b = ad.clamp_min(_matrix_cosine(MF, MI), eps)
    return ad.sub(ad.log(ad.add(a, b)), ad.log(a))


def task_loss(task: str, out, y, labels, temperature: float = 1.0) -> Tensor:
    if task == "classification":
        return classification_loss(out.class_logits, labels)
    if task == "retrieval":
        return retrieval_loss(out.retrieval, y, temperature)
    if task == "reconstruction":
        return reconstruction_loss(out.prior, y, out.retrieval, temperature)
    raise ValueError(f"unknown task {task!r}")
