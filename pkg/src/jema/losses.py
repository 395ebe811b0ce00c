"""Differentiable losses for metadata-aligned embeddings.

All functions are pure: they take tensors (or array-likes) and return a
scalar tensor. Embeddings are never normalized here.
"""
import enum
from dataclasses import dataclass

import torch

from ._validation import (
    as_float_tensor,
    check_embeddings,
    check_nonnegative,
    check_positive,
    check_vector,
)

__all__ = [
    "SimilarityKind",
    "LossWeights",
    "pairwise_similarity",
    "label_sqdiff_matrix",
    "contrastive_regression_loss",
    "regression_mse",
    "jema_loss",
    "supcon_loss",
    "rnc_loss",
    "pairwise_hinge_loss",
    "classic_contrastive_loss",
]


class SimilarityKind(str, enum.Enum):
    COSINE = "cosine"
    L2 = "l2"
    L1 = "l1"


@dataclass(frozen=True)
class LossWeights:
    """Weights of the contrastive (``alpha``) and regression (``beta``) terms."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        check_nonnegative(self.alpha, "alpha")
        check_nonnegative(self.beta, "beta")
        if self.alpha == 0 and self.beta == 0:
            raise ValueError("alpha and beta cannot both be zero")


def _off_diagonal(n, device=None):
    return ~torch.eye(n, dtype=torch.bool, device=device)


def pairwise_similarity(X, kind="cosine"):
    """Pairwise (dis)similarity matrix of the rows of ``X``.

    ``cosine`` is the un-normalized form ``1 - x_i . x_j``; ``l2`` is the
    squared Euclidean distance and ``l1`` the Manhattan distance. Smaller
    always means more alike, which is what the label matrix expects.
    """
    X = check_embeddings(X)
    kind = SimilarityKind(kind)
    if kind is SimilarityKind.COSINE:
        return 1.0 - X @ X.T
    diff = X[:, None, :] - X[None, :, :]
    if kind is SimilarityKind.L2:
        return (diff * diff).sum(-1)
    return diff.abs().sum(-1)


def label_sqdiff_matrix(u):
    """``D[i, j] = (u_i - u_j) ** 2`` for a normalized metadata vector."""
    u = check_vector(u)
    if u.shape[0] < 2:
        raise ValueError("u needs at least 2 entries")
    diff = u[:, None] - u[None, :]
    return diff * diff


def contrastive_regression_loss(X, u, kind="cosine"):
    """Mean-squared mismatch between embedding similarity and label distance.

    ``(1/N) * sum_{i != j} (sim(i, j) - D(i, j))**2``. Diagonals of both
    matrices are dropped. The 1/N prefactor is kept as written (not
    1/(N(N-1))); the constant is absorbed by the loss weight.
    """
    X = check_embeddings(X)
    u = check_vector(u, name="u", dtype=X.dtype)
    if u.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but u has {u.shape[0]} entries")
    sim = pairwise_similarity(X, kind)
    D = label_sqdiff_matrix(u).to(sim.device)
    resid = (sim - D)[_off_diagonal(X.shape[0], sim.device)]
    return (resid * resid).sum() / X.shape[0]


def regression_mse(y, yhat):
    y = as_float_tensor(y, "y")
    yhat = as_float_tensor(yhat, "yhat")
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: y {tuple(y.shape)} vs yhat {tuple(yhat.shape)}")
    if y.numel() == 0:
        raise ValueError("empty input")
    return ((y.to(yhat.dtype) - yhat) ** 2).mean()


def _scalar_value(t, name):
    v = float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
    if v != v or v in (float("inf"), float("-inf")):
        raise ValueError(f"{name} is not finite")
    if v < 0:
        raise ValueError(f"{name} must be nonnegative, got {v}")
    return v


def jema_loss(lcr_p, lcr_v, lreg_l, lreg_h, weights=LossWeights()):
    """``alpha * (lcr_p + lcr_v) + beta * (lreg_l + lreg_h)``.

    Accepts tensors (gradients flow) or plain floats.
    """
    for name, term in (("lcr_p", lcr_p), ("lcr_v", lcr_v), ("lreg_l", lreg_l), ("lreg_h", lreg_h)):
        _scalar_value(term, name)
    return weights.alpha * (lcr_p + lcr_v) + weights.beta * (lreg_l + lreg_h)


def _check_labels(labels, n):
    labels = torch.as_tensor(labels)
    if labels.ndim != 1 or labels.shape[0] != n:
        raise ValueError(f"labels must be a vector of length {n}")
    return labels


def supcon_loss(Z, labels, tau=0.1):
    """Supervised contrastive loss with dot-product logits.

    For every anchor the log-likelihood of each same-label sample against
    all other samples is averaged over its positives; anchors are then
    averaged. Raises if any anchor has no positive.
    """
    Z = check_embeddings(Z, "Z")
    tau = check_positive(tau, "tau")
    n = Z.shape[0]
    labels = _check_labels(labels, n).to(Z.device)
    off = _off_diagonal(n, Z.device)
    pos = (labels[:, None] == labels[None, :]) & off
    n_pos = pos.sum(1)
    if (n_pos == 0).any():
        bad = int(torch.nonzero(n_pos == 0)[0])
        raise ValueError(f"anchor {bad} (label {labels[bad].item()!r}) has no positive in the batch")

    logits = (Z @ Z.T) / tau
    logits = logits.masked_fill(~off, float("-inf"))
    log_prob = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    log_prob = log_prob.masked_fill(~pos, 0.0)
    per_anchor = log_prob.sum(1) / n_pos.to(Z.dtype)
    return -per_anchor.mean()


def rnc_loss(V, y, tau=2.0, squared=False):
    """Rank-N-Contrast loss for continuous labels.

    For anchor ``i`` and sample ``j``, the candidate set holds every
    ``k != i`` whose label distance to ``i`` is at least that of ``j``
    (ties included). Similarity is the negative Euclidean distance, or the
    negative squared distance when ``squared`` is set. Label distance is the
    absolute difference. The loss averages ``-log P(v_j | v_i, S_ij)`` over
    all ordered pairs ``i != j``.
    """
    V = check_embeddings(V, "V")
    tau = check_positive(tau, "tau")
    n = V.shape[0]
    y = check_vector(y, n, name="y", dtype=V.dtype).to(V.device)

    diff = V[:, None, :] - V[None, :, :]
    sq = (diff * diff).sum(-1)
    # clamp keeps sqrt differentiable on the (excluded) diagonal
    dist = sq if squared else torch.sqrt(sq.clamp_min(1e-30))
    logits = -dist / tau

    label_dist = (y[:, None] - y[None, :]).abs()
    off = _off_diagonal(n, V.device)
    # cand[i, j, k]: k is in S_ij
    cand = (label_dist[:, None, :] >= label_dist[:, :, None]) & off[:, None, :]
    expanded = logits[:, None, :].expand(n, n, n).masked_fill(~cand, float("-inf"))
    log_norm = torch.logsumexp(expanded, dim=-1)
    nll = (log_norm - logits)[off]
    return nll.mean()


def pairwise_hinge_loss(f_pos, f_neg, margin=0.0):
    """``max(0, f_pos - f_neg + margin)`` for energies of a positive and a contrastive point."""
    check_nonnegative(float(margin), "margin")
    gap = as_float_tensor(f_pos, "f_pos") - as_float_tensor(f_neg, "f_neg") + margin
    return gap.clamp_min(0.0)


def classic_contrastive_loss(d, same_class, margin=1.0):
    """Pairwise contrastive loss on the Euclidean distance ``d`` of two embeddings.

    Same-class pairs pay ``d**2 / 2``; different-class pairs pay
    ``max(0, margin - d**2) / 2``.
    """
    check_positive(float(margin), "margin")
    d = as_float_tensor(d, "d")
    if (d < 0).any():
        raise ValueError("distance must be nonnegative")
    if same_class:
        return 0.5 * d * d
    return 0.5 * (margin - d * d).clamp_min(0.0)
