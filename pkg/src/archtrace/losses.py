"""Patchwise supervised contrastive loss, cross-entropy, and the
automatically weighted total objective.

The contrastive term treats every patch in the batch as an anchor; patches
with the same class are its positives, everything else its negatives.
For anchor i with positives P(i) and A(i) = batch minus i:

    L_con = sum_i (-1/|P(i)|) sum_{p in P(i)}
            log[ exp(z_i.z_p / T) / sum_{a in A(i)} exp(z_i.z_a / T) ]

The outer sum is NOT divided by batch size; anchors without positives are
skipped. The total objective weights L_con and L_ce by learned homoscedastic
uncertainty: w_k = 0.5*exp(-s_k) with a 0.5*s_k regularizer, so the weights
stay positive and receive gradients.
"""

from __future__ import annotations

import torch
import torch.nn as nn

UNIT_NORM_TOL = 1e-4


def supcon_loss(embeddings: torch.Tensor, labels: torch.Tensor,
                temperature: float, reduction: str = "sum") -> torch.Tensor:
    """Supervised contrastive loss over a batch of unit-norm embeddings.

    reduction "sum" is the optimized objective; "anchor_mean" divides by the
    number of anchors that had at least one positive (logging only).
    """
    if embeddings.dim() != 2:
        raise ValueError(f"embeddings must be 2-d, got {tuple(embeddings.shape)}")
    n = embeddings.shape[0]
    if n < 2:
        raise ValueError("contrastive batch needs at least 2 embeddings")
    if labels.shape != (n,):
        raise ValueError("labels must be a vector matching the batch")
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    norms = embeddings.norm(dim=1)
    if (norms - 1.0).abs().max().item() > UNIT_NORM_TOL:
        raise ValueError("embeddings must be unit-norm")

    sim = embeddings @ embeddings.T / temperature
    eye = torch.eye(n, dtype=torch.bool, device=embeddings.device)
    # log prob of picking a over A(i); logsumexp handles the max-shift
    sim_masked = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim_masked, dim=1, keepdim=True)

    pos_mask = (labels.unsqueeze(0) == labels.unsqueeze(1)) & ~eye
    pos_counts = pos_mask.sum(dim=1)
    has_pos = pos_counts > 0
    per_anchor = -(log_prob * pos_mask).sum(dim=1) / pos_counts.clamp(min=1)
    loss = per_anchor[has_pos].sum()
    if reduction == "anchor_mean":
        return loss / has_pos.sum().clamp(min=1)
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return loss


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax of the true class."""
    if logits.dim() != 2:
        raise ValueError("logits must be 2-d")
    if not torch.isfinite(logits).all():
        raise ValueError("logits must be finite")
    if labels.min().item() < 0 or labels.max().item() >= logits.shape[1]:
        raise ValueError("label out of range")
    log_p = torch.log_softmax(logits, dim=1)
    return -log_p.gather(1, labels.view(-1, 1)).mean()


class LossWeights(nn.Module):
    """Learnable uncertainty parameters behind the two loss weights."""

    def __init__(self):
        super().__init__()
        self.s_con = nn.Parameter(torch.zeros(()))
        self.s_ce = nn.Parameter(torch.zeros(()))

    def weights(self) -> tuple[float, float]:
        with torch.no_grad():
            return (0.5 * torch.exp(-self.s_con).item(),
                    0.5 * torch.exp(-self.s_ce).item())


def auto_weighted_total(l_con, l_ce, w: LossWeights) -> torch.Tensor:
    """Uncertainty-weighted sum of the two losses plus the log-variance terms."""
    l_con = torch.as_tensor(l_con, dtype=w.s_con.dtype)
    l_ce = torch.as_tensor(l_ce, dtype=w.s_ce.dtype)
    return (0.5 * torch.exp(-w.s_con) * l_con + 0.5 * w.s_con
            + 0.5 * torch.exp(-w.s_ce) * l_ce + 0.5 * w.s_ce)
