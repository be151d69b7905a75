"""Training objective: prediction MAE plus two graph reconstructions and an orthogonality penalty."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BCE_EPS = 1e-7
NORM_EPS = 1e-12


@dataclass
class LossBreakdown:
    l_pre: Tensor
    l_rec_ro: Tensor
    l_rec_gr: Tensor
    l_ort: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {
            "l_pre": self.l_pre.item(),
            "l_rec_ro": self.l_rec_ro.item(),
            "l_rec_gr": self.l_rec_gr.item(),
            "l_ort": self.l_ort.item(),
            "total": self.total.item(),
        }


def mae_loss(pred: Tensor, target, mask=None) -> Tensor:
    """Mean absolute error, optionally over the entries where ``mask`` is 1."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"mae_loss: prediction {pred.shape} vs target {target.shape}")
    err = ad.abs(ad.sub(pred, target))
    if mask is None:
        return ad.mean(err)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if m.shape != pred.shape:
        raise ad.ShapeError(f"mae_loss: mask {m.shape} vs prediction {pred.shape}")
    count = m.sum()
    if count == 0:
        return ad.scale(ad.sum(err), 0.0)
    return ad.scale(ad.sum(ad.mul(err, Tensor(m))), 1.0 / count)


def reconstruct_adjacency(h_source: Tensor, mapping) -> Tensor:
    """``sigmoid(H' H'^T)`` with ``H' = M H_source`` lifted to the finer level.

    ``mapping`` is ``(n_target, n_source)``: ``M_or`` with regional features
    rebuilds the sensor graph, ``M_rg`` with global features rebuilds the
    regional graph.
    """
    mapping = mapping if isinstance(mapping, Tensor) else Tensor(mapping)
    if mapping.ndim != 2 or h_source.ndim != 2 or mapping.shape[1] != h_source.shape[0]:
        raise ad.ShapeError(f"reconstruct_adjacency: M {mapping.shape} vs H {h_source.shape}")
    lifted = ad.matmul(mapping, h_source)
    return ad.sigmoid(ad.matmul(lifted, ad.transpose(lifted)))


def bce_recon_loss(a_hat: Tensor, a_target, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy over all n^2 entries; targets are binarized at > 0."""
    a = np.asarray(a_target.data if isinstance(a_target, Tensor) else a_target, dtype=np.float64)
    if a.shape != a_hat.shape:
        raise ad.ShapeError(f"bce_recon_loss: {a_hat.shape} vs target {a.shape}")
    a = (a > 0).astype(np.float64)
    p = ad.clip(a_hat, eps, 1.0 - eps)
    pos = ad.mul(Tensor(a), ad.log(p))
    negs = ad.mul(Tensor(1.0 - a), ad.log(ad.add_scalar(ad.neg(p), 1.0)))
    return ad.scale(ad.sum(ad.add(pos, negs)), -1.0 / a.size)


def orthogonal_loss(h_g: Tensor) -> Tensor:
    """Mean |cosine similarity| over all pairs of global-node rows.

    Rows whose norm is below 1e-12 count as zero similarity.
    """
    if h_g.ndim != 2:
        raise ad.ShapeError(f"orthogonal_loss expects (N_g, D), got {h_g.shape}")
    n = h_g.shape[0]
    if n < 2:
        raise ValueError("orthogonal_loss needs at least two global nodes")
    unit = ad.normalize_rows(h_g, NORM_EPS)
    cos = ad.matmul(unit, ad.transpose(unit))
    upper = Tensor(np.triu(np.ones((n, n)), k=1))
    return ad.scale(ad.sum(ad.mul(ad.abs(cos), upper)), 2.0 / (n * (n - 1)))


def total_objective(
    pred: Tensor,
    target,
    state,
    m_or,
    a_o,
    a_r,
    mask=None,
    weights: Optional[tuple[float, float, float, float]] = None,
) -> LossBreakdown:
    """Sum of the four terms, unweighted unless ``weights`` overrides.

    Reconstruction and orthogonality use the last layer's regional and global
    features averaged over batch and time.
    """
    l_pre = mae_loss(pred, target, mask)
    h_r = ad.mean(state.h_r, axis=(0, 1))
    h_g = ad.mean(state.h_g, axis=(0, 1))
    l_rec_ro = bce_recon_loss(reconstruct_adjacency(h_r, m_or), a_o)
    l_rec_gr = bce_recon_loss(reconstruct_adjacency(h_g, state.m_rg), a_r)
    l_ort = orthogonal_loss(h_g)
    terms = [l_pre, l_rec_ro, l_rec_gr, l_ort]
    if weights is not None and tuple(weights) != (1.0, 1.0, 1.0, 1.0):
        terms = [ad.scale(t, w) for t, w in zip(terms, weights)]
    total = ad.add(ad.add(ad.add(terms[0], terms[1]), terms[2]), terms[3])
    return LossBreakdown(l_pre, l_rec_ro, l_rec_gr, l_ort, total)
