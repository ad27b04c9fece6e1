"""Contrastive, signed-entropy and combined adaptation losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .model import forward_features, forward_projection
from .numerics import Tensor
from .prototypes import PrototypeBank


@dataclass
class ContrastiveLayout:
    """Projections ordered as known block (samples, augmentations, prototypes)
    followed by unknown block (samples, augmentations).

    ``z`` holds raw projections; cosine similarity normalizes them.
    """

    z: Tensor
    labels: np.ndarray
    num_known_rows: int
    tau: float
    num_known_samples: int = 0
    num_unknown_samples: int = 0

    def __len__(self) -> int:
        return len(self.labels)


def empty_layout(projection_dim: int, tau: float) -> ContrastiveLayout:
    return ContrastiveLayout(Tensor(np.zeros((0, projection_dim))), np.zeros(0, dtype=np.int64), 0, tau)


def build_layout(
    params: Mapping,
    batch: np.ndarray,
    augmented: np.ndarray,
    pseudo_labels: np.ndarray,
    bank: PrototypeBank,
    tau: float,
    batch_features: Tensor | None = None,
) -> ContrastiveLayout:
    """Assemble the contrastive set from one batch.

    Uncertain samples are dropped. Each known sample gets its augmentation and
    the prototype of its pseudo-label (skipped if that prototype is absent).
    ``batch_features`` lets the caller share g(batch) with the entropy loss.
    """
    pseudo_labels = np.asarray(pseudo_labels)
    num_known = bank.num_classes
    k_idx = np.flatnonzero((pseudo_labels >= 0) & (pseudo_labels < num_known))
    u_idx = np.flatnonzero(pseudo_labels == num_known)
    proj_dim = np.shape(nx.as_tensor(params["proj.b2"]).data)[0]
    if len(k_idx) == 0 and len(u_idx) == 0:
        return empty_layout(proj_dim, tau)

    sel = np.concatenate([k_idx, u_idx])
    if batch_features is None:
        sample_feats = forward_features(params, batch[sel])
    else:
        sample_feats = nx.take_rows(batch_features, sel)
    aug_feats = forward_features(params, augmented[sel])

    k_labels = pseudo_labels[k_idx]
    has_proto = bank.present()[k_labels]
    proto_rows = [bank.get(int(c)) for c in k_labels[has_proto]]
    nk, nu = len(k_idx), len(u_idx)

    pieces = [nx.take_rows(sample_feats, np.arange(nk)), nx.take_rows(aug_feats, np.arange(nk))]
    labels = [k_labels, k_labels]
    if proto_rows:
        pieces.append(nx.constant(np.stack(proto_rows)))
        labels.append(k_labels[has_proto])
    num_known_rows = 2 * nk + len(proto_rows)
    if nu:
        pieces += [nx.take_rows(sample_feats, np.arange(nk, nk + nu)), nx.take_rows(aug_feats, np.arange(nk, nk + nu))]
        labels += [np.full(nu, num_known), np.full(nu, num_known)]
    feats = nx.concat(pieces)
    z = forward_projection(params, feats)
    return ContrastiveLayout(z, np.concatenate(labels).astype(np.int64), num_known_rows, tau, nk, nu)


def contrastive_loss(layout: ContrastiveLayout) -> Tensor:
    """Supervised contrastive loss over known anchors with an unknown-vs-known repulsion term.

    For each known-block anchor i with positives P(i) (same label, i excluded):
    ``-1/|P(i)| * sum_p log(exp(s_ip/tau) / D_i)`` where ``D_i`` sums
    ``exp(s_ia/tau)`` over the other known-block rows plus
    ``exp(s_uj/tau)`` over every (unknown row u, known row j) pair.
    """
    nk = layout.num_known_rows
    if nk == 0:
        return Tensor(0.0)
    m = len(layout)
    zn = nx.l2_normalize(layout.z)
    zk = nx.take_rows(zn, np.arange(nk))
    inv_tau = 1.0 / layout.tau
    s_kk = nx.scale(nx.matmul(zk, nx.transpose(zk)), inv_tau)

    labels_k = layout.labels[:nk]
    off_diag = ~np.eye(nk, dtype=bool)
    positives = (labels_k[:, None] == labels_k[None, :]) & off_diag
    n_pos = positives.sum(axis=1)
    has_pos = n_pos > 0
    weights = np.where(has_pos[:, None], positives / np.maximum(n_pos, 1)[:, None], 0.0)

    # Per-anchor log-sum-exp shift; constants, so gradients are unaffected.
    masked = np.where(off_diag, s_kk.data, -np.inf)
    shift = masked.max(axis=1) if nk > 1 else np.full(nk, -np.inf)
    cross = None
    if m > nk:
        zu = nx.take_rows(zn, np.arange(nk, m))
        s_uk = nx.scale(nx.matmul(zu, nx.transpose(zk)), inv_tau)
        cross_max = s_uk.data.max()
        shift = np.maximum(shift, cross_max)
        cross = nx.sum(nx.exp(nx.add(s_uk, -cross_max)))
    shift = np.where(np.isfinite(shift), shift, 0.0)

    row_terms = nx.sum(nx.mul(nx.exp(nx.add(s_kk, -shift[:, None])), off_diag.astype(np.float64)), axis=1)
    if cross is not None:
        row_terms = nx.add(row_terms, nx.mul(cross, np.exp(cross_max - shift)))
    log_denom = nx.add(nx.log(row_terms), shift)
    anchor_term = nx.sum(nx.mul(log_denom, has_pos.astype(np.float64)))
    positive_term = nx.sum(nx.mul(s_kk, weights))
    return nx.add(anchor_term, nx.scale(positive_term, -1.0))


def entropy_per_row(probs) -> Tensor:
    probs = nx.as_tensor(probs)
    k = probs.shape[1]
    plogp = nx.sum(nx.mul(probs, nx.log(probs)), axis=1)
    return nx.scale(plogp, -1.0 / np.log(k))


def entropy_loss(student_probs, pseudo_labels: np.ndarray) -> Tensor:
    """Mean normalized entropy of known-labeled rows minus that of unknown-labeled rows.

    Both sums are divided by the full batch size; uncertain rows add nothing.
    """
    probs = nx.as_tensor(student_probs)
    n, k = probs.shape
    pseudo_labels = np.asarray(pseudo_labels)
    sign = np.where((pseudo_labels >= 0) & (pseudo_labels < k), 1.0, 0.0)
    sign[pseudo_labels == k] = -1.0
    if not sign.any():
        return Tensor(0.0)
    return nx.scale(nx.sum(nx.mul(entropy_per_row(probs), sign)), 1.0 / n)


def total_loss(l_c: Tensor, l_e: Tensor, lam: float, use_contrastive: bool = True, use_entropy: bool = True) -> Tensor:
    """L = L_c + lam * L_e, with either term switchable off for ablations."""
    out = Tensor(0.0)
    if use_contrastive:
        out = nx.add(out, l_c)
    if use_entropy:
        out = nx.add(out, nx.scale(l_e, lam))
    return out

