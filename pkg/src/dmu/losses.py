"""Training objectives: ArcFace, backward compatibility (plain and selective),
forward adaptation, and the least-confidence / regression variants.

Loss functions take embeddings as tensors so the caller decides which paths
carry gradient. Old-model quantities (entropies, weights) are plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .models import cosine_logits


@dataclass(frozen=True)
class ArcFaceConfig:
    s: float = 30.0
    m: float = 0.3

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("ArcFace scale s must be positive")
        if not 0.0 <= self.m < np.pi / 2:
            raise ValueError("ArcFace margin m must lie in [0, pi/2)")


@dataclass
class BatchLossReport:
    l_new: float = 0.0
    l_sbc: float = 0.0
    l_fa: float = 0.0
    total: float = 0.0
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    entropies: np.ndarray = field(default_factory=lambda: np.zeros(0))


def arcface_loss(emb, labels, prototypes, cfg: ArcFaceConfig, reduction="mean") -> nx.Tensor:
    """Additive angular margin softmax loss.

    ``labels`` index prototype rows. ``reduction`` is ``"mean"``, ``"none"``
    (per-sample vector) or an array of per-sample weights (weighted sum).
    """
    labels = np.asarray(labels, dtype=np.int64)
    C = nx.as_tensor(prototypes).shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"labels must index one of {C} prototypes")
    cos = cosine_logits(emb, prototypes)
    logits = nx.scale(nx.angular_margin(cos, labels, cfg.m), cfg.s)
    per_sample = nx.cross_entropy(logits, labels)
    if isinstance(reduction, str):
        if reduction == "none":
            return per_sample
        if reduction == "mean":
            return nx.mean(per_sample)
        raise ValueError(f"unknown reduction {reduction!r}")
    return nx.weighted_sum(per_sample, np.asarray(reduction, dtype=np.float64))


def new_loss(emb_new, labels, protos_new, cfg: ArcFaceConfig) -> nx.Tensor:
    return arcface_loss(emb_new, labels, protos_new, cfg)


def bct_loss(emb_new, labels, protos_old, cfg: ArcFaceConfig) -> nx.Tensor:
    """New embeddings against the frozen old prototypes (mean)."""
    return arcface_loss(emb_new, labels, nx.detach(nx.as_tensor(protos_old)), cfg)


def old_posterior(emb_old: np.ndarray, protos_old: np.ndarray) -> np.ndarray:
    """Softmax over raw cosine products with the old prototypes (no s, no m)."""
    w = protos_old / np.linalg.norm(protos_old, axis=1, keepdims=True)
    return nx.softmax_rows(np.asarray(emb_old) @ w.T)


def entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def entropy_discriminativeness(emb_old: np.ndarray, protos_old: np.ndarray) -> np.ndarray:
    """Per-sample entropy of the old classifier posterior; high means a poor feature."""
    return entropy(old_posterior(emb_old, protos_old))


def selective_weights(ent: np.ndarray) -> np.ndarray:
    """(1 - softmax over the batch of the entropies) / (B - 1)."""
    ent = np.asarray(ent, dtype=np.float64)
    B = ent.size
    if B < 2:
        raise nx.DegenerateBatchError("selective weights need a batch of at least 2")
    return (1.0 - nx.softmax_rows(ent)) / (B - 1)


def least_confidence_weights(emb_old: np.ndarray, protos_old: np.ndarray, labels) -> np.ndarray:
    """Softmax over the batch of each sample's ground-truth old posterior."""
    labels = np.asarray(labels, dtype=np.int64)
    p = old_posterior(emb_old, protos_old)
    conf = p[np.arange(labels.size), labels]
    return nx.softmax_rows(conf)


def sbc_loss(emb_new, labels, protos_old, weights: np.ndarray, cfg: ArcFaceConfig) -> nx.Tensor:
    """Weighted sum (not mean) of per-sample losses against frozen old prototypes."""
    return arcface_loss(emb_new, labels, nx.detach(nx.as_tensor(protos_old)), cfg,
                        reduction=np.asarray(weights))


def fa_loss(adapted, labels, protos_new, cfg: ArcFaceConfig) -> nx.Tensor:
    """Adapted old embeddings classified by the new prototypes (mean)."""
    return arcface_loss(adapted, labels, protos_new, cfg)


def regression_regularizer(emb_a, emb_b) -> nx.Tensor:
    """Per-sample 1 - cos between unit-norm rows, in [0, 2]."""
    return nx.one_minus(nx.rowwise_dot(emb_a, emb_b))


@dataclass(frozen=True)
class ObjectiveConfig:
    """Which terms enter the joint objective and how they are weighted."""

    arcface: ArcFaceConfig = ArcFaceConfig()
    compat: str = "sbc"            # none | bct | sbc
    weighting: str = "entropy"     # entropy | least_conf (sbc only)
    regularizer: str = "arcface"   # arcface | regression
    forward_adapt: bool = True
    sbc_prototypes: str = "old"    # old | new (new = classifier used by the pseudocode)
    coef_new: float = 1.0
    coef_compat: float = 1.0
    coef_fa: float = 1.0

    def __post_init__(self):
        if self.compat not in ("none", "bct", "sbc"):
            raise ValueError(f"compat must be none, bct or sbc, not {self.compat!r}")
        if self.weighting not in ("entropy", "least_conf"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.regularizer not in ("arcface", "regression"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.sbc_prototypes not in ("old", "new"):
            raise ValueError(f"sbc_prototypes must be old or new, not {self.sbc_prototypes!r}")


def dmu_objective(emb_new, labels, protos_new, cfg: ObjectiveConfig, *, emb_old=None,
                  protos_old=None, old_labels=None, adapted=None):
    """Compose new-model, compatibility and forward-adaptation losses.

    ``labels`` index the new prototypes; ``old_labels`` index the old ones,
    with -1 for classes the old classifier never saw (those samples are left
    out of the compatibility term and of the weight normalization).
    ``emb_old`` is the detached old embedding as an array.

    Returns ``(total, report)``.
    """
    af = cfg.arcface
    report = BatchLossReport()
    l_new = new_loss(emb_new, labels, protos_new, af)
    total = nx.scale(l_new, cfg.coef_new)
    report.l_new = float(l_new.value)

    if cfg.compat != "none" and cfg.coef_compat != 0.0:
        old_labels = np.asarray(old_labels, dtype=np.int64)
        keep = old_labels >= 0
        if keep.sum() >= (2 if cfg.compat == "sbc" else 1):
            e_new = nx.select_rows(emb_new, keep) if not keep.all() else emb_new
            y_old = old_labels[keep]
            e_old = np.asarray(emb_old)[keep]
            if cfg.compat == "bct":
                w = np.full(y_old.size, 1.0 / y_old.size)
            else:
                report.entropies = entropy_discriminativeness(e_old, np.asarray(protos_old))
                if cfg.weighting == "entropy":
                    w = selective_weights(report.entropies)
                else:
                    w = least_confidence_weights(e_old, np.asarray(protos_old), y_old)
            report.weights = w
            if cfg.regularizer == "regression":
                per = regression_regularizer(e_new, nx.Tensor(e_old))
                l_compat = nx.weighted_sum(per, w)
            elif cfg.compat == "sbc" and cfg.sbc_prototypes == "new":
                y_new = np.asarray(labels, dtype=np.int64)[keep]
                l_compat = arcface_loss(e_new, y_new, protos_new, af, reduction=w)
            else:
                l_compat = arcface_loss(e_new, y_old, nx.detach(nx.as_tensor(protos_old)), af,
                                        reduction=w)
            total = nx.add(total, nx.scale(l_compat, cfg.coef_compat))
            report.l_sbc = float(l_compat.value)

    if cfg.forward_adapt and cfg.coef_fa != 0.0:
        if adapted is None:
            raise ValueError("forward adaptation needs adapted embeddings")
        if cfg.regularizer == "regression":
            l_fa = nx.mean(regression_regularizer(adapted, nx.detach(nx.as_tensor(emb_new))))
        else:
            l_fa = fa_loss(adapted, labels, protos_new, af)
        total = nx.add(total, nx.scale(l_fa, cfg.coef_fa))
        report.l_fa = float(l_fa.value)

    report.total = float(total.value)
    return total, report
