"""Retrieval ranking, mAP / TAR@FAR, cross-model evaluation, upgrade gain and
degradation, the inequality-chain check, and the entropy scatter."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .data import LabeledVectorSet, QueryGalleryBench
from .losses import entropy_discriminativeness
from .models import INFER, AdapterModel, ClassifierPrototypes, EncoderModel
from .numerics import DimensionError

DEFAULT_MAP_K = 100
DEFAULT_FAR = 1e-2


@dataclass
class EmbeddingStore:
    name: str
    model_tag: str
    generation: int
    embeddings: np.ndarray
    sample_ids: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.embeddings.shape[0]
        if self.sample_ids.shape != (n,) or self.labels.shape != (n,):
            raise ValueError("ids and labels must align with embeddings")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if n and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("store embeddings must be unit-norm")

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def embed(model: EncoderModel, dataset: LabeledVectorSet, name: str, model_tag: str,
          generation: int = 0) -> EmbeddingStore:
    return EmbeddingStore(name, model_tag, generation, model.encode(dataset.vectors, INFER),
                          dataset.sample_ids, dataset.labels)


def adapt_store(store: EmbeddingStore, adapter: AdapterModel, model_tag: str) -> EmbeddingStore:
    """Refresh a gallery through the adaptation head; the generation tag advances."""
    if store.dim != adapter.in_dim:
        raise DimensionError(f"store dim {store.dim} vs adapter input {adapter.in_dim}")
    return EmbeddingStore(store.name, model_tag, store.generation + 1,
                          adapter.adapt(store.embeddings, INFER), store.sample_ids, store.labels)


def save_store(path: str | Path, store: EmbeddingStore) -> None:
    meta = {"name": store.name, "model_tag": store.model_tag, "generation": store.generation,
            "n": len(store), "dim": store.dim}
    write_container(path, "embeddings", meta, {"embeddings": store.embeddings,
                                               "sample_ids": store.sample_ids,
                                               "labels": store.labels})


def load_store(path: str | Path) -> EmbeddingStore:
    meta, arr = read_container(path, "embeddings")
    return EmbeddingStore(meta["name"], meta["model_tag"], int(meta["generation"]),
                          arr["embeddings"], arr["sample_ids"], arr["labels"])


# ------------------------------------------------------------- metrics


def rank(query: EmbeddingStore, gallery: EmbeddingStore, k: int | None = None) -> np.ndarray:
    """Gallery ids per query by descending cosine; ties go to the smaller id."""
    if query.dim != gallery.dim:
        raise DimensionError(f"query dim {query.dim} vs gallery dim {gallery.dim}")
    sims = query.embeddings @ gallery.embeddings.T
    ids = np.broadcast_to(gallery.sample_ids, sims.shape)
    order = np.lexsort((ids, -sims), axis=-1)
    if k is not None:
        order = order[:, :k]
    return gallery.sample_ids[order]


def average_precision(ranked_ids, relevant: set[int], k: int | None = None) -> float:
    if not relevant:
        raise ValueError("every query needs at least one relevant gallery item")
    ranked = np.asarray(ranked_ids)
    if k is not None:
        ranked = ranked[:k]
    hits = np.fromiter((int(i) in relevant for i in ranked), dtype=bool, count=ranked.size)
    if not hits.any():
        return 0.0
    precision = np.cumsum(hits) / np.arange(1, ranked.size + 1)
    denom = len(relevant) if k is None else min(len(relevant), k)
    return float(precision[hits].sum() / denom)


def mean_average_precision(rankings, relevance, k: int | None = DEFAULT_MAP_K) -> float:
    """mAP@k in percent; AP normalized by min(#relevant, k)."""
    if len(rankings) != len(relevance):
        raise ValueError("one relevance set per ranking expected")
    aps = [average_precision(r, rel, k) for r, rel in zip(rankings, relevance)]
    return 100.0 * float(np.mean(aps))


def tar_at_far(genuine, impostor, far_targets) -> list[float]:
    """Best genuine acceptance rate whose impostor acceptance stays within each target.

    Thresholds range over the distinct observed scores (plus +inf); a pair is
    accepted when its score is >= the threshold.
    """
    gen = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise ValueError("genuine and impostor score sets must be nonempty")
    thresholds = np.append(np.unique(np.concatenate([gen, imp])), np.inf)
    far = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    tar = (gen.size - np.searchsorted(gen, thresholds, side="left")) / gen.size
    out = []
    for alpha in np.atleast_1d(far_targets):
        feasible = far <= alpha
        out.append(float(tar[feasible].max()))
    return out


def verification_scores(query: EmbeddingStore, gallery: EmbeddingStore):
    """Cosine scores of all query/gallery pairs split into (genuine, impostor)."""
    if query.dim != gallery.dim:
        raise DimensionError(f"query dim {query.dim} vs gallery dim {gallery.dim}")
    sims = query.embeddings @ gallery.embeddings.T
    same = query.labels[:, None] == gallery.labels[None, :]
    return sims[same], sims[~same]


def store_metric(query: EmbeddingStore, gallery: EmbeddingStore, relevance=None,
                 metric: str = "map", k: int = DEFAULT_MAP_K, far: float = DEFAULT_FAR) -> float:
    if metric == "map":
        if relevance is None:
            by_label: dict[int, set[int]] = {}
            for sid, y in zip(gallery.sample_ids, gallery.labels):
                by_label.setdefault(int(y), set()).add(int(sid))
            relevance = [by_label.get(int(y), set()) for y in query.labels]
        return mean_average_precision(rank(query, gallery, k), relevance, k)
    if metric == "tar":
        return 100.0 * tar_at_far(*verification_scores(query, gallery), [far])[0]
    raise ValueError(f"metric must be map or tar, not {metric!r}")


def cross_model_eval(query_model: EncoderModel, gallery_store: EmbeddingStore,
                     bench: QueryGalleryBench, metric: str = "map", k: int = DEFAULT_MAP_K,
                     far: float = DEFAULT_FAR) -> float:
    """Encode the bench queries with ``query_model`` and score them against a fixed gallery."""
    query = embed(query_model, bench.query, "query", "query")
    return store_metric(query, gallery_store, bench.relevance, metric, k, far)


def upgrade_gain(m_cross: float, m_old_self: float) -> float:
    if m_old_self == 0:
        raise ZeroDivisionError("old self-test metric is zero")
    return 100.0 * (m_cross - m_old_self) / m_old_self


def degradation(m_oracle_self: float, m_new_self: float) -> float:
    if m_oracle_self == 0:
        raise ZeroDivisionError("oracle self-test metric is zero")
    return 100.0 * (m_oracle_self - m_new_self) / m_oracle_self


def chain_check(m_old_self: float, m_cross: float, m_adapted: float) -> tuple[bool, bool]:
    return (m_old_self < m_cross, m_cross < m_adapted)


def entropy_scatter(gallery_inputs: np.ndarray, old_encoder: EncoderModel,
                    old_classifier: ClassifierPrototypes, adapter: AdapterModel,
                    new_classifier: ClassifierPrototypes, sample_count: int, seed: int) -> np.ndarray:
    """(Λ_old, Λ_FA) for a random sample of gallery items, shape (sample_count, 2)."""
    gallery_inputs = np.asarray(gallery_inputs, dtype=np.float64)
    n = gallery_inputs.shape[0]
    if sample_count > n:
        raise ValueError(f"asked for {sample_count} items from a gallery of {n}")
    idx = np.sort(np.random.default_rng([seed, 19]).choice(n, size=sample_count, replace=False))
    old = old_encoder.encode(gallery_inputs[idx], INFER)
    lam_old = entropy_discriminativeness(old, old_classifier.prototypes)
    lam_fa = entropy_discriminativeness(adapter.adapt(old, INFER), new_classifier.prototypes)
    return np.column_stack([lam_old, lam_fa])


# --------------------------------------------------------------- report


@dataclass
class EvalReport:
    m_self: float
    m_old_self: float | None = None
    m_cross: float | None = None
    m_adapted: float | None = None
    m_oracle_self: float | None = None
    delta_up: float | None = None
    delta_down: float | None = None
    chain_ok: tuple[bool, bool, bool] | None = None
    entropy_pairs: np.ndarray | None = field(default=None, repr=False)

    def records(self) -> list[tuple[str, str]]:
        out = []
        for key in ("m_self", "m_old_self", "m_cross", "m_adapted", "m_oracle_self",
                    "delta_up", "delta_down"):
            val = getattr(self, key)
            if val is not None:
                out.append((key, f"{val:.2f}"))
        if self.chain_ok is not None:
            for name, ok in zip(("old_lt_cross", "cross_lt_adapted", "chain"), self.chain_ok):
                out.append((f"chain_{name}" if name != "chain" else "chain_ok", str(ok).lower()))
        return out

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        lines = [f"{k}={v}" for k, v in self.records()]
        (directory / "report.txt").write_text("\n".join(lines) + "\n")
        if self.entropy_pairs is not None:
            write_scatter(directory / "entropy_scatter.tsv", self.entropy_pairs)


def write_scatter(path: str | Path, pairs: np.ndarray) -> None:
    rows = ["lambda_old\tlambda_fa"] + [f"{a:.10f}\t{b:.10f}" for a, b in pairs]
    Path(path).write_text("\n".join(rows) + "\n")


def read_records(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k] = v
    return out


def evaluate_upgrade(bench: QueryGalleryBench, new_encoder: EncoderModel, *,
                     old_encoder: EncoderModel | None = None,
                     adapter: AdapterModel | None = None,
                     oracle_encoder: EncoderModel | None = None,
                     old_classifier: ClassifierPrototypes | None = None,
                     new_classifier: ClassifierPrototypes | None = None,
                     gallery_store: EmbeddingStore | None = None,
                     adapted_store: EmbeddingStore | None = None,
                     metric: str = "map", k: int = DEFAULT_MAP_K, far: float = DEFAULT_FAR,
                     scatter_count: int = 0, seed: int = 0) -> EvalReport:
    """Self, cross and adapted metrics for one upgrade, with the derived deltas.

    ``gallery_store`` overrides the old-model gallery (e.g. a gallery that has
    already been refreshed by earlier generations); otherwise it is encoded by
    ``old_encoder``.
    """
    rel = bench.relevance

    def score(query_store, gal):
        return store_metric(query_store, gal, rel, metric, k, far)

    q_new = embed(new_encoder, bench.query, "query", "new")
    rep = EvalReport(m_self=score(q_new, embed(new_encoder, bench.gallery, "gallery", "new")))
    if oracle_encoder is not None:
        rep.m_oracle_self = score(embed(oracle_encoder, bench.query, "query", "oracle"),
                                  embed(oracle_encoder, bench.gallery, "gallery", "oracle"))
        rep.delta_down = degradation(rep.m_oracle_self, rep.m_self)
    if old_encoder is not None or gallery_store is not None:
        if gallery_store is None:
            gallery_store = embed(old_encoder, bench.gallery, "gallery", "old")
        if old_encoder is not None:
            rep.m_old_self = score(embed(old_encoder, bench.query, "query", "old"),
                                   embed(old_encoder, bench.gallery, "gallery", "old"))
        rep.m_cross = score(q_new, gallery_store)
        if rep.m_old_self is not None:
            rep.delta_up = upgrade_gain(rep.m_cross, rep.m_old_self)
        if adapter is not None or adapted_store is not None:
            if adapted_store is None:
                adapted_store = adapt_store(gallery_store, adapter, "adapted")
            rep.m_adapted = score(q_new, adapted_store)
            if rep.m_old_self is not None:
                a, b = chain_check(rep.m_old_self, rep.m_cross, rep.m_adapted)
                rep.chain_ok = (a, b, a and b)
        if (scatter_count and adapter is not None and old_encoder is not None
                and old_classifier is not None and new_classifier is not None):
            rep.entropy_pairs = entropy_scatter(bench.gallery.vectors, old_encoder, old_classifier,
                                                adapter, new_classifier,
                                                min(scatter_count, len(bench.gallery)), seed)
    return rep
