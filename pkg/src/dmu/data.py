"""Synthetic labeled vectors, upgrade-scenario splits, query/gallery benches
and two-view batch streams."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .container import read_container, write_container

SCENARIOS = ("extended_data", "open_data", "extended_class")
POOR_NOISE_FACTOR = 3.0


@dataclass
class LabeledVectorSet:
    vectors: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    class_count: int
    seed: int = 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        n = self.vectors.shape[0]
        if self.labels.shape != (n,) or self.sample_ids.shape != (n,):
            raise ValueError("vectors, labels and sample ids must align")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("labels must lie in [0, class_count)")
        if np.unique(self.sample_ids).size != n:
            raise ValueError("sample ids must be unique")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def input_dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, idx) -> "LabeledVectorSet":
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        return LabeledVectorSet(self.vectors[idx], self.labels[idx], self.sample_ids[idx],
                                self.class_count, self.seed)


@dataclass
class ScenarioSplit:
    kind: str
    old_set: LabeledVectorSet
    new_set: LabeledVectorSet
    seed: int


@dataclass
class QueryGalleryBench:
    query: LabeledVectorSet
    gallery: LabeledVectorSet

    @property
    def relevance(self) -> list[set[int]]:
        by_label: dict[int, set[int]] = {}
        for sid, y in zip(self.gallery.sample_ids, self.gallery.labels):
            by_label.setdefault(int(y), set()).add(int(sid))
        return [by_label.get(int(y), set()) for y in self.query.labels]


def generate_synthetic(class_count: int, per_class: int, input_dim: int,
                       intra_class_spread: float, noise_fraction: float, seed: int,
                       sample_seed: int | None = None) -> LabeledVectorSet:
    """Gaussian clusters around class means drawn uniformly on the unit sphere.

    Means depend on ``seed`` only, so sets drawn with different
    ``sample_seed`` share classes. A ``noise_fraction`` share of samples gets
    three times the per-coordinate noise.
    """
    if class_count <= 0 or per_class <= 0 or input_dim <= 0:
        raise ValueError("class_count, per_class and input_dim must be positive")
    if intra_class_spread < 0:
        raise ValueError("intra_class_spread must be non-negative")
    if not 0.0 <= noise_fraction <= 1.0:
        raise ValueError("noise_fraction must lie in [0, 1]")
    means = np.random.default_rng(seed).standard_normal((class_count, input_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    rng = np.random.default_rng([seed, 1 if sample_seed is None else 2 + sample_seed])
    n = class_count * per_class
    labels = np.repeat(np.arange(class_count), per_class)
    scale = np.full(n, float(intra_class_spread))
    poor = rng.permutation(n)[: int(round(noise_fraction * n))]
    scale[poor] *= POOR_NOISE_FACTOR
    vectors = means[labels] + scale[:, None] * rng.standard_normal((n, input_dim))
    return LabeledVectorSet(vectors, labels, np.arange(n), class_count, seed)


def _per_class_perm(labels: np.ndarray, rng: np.random.Generator) -> dict[int, np.ndarray]:
    return {int(c): rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)}


def make_split(dataset: LabeledVectorSet, kind: str, old_fraction: float, seed: int) -> ScenarioSplit:
    if kind not in SCENARIOS:
        raise ValueError(f"unknown scenario {kind!r}; choose from {SCENARIOS}")
    if not 0.0 < old_fraction < 1.0:
        raise ValueError("old_fraction must lie in (0, 1)")
    rng = np.random.default_rng([seed, 7])
    everything = np.arange(len(dataset))
    if kind == "extended_class":
        classes = rng.permutation(dataset.classes)
        k = int(round(old_fraction * classes.size))
        if k < 1 or k >= classes.size:
            raise ValueError("old_fraction leaves the old or new class set empty")
        old_idx = np.flatnonzero(np.isin(dataset.labels, classes[:k]))
        return ScenarioSplit(kind, dataset.subset(old_idx), dataset.subset(everything), seed)
    old_idx, new_idx = [], []
    for members in _per_class_perm(dataset.labels, rng).values():
        k = int(round(old_fraction * members.size))
        if k < 1 or (kind == "open_data" and k >= members.size):
            raise ValueError("old_fraction leaves a class empty")
        old_idx.append(members[:k])
        new_idx.append(members[k:])
    old_idx = np.concatenate(old_idx)
    new_idx = everything if kind == "extended_data" else np.concatenate(new_idx)
    return ScenarioSplit(kind, dataset.subset(old_idx), dataset.subset(new_idx), seed)


def nested_subsets(dataset: LabeledVectorSet, fractions, seed: int) -> list[LabeledVectorSet]:
    """Growing per-class subsets, one per fraction (extended-data generations)."""
    fractions = [float(f) for f in fractions]
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must be strictly increasing")
    if fractions[0] <= 0 or fractions[-1] > 1:
        raise ValueError("fractions must lie in (0, 1]")
    perms = _per_class_perm(dataset.labels, np.random.default_rng([seed, 11]))
    out = []
    for f in fractions:
        idx = []
        for members in perms.values():
            k = int(round(f * members.size))
            if k < 1:
                raise ValueError(f"fraction {f} leaves a class empty")
            idx.append(members[:k])
        out.append(dataset.subset(np.concatenate(idx)))
    return out


def make_bench(dataset: LabeledVectorSet, query_per_class: int, seed: int) -> QueryGalleryBench:
    if query_per_class < 1:
        raise ValueError("query_per_class must be at least 1")
    rng = np.random.default_rng([seed, 13])
    q_idx = []
    for c, members in _per_class_perm(dataset.labels, rng).items():
        if members.size <= query_per_class:
            raise ValueError(f"class {c} has {members.size} samples, need more than {query_per_class}")
        q_idx.append(members[:query_per_class])
    q_idx = np.concatenate(q_idx)
    g_idx = np.setdiff1d(np.arange(len(dataset)), q_idx)
    return QueryGalleryBench(dataset.subset(q_idx), dataset.subset(g_idx))


def batches(dataset: LabeledVectorSet, batch_size: int, augment_noise: float, seed: int,
            epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(old_view, new_view, labels)``; the incomplete tail batch is dropped."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    rng = np.random.default_rng([seed, epoch, 17])
    order = rng.permutation(len(dataset))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        x = dataset.vectors[idx]
        noise = rng.standard_normal((2, *x.shape))
        yield x + augment_noise * noise[0], x + augment_noise * noise[1], dataset.labels[idx]


def save_dataset(path: str | Path, ds: LabeledVectorSet, extra: dict | None = None) -> None:
    meta = {"n": len(ds), "input_dim": ds.input_dim, "class_count": ds.class_count,
            "seed": ds.seed, **(extra or {})}
    write_container(path, "dataset", meta,
                    {"vectors": ds.vectors, "labels": ds.labels, "sample_ids": ds.sample_ids})


def load_dataset(path: str | Path) -> LabeledVectorSet:
    meta, arr = read_container(path, "dataset")
    return LabeledVectorSet(arr["vectors"], arr["labels"], arr["sample_ids"],
                            int(meta["class_count"]), int(meta["seed"]))
