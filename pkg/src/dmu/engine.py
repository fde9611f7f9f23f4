"""Training loops for old / oracle / BCT / DMU models and the sequential-upgrade driver."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import numerics as nx
from .data import LabeledVectorSet, QueryGalleryBench, batches, nested_subsets
from .evaluation import (DEFAULT_FAR, DEFAULT_MAP_K, EmbeddingStore, adapt_store, degradation,
                         embed, store_metric, upgrade_gain)
from .losses import ArcFaceConfig, ObjectiveConfig, dmu_objective
from .models import (INFER, TRAIN, AdapterModel, AdapterSpec, ClassifierPrototypes, ClassifierSpec,
                     EncoderModel, EncoderSpec, ModelCheckpoint, init_model)

log = logging.getLogger(__name__)

METHODS = ("old", "oracle", "bct", "dmu", "dmu_least_conf", "bct_regression", "dmu_regression")
STANDALONE = ("old", "oracle")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    method: str = "oracle"
    epochs: int = 30
    warmup_epochs: int = 1
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    s: float = 30.0
    m: float = 0.3
    augment_noise: float = 0.0
    hidden: tuple[int, ...] = (256, 256)
    embedding_dim: int = 64
    adapter_hidden: int = 1024
    coef_new: float = 1.0
    coef_compat: float = 1.0
    coef_fa: float = 1.0
    sbc_prototypes: str = "old"
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, not {self.method!r}")
        if self.epochs < 1 or self.batch_size < 2 or self.warmup_epochs < 0:
            raise ValueError("need epochs >= 1, batch_size >= 2, warmup_epochs >= 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        ArcFaceConfig(self.s, self.m)

    @property
    def arcface(self) -> ArcFaceConfig:
        return ArcFaceConfig(self.s, self.m)

    def objective(self) -> ObjectiveConfig:
        compat, weighting, reg, fa = {
            "old": ("none", "entropy", "arcface", False),
            "oracle": ("none", "entropy", "arcface", False),
            "bct": ("bct", "entropy", "arcface", False),
            "dmu": ("sbc", "entropy", "arcface", True),
            "dmu_least_conf": ("sbc", "least_conf", "arcface", True),
            "bct_regression": ("bct", "entropy", "regression", False),
            "dmu_regression": ("sbc", "entropy", "regression", True),
        }[self.method]
        return ObjectiveConfig(self.arcface, compat, weighting, reg, fa, self.sbc_prototypes,
                               self.coef_new, self.coef_compat, self.coef_fa)


@dataclass
class TrainRun:
    config: TrainConfig
    trace: list[dict] = field(default_factory=list)
    encoder: EncoderModel | None = None
    classifier: ClassifierPrototypes | None = None
    adapter: AdapterModel | None = None
    generation: int = 0

    def checkpoint(self, **extra) -> ModelCheckpoint:
        meta = {"generation": self.generation, "method": self.config.method,
                "seed": self.config.seed, **extra}
        return ModelCheckpoint(self.encoder, self.classifier, self.adapter, meta)


def sub_seed(seed: int, role: str) -> int:
    key = [ord(c) for c in role]
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = total_steps - 1 - warmup_steps
    progress = 1.0 if span <= 0 else (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float, velocity: dict[str, np.ndarray],
             no_decay: frozenset[str] = frozenset()) -> dict[str, np.ndarray]:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v (in place)."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise nx.DimensionError(f"gradient shape {g.shape} vs parameter {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(-1, f"non-finite gradient for {name}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay and name not in no_decay:
            v += weight_decay * p
        p -= lr * v
    return params


def _label_lookup(classifier: ClassifierPrototypes, class_count: int) -> np.ndarray:
    table = np.full(class_count, -1, dtype=np.int64)
    for j, c in enumerate(classifier.spec.class_ids):
        if c < class_count:
            table[c] = j
    return table


class _Trainable:
    """Flat view over the parameters one optimizer updates."""

    def __init__(self, **models):
        self.models = {k: m for k, m in models.items() if m is not None}
        self.params = {f"{role}/{k}": v for role, m in self.models.items() for k, v in m.params.items()}
        self.no_decay = frozenset(k for k in self.params if k.endswith((".gamma", ".beta")))
        self.velocity: dict[str, np.ndarray] = {}

    def leaves(self) -> dict[str, dict[str, nx.Tensor]]:
        return {role: m.leaves() for role, m in self.models.items()}

    @staticmethod
    def grads(leaves) -> dict[str, np.ndarray]:
        return {f"{role}/{k}": t.grad for role, ls in leaves.items() for k, t in ls.items()}


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm


def _fit(train_set: LabeledVectorSet, config: TrainConfig, old: TrainRun | None,
         generation: int) -> TrainRun:
    obj = config.objective()
    needs_old = obj.compat != "none" or obj.forward_adapt
    if needs_old and (old is None or old.encoder is None or old.classifier is None):
        raise ValueError(f"method {config.method!r} needs a trained old model")

    enc_spec = EncoderSpec(train_set.input_dim, config.hidden, config.embedding_dim)
    encoder = init_model(enc_spec, sub_seed(config.seed, "encoder"))
    classes = tuple(int(c) for c in train_set.classes)
    classifier = init_model(ClassifierSpec(config.embedding_dim, classes),
                            sub_seed(config.seed, "classifier"))
    adapter = None
    if obj.forward_adapt:
        if old.encoder.embedding_dim != config.embedding_dim:
            raise nx.DimensionError("old and new embedding dims must match for the adapter")
        adapter = init_model(AdapterSpec(config.embedding_dim, config.adapter_hidden),
                             sub_seed(config.seed, "adapter"))

    trainable = _Trainable(encoder=encoder, classifier=classifier, adapter=adapter)
    new_lookup = _label_lookup(classifier, train_set.class_count)
    old_lookup = _label_lookup(old.classifier, train_set.class_count) if needs_old else None
    old_protos = old.classifier.prototypes if needs_old else None

    steps_per_epoch = len(train_set) // config.batch_size
    if steps_per_epoch == 0:
        raise ValueError("training set is smaller than one batch")
    total = steps_per_epoch * config.epochs
    warmup = steps_per_epoch * config.warmup_epochs
    run = TrainRun(config, [], encoder, classifier, adapter, generation)
    step = 0
    for epoch in range(config.epochs):
        sums = {"l_new": 0.0, "l_sbc": 0.0, "l_fa": 0.0, "total": 0.0}
        lam_dev = 0.0
        lr = 0.0
        for x_old, x_new, y in batches(train_set, config.batch_size, config.augment_noise,
                                       config.seed, epoch):
            lr = lr_at(step, total, warmup, config.base_lr)
            leaves = trainable.leaves()
            emb_new = encoder.forward(x_new, TRAIN, leaves["encoder"])
            emb_old = adapted = y_old = None
            if needs_old:
                emb_old = old.encoder.encode(x_old, INFER)
                y_old = old_lookup[y]
            if adapter is not None:
                adapted = adapter.forward(emb_old, TRAIN, leaves["adapter"])
            loss, rep = dmu_objective(emb_new, new_lookup[y], leaves["classifier"]["prototypes"],
                                      obj, emb_old=emb_old, protos_old=old_protos,
                                      old_labels=y_old, adapted=adapted)
            if not math.isfinite(rep.total):
                raise DivergenceError(step, f"loss {rep.total}")
            nx.backward(loss)
            grads = trainable.grads(leaves)
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise DivergenceError(step, f"non-finite gradient for {name}")
            if config.grad_clip > 0:
                _clip(grads, config.grad_clip)
            sgd_step(trainable.params, grads, lr, config.momentum, config.weight_decay,
                     trainable.velocity, trainable.no_decay)
            for k in sums:
                sums[k] += getattr(rep, k)
            if rep.weights.size:
                lam_dev = max(lam_dev, abs(float(rep.weights.sum()) - 1.0))
            step += 1
        rec = {"epoch": epoch, "lr": lr}
        rec.update({k: v / steps_per_epoch for k, v in sums.items()})
        rec["lambda_sum_dev"] = lam_dev
        run.trace.append(rec)
        log.debug("%s epoch %d: %s", config.method, epoch, rec)
    return run


def train_standalone(train_set: LabeledVectorSet, config: TrainConfig, generation: int = 0) -> TrainRun:
    """Train an encoder + classifier with the ArcFace loss only (old or oracle)."""
    if config.method not in STANDALONE:
        raise ValueError("train_standalone handles the old and oracle methods")
    return _fit(train_set, config, None, generation)


def train_bct(train_set: LabeledVectorSet, old_run: TrainRun, config: TrainConfig,
              generation: int = 1) -> TrainRun:
    if config.method not in ("bct", "bct_regression"):
        raise ValueError("train_bct handles the bct and bct_regression methods")
    return _fit(train_set, config, old_run, generation)


def train_dmu(train_set: LabeledVectorSet, old_run: TrainRun, config: TrainConfig,
              generation: int = 1) -> TrainRun:
    if config.method not in ("dmu", "dmu_least_conf", "dmu_regression"):
        raise ValueError("train_dmu handles the dmu variants")
    return _fit(train_set, config, old_run, generation)


def train(train_set: LabeledVectorSet, config: TrainConfig, old_run: TrainRun | None = None,
          generation: int = 0) -> TrainRun:
    if config.method in STANDALONE:
        return train_standalone(train_set, config, generation)
    if config.method.startswith("bct"):
        return train_bct(train_set, old_run, config, generation)
    return train_dmu(train_set, old_run, config, generation)


# ------------------------------------------------------------ sequences


@dataclass
class GenerationReport:
    generation: int
    method: str
    m_self: float
    m_oracle_self: float
    m_old_self: float
    m_cross: float          # new queries vs the gallery deployed before this generation
    m_cross_prev: float     # new queries vs the previous generation's own gallery encoding
    m_adapted: float | None
    delta_up: float
    delta_down: float
    gallery_version: int

    def records(self) -> list[tuple[str, str]]:
        out = []
        for k, v in asdict(self).items():
            if v is None:
                continue
            out.append((k, f"{v:.2f}" if isinstance(v, float) else str(v)))
        return out


@dataclass
class SequenceResult:
    fractions: list[float]
    old_run: TrainRun
    oracle_runs: list[TrainRun]
    runs: dict[str, list[TrainRun]]
    reports: dict[str, list[GenerationReport]]
    galleries: dict[str, EmbeddingStore]


def sequential_upgrade(dataset: LabeledVectorSet, bench: QueryGalleryBench, fractions,
                       methods=("bct", "dmu"), config: TrainConfig = TrainConfig(),
                       metric: str = "map", k: int = DEFAULT_MAP_K,
                       far: float = DEFAULT_FAR) -> SequenceResult:
    """Run generation 0 then one compatible upgrade per further fraction.

    Under a DMU method the deployed gallery is refreshed by each new adapter;
    under BCT it keeps the generation-0 embeddings. Every method sees the same
    seeds so results pair up across methods.
    """
    subsets = nested_subsets(dataset, fractions, config.seed)
    rel = bench.relevance

    def score(q, g):
        return store_metric(q, g, rel, metric, k, far)

    def cfg(method, gen):
        return replace(config, method=method, seed=config.seed * 1000 + gen)

    old_run = train_standalone(subsets[0], cfg("old", 0), 0)
    gallery0 = embed(old_run.encoder, bench.gallery, "gallery", "old/gen0", 0)
    m_old_self = score(embed(old_run.encoder, bench.query, "query", "old"), gallery0)

    oracles, oracle_self = [], []
    for gen in range(1, len(subsets)):
        orc = train_standalone(subsets[gen], cfg("oracle", gen), gen)
        oracles.append(orc)
        oracle_self.append(score(embed(orc.encoder, bench.query, "query", "oracle"),
                                 embed(orc.encoder, bench.gallery, "gallery", "oracle")))

    runs, reports, galleries = {}, {}, {}
    for method in methods:
        prev, store = old_run, gallery0
        runs[method], reports[method] = [], []
        for gen in range(1, len(subsets)):
            run = train(subsets[gen], cfg(method, gen), prev, gen)
            q = embed(run.encoder, bench.query, "query", f"{method}/gen{gen}")
            m_self = score(q, embed(run.encoder, bench.gallery, "gallery", method))
            m_cross = score(q, store)
            m_prev = score(q, embed(prev.encoder, bench.gallery, "gallery", "prev"))
            m_adapted = None
            if run.adapter is not None:
                store = adapt_store(store, run.adapter, f"{method}/gen{gen}")
                m_adapted = score(q, store)
            reports[method].append(GenerationReport(
                gen, method, m_self, oracle_self[gen - 1], m_old_self, m_cross, m_prev, m_adapted,
                upgrade_gain(m_cross, m_old_self), degradation(oracle_self[gen - 1], m_self),
                store.generation))
            runs[method].append(run)
            prev = run
        galleries[method] = store
    return SequenceResult([float(f) for f in fractions], old_run, oracles, runs, reports, galleries)
