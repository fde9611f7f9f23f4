"""Encoder, classifier prototypes and forward-adaptation head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import numerics as nx
from .container import read_container, write_container

TRAIN, INFER = "train", "infer"


@dataclass(frozen=True)
class EncoderSpec:
    input_dim: int
    hidden: tuple[int, ...] = (256, 256)
    embedding_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim <= 0 or self.embedding_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError(f"invalid encoder spec {self}")


@dataclass(frozen=True)
class AdapterSpec:
    embedding_dim: int
    hidden_dim: int = 1024
    blocks: int = 3

    def __post_init__(self):
        if self.embedding_dim <= 0 or self.hidden_dim <= 0 or self.blocks != 3:
            raise ValueError(f"invalid adapter spec {self}; the head has exactly 3 blocks")


@dataclass(frozen=True)
class ClassifierSpec:
    embedding_dim: int
    class_ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        object.__setattr__(self, "class_ids", ids)
        if self.embedding_dim <= 0 or not ids or len(set(ids)) != len(ids):
            raise ValueError("classifier needs a positive dim and distinct class ids")


class _MLP:
    """[affine -> batch_norm -> relu] blocks, an output affine, then L2 norm."""

    def __init__(self, widths: list[int]):
        self.widths = widths
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-2], widths[1:-1])):
            self.params[f"block{i}.W"] = np.zeros((fan_in, fan_out))
            self.params[f"block{i}.b"] = np.zeros(fan_out)
            self.params[f"block{i}.gamma"] = np.ones(fan_out)
            self.params[f"block{i}.beta"] = np.zeros(fan_out)
            self.buffers[f"block{i}.running_mean"] = np.zeros(fan_out)
            self.buffers[f"block{i}.running_var"] = np.ones(fan_out)
        self.params["out.W"] = np.zeros((widths[-2], widths[-1]))
        self.params["out.b"] = np.zeros(widths[-1])

    @property
    def n_blocks(self) -> int:
        return len(self.widths) - 2

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _init(self, rng: np.random.Generator) -> None:
        for name, p in self.params.items():
            if name.endswith(".W"):
                limit = np.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                p[...] = rng.uniform(-limit, limit, size=p.shape)

    def leaves(self) -> dict[str, nx.Tensor]:
        return {k: nx.Tensor(v, requires_grad=True) for k, v in self.params.items()}

    def forward(self, x, mode: str = INFER, leaves: dict[str, nx.Tensor] | None = None) -> nx.Tensor:
        if mode not in (TRAIN, INFER):
            raise ValueError(f"mode must be train or infer, not {mode!r}")
        p = leaves if leaves is not None else {k: nx.Tensor(v) for k, v in self.params.items()}
        h = nx.as_tensor(x)
        if h.value.ndim != 2 or h.shape[1] != self.in_dim:
            raise nx.DimensionError(f"expected input of width {self.in_dim}, got {h.shape}")
        for i in range(self.n_blocks):
            h = nx.affine(h, p[f"block{i}.W"], p[f"block{i}.b"])
            h = nx.batch_norm(h, p[f"block{i}.gamma"], p[f"block{i}.beta"],
                              self.buffers[f"block{i}.running_mean"],
                              self.buffers[f"block{i}.running_var"], train=mode == TRAIN)
            h = nx.relu(h)
        h = nx.affine(h, p["out.W"], p["out.b"])
        return nx.l2_normalize(h)

    def __call__(self, x, mode: str = INFER) -> np.ndarray:
        return self.forward(x, mode).value

    def state(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for store in (self.params, self.buffers):
            for k in store:
                if arrays[k].shape != store[k].shape:
                    raise ValueError(f"shape mismatch for {k}")
                store[k][...] = arrays[k]

    def copy(self):
        twin = self.__class__(self.spec)
        twin.load_state(self.state())
        return twin


class EncoderModel(_MLP):
    """Embedding function mapping raw vectors to unit-norm embeddings."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        super().__init__([spec.input_dim, *spec.hidden, spec.embedding_dim])

    @property
    def embedding_dim(self) -> int:
        return self.spec.embedding_dim

    def encode(self, x, mode: str = INFER) -> np.ndarray:
        return self.forward(x, mode).value


class AdapterModel(_MLP):
    """Head mapping old unit-norm embeddings into the new embedding space."""

    def __init__(self, spec: AdapterSpec):
        self.spec = spec
        d, h = spec.embedding_dim, spec.hidden_dim
        super().__init__([d, h, h, h, d])

    def adapt(self, old_emb, mode: str = INFER) -> np.ndarray:
        return self.forward(old_emb, mode).value


class ClassifierPrototypes:
    """One prototype row per known class; rows are normalized at use."""

    def __init__(self, spec: ClassifierSpec):
        self.spec = spec
        self.params = {"prototypes": np.zeros((len(spec.class_ids), spec.embedding_dim))}
        self._index = {c: j for j, c in enumerate(spec.class_ids)}

    @property
    def class_count(self) -> int:
        return len(self.spec.class_ids)

    @property
    def prototypes(self) -> np.ndarray:
        return self.params["prototypes"]

    def leaves(self) -> dict[str, nx.Tensor]:
        return {"prototypes": nx.Tensor(self.prototypes, requires_grad=True)}

    def local_labels(self, labels) -> np.ndarray:
        """Map dataset labels to prototype rows; -1 where the class is unknown."""
        return np.array([self._index.get(int(y), -1) for y in np.asarray(labels)], dtype=np.int64)

    def state(self) -> dict[str, np.ndarray]:
        return dict(self.params)

    def load_state(self, arrays):
        self.params["prototypes"][...] = arrays["prototypes"]

    def copy(self):
        twin = ClassifierPrototypes(self.spec)
        twin.load_state(self.state())
        return twin


def cosine_logits(emb, prototypes) -> nx.Tensor:
    """⟨emb_i, ω_j/‖ω_j‖⟩ for every row/prototype pair."""
    w = nx.l2_normalize(prototypes)
    return nx.matmul(emb, nx.transpose(w))


def init_model(spec, seed: int):
    """Deterministic initialization from ``seed``."""
    rng = np.random.default_rng(seed)
    if isinstance(spec, EncoderSpec):
        model = EncoderModel(spec)
        model._init(rng)
    elif isinstance(spec, AdapterSpec):
        model = AdapterModel(spec)
        model._init(rng)
    elif isinstance(spec, ClassifierSpec):
        model = ClassifierPrototypes(spec)
        w = rng.standard_normal(model.prototypes.shape)
        model.params["prototypes"][...] = w / np.linalg.norm(w, axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown model spec {spec!r}")
    return model


def affine_macs(model: _MLP) -> int:
    """Multiply-accumulates of one forward pass per sample (affine layers only)."""
    return sum(a * b for a, b in zip(model.widths[:-1], model.widths[1:]))


def bias_terms(model: _MLP) -> int:
    return sum(model.widths[1:])


# ------------------------------------------------------------ checkpoints

_SPEC_TYPES = {"encoder": EncoderSpec, "adapter": AdapterSpec, "classifier": ClassifierSpec}
_MODEL_TYPES = {"encoder": EncoderModel, "adapter": AdapterModel, "classifier": ClassifierPrototypes}


@dataclass
class ModelCheckpoint:
    encoder: EncoderModel | None = None
    classifier: ClassifierPrototypes | None = None
    adapter: AdapterModel | None = None
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: ModelCheckpoint) -> None:
    specs, arrays = {}, {}
    for role in ("encoder", "classifier", "adapter"):
        model = getattr(ckpt, role)
        if model is None:
            continue
        specs[role] = asdict(model.spec)
        for k, v in model.state().items():
            arrays[f"{role}/{k}"] = v
    write_container(path, "checkpoint", {"specs": specs, "metadata": ckpt.metadata}, arrays)


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    meta, arrays = read_container(path, "checkpoint")
    ckpt = ModelCheckpoint(metadata=meta.get("metadata", {}))
    for role, spec_dict in meta["specs"].items():
        spec = _SPEC_TYPES[role](**spec_dict)
        model = _MODEL_TYPES[role](spec)
        prefix = f"{role}/"
        model.load_state({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        setattr(ckpt, role, model)
    return ckpt
