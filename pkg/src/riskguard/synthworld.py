"""Synthetic oracle worlds with known cloud/edge distributions.

A classification world fixes one weight matrix ``W`` from its seed; inputs
are ``x ~ N(0, I)``, the cloud law is ``softmax(W x / scale)`` and the edge
law is a tempered, noisy copy of the cloud logits. A multi-label world
produces per-item scores that are noisy copies of the 0/1 ground truth.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import (Example, MultiLabelExample, RandomnessContract, RiskguardError, make_prob_vector)

LOGIT_FLOOR = 1e-12
# reserved stream indices; trials use small indices
WORLD_STREAM = 2**63
GEN_STREAM = 2**63 + 1
EVAL_STREAM = 2**63 + 2


class WorldConfigError(RiskguardError):
    pass


def _from_mapping(cls, data: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise WorldConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise WorldConfigError(str(exc)) from None


@dataclass(frozen=True)
class ClassificationWorldConfig:
    label_count: int = 10
    feature_dim: int = 2
    scale: float = 1.0
    edge_temperature: float = 1.0
    edge_logit_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if int(self.label_count) < 2:
            raise WorldConfigError("label_count must be at least 2")
        if int(self.feature_dim) < 1:
            raise WorldConfigError("feature_dim must be at least 1")
        if not self.scale > 0 or not self.edge_temperature > 0:
            raise WorldConfigError("scale and edge_temperature must be positive")
        if self.edge_logit_noise < 0:
            raise WorldConfigError("edge_logit_noise must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "ClassificationWorldConfig":
        return _from_mapping(cls, data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MultiLabelWorldConfig:
    items_per_instance: int = 30
    positive_rate: float = 0.3
    score_noise: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if int(self.items_per_instance) < 1:
            raise WorldConfigError("items_per_instance must be at least 1")
        if not 0.0 <= self.positive_rate < 1.0:
            raise WorldConfigError("positive_rate must lie in [0, 1)")
        if self.score_noise < 0:
            raise WorldConfigError("score_noise must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "MultiLabelWorldConfig":
        return _from_mapping(cls, data)

    def to_dict(self) -> dict:
        return asdict(self)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ClassificationBatch:
    features: np.ndarray  # [n, d]
    cloud: np.ndarray  # [n, K]
    edge: np.ndarray  # [n, K]
    labels: np.ndarray  # [n]

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "ClassificationBatch":
        return ClassificationBatch(self.features[idx], self.cloud[idx], self.edge[idx], self.labels[idx])

    def to_examples(self, start_id: int = 0) -> list[Example]:
        return [
            Example(id=start_id + i, cloud_dist=make_prob_vector(self.cloud[i]),
                    edge_dist=make_prob_vector(self.edge[i]),
                    features=tuple(float(v) for v in self.features[i]), label=int(self.labels[i]))
            for i in range(len(self))
        ]


@dataclass
class MultiLabelBatch:
    scores: np.ndarray  # [n, m] in [0, 1]
    positives: np.ndarray  # [n, m] bool

    def __len__(self):
        return len(self.scores)

    def take(self, idx) -> "MultiLabelBatch":
        return MultiLabelBatch(self.scores[idx], self.positives[idx])

    def to_examples(self, start_id: int = 0) -> list[MultiLabelExample]:
        return [
            MultiLabelExample(id=start_id + i, item_scores=tuple(float(s) for s in self.scores[i]),
                              positives=frozenset(int(j) for j in np.flatnonzero(self.positives[i])))
            for i in range(len(self))
        ]


class ClassificationWorld:
    def __init__(self, cfg: ClassificationWorldConfig):
        self.cfg = cfg
        rng = RandomnessContract(cfg.seed).stream(WORLD_STREAM)
        self.weights = rng.standard_normal((int(cfg.label_count), int(cfg.feature_dim)))

    def cloud_probs(self, features: np.ndarray) -> np.ndarray:
        return softmax(features @ self.weights.T / self.cfg.scale)

    def sample(self, n: int, rng: np.random.Generator) -> ClassificationBatch:
        cfg = self.cfg
        x = rng.standard_normal((n, int(cfg.feature_dim)))
        cloud = self.cloud_probs(x)
        if cfg.edge_temperature == 1.0 and cfg.edge_logit_noise == 0.0:
            edge = cloud.copy()
            noise = np.zeros_like(cloud)
        else:
            noise = rng.standard_normal(cloud.shape) * cfg.edge_logit_noise
            edge = softmax(np.log(np.maximum(cloud, LOGIT_FLOOR)) / cfg.edge_temperature + noise)
        # inverse-CDF label draw from the cloud law
        u = rng.random(n)
        labels = np.minimum((np.cumsum(cloud, axis=1) < u[:, None]).sum(axis=1), cloud.shape[1] - 1)
        return ClassificationBatch(x, cloud, edge, labels)


class MultiLabelWorld:
    def __init__(self, cfg: MultiLabelWorldConfig):
        self.cfg = cfg

    def sample(self, n: int, rng: np.random.Generator) -> MultiLabelBatch:
        m = int(self.cfg.items_per_instance)
        truth = rng.random((n, m)) < self.cfg.positive_rate
        noise = rng.standard_normal((n, m)) * self.cfg.score_noise
        scores = np.clip(truth.astype(float) + noise, 0.0, 1.0)
        return MultiLabelBatch(scores, truth)


def gen_classification(cfg: ClassificationWorldConfig, n: int) -> list[Example]:
    world = ClassificationWorld(cfg)
    return world.sample(n, RandomnessContract(cfg.seed).stream(GEN_STREAM)).to_examples()


def gen_multilabel(cfg: MultiLabelWorldConfig, n: int) -> list[MultiLabelExample]:
    world = MultiLabelWorld(cfg)
    return world.sample(n, RandomnessContract(cfg.seed).stream(GEN_STREAM)).to_examples()
