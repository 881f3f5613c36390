"""Annotator profiles: the personalization side of the conditioning vector.

Four regimes. `none` conditions on the text embedding alone. `onehot` appends
an indicator vector over the annotator registry (optionally projected through
a trainable linear map when the registry is large). `formula` appends the
annotator's mean signed deviation from the per-text mean label, computed on
the training split only. `medium` appends a trainable embedding row that
receives gradients through the density model's loss.

Index 0 of every registry is reserved for unknown annotators, so models can
score test records from people never seen in training.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .compute import Mlp, init_mlp_params, mlp_forward, no_grad
from .compute import tensor as T
from .compute.tensor import Tensor
from .errors import ConfigError, ShapeError

UNKNOWN_INDEX = 0


class AnnotatorRegistry:
    """Stable id <-> index mapping with slot 0 reserved for unknown ids."""

    def __init__(self, annotator_ids):
        unique = sorted(set(str(a) for a in annotator_ids))
        if not unique:
            raise ConfigError("registry needs at least one annotator")
        self._ids = ["<unknown>"] + unique
        self._index = {a: i + 1 for i, a in enumerate(unique)}

    @property
    def size(self):
        return len(self._ids)

    def index_of(self, annotator_id):
        return self._index.get(str(annotator_id), UNKNOWN_INDEX)

    def id_of(self, index):
        return self._ids[index]

    def indices_of(self, annotator_ids):
        return np.array([self.index_of(a) for a in annotator_ids], dtype=np.intp)

    def known(self, annotator_id):
        return str(annotator_id) in self._index

    def to_dict(self):
        return {"ids": self._ids[1:]}

    @classmethod
    def from_dict(cls, payload):
        return cls(payload["ids"])


def split_fingerprint(text_ids, annotator_ids, labels):
    """Order-independent hash of the records a statistic was computed from."""
    labels = np.asarray(labels, dtype=np.float64)
    rows = sorted(
        f"{t}\x1f{a}\x1f{','.join(repr(v) for v in y)}"
        for t, a, y in zip(text_ids, annotator_ids, labels)
    )
    digest = hashlib.sha256("\x1e".join(rows).encode()).hexdigest()
    return digest


@dataclass(frozen=True)
class DeviationStats:
    """Mean signed deviation from the per-text mean label, per annotator.

    Row 0 (unknown) is zero. The fingerprint ties the table to the exact
    training records it came from; consumers can verify it to catch stats
    accidentally recomputed on a different split.
    """

    matrix: np.ndarray
    fingerprint: str
    n_records: int

    @property
    def dim(self):
        return self.matrix.shape[1]

    def verify(self, text_ids, annotator_ids, labels):
        return self.fingerprint == split_fingerprint(text_ids, annotator_ids, labels)

    def to_dict(self):
        return {
            "matrix": self.matrix.tolist(),
            "fingerprint": self.fingerprint,
            "n_records": self.n_records,
        }

    @classmethod
    def from_dict(cls, payload):
        return cls(
            np.array(payload["matrix"], dtype=np.float64),
            payload["fingerprint"],
            payload["n_records"],
        )


def compute_deviation_stats(text_ids, annotator_ids, labels, registry):
    """Training-split deviation table, shape (registry size, label dim)."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2 or len(text_ids) != labels.shape[0]:
        raise ShapeError("labels must be (records, dims) aligned with ids")
    if labels.shape[0] == 0:
        raise ConfigError("deviation stats need at least one record")
    text_sums: dict[str, np.ndarray] = {}
    text_counts: dict[str, int] = {}
    for t, y in zip(text_ids, labels):
        if t in text_sums:
            text_sums[t] += y
            text_counts[t] += 1
        else:
            text_sums[t] = y.copy()
            text_counts[t] = 1
    matrix = np.zeros((registry.size, labels.shape[1]))
    counts = np.zeros(registry.size)
    for t, a, y in zip(text_ids, annotator_ids, labels):
        idx = registry.index_of(a)
        if idx == UNKNOWN_INDEX:
            continue
        matrix[idx] += y - text_sums[t] / text_counts[t]
        counts[idx] += 1
    seen = counts > 0
    matrix[seen] /= counts[seen, None]
    return DeviationStats(
        matrix=matrix,
        fingerprint=split_fingerprint(text_ids, annotator_ids, labels),
        n_records=labels.shape[0],
    )


def onehot_profile(annotator_id, registry):
    vec = np.zeros(registry.size)
    vec[registry.index_of(annotator_id)] = 1.0
    return vec


def hubi_formula_profile(annotator_id, registry, stats):
    return stats.matrix[registry.index_of(annotator_id)].copy()


def register_embedding_table(params, name, rows, dim, rng):
    """Trainable (rows, dim) table, N(0, std 0.01) init, row 0 for unknown."""
    params.add(name, rng.normal(size=(rows, dim)) * 0.01)


def hubi_medium_profile(annotator_id, registry, params, name="profile.table"):
    return params.value(name)[registry.index_of(annotator_id)].copy()


def build_context(text_embedding, profile=None):
    """Conditioning vector: text embedding, then the annotator profile."""
    text_embedding = np.asarray(text_embedding, dtype=np.float64)
    if profile is None:
        return text_embedding.copy()
    profile = np.asarray(profile, dtype=np.float64)
    return np.concatenate([text_embedding, profile], axis=-1)


@dataclass(frozen=True)
class PersonalizationConfig:
    kind: str = "none"
    embed_dim: int = 50
    onehot_projection_threshold: int = 1000
    onehot_projection_dim: int = 50
    projection_hidden: int = 0
    projection_out: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "onehot", "formula", "medium"):
            raise ConfigError(f"unknown personalization kind {self.kind!r}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")


class ProfileStrategy:
    """Turns (text embedding, annotator index) batches into contexts.

    Fixed strategies produce constant matrices; trainable ones build tape
    nodes so the density loss reaches their parameters.
    """

    kind = "none"
    dim = 0
    trainable = False

    def profile_graph(self, annot_idx, mode):
        raise NotImplementedError

    def profile_matrix(self, annot_idx):
        raise NotImplementedError

    def context_dim(self, text_dim):
        return text_dim + self.dim

    def context_graph(self, text_emb, annot_idx, mode="train"):
        text = Tensor(np.asarray(text_emb, dtype=np.float64))
        if self.dim == 0:
            return text
        return T.concat([text, self.profile_graph(annot_idx, mode)], axis=1)

    def context_matrix(self, text_emb, annot_idx):
        text = np.asarray(text_emb, dtype=np.float64)
        if self.dim == 0:
            return text.copy()
        return np.concatenate([text, self.profile_matrix(annot_idx)], axis=1)

    def state_dict(self):
        return {"kind": self.kind}


class NoProfile(ProfileStrategy):
    kind = "none"


class OneHotProfile(ProfileStrategy):
    kind = "onehot"
    trainable_name = "profile.onehot_projection"

    def __init__(self, registry, params, config, rng=None):
        self.registry = registry
        self.projected = registry.size > config.onehot_projection_threshold
        if self.projected:
            if rng is None and self.trainable_name not in params:
                raise ConfigError("projected onehot profile needs an rng to init")
            if self.trainable_name not in params:
                params.add(
                    self.trainable_name,
                    rng.standard_normal(
                        (registry.size, config.onehot_projection_dim)
                    )
                    / np.sqrt(registry.size),
                )
            self.dim = config.onehot_projection_dim
            self.trainable = True
        else:
            self.dim = registry.size
        self.params = params
        self._eye = None if self.projected else np.eye(registry.size)

    def profile_graph(self, annot_idx, mode):
        if self.projected:
            # One-hot times a matrix is a row gather; skip the big product.
            return T.gather_rows(self.params.tensor(self.trainable_name), annot_idx)
        return Tensor(self._eye[annot_idx])

    def profile_matrix(self, annot_idx):
        if self.projected:
            return self.params.value(self.trainable_name)[annot_idx]
        return self._eye[annot_idx]

    def state_dict(self):
        return {
            "kind": self.kind,
            "registry": self.registry.to_dict(),
            "projected": self.projected,
        }


class FormulaProfile(ProfileStrategy):
    kind = "formula"

    def __init__(self, registry, stats):
        if stats.matrix.shape[0] != registry.size:
            raise ShapeError("deviation stats do not match the registry")
        self.registry = registry
        self.stats = stats
        self.dim = stats.dim

    def profile_graph(self, annot_idx, mode):
        return Tensor(self.stats.matrix[annot_idx])

    def profile_matrix(self, annot_idx):
        return self.stats.matrix[annot_idx]

    def state_dict(self):
        return {
            "kind": self.kind,
            "registry": self.registry.to_dict(),
            "stats": self.stats.to_dict(),
        }


class MediumProfile(ProfileStrategy):
    kind = "medium"
    trainable = True
    table_name = "profile.table"
    proj_prefix = "profile.projection"

    def __init__(self, registry, params, config, rng=None):
        self.registry = registry
        self.params = params
        self.config = config
        if self.table_name not in params:
            if rng is None:
                raise ConfigError("medium profile needs an rng to init its table")
            register_embedding_table(
                params, self.table_name, registry.size, config.embed_dim, rng
            )
        self.net = None
        self.dim = config.embed_dim
        if config.projection_out > 0:
            hidden = (config.projection_hidden,) if config.projection_hidden else ()
            self.net = Mlp(
                in_features=config.embed_dim,
                hidden=hidden,
                out_features=config.projection_out,
            )
            if f"{self.proj_prefix}.w0" not in params:
                init_mlp_params(self.net, params, self.proj_prefix, rng)
            self.dim = config.projection_out

    def profile_graph(self, annot_idx, mode):
        rows = T.gather_rows(self.params.tensor(self.table_name), annot_idx)
        if self.net is not None:
            rows = mlp_forward(self.net, self.params, rows, self.proj_prefix, mode)
        return rows

    def profile_matrix(self, annot_idx):
        with no_grad():
            return self.profile_graph(annot_idx, "eval").data

    def state_dict(self):
        return {
            "kind": self.kind,
            "registry": self.registry.to_dict(),
            "embed_dim": self.config.embed_dim,
            "projection_out": self.config.projection_out,
        }


def make_profile(config, registry, params, rng, stats=None):
    """Strategy factory; `stats` is required (and only used) for `formula`."""
    if config.kind == "none":
        return NoProfile()
    if config.kind == "onehot":
        return OneHotProfile(registry, params, config, rng)
    if config.kind == "formula":
        if stats is None:
            raise ConfigError("formula personalization needs deviation stats")
        return FormulaProfile(registry, stats)
    return MediumProfile(registry, params, config, rng)
