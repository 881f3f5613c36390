"""Dataset contracts, label normalization, folds, and a synthetic generator.

Annotations arrive as JSONL records {text_id, annotator_id, labels}, text
embeddings as JSONL with a leading header line {format_version, dim}, and the
label schema as a JSON document naming each dimension's raw range, step, and
task kind. Everything downstream works on normalized labels in [0, 1].

The synthetic generator exists so the whole pipeline can be verified at desk
scale: annotator groups with opposite label offsets produce exactly the kind
of per-text disagreement the personalized density models are supposed to
capture.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, JoinError, ParseError, SchemaError
from .personalize import AnnotatorRegistry

FOLD_UNASSIGNED = -1


@dataclass(frozen=True)
class DimSchema:
    name: str
    min: float
    max: float
    step: float
    task: str = "ordinal"

    def __post_init__(self):
        if self.task not in ("binary", "ordinal"):
            raise SchemaError(f"unknown task {self.task!r}", dim=self.name)
        if not self.min < self.max:
            raise SchemaError("min must be < max", dim=self.name)
        if self.step <= 0:
            raise SchemaError("step must be > 0", dim=self.name)
        span = (self.max - self.min) / self.step
        if abs(span - round(span)) > 1e-9:
            raise SchemaError("(max - min) must be a multiple of step", dim=self.name)

    @property
    def positions(self):
        return int(round((self.max - self.min) / self.step)) + 1

    def normalized_positions(self):
        """The valid answers mapped into [0, 1]."""
        return np.linspace(0.0, 1.0, self.positions)


@dataclass(frozen=True)
class LabelSchema:
    dims: tuple

    def __post_init__(self):
        if not self.dims:
            raise SchemaError("schema needs at least one dimension")
        object.__setattr__(self, "dims", tuple(self.dims))
        names = [d.name for d in self.dims]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate dimension names")

    @property
    def dim(self):
        return len(self.dims)

    def to_dict(self):
        return {
            "dims": [
                {"name": d.name, "min": d.min, "max": d.max, "step": d.step, "task": d.task}
                for d in self.dims
            ]
        }

    @classmethod
    def from_dict(cls, payload):
        try:
            dims = tuple(
                DimSchema(
                    name=str(d["name"]),
                    min=float(d["min"]),
                    max=float(d["max"]),
                    step=float(d["step"]),
                    task=str(d["task"]),
                )
                for d in payload["dims"]
            )
        except (KeyError, TypeError, ValueError) as err:
            raise SchemaError(f"malformed schema document: {err}") from err
        return cls(dims)


def binary_schema(dim, prefix="label"):
    return LabelSchema(
        tuple(DimSchema(f"{prefix}{i}", 0.0, 1.0, 1.0, "binary") for i in range(dim))
    )


def ordinal_schema(dim, positions=11, prefix="label"):
    step = 1.0 / (positions - 1)
    return LabelSchema(
        tuple(DimSchema(f"{prefix}{i}", 0.0, 1.0, step, "ordinal") for i in range(dim))
    )


class AnnotationDataset:
    """Parallel record arrays plus the embedding table and schema.

    Immutable by convention: transforms return new instances sharing the
    embedding dict.
    """

    def __init__(
        self,
        text_ids,
        annotator_ids,
        labels,
        schema,
        embeddings,
        folds=None,
        normalized=False,
        fold_mode=None,
        num_folds=0,
    ):
        self.text_ids = list(text_ids)
        self.annotator_ids = [str(a) for a in annotator_ids]
        self.labels = np.asarray(labels, dtype=np.float64)
        self.schema = schema
        self.embeddings = embeddings
        n = len(self.text_ids)
        if self.labels.shape != (n, schema.dim):
            raise SchemaError(
                f"labels have shape {self.labels.shape}, expected ({n}, {schema.dim})"
            )
        if len(self.annotator_ids) != n:
            raise ParseError("annotator ids misaligned with records")
        self.folds = (
            np.full(n, FOLD_UNASSIGNED, dtype=np.int64)
            if folds is None
            else np.asarray(folds, dtype=np.int64)
        )
        self.normalized = bool(normalized)
        self.fold_mode = fold_mode
        self.num_folds = int(num_folds)
        self.registry = AnnotatorRegistry(self.annotator_ids)
        for t in self.text_ids:
            if t not in embeddings:
                raise JoinError("annotation has no embedding", text_id=t)
        self.embedding_dim = len(next(iter(embeddings.values()))) if embeddings else 0

    def __len__(self):
        return len(self.text_ids)

    @property
    def dim(self):
        return self.schema.dim

    def unique_texts(self):
        seen = {}
        for t in self.text_ids:
            seen.setdefault(t, None)
        return list(seen)

    def text_matrix(self, indices=None):
        ids = self.text_ids if indices is None else [self.text_ids[i] for i in indices]
        return np.stack([self.embeddings[t] for t in ids])

    def label_matrix(self, indices=None):
        return self.labels if indices is None else self.labels[indices]

    def annotators_at(self, indices=None):
        if indices is None:
            return list(self.annotator_ids)
        return [self.annotator_ids[i] for i in indices]

    def texts_at(self, indices=None):
        if indices is None:
            return list(self.text_ids)
        return [self.text_ids[i] for i in indices]

    def with_fields(self, **kwargs):
        init = dict(
            text_ids=self.text_ids,
            annotator_ids=self.annotator_ids,
            labels=self.labels,
            schema=self.schema,
            embeddings=self.embeddings,
            folds=self.folds,
            normalized=self.normalized,
            fold_mode=self.fold_mode,
            num_folds=self.num_folds,
        )
        init.update(kwargs)
        return AnnotationDataset(**init)


# -- file IO -------------------------------------------------------------------


def load_schema(path):
    try:
        with open(path) as handle:
            payload = json.load(handle)
    except OSError as err:
        raise ParseError(f"cannot read schema {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ParseError(f"schema {path} is not valid JSON: {err}") from err
    return LabelSchema.from_dict(payload)


def save_schema(path, schema):
    from .compute.checkpoint import write_json_atomic

    write_json_atomic(path, schema.to_dict())


def load_embeddings(path):
    """Embedding JSONL with its one-line header. Returns (dict, dim)."""
    embeddings = {}
    with open(path) as handle:
        header_line = handle.readline()
        if not header_line.strip():
            raise ParseError("empty embeddings file", line=1)
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as err:
            raise ParseError(f"bad embeddings header: {err}", line=1) from err
        if not isinstance(header, dict) or header.get("format_version") != 1:
            raise ParseError("embeddings header must declare format_version 1", line=1)
        dim = header.get("dim")
        if not isinstance(dim, int) or dim < 1:
            raise ParseError("embeddings header must declare a positive dim", line=1)
        for lineno, raw in enumerate(handle, start=2):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
                text_id = str(record["text_id"])
                vector = np.array(record["embedding"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise ParseError(f"bad embedding record: {err}", line=lineno) from err
            if vector.shape != (dim,):
                raise ParseError(
                    f"embedding for {text_id!r} has length {vector.size}, header says {dim}",
                    line=lineno,
                )
            if text_id in embeddings:
                raise ParseError(f"duplicate embedding for {text_id!r}", line=lineno)
            embeddings[text_id] = vector
    if not embeddings:
        raise ParseError("embeddings file has a header but no records", line=2)
    return embeddings, dim


def save_embeddings(path, embeddings, dim):
    import os
    import tempfile

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(json.dumps({"format_version": 1, "dim": int(dim)}) + "\n")
            for text_id, vector in embeddings.items():
                row = {"text_id": text_id, "embedding": list(map(float, vector))}
                handle.write(json.dumps(row) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_annotations(annotations_path, embeddings_path, schema_path):
    """Join the three canonical files into a validated dataset."""
    schema = load_schema(schema_path)
    embeddings, _ = load_embeddings(embeddings_path)
    text_ids, annotator_ids, rows = [], [], []
    with open(annotations_path) as handle:
        for lineno, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                record = json.loads(raw)
                text_id = str(record["text_id"])
                annotator_id = str(record["annotator_id"])
                labels = [float(v) for v in record["labels"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise ParseError(f"bad annotation record: {err}", line=lineno) from err
            if len(labels) != schema.dim:
                raise SchemaError(
                    f"expected {schema.dim} labels, got {len(labels)}", line=lineno
                )
            for value, dim_schema in zip(labels, schema.dims):
                if not dim_schema.min - 1e-9 <= value <= dim_schema.max + 1e-9:
                    raise SchemaError(
                        f"label {value} outside [{dim_schema.min}, {dim_schema.max}]",
                        line=lineno,
                        dim=dim_schema.name,
                    )
            if text_id not in embeddings:
                raise JoinError("annotation has no embedding", text_id=text_id)
            text_ids.append(text_id)
            annotator_ids.append(annotator_id)
            rows.append(labels)
    if not rows:
        raise ParseError("annotations file has no records", line=1)
    return AnnotationDataset(
        text_ids, annotator_ids, np.array(rows), schema, embeddings
    )


def save_annotations(path, dataset):
    import os
    import tempfile

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as handle:
            for text_id, annotator_id, labels in zip(
                dataset.text_ids, dataset.annotator_ids, dataset.labels
            ):
                row = {
                    "text_id": text_id,
                    "annotator_id": annotator_id,
                    "labels": [float(v) for v in labels],
                }
                handle.write(json.dumps(row) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- label transforms -----------------------------------------------------------


def normalize_labels(dataset, dequantize=False, seed=0):
    """Map raw labels onto [0, 1] per dimension.

    Dequantization (off by default) adds centered uniform noise of total
    width step / (2 (max - min)) in normalized units, clipped back to [0, 1]
    at the boundary.
    """
    if dataset.normalized:
        return dataset
    mins = np.array([d.min for d in dataset.schema.dims])
    maxs = np.array([d.max for d in dataset.schema.dims])
    steps = np.array([d.step for d in dataset.schema.dims])
    y = (dataset.labels - mins) / (maxs - mins)
    if dequantize:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E6F6973]))
        width = steps / (2.0 * (maxs - mins))
        y = y + rng.uniform(-0.5, 0.5, size=y.shape) * width
        y = np.clip(y, 0.0, 1.0)
    return dataset.with_fields(labels=y, normalized=True)


def denormalize_labels(schema, y):
    """Back to raw units, snapped onto the schema step grid."""
    y = np.asarray(y, dtype=np.float64)
    mins = np.array([d.min for d in schema.dims])
    maxs = np.array([d.max for d in schema.dims])
    steps = np.array([d.step for d in schema.dims])
    raw = mins + np.clip(y, 0.0, 1.0) * (maxs - mins)
    return mins + np.round((raw - mins) / steps) * steps


def snap_normalized(schema, y):
    """Nearest valid normalized position per dimension."""
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    for j, d in enumerate(schema.dims):
        p = d.positions - 1
        out[..., j] = np.round(np.clip(y[..., j], 0.0, 1.0) * p) / p
    return out


# -- folds -----------------------------------------------------------------------


def split_folds(dataset, k=10, mode="text", seed=0):
    """Assign every text (and so its annotations) to one of k folds."""
    if mode not in ("text", "strict"):
        raise ConfigError(f"unknown fold mode {mode!r}")
    texts = dataset.unique_texts()
    if k < 2:
        raise ConfigError("need at least 2 folds")
    if k > len(texts):
        raise ConfigError(f"cannot make {k} folds from {len(texts)} texts")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x666F6C64]))
    order = rng.permutation(len(texts))
    fold_of_text = {}
    for rank, text_pos in enumerate(order):
        fold_of_text[texts[text_pos]] = rank % k
    folds = np.array([fold_of_text[t] for t in dataset.text_ids], dtype=np.int64)
    return dataset.with_fields(folds=folds, fold_mode=mode, num_folds=k)


@dataclass(frozen=True)
class FoldRound:
    test_fold: int
    val_fold: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    dropped_fraction: float = 0.0


def fold_round(dataset, test_fold):
    """Materialize one CV round: test fold, next fold validation, rest train.

    In strict mode, test records whose annotator also appears in the
    training records are dropped; the dropped fraction is reported so
    coverage loss is visible.
    """
    k = dataset.num_folds
    if k < 2 or np.any(dataset.folds < 0):
        raise ConfigError("dataset folds not assigned; call split_folds first")
    if not 0 <= test_fold < k:
        raise ConfigError(f"test_fold {test_fold} outside [0, {k})")
    val_fold = (test_fold + 1) % k
    folds = dataset.folds
    test_idx = np.flatnonzero(folds == test_fold)
    val_idx = np.flatnonzero(folds == val_fold)
    train_idx = np.flatnonzero((folds != test_fold) & (folds != val_fold))
    dropped = 0.0
    if dataset.fold_mode == "strict":
        train_annotators = set(dataset.annotators_at(train_idx))
        keep = np.array(
            [dataset.annotator_ids[i] not in train_annotators for i in test_idx]
        )
        dropped = float((~keep).mean()) if len(test_idx) else 0.0
        test_idx = test_idx[keep]
    return FoldRound(test_fold, val_fold, train_idx, val_idx, test_idx, dropped)


# -- synthetic generation ---------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    num_texts: int = 100
    num_annotators: int = 20
    dim: int = 1
    embed_dim: int = 16
    num_groups: int = 2
    group_offsets: tuple = (-0.25, 0.25)
    bias_std: float = 0.05
    noise_std: float = 0.02
    annotations_per_text: int = 8
    seed: int = 0
    schema: LabelSchema | None = None

    def __post_init__(self):
        if min(self.num_texts, self.num_annotators, self.dim, self.embed_dim) < 1:
            raise ConfigError("all synthetic counts must be >= 1")
        if self.num_groups < 1 or len(self.group_offsets) != self.num_groups:
            raise ConfigError("group_offsets must list one offset per group")
        if self.bias_std < 0 or self.noise_std < 0:
            raise ConfigError("noise stds must be >= 0")
        if not 1 <= self.annotations_per_text <= self.num_annotators:
            raise ConfigError("annotations_per_text must be in [1, num_annotators]")
        object.__setattr__(self, "group_offsets", tuple(self.group_offsets))


def synth_group_of(annotator_index, num_groups):
    """Group membership rule used by the generator (handy in tests)."""
    return annotator_index % num_groups


def synth_generate(config):
    """Group-structured subjective annotations at desk scale.

    Each text gets a latent base label from a fixed random linear map of its
    embedding squashed by a sigmoid; each annotation is base + group offset +
    personal bias + noise, clipped to [0, 1] and snapped to the schema grid,
    then stored in raw units.
    """
    schema = config.schema or ordinal_schema(config.dim)
    if schema.dim != config.dim:
        raise ConfigError("schema dimension count must match dim")
    ss = np.random.SeedSequence(config.seed)
    r_emb, r_map, r_bias, r_pick, r_noise = (
        np.random.default_rng(c) for c in ss.spawn(5)
    )
    texts = [f"t{i:05d}" for i in range(config.num_texts)]
    annotators = [f"a{i:04d}" for i in range(config.num_annotators)]
    embeddings = {
        t: e for t, e in zip(texts, r_emb.standard_normal((config.num_texts, config.embed_dim)))
    }
    # Logit scale 0.5 keeps base labels mostly inside [0.25, 0.75], so group
    # offsets of +-0.25 survive the [0, 1] clip with little distortion.
    weight = r_map.standard_normal((config.embed_dim, config.dim)) * (
        0.5 / np.sqrt(config.embed_dim)
    )
    base = 1.0 / (1.0 + np.exp(-np.stack([embeddings[t] for t in texts]) @ weight))
    offsets = np.array(
        [config.group_offsets[synth_group_of(i, config.num_groups)]
         for i in range(config.num_annotators)]
    )
    bias = r_bias.standard_normal((config.num_annotators, config.dim)) * config.bias_std
    text_ids, annotator_ids, rows = [], [], []
    mins = np.array([d.min for d in schema.dims])
    maxs = np.array([d.max for d in schema.dims])
    for t_pos, text in enumerate(texts):
        chosen = r_pick.choice(
            config.num_annotators, size=config.annotations_per_text, replace=False
        )
        for a_pos in chosen:
            noise = r_noise.standard_normal(config.dim) * config.noise_std
            y = base[t_pos] + offsets[a_pos] + bias[a_pos] + noise
            y = snap_normalized(schema, np.clip(y, 0.0, 1.0))
            text_ids.append(text)
            annotator_ids.append(annotators[a_pos])
            rows.append(mins + y * (maxs - mins))
    return AnnotationDataset(
        text_ids, annotator_ids, np.array(rows), schema, embeddings
    )
