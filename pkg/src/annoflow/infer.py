"""Point predictions, hybrid features, and density curves from trained densities.

Every operation here treats the model as frozen: densities are only read,
never trained, and all label-space work happens on the normalized [0, 1]
grid the models were fitted on.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

from .baselines import DeterministicHead, HeadConfig, build_head
from .compute import ParamStore, adam_step, clip_gradients, gradient, init_adam
from .errors import ConfigError, DivergenceError, NumericalError, ShapeError
from .train import TrainReport, config_to_dict

PROBE_COUNT = 11
PROBE_VALUES = np.arange(PROBE_COUNT) / 10.0


@dataclass(frozen=True)
class BinaryDecision:
    """Per-dimension class calls with the probe masses behind them."""

    classes: np.ndarray  # (D,) ints in {0, 1}
    masses: np.ndarray  # (D, 11), each row sums to 1


@dataclass(frozen=True)
class RegressionDecision:
    """Per-dimension schema positions with the vote weights behind them."""

    indices: np.ndarray  # (D,) position indices
    values: np.ndarray  # (D,) normalized position values
    votes: list  # per dim: (positions,) normalized vote weights


def _probe_batch(dim):
    """All binary probe points: for each dim, each opposite-fill, each value.

    A single-dimension label has no opposite dimensions, so the two fill
    settings collapse to one and the grid degenerates to 11 probes.
    """
    fills = (0.0, 1.0) if dim > 1 else (0.0,)
    rows = []
    for d in range(dim):
        for fill in fills:
            block = np.full((PROBE_COUNT, dim), fill)
            block[:, d] = PROBE_VALUES
            rows.append(block)
    return np.concatenate(rows, axis=0), len(fills)


def _item_log_probs(model, y, text_emb, annot_idx):
    text_emb = np.asarray(text_emb, dtype=np.float64)
    if text_emb.ndim != 1:
        raise ShapeError("discretization works one item at a time")
    emb = np.broadcast_to(text_emb, (y.shape[0], text_emb.shape[0]))
    aidx = np.full(y.shape[0], int(annot_idx), dtype=np.int64)
    return np.asarray(model.log_prob(y, emb, aidx), dtype=np.float64)


def discretize_binary(model, text_emb, annot_idx=0):
    """Probe-grid classification for one item.

    For each dimension the 11 probe values are scored with the opposite
    dimensions clamped to all-0 and to all-1; the pairs are summed and
    normalized into a probe-mass distribution. Class 1 wins when the mass
    above 0.5 plus half the mass at 0.5 exceeds one half; exact ties fall
    to class 0.
    """
    probes, num_fills = _probe_batch(model.dim)
    lp = _item_log_probs(model, probes, text_emb, annot_idx)
    lp = lp.reshape(model.dim, num_fills, PROBE_COUNT)
    classes = np.zeros(model.dim, dtype=np.int64)
    masses = np.zeros((model.dim, PROBE_COUNT))
    for d in range(model.dim):
        block = lp[d]
        if not np.all(np.isfinite(block)):
            bad = np.argwhere(~np.isfinite(block))[0]
            raise NumericalError(
                "non-finite density at probe", dim=d, probe=float(PROBE_VALUES[bad[1]])
            )
        # max-shift before exp: normalization cancels the constant
        weights = np.exp(block - block.max()).sum(axis=0)
        mass = weights / weights.sum()
        masses[d] = mass
        upper = mass[6:].sum() + 0.5 * mass[5]
        classes[d] = 1 if upper > 0.5 else 0
    return BinaryDecision(classes=classes, masses=masses)


def discretize_regression(model, text_emb, schema, annot_idx=0, n=100, seed=0,
                          pick="weighted"):
    """Density-guided voting over schema positions for one item.

    `n` uniform candidate labels are scored by the model; each candidate
    rounds per dimension to the nearest schema position and contributes its
    density as vote weight. `pick="argmax"` instead returns the rounding of
    the single densest candidate. Ties resolve to the lower position.
    """
    if pick not in ("weighted", "argmax"):
        raise ConfigError(f"unknown pick rule {pick!r}")
    if n < 1:
        raise ConfigError("need at least one candidate")
    if len(schema.dims) != model.dim:
        raise ShapeError("schema does not match the model dimension")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x766F7465]))
    candidates = rng.uniform(0.0, 1.0, size=(n, model.dim))
    lp = _item_log_probs(model, candidates, text_emb, annot_idx)
    if not np.all(np.isfinite(lp)):
        bad = int(np.argwhere(~np.isfinite(lp))[0][0])
        raise NumericalError("non-finite density at candidate", dim=bad)
    density = np.exp(lp - lp.max())  # relative weights; scale cancels

    indices = np.zeros(model.dim, dtype=np.int64)
    values = np.zeros(model.dim)
    votes = []
    for d, dim_schema in enumerate(schema.dims):
        grid = dim_schema.normalized_positions()
        slots = np.argmin(np.abs(candidates[:, d][:, None] - grid[None, :]), axis=1)
        tally = np.zeros(len(grid))
        np.add.at(tally, slots, density)
        if pick == "argmax":
            best = int(slots[int(np.argmax(density))])
        else:
            best = int(np.argmax(tally))  # argmax takes the first (lower) tie
        indices[d] = best
        values[d] = grid[best]
        votes.append(tally / tally.sum())
    return RegressionDecision(indices=indices, values=values, votes=votes)


def hybrid_features(model, text_emb, schema, annot_idx=0, n=100, seed=0):
    """Normalized probe masses (binary dims) and vote weights (ordinal dims).

    The per-dimension vectors are concatenated untouched; each sub-vector
    sums to one, so downstream heads see the densities as plain features.
    """
    tasks = [d.task for d in schema.dims]
    binary = None
    regression = None
    parts = []
    for d, task in enumerate(tasks):
        if task == "binary":
            if binary is None:
                binary = discretize_binary(model, text_emb, annot_idx)
            parts.append(binary.masses[d])
        else:
            if regression is None:
                regression = discretize_regression(
                    model, text_emb, schema, annot_idx, n=n, seed=seed
                )
            parts.append(regression.votes[d])
    return np.concatenate(parts)


def hybrid_feature_table(model, dataset, indices=None, n=100, seed=0):
    """Features for every (text, annotator) record, cached per context.

    Generalized models give every annotator the same context, so the cache
    collapses the table to one probe run per text.
    """
    if indices is None:
        indices = np.arange(len(dataset))
    cache = {}
    rows = []
    for i in indices:
        text_id = dataset.text_ids[i]
        aidx = int(model.annot_indices([dataset.annotator_ids[i]])[0])
        key = (text_id, aidx if model.profile.dim > 0 else 0)
        if key not in cache:
            cache[key] = hybrid_features(
                model, dataset.embeddings[text_id], dataset.schema, aidx,
                n=n, seed=seed,
            )
        rows.append(cache[key])
    return np.stack(rows)


# -- hybrid heads --------------------------------------------------------------


def extend_head_inputs(head, extra):
    """Widen a trained head to accept `extra` new trailing input features.

    The new first-layer columns start at zero, so the widened head computes
    exactly the original function until training moves the new weights:
    feeding zero features reproduces the original head forever.
    """
    if extra < 0:
        raise ConfigError("cannot extend a head by a negative width")
    config = HeadConfig(
        in_features=head.config.in_features + extra,
        dim=head.config.dim,
        task=head.config.task,
        hidden=head.config.hidden,
        activation=head.config.activation,
        dropout=head.config.dropout,
    )
    params = ParamStore()
    for name in head.params.names():
        value = head.params.value(name)
        if name == "head.w0":
            value = np.concatenate(
                [value, np.zeros((extra, value.shape[1]))], axis=0
            )
        params.add(name, value, trainable=head.params.is_trainable(name))
    net = build_head(config, seed=0).net
    return DeterministicHead(config, params, net)


def train_head(head, x_train, y_train, x_val, y_val, config):
    """Supervised analogue of the density training loop.

    Adam over shuffled mini-batches, eval-mode validation after each epoch,
    patience-based early stop, best-epoch weights restored.
    """
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)
    if x_train.shape[1] != head.config.in_features:
        raise ShapeError(
            f"head expects {head.config.in_features} inputs, got {x_train.shape[1]}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x68]))
    state = init_adam(head.params, lr=config.learning_rate)
    best_val = math.inf
    best_epoch = 0
    best_snapshot = head.params.snapshot()
    train_hist, val_hist = [], []
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(x_train.shape[0])
        batch_losses = []
        for start in range(0, x_train.shape[0], config.batch_size):
            sel = order[start:start + config.batch_size]
            loss = head.loss_graph(x_train[sel], y_train[sel], mode="train", rng=rng)
            grads = gradient(loss, head.params)
            grads, _ = clip_gradients(grads, config.grad_clip)
            adam_step(head.params, grads, state)
            batch_losses.append(float(loss.data))
        train_hist.append(float(np.mean(batch_losses)))
        val = head.loss(x_val, y_val)
        if not math.isfinite(val):
            raise DivergenceError("validation loss is not finite", epoch=epoch)
        val_hist.append(val)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_snapshot = head.params.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    head.params.restore(best_snapshot)
    report = TrainReport(
        train_nll=train_hist,
        val_nll=val_hist,
        best_epoch=best_epoch,
        best_val_nll=best_val,
        test_nll=None,
        epochs=len(val_hist),
        seed=config.seed,
        config=config_to_dict(config),
    )
    return head, report


def head_task_for(schema):
    return "classification" if all(d.task == "binary" for d in schema.dims) else "regression"


def head_inputs(model, dataset, indices, features=None):
    """[text embedding | profile | optional hybrid features] per record."""
    emb = dataset.text_matrix(indices)
    aidx = model.annot_indices(dataset.annotators_at(indices))
    x = model.context_for(emb, aidx)
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[0] != x.shape[0]:
            raise ShapeError("feature rows do not align with the record split")
        x = np.concatenate([x, features], axis=1)
    return x


def train_deterministic(model, dataset, round_, config, head_hidden=(16,)):
    """Deterministic head over plain contexts, the reference for train_hybrid."""
    x_train = head_inputs(model, dataset, round_.train_idx)
    x_val = head_inputs(model, dataset, round_.val_idx)
    head_config = HeadConfig(
        in_features=x_train.shape[1],
        dim=dataset.dim,
        task=head_task_for(dataset.schema),
        hidden=tuple(head_hidden),
    )
    head = build_head(head_config, seed=[config.seed, 0x6865])
    return train_head(
        head,
        x_train,
        dataset.label_matrix(round_.train_idx),
        x_val,
        dataset.label_matrix(round_.val_idx),
        config,
    )


def train_hybrid(model, dataset, round_, config, features, head_hidden=(16,)):
    """Deterministic head over contexts extended with hybrid features.

    `features` must hold one row per dataset record (see
    hybrid_feature_table); rows are selected by the fold round's splits.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != len(dataset):
        raise ShapeError("need one feature row per dataset record")
    x_train = head_inputs(model, dataset, round_.train_idx, features[round_.train_idx])
    x_val = head_inputs(model, dataset, round_.val_idx, features[round_.val_idx])
    head_config = HeadConfig(
        in_features=x_train.shape[1],
        dim=dataset.dim,
        task=head_task_for(dataset.schema),
        hidden=tuple(head_hidden),
    )
    head = build_head(head_config, seed=[config.seed, 0x6865])
    return train_head(
        head,
        x_train,
        dataset.label_matrix(round_.train_idx),
        x_val,
        dataset.label_matrix(round_.val_idx),
        config,
    )


# -- density curves ------------------------------------------------------------


def density_curve(model, text_emb, dim, start, stop, step, annot_idx=0, others=0.5):
    """Density along one dimension with the others held fixed.

    Returns (v, density) rows; a probe whose density comes out non-finite
    is recorded as None so the sweep itself never aborts.
    """
    if step <= 0:
        raise ConfigError("grid step must be > 0")
    if not 0 <= dim < model.dim:
        raise ConfigError(f"dimension {dim} outside [0, {model.dim})")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    if count < 1:
        raise ConfigError("empty grid: stop is before start")
    values = start + step * np.arange(count)
    rows = []
    for v in values:
        y = np.full((1, model.dim), float(others))
        y[0, dim] = v
        try:
            # overflow is an expected outcome here, reported as a null row
            with np.errstate(over="ignore", invalid="ignore"):
                lp = float(_item_log_probs(model, y, text_emb, annot_idx)[0])
                density = math.exp(lp)
        except (NumericalError, OverflowError):
            density = None
        else:
            if not math.isfinite(density):
                density = None
        rows.append((float(v), density))
    return rows


def write_density_curve(path, rows, header=None):
    """CSV export: comment lines for provenance, then v,density rows."""
    lines = []
    for key in sorted(header or {}):
        lines.append(f"# {key}: {header[key]}")
    lines.append("v,density")
    for v, density in rows:
        lines.append(f"{v!r},{'' if density is None else repr(density)}")
    text = "\n".join(lines) + "\n"
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)
