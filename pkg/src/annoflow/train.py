"""NLL training loop, cross-validated experiment runner, and grid search."""

import itertools
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .baselines import GmmConfig, build_gmm
from .compute import (
    ParamStore,
    adam_step,
    clip_gradients,
    gradient,
    init_adam,
    no_grad,
    params_to_dict,
    write_json_atomic,
)
from .compute import tensor as T
from .data import LabelSchema, fold_round
from .errors import (
    AnnoflowError,
    ConfigError,
    DivergenceError,
    EmptyBatchError,
    NumericalError,
)
from .flows import FlowConfig, build_flow
from .metrics import paired_ttest_bonferroni
from .personalize import (
    AnnotatorRegistry,
    DeviationStats,
    PersonalizationConfig,
    compute_deviation_stats,
    make_profile,
)

FAMILIES = ("nice", "realnvp", "maf", "gmm")
BUNDLE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run needs besides the dataset itself."""

    family: str = "maf"
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    grad_clip: float = 10.0
    seed: int = 0
    dequantize: bool = False
    num_layers: int = 2
    blocks_per_layer: int = 2
    hidden_features: int = 8
    dropout: float = 0.0
    batch_norm_within: bool = False
    batch_norm_between: bool = False
    activation: str = "tanh"
    components: int = 5
    gmm_hidden: tuple = (16,)
    personalization: PersonalizationConfig = field(default_factory=PersonalizationConfig)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be > 0")
        object.__setattr__(self, "gmm_hidden", tuple(int(h) for h in self.gmm_hidden))


def config_to_dict(config):
    out = {f.name: getattr(config, f.name) for f in fields(config)}
    out["gmm_hidden"] = list(config.gmm_hidden)
    pers = config.personalization
    out["personalization"] = {f.name: getattr(pers, f.name) for f in fields(pers)}
    return out


def config_from_dict(payload):
    payload = dict(payload)
    pers = payload.pop("personalization", {})
    if not isinstance(pers, PersonalizationConfig):
        pers = PersonalizationConfig(**pers)
    try:
        return TrainConfig(personalization=pers, **payload)
    except TypeError as err:
        raise ConfigError(f"bad training config: {err}") from err


def config_with(config, overrides):
    """A copy of `config` with (possibly dotted) field overrides applied."""
    top, pers = {}, {}
    for key, value in overrides.items():
        if key.startswith("personalization."):
            pers[key.split(".", 1)[1]] = value
        elif key == "personalization":
            raise ConfigError("set personalization fields as personalization.<field>")
        else:
            top[key] = value
    try:
        new_pers = replace(config.personalization, **pers)
        return replace(config, personalization=new_pers, **top)
    except TypeError as err:
        raise ConfigError(f"unknown config field: {err}") from err


# -- the conditional density seen by training and inference ---------------------


class ConditionedModel:
    """A conditional density paired with the profile that builds its context.

    One shared parameter store covers both the density and any trainable
    profile pieces, so a single optimizer reaches everything end to end.
    """

    def __init__(self, family, density, profile, params, registry):
        self.family = family
        self.density = density
        self.profile = profile
        self.params = params
        self.registry = registry

    @property
    def dim(self):
        return self.density.config.dim

    def annot_indices(self, annotator_ids):
        return np.asarray(self.registry.indices_of(annotator_ids), dtype=np.int64)

    def log_prob_graph(self, y, text_emb, annot_idx, mode="train", rng=None):
        ctx = self.profile.context_graph(text_emb, annot_idx, mode)
        return self.density.log_prob_graph(np.asarray(y, dtype=np.float64), ctx,
                                           mode=mode, rng=rng)

    def log_prob(self, y, text_emb, annot_idx=None):
        """Eval-mode log density for a batch; returns an (B,) array."""
        with no_grad():
            ctx = self.context_for(text_emb, annot_idx)
            return np.atleast_1d(self.density.log_prob(y, ctx))

    def context_for(self, text_emb, annot_idx=None):
        text_emb = np.asarray(text_emb, dtype=np.float64)
        if text_emb.ndim == 1:
            text_emb = text_emb[None, :]
        if annot_idx is None:
            annot_idx = np.zeros(text_emb.shape[0], dtype=np.int64)
        return self.profile.context_matrix(text_emb, np.asarray(annot_idx))

    def sample(self, text_emb, annot_idx=0, n=1, seed=0):
        ctx = self.context_for(text_emb, [int(annot_idx)])[0]
        if ctx.shape[0] == 0:
            ctx = None
        return self.density.sample(ctx, n=n, seed=seed)


def build_model(config, label_dim, embed_dim, registry, stats=None):
    """Assemble profile and density over one fresh parameter store."""
    if config.personalization.kind == "formula" and stats is None:
        raise ConfigError("formula personalization needs deviation stats")
    params = ParamStore()
    profile_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x70]))
    profile = make_profile(config.personalization, registry, params, profile_rng,
                           stats=stats)
    ctx_dim = profile.context_dim(embed_dim)
    if config.family == "gmm":
        dcfg = GmmConfig(
            dim=label_dim,
            context_dim=ctx_dim,
            components=config.components,
            hidden=config.gmm_hidden,
            activation=config.activation,
            dropout=config.dropout,
        )
        density = build_gmm(dcfg, seed=[config.seed, 0x64], params=params)
    else:
        dcfg = FlowConfig(
            kind=config.family,
            dim=label_dim,
            context_dim=ctx_dim,
            num_layers=config.num_layers,
            blocks_per_layer=config.blocks_per_layer,
            hidden_features=config.hidden_features,
            dropout=config.dropout,
            batch_norm_within=config.batch_norm_within,
            batch_norm_between=config.batch_norm_between,
            activation=config.activation,
        )
        density = build_flow(dcfg, seed=[config.seed, 0x64], params=params)
    return ConditionedModel(config.family, density, profile, params, registry)


def model_for_dataset(config, dataset, train_idx=None):
    """Build a model sized for a dataset, with per-split deviation stats.

    Formula profiles must only see the training records, so `train_idx`
    is required for that kind.
    """
    stats = None
    if config.personalization.kind == "formula":
        if train_idx is None:
            raise ConfigError("formula personalization needs the training split")
        stats = compute_deviation_stats(
            dataset.texts_at(train_idx),
            dataset.annotators_at(train_idx),
            dataset.label_matrix(train_idx),
            dataset.registry,
        )
    return build_model(config, dataset.dim, dataset.embedding_dim,
                       dataset.registry, stats=stats)


# -- losses ----------------------------------------------------------------------


def nll_loss_graph(model, y, text_emb, annot_idx, mode="train", rng=None):
    """Recorded mean negative log density over a batch."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] == 0:
        raise EmptyBatchError("cannot take the NLL of an empty batch")
    lp = model.log_prob_graph(y, text_emb, annot_idx, mode=mode, rng=rng)
    return T.tmean(lp) * -1.0


def nll_loss(model, y, text_emb, annot_idx=None):
    """Eval-mode mean negative log density; plain float."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] == 0:
        raise EmptyBatchError("cannot take the NLL of an empty batch")
    value = float(-np.mean(model.log_prob(y, text_emb, annot_idx)))
    if not math.isfinite(value):
        raise NumericalError(f"batch NLL is not finite ({value})")
    return value


def _split_nll(model, dataset, idx):
    """NLL of one split, without the finiteness check (callers decide)."""
    y = dataset.label_matrix(idx)
    emb = dataset.text_matrix(idx)
    aidx = model.annot_indices(dataset.annotators_at(idx))
    return float(-np.mean(model.log_prob(y, emb, aidx)))


# -- training loop ---------------------------------------------------------------


@dataclass
class TrainReport:
    """Epoch history and final NLLs for one run.

    Wall-clock time never participates in equality: two runs with the same
    seed must compare equal even though they cannot take the same time.
    """

    train_nll: list
    val_nll: list
    best_epoch: int
    best_val_nll: float
    test_nll: float
    epochs: int
    seed: int
    config: dict
    wall_clock: float = field(compare=False, default=0.0)

    def to_dict(self, include_wall_clock=False):
        out = {
            "train_nll": list(self.train_nll),
            "val_nll": list(self.val_nll),
            "best_epoch": self.best_epoch,
            "best_val_nll": self.best_val_nll,
            "test_nll": self.test_nll,
            "epochs": self.epochs,
            "seed": self.seed,
            "config": self.config,
        }
        if include_wall_clock:
            out["wall_clock"] = self.wall_clock
        return out


def train_model(model, dataset, round_, config):
    """Adam on shuffled mini-batches with patience-based early stopping.

    Validation NLL is measured in eval mode after every epoch; the best
    epoch's weights are restored before the test split is scored.
    """
    started = time.monotonic()
    train_idx = round_.train_idx
    if train_idx.size == 0:
        raise EmptyBatchError("fold round has no training records")
    if round_.val_idx.size == 0:
        raise EmptyBatchError("fold round has no validation records")
    y = dataset.label_matrix(train_idx)
    emb = dataset.text_matrix(train_idx)
    aidx = model.annot_indices(dataset.annotators_at(train_idx))

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x74]))
    state = init_adam(model.params, lr=config.learning_rate)
    best_val = math.inf
    best_epoch = 0
    best_snapshot = model.params.snapshot()
    train_hist, val_hist = [], []
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(train_idx.size)
        batch_losses = []
        for start in range(0, train_idx.size, config.batch_size):
            sel = order[start:start + config.batch_size]
            model.params.zero_grad()
            loss = nll_loss_graph(model, y[sel], emb[sel], aidx[sel],
                                  mode="train", rng=rng)
            grads = gradient(loss, model.params)
            grads, _ = clip_gradients(grads, config.grad_clip)
            adam_step(model.params, grads, state)
            batch_losses.append(float(loss.data))
        train_hist.append(float(np.mean(batch_losses)))

        try:
            val = _split_nll(model, dataset, round_.val_idx)
        except NumericalError as err:
            raise DivergenceError(str(err), epoch=epoch) from err
        if not math.isfinite(val):
            raise DivergenceError("validation NLL is not finite", epoch=epoch)
        val_hist.append(val)

        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_snapshot = model.params.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.params.restore(best_snapshot)
    test = _split_nll(model, dataset, round_.test_idx) if round_.test_idx.size else None
    report = TrainReport(
        train_nll=train_hist,
        val_nll=val_hist,
        best_epoch=best_epoch,
        best_val_nll=best_val,
        test_nll=test,
        epochs=len(val_hist),
        seed=config.seed,
        config=config_to_dict(config),
        wall_clock=time.monotonic() - started,
    )
    return model, report


# -- cross-validated experiment runner --------------------------------------------


@dataclass(frozen=True)
class ExperimentResult:
    rows: list
    summary: list


def _cell_config(config, family, personalization):
    return config_with(config, {"family": family,
                                "personalization.kind": personalization})


def _run_cell(args):
    dataset, name, family, personalization, test_fold, config = args
    cfg = _cell_config(config, family, personalization)
    row = {
        "dataset": name,
        "flow": family,
        "personalization": personalization,
        "fold": test_fold,
        "seed": cfg.seed,
    }
    try:
        round_ = fold_round(dataset, test_fold)
        model = model_for_dataset(cfg, dataset, train_idx=round_.train_idx)
        _, report = train_model(model, dataset, round_, cfg)
        row["test_nll"] = report.test_nll
    except AnnoflowError as err:
        row["test_nll"] = None
        row["error"] = f"{type(err).__name__}: {err}"
    return row


def run_experiment(dataset, families, personalizations, config,
                   dataset_name="synthetic", jobs=1):
    """Train one model per fold per (family, personalization) cell.

    Failed cells are recorded with their error and the run continues.
    Rows come back in a deterministic order regardless of `jobs`.
    """
    if dataset.num_folds < 2:
        raise ConfigError("dataset folds not assigned; call split_folds first")
    for family in families:
        if family not in FAMILIES:
            raise ConfigError(f"unknown model family {family!r}")
    tasks = [
        (dataset, dataset_name, family, personalization, test_fold, config)
        for family in families
        for personalization in personalizations
        for test_fold in range(dataset.num_folds)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(task) for task in tasks]
    return ExperimentResult(rows=rows, summary=summarize_rows(rows))


def summarize_rows(rows):
    """Per-cell mean and std plus best-in-row significance annotations.

    For each (dataset, personalization) row of the results table, the
    family with the lowest mean test NLL is marked best; every other
    family is paired against it fold by fold with a Bonferroni factor of
    (cells in the row - 1).
    """
    cells = {}
    for row in rows:
        if row.get("test_nll") is None:
            continue
        key = (row["dataset"], row["personalization"], row["flow"])
        cells.setdefault(key, {})[row["fold"]] = row["test_nll"]

    summary = []
    row_keys = sorted({(d, p) for d, p, _ in cells})
    for dataset_name, personalization in row_keys:
        flows = sorted(f for d, p, f in cells if (d, p) == (dataset_name, personalization))
        means = {}
        for flow in flows:
            values = cells[(dataset_name, personalization, flow)]
            means[flow] = float(np.mean(list(values.values())))
        best = min(flows, key=lambda f: means[f])
        comparisons = max(len(flows) - 1, 1)
        for flow in flows:
            values = cells[(dataset_name, personalization, flow)]
            folds = sorted(values)
            entry = {
                "dataset": dataset_name,
                "personalization": personalization,
                "flow": flow,
                "mean_test_nll": means[flow],
                "std_test_nll": float(np.std(list(values.values()), ddof=1))
                if len(values) > 1 else 0.0,
                "folds": len(values),
                "best": flow == best,
                "p_adjusted": None,
                "significant": None,
            }
            if flow != best:
                best_values = cells[(dataset_name, personalization, best)]
                shared = [f for f in folds if f in best_values]
                if len(shared) >= 2:
                    try:
                        test = paired_ttest_bonferroni(
                            [values[f] for f in shared],
                            [best_values[f] for f in shared],
                            m=comparisons,
                        )
                        entry["p_adjusted"] = test["p_adjusted"]
                        entry["significant"] = test["significant"]
                    except AnnoflowError:
                        pass  # zero-variance differences stay unannotated
            summary.append(entry)
    return summary


# -- hyperparameter grid search ----------------------------------------------------


@dataclass(frozen=True)
class GridResult:
    best: list
    trace: list


def _grid_points(axes):
    names = sorted(axes)
    for name in names:
        if not axes[name]:
            raise ConfigError(f"grid axis {name!r} is empty")
    for combo in itertools.product(*(axes[name] for name in names)):
        yield dict(zip(names, combo))


def _run_grid_point(args):
    dataset, family, personalization, overrides, test_fold, config = args
    cfg = config_with(_cell_config(config, family, personalization), overrides)
    row = {
        "flow": family,
        "personalization": personalization,
        "overrides": dict(overrides),
        "seed": cfg.seed,
    }
    try:
        round_ = fold_round(dataset, test_fold)
        model = model_for_dataset(cfg, dataset, train_idx=round_.train_idx)
        _, report = train_model(model, dataset, round_, cfg)
        row["val_nll"] = report.best_val_nll
        row["test_nll"] = report.test_nll
    except AnnoflowError as err:
        row["val_nll"] = None
        row["test_nll"] = None
        row["error"] = f"{type(err).__name__}: {err}"
    return row


def grid_search(dataset, families, personalizations, axes, config,
                test_fold=0, jobs=1):
    """Exhaustive Cartesian sweep, selected on validation NLL.

    Every grid point trains once on the given CV round with the shared
    seed, so a grid of size one reproduces train_model exactly.
    """
    if dataset.num_folds < 2:
        raise ConfigError("dataset folds not assigned; call split_folds first")
    points = list(_grid_points(axes))
    tasks = [
        (dataset, family, personalization, overrides, test_fold, config)
        for family in families
        for personalization in personalizations
        for overrides in points
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trace = list(pool.map(_run_grid_point, tasks))
    else:
        trace = [_run_grid_point(task) for task in tasks]

    best = []
    for family in families:
        for personalization in personalizations:
            candidates = [
                row for row in trace
                if row["flow"] == family
                and row["personalization"] == personalization
                and row.get("val_nll") is not None
            ]
            if not candidates:
                continue
            winner = min(candidates, key=lambda row: row["val_nll"])
            cfg = config_with(_cell_config(config, family, personalization),
                              winner["overrides"])
            best.append({
                "flow": family,
                "personalization": personalization,
                "overrides": winner["overrides"],
                "val_nll": winner["val_nll"],
                "test_nll": winner["test_nll"],
                "config": config_to_dict(cfg),
            })
    return GridResult(best=best, trace=trace)


# -- model bundles -----------------------------------------------------------------


def save_model(path, model, config, schema=None):
    """Write everything needed to rebuild the model for inference."""
    payload = {
        "format_version": BUNDLE_FORMAT_VERSION,
        "family": model.family,
        "label_dim": model.density.config.dim,
        "embed_dim": model.density.config.context_dim - model.profile.dim,
        "density_config": model.density.config_echo(),
        "personalization": model.profile.state_dict(),
        "registry": model.registry.to_dict(),
        "train_config": config_to_dict(config),
        "schema": schema.to_dict() if schema is not None else None,
        "params": params_to_dict(model.params),
    }
    write_json_atomic(path, payload)


def load_model(path):
    """Rebuild a saved model; returns (model, config, schema or None)."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != BUNDLE_FORMAT_VERSION:
        raise ConfigError(f"unsupported model bundle version {version!r}")
    config = config_from_dict(payload["train_config"])
    registry = AnnotatorRegistry.from_dict(payload["registry"])
    stats = None
    state = payload["personalization"]
    if state.get("kind") == "formula":
        stats = DeviationStats.from_dict(state["stats"])
    model = build_model(config, payload["label_dim"], payload["embed_dim"],
                        registry, stats=stats)
    saved = payload["params"]
    have = set(model.params.names())
    want = set(saved)
    if have != want:
        raise ConfigError("model bundle parameters do not match its config")
    for name, entry in saved.items():
        model.params.set_value(
            name, np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        )
    schema = LabelSchema.from_dict(payload["schema"]) if payload["schema"] else None
    return model, config, schema
