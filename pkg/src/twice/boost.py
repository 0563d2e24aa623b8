"""Gradient-boosted regression trees for squared loss with early stopping."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from twice.errors import EmptyInput, SchemaMismatch, ValidationError
from twice.tree import Binner, RegressionTree, TreeFitConfig, grow

FORMAT_VERSION = 1


@dataclass(frozen=True)
class BoostConfig:
    learning_rate: float = 0.08
    early_stop_patience: int = 80
    max_depth: int = 15
    min_leaf_size: float = 30
    max_leaves: int = 31
    max_rounds: int = 2000
    validation_fraction: float = 0.1
    numeric_candidate_quantiles: int = 255
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValidationError("learning_rate must lie in (0, 1]")
        if self.early_stop_patience < 1:
            raise ValidationError("early_stop_patience must be >= 1")
        if self.max_rounds < 0:
            raise ValidationError("max_rounds must be >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ValidationError("validation_fraction must lie in [0, 1)")

    @property
    def tree_config(self) -> TreeFitConfig:
        return TreeFitConfig(max_leaves=self.max_leaves, min_leaf_size=self.min_leaf_size,
                             max_depth=self.max_depth,
                             numeric_candidate_quantiles=self.numeric_candidate_quantiles, seed=self.seed)


@dataclass
class BoostedEnsemble:
    base_prediction: float
    trees: list[RegressionTree]
    learning_rate: float
    best_round: int
    feature_names: list[str]
    categorical: np.ndarray
    config: BoostConfig = field(default_factory=BoostConfig)
    train_loss: list[float] = field(default_factory=list)
    valid_loss: list[float] = field(default_factory=list)
    levels: dict[str, list[str]] = field(default_factory=dict)

    @property
    def rounds_used(self) -> int:
        return len(self.trees)

    @property
    def gains(self) -> np.ndarray:
        """Training SSE reduction attributed to each feature over the first ``best_round`` trees."""
        out = np.zeros(len(self.feature_names))
        scale = self.learning_rate * (2.0 - self.learning_rate)
        for tree in self.trees[:self.best_round]:
            split = tree.feature >= 0
            np.add.at(out, tree.feature[split], tree.gain[split])
        return out * scale

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise SchemaMismatch(f"expected {len(self.feature_names)} columns, got shape {X.shape}")
        out = np.full(len(X), self.base_prediction)
        for tree in self.trees[:self.best_round]:
            out += self.learning_rate * tree.predict(X)
        return out

    def trimmed(self) -> "BoostedEnsemble":
        return replace(self, trees=self.trees[:self.best_round])

    def to_dict(self) -> dict:
        return {
            "format": "twice-ensemble", "version": FORMAT_VERSION,
            "config": asdict(self.config),
            "base_prediction": self.base_prediction,
            "learning_rate": self.learning_rate,
            "best_round": self.best_round,
            "feature_names": list(self.feature_names),
            "categorical": self.categorical.tolist(),
            "levels": self.levels,
            "train_loss": self.train_loss,
            "valid_loss": self.valid_loss,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BoostedEnsemble":
        if data.get("format") != "twice-ensemble" or data.get("version") != FORMAT_VERSION:
            raise ValidationError("not a version-1 ensemble document")
        return cls(data["base_prediction"], [RegressionTree.from_dict(t) for t in data["trees"]],
                   data["learning_rate"], data["best_round"], data["feature_names"],
                   np.asarray(data["categorical"], dtype=bool), BoostConfig(**data["config"]),
                   data["train_loss"], data["valid_loss"], data.get("levels", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "BoostedEnsemble":
        return cls.from_dict(json.loads(text))


def fit_boosted(X, y, X_valid=None, y_valid=None, config: BoostConfig = BoostConfig(),
                categorical: Sequence[bool] | None = None, feature_names=None) -> BoostedEnsemble:
    """Boost mean-leaf trees on squared-loss residuals.

    With validation rows, ``best_round`` is the first round attaining the lowest
    validation MSE and fitting stops after ``early_stop_patience`` rounds without
    improvement. Without them every fitted round is kept.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise EmptyInput("training rows must be a non-empty 2-D matrix")
    if len(y) != len(X):
        raise ValidationError("rows and targets differ in length")
    cat = np.zeros(X.shape[1], dtype=bool) if categorical is None else np.asarray(categorical, dtype=bool)
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(X.shape[1])]
    has_valid = X_valid is not None and len(X_valid) > 0
    if has_valid:
        X_valid = np.asarray(X_valid, dtype=np.float64)
        y_valid = np.asarray(y_valid, dtype=np.float64)

    eta = config.learning_rate
    base = float(y.mean())
    pred = np.full(len(y), base)
    vpred = np.full(len(y_valid), base) if has_valid else None
    ones = np.ones(len(y))
    tree_cfg = config.tree_config
    binner = Binner(X, cat, None, config.numeric_candidate_quantiles) if config.max_rounds else None

    trees: list[RegressionTree] = []
    train_loss = [float(np.mean((y - pred) ** 2))]
    valid_loss = [float(np.mean((y_valid - vpred) ** 2))] if has_valid else []
    best, best_round = (valid_loss[0] if has_valid else np.inf), 0
    for k in range(1, config.max_rounds + 1):
        tree, leaf = grow(binner, y - pred, ones, tree_cfg, names)
        if tree.leaf_count == 1:
            break
        trees.append(tree)
        pred += eta * tree.value[leaf]
        train_loss.append(float(np.mean((y - pred) ** 2)))
        if has_valid:
            vpred += eta * tree.predict(X_valid)
            loss = float(np.mean((y_valid - vpred) ** 2))
            valid_loss.append(loss)
            if loss < best:
                best, best_round = loss, k
            elif k - best_round >= config.early_stop_patience:
                break
        else:
            best_round = k
    return BoostedEnsemble(base, trees, eta, best_round, names, cat, config, train_loss, valid_loss)


def group_validation_split(groups, fraction: float, seed: int):
    """Boolean validation mask holding out ``fraction`` of the distinct group ids."""
    groups = np.asarray(groups)
    uniq, codes = np.unique(groups, return_inverse=True)
    k = int(round(fraction * len(uniq)))
    if k == 0 or k == len(uniq):
        return np.zeros(len(groups), dtype=bool)
    held = np.zeros(len(uniq), dtype=bool)
    held[np.random.default_rng(seed).permutation(len(uniq))[:k]] = True
    return held[codes]


def fit_with_holdout(X, y, groups, config: BoostConfig = BoostConfig(), categorical=None,
                     feature_names=None) -> BoostedEnsemble:
    """Fit with early stopping on a random ``validation_fraction`` of the ids in ``groups``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    valid = (group_validation_split(groups, config.validation_fraction, config.seed)
             if groups is not None and config.validation_fraction > 0 else np.zeros(len(y), dtype=bool))
    if valid.all() or not valid.any():
        return fit_boosted(X, y, None, None, config, categorical, feature_names)
    return fit_boosted(X[~valid], y[~valid], X[valid], y[valid], config, categorical, feature_names)


class BoostLearner:
    """Learner callable used by cross-fitting: ``learner(X, y, categorical, groups, names)``."""

    def __init__(self, config: BoostConfig = BoostConfig()):
        self.config = config

    def __call__(self, X, y, categorical=None, groups=None, feature_names=None) -> BoostedEnsemble:
        return fit_with_holdout(X, y, groups, self.config, categorical, feature_names)


def predict_ensemble(model: BoostedEnsemble, rows) -> np.ndarray:
    return model.predict(rows)


def variable_importance(model: BoostedEnsemble) -> list[tuple[str, float]]:
    """Features ranked by share of total split gain; features that never split are omitted."""
    gains = model.gains
    total = gains.sum()
    if total <= 0:
        return []
    share = gains / total
    order = sorted(np.flatnonzero(gains > 0), key=lambda j: (-share[j], j))
    return [(model.feature_names[j], float(share[j])) for j in order]
