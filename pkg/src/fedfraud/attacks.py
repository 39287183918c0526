"""Inference-time attacks against published private profiles.

Three attacks run on attacker-visible auxiliary data and are scored on a
hidden evaluation partition: inversion (recover numeric fields of the
final history event from a profile), attribute inference (recover a
categorical account attribute), and membership inference (decide whether
an account was part of the scorer's training population, using score
statistics from a shadow classifier).  Each attack reports alongside a
naive baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .kernel import (
    AdamState,
    Tensor,
    adam_step,
    bce_loss,
    mse_loss,
    softmax_ce_batch,
)
from .metrics import classification_metrics, regression_metrics
from .models import MLP


@dataclass
class AttackConfig:
    hidden: tuple = (64, 64)
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    shadow_passes: int = 16
    # the attacker holds out this share of auxiliary data and only deploys
    # the trained model if it beats the naive baseline there
    holdout_fraction: float = 0.2
    adoption_margin: float = 0.02


@dataclass
class AttackData:
    """Attacker-visible tuples plus the hidden evaluation partition.

    ``aux_*`` is what the attack model trains on; ``eval_*`` is only ever
    touched by the metric computation.
    """

    aux_x: np.ndarray
    aux_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray

    def validate(self):
        if len(self.aux_x) != len(self.aux_y) or len(self.eval_x) != len(self.eval_y):
            raise ConfigError("features and labels must be parallel arrays")
        if len(self.aux_x) == 0 or len(self.eval_x) == 0:
            raise ConfigError("both partitions must be non-empty")
        return self


@dataclass
class AttackModel:
    """A trained attack network with its input standardisation."""

    kind: str  # "inversion" | "attribute" | "membership"
    mlp: MLP
    x_mean: np.ndarray
    x_std: np.ndarray
    epsilon: float | None = None

    def predict(self, x):
        return self.mlp.predict(self._standardise(x))

    def _standardise(self, x):
        return (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_std


def _holdout_split(n, config: AttackConfig):
    """Attacker-side split of auxiliary indices into fit and validation."""
    rng = np.random.default_rng(config.seed + 1)
    perm = rng.permutation(n)
    n_val = max(1, int(n * config.holdout_fraction))
    return perm[n_val:], perm[:n_val]


def _fit(kind, x, y, out_dim, out_activation, loss, config: AttackConfig):
    """Train an attack MLP by minibatch Adam; returns the wrapped model."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), 1e-8)
    xs = (x - mean) / std
    rng = np.random.default_rng(config.seed)
    mlp = MLP(
        (x.shape[1],) + tuple(config.hidden) + (out_dim,),
        out_activation=out_activation,
        rng=rng,
    )
    state = AdamState()
    n = len(xs)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            mlp.bundle.zero_grad()
            out = mlp.forward(Tensor(xs[idx]))
            loss(out, y[idx]).backward()
            adam_step(mlp.bundle, mlp.bundle.grads(), state, config.lr)
    return AttackModel(kind=kind, mlp=mlp, x_mean=mean, x_std=std)


# ----------------------------------------------------------------------
# Inversion
# ----------------------------------------------------------------------


def attack_inversion(data: AttackData, config: AttackConfig = None):
    """Reconstruct numeric fields of the final history event from profiles.

    Returns per-feature R^2 on the hidden partition (None for targets with
    zero variance there), their mean, and the best single feature.  If the
    trained model does not beat predicting the mean on the attacker's own
    holdout, the attacker falls back to the mean predictor.
    """
    config = config or AttackConfig()
    data.validate()
    aux_y = np.asarray(data.aux_y, dtype=np.float64)
    fit_idx, val_idx = _holdout_split(len(data.aux_x), config)
    model = _fit(
        "inversion",
        data.aux_x[fit_idx],
        aux_y[fit_idx],
        out_dim=aux_y.shape[1],
        out_activation="identity",
        loss=lambda out, y: mse_loss(out, y),
        config=config,
    )
    val_r2 = regression_metrics(model.predict(data.aux_x[val_idx]), aux_y[val_idx])["mean_r2"]
    adopted = val_r2 > config.adoption_margin
    if adopted:
        pred = model.predict(data.eval_x)
    else:
        pred = np.tile(aux_y.mean(axis=0), (len(data.eval_x), 1))
    result = regression_metrics(pred, data.eval_y)
    result["adopted"] = adopted
    result["model"] = model
    return result


# ----------------------------------------------------------------------
# Attribute inference
# ----------------------------------------------------------------------


def attack_attribute_inference(data: AttackData, n_classes, config: AttackConfig = None):
    """Recover a categorical account attribute from its profile.

    Reports top-1 accuracy on the hidden partition next to the frequency
    baseline (always guess the most common auxiliary class).
    """
    config = config or AttackConfig()
    data.validate()
    aux_y = np.asarray(data.aux_y, dtype=np.int64)
    eval_y = np.asarray(data.eval_y, dtype=np.int64)
    if n_classes < 2:
        raise ConfigError("attribute needs at least two classes")
    missing = sorted(set(range(n_classes)) - set(aux_y.tolist()))
    if missing:
        warnings.warn(
            f"classes {missing} absent from auxiliary data and unpredictable", stacklevel=2
        )
    fit_idx, val_idx = _holdout_split(len(data.aux_x), config)
    model = _fit(
        "attribute",
        data.aux_x[fit_idx],
        aux_y[fit_idx],
        out_dim=n_classes,
        out_activation="identity",
        loss=softmax_ce_batch,
        config=config,
    )
    freq = baseline("frequency-classifier", data)
    val_pred = np.argmax(model.predict(data.aux_x[val_idx]), axis=1)
    val_acc = float((val_pred == aux_y[val_idx]).mean())
    values, counts = np.unique(aux_y, return_counts=True)
    val_freq = float((aux_y[val_idx] == values[np.argmax(counts)]).mean())
    # the win must also clear the holdout's own sampling noise (3 binomial
    # standard errors), or a no-signal model can be adopted by luck
    noise = 3.0 * float(np.sqrt(max(val_freq * (1.0 - val_freq), 1e-12) / len(val_idx)))
    adopted = val_acc > val_freq + max(config.adoption_margin, noise)
    if adopted:
        pred = np.argmax(model.predict(data.eval_x), axis=1)
        accuracy = classification_metrics(pred, eval_y)["accuracy"]
    else:
        accuracy = freq  # the attacker keeps the frequency guess
    return {
        "accuracy": accuracy,
        "frequency_baseline": freq,
        "adopted": adopted,
        "model": model,
    }


# ----------------------------------------------------------------------
# Membership inference
# ----------------------------------------------------------------------


def shadow_scores(shadow_fn, transaction_rows, passes=16, seed=0):
    """Score statistics (mu, sigma) for one account under a shadow classifier.

    ``shadow_fn(x, rng)`` must run one stochastic (dropout-active) pass over
    the (n_tx, d) rows and return n_tx scores in (0, 1); statistics pool
    over all (transaction, pass) scores.
    """
    rows = np.asarray(transaction_rows, dtype=np.float64)
    if rows.ndim != 2 or len(rows) == 0:
        raise ConfigError("shadow scoring needs at least one transaction row")
    if passes < 2:
        raise ConfigError("need at least two stochastic passes for a spread estimate")
    rng = np.random.default_rng(seed)
    scores = np.stack([shadow_fn(rows, rng) for _ in range(passes)])
    return float(scores.mean()), float(scores.std())


def attack_membership(data: AttackData, config: AttackConfig = None):
    """Decide training-set membership from (profile, mu_s, sigma_s) features.

    Binary classifier, threshold 0.5; reports F-score on the hidden
    partition with the always-positive baseline for reference.
    """
    config = config or AttackConfig()
    data.validate()
    eval_y = np.asarray(data.eval_y, dtype=np.int64)
    if len(set(eval_y.tolist())) < 2:
        raise ConfigError("membership evaluation set must contain both classes")
    aux_y = np.asarray(data.aux_y, dtype=np.float64)
    fit_idx, val_idx = _holdout_split(len(data.aux_x), config)
    model = _fit(
        "membership",
        data.aux_x[fit_idx],
        aux_y[fit_idx],
        out_dim=1,
        out_activation="sigmoid",
        loss=lambda out, y: bce_loss(out.reshape(out.shape[0]), y),
        config=config,
    )
    val_labels = aux_y[val_idx].astype(np.int64)
    val_pred = (model.predict(data.aux_x[val_idx])[:, 0] >= 0.5).astype(np.int64)
    val_f = classification_metrics(val_pred, val_labels)["f_score"]
    val_base = classification_metrics(np.ones_like(val_labels), val_labels)["f_score"]
    adopted = val_f > val_base + config.adoption_margin
    if adopted:
        pred = (model.predict(data.eval_x)[:, 0] >= 0.5).astype(np.int64)
    else:
        pred = np.ones_like(eval_y)  # the attacker keeps the always-positive guess
    result = classification_metrics(pred, eval_y)
    result["always_positive_baseline"] = baseline("always-positive", data)
    result["adopted"] = adopted
    result["model"] = model
    return result


# ----------------------------------------------------------------------
# Baselines
# ----------------------------------------------------------------------


def baseline(kind, data: AttackData):
    """Deterministic no-skill reference on the hidden partition."""
    if kind == "frequency-classifier":
        aux_y = np.asarray(data.aux_y, dtype=np.int64)
        values, counts = np.unique(aux_y, return_counts=True)
        guess = int(values[np.argmax(counts)])
        eval_y = np.asarray(data.eval_y, dtype=np.int64)
        return float((eval_y == guess).mean())
    if kind == "always-positive":
        eval_y = np.asarray(data.eval_y, dtype=np.int64)
        pred = np.ones_like(eval_y)
        return classification_metrics(pred, eval_y)["f_score"]
    if kind == "zero-r2":
        targ = np.atleast_2d(np.asarray(data.eval_y, dtype=np.float64).T).T
        pred = np.tile(targ.mean(axis=0), (len(targ), 1))
        return regression_metrics(pred, targ)["mean_r2"]
    raise ConfigError(f"unknown baseline kind {kind!r}")
