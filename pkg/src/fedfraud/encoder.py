"""Per-bank representation functions and their contrastive pretraining.

A recurrent cell (simple or LSTM) consumes an account's event sequence;
a publication head (64/32 relu with dropout, then tanh output) maps the
final state to a bounded embedding which is scaled onto an l1 ball so the
release mechanism's sensitivity bound holds by construction.  Pretraining
pairs the forward embedding of an account's past with a backward
embedding of its future against in-batch negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import features
from .errors import ConfigError
from .kernel import (
    AdamState,
    LstmParams,
    ParameterBundle,
    Tensor,
    activation,
    adam_step,
    constant,
    dropout,
    glorot,
    lstm_cell,
    rnn_cell,
    take_rows,
)

DEFAULT_EMBED_DIM = 8
DEFAULT_CLIP_RADIUS = 0.5


@dataclass
class EncoderConfig:
    input_dim: int = features.ENCODER_FEATURE_DIM
    hidden_dim: int = 32
    head_dims: tuple = (64, 32)
    embed_dim: int = DEFAULT_EMBED_DIM
    cell: str = "simple"  # "simple" | "lstm"
    cell_activation: str = "tanh"
    clip_radius: float = DEFAULT_CLIP_RADIUS
    dropout: float = 0.1


class SequenceEncoder:
    """Recurrent embedder for variable-length event sequences."""

    def __init__(self, config: EncoderConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        h, f = config.hidden_dim, config.input_dim
        self.bundle = ParameterBundle()
        if config.cell == "simple":
            self.W = self.bundle.add("cell.W", glorot(rng, (h, f)))
            self.U = self.bundle.add("cell.U", glorot(rng, (h, h)))
            self.b = self.bundle.add("cell.b", np.zeros(h))
        elif config.cell == "lstm":
            gates = {}
            for gate in ("i", "f", "g", "o"):
                gates[f"W_{gate}"] = self.bundle.add(f"cell.W_{gate}", glorot(rng, (h, f)))
                gates[f"U_{gate}"] = self.bundle.add(f"cell.U_{gate}", glorot(rng, (h, h)))
                gates[f"b_{gate}"] = self.bundle.add(f"cell.b_{gate}", np.zeros(h))
            self.lstm = LstmParams(**gates)
        else:
            raise ConfigError(f"unknown cell kind {config.cell!r}")
        prev = h
        self._head = []
        for i, width in enumerate(config.head_dims):
            W = self.bundle.add(f"head.W{i}", glorot(rng, (prev, width)))
            b = self.bundle.add(f"head.b{i}", np.zeros(width))
            self._head.append((W, b))
            prev = width
        self.W_out = self.bundle.add("head.W_out", glorot(rng, (prev, config.embed_dim)))
        self.b_out = self.bundle.add("head.b_out", np.zeros(config.embed_dim))
        self.bundle.freeze()

    # -- forward -------------------------------------------------------

    def forward(self, feature_seqs, train=False, rng=None):
        """Embed a batch of feature sequences; returns a Tensor (n, embed_dim).

        Empty sequences are replaced by the reserved no-history event.
        Output rows satisfy the l1 clip bound.
        """
        cfg = self.config
        seqs = [s if len(s) else features.no_history_features() for s in feature_seqs]
        for s in seqs:
            if s.shape[1] != cfg.input_dim:
                raise ConfigError(
                    f"event feature width {s.shape[1]} does not match encoder input {cfg.input_dim}"
                )
        n = len(seqs)
        t_max = max(len(s) for s in seqs)
        x = np.zeros((n, t_max, cfg.input_dim))
        mask = np.zeros((n, t_max, 1))
        for i, s in enumerate(seqs):
            x[i, : len(s)] = s
            mask[i, : len(s)] = 1.0

        h = None
        c = None
        for t in range(t_max):
            x_t = constant(x[:, t, :])
            if cfg.cell == "simple":
                h_new = rnn_cell(x_t, h, self.W, self.U, self.b, act=cfg.cell_activation)
                c_new = None
            else:
                h_new, c_new = lstm_cell(x_t, h, c, self.lstm)
            if h is None:
                h = h_new
                c = c_new
            else:
                m = constant(mask[:, t, :])
                keep = constant(1.0 - mask[:, t, :])
                h = h_new * m + h * keep
                if c_new is not None:
                    c = c_new * m + c * keep

        z = h
        for W, b in self._head:
            z = activation("relu", z @ W + b)
            z = dropout(z, cfg.dropout, rng, train)
        z = activation("tanh", z @ self.W_out + self.b_out)
        return l1_clip_rows(z, cfg.clip_radius)

    def embed(self, feature_seqs):
        """Deterministic embeddings (dropout off) as a plain array."""
        return self.forward(feature_seqs).data


def l1_clip_rows(z, radius):
    """Differentiable row-wise l1 clip: z * radius / max(||z||_1, radius)."""
    norms = z.abs().sum(axis=1, keepdims=True)
    return z * (constant(radius) / norms.maximum(radius))


def embed_sequence(encoder: SequenceEncoder, seq, account):
    """Embedding of one time-sorted history sequence."""
    return encoder.embed([features.sequence_features(seq, account)])[0]


def backward_embed(encoder: SequenceEncoder, future_seq, account):
    """Embedding of a future sequence consumed newest-first."""
    return encoder.embed([features.sequence_features(list(reversed(future_seq)), account)])[0]


# ----------------------------------------------------------------------
# Contrastive objective
# ----------------------------------------------------------------------


def contrastive_loss(z, z_pos, negatives, tau, include_positive=False):
    """Dual-encoding contrastive loss, mean over batch rows.

    -log( exp(z.z+ / tau) / sum_k exp(z.z-_k / tau) ) with the denominator
    over negatives only; ``include_positive`` adds the positive pair to the
    denominator (standard InfoNCE variant).  Log-sum-exp stabilised.
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    if not negatives:
        raise ConfigError("contrastive loss needs at least one negative")
    z, z_pos = Tensor._lift(z), Tensor._lift(z_pos)
    if z.ndim == 1:
        z = z.reshape(1, -1)
        z_pos = z_pos.reshape(1, -1)
        negatives = [Tensor._lift(nk).reshape(1, -1) for nk in negatives]
    else:
        negatives = [Tensor._lift(nk) for nk in negatives]
    inv_tau = 1.0 / tau
    pos = (z * z_pos).sum(axis=1) * inv_tau
    logits = [(z * nk).sum(axis=1) * inv_tau for nk in negatives]
    if include_positive:
        logits = logits + [pos]
    peak = np.max([lg.data for lg in logits], axis=0)
    shifted = [(lg - constant(peak)).exp() for lg in logits]
    total = shifted[0]
    for term in shifted[1:]:
        total = total + term
    lse = total.log() + constant(peak)
    return (lse - pos).mean()


# ----------------------------------------------------------------------
# Pretraining
# ----------------------------------------------------------------------


@dataclass
class PretrainConfig:
    k_negatives: int = 8
    tau: float = 0.1
    epochs: int = 5
    batch_size: int = 1024
    lr: float = 1e-3
    seed: int = 0
    history_limit: int = 32
    pairs_per_epoch: int | None = None
    include_positive: bool = False


def _eligible_accounts(dataset, accounts):
    out = []
    for acct in accounts:
        if len(dataset.account_events(acct.id)) >= 2:
            out.append(acct)
    return out


def _pair_features(dataset, account, split_idx, limit):
    events = dataset.account_events(account.id)
    past = events[max(0, split_idx - limit) : split_idx]
    future = events[split_idx : split_idx + limit]
    fwd = features.sequence_features(past, account)
    bwd = features.sequence_features(list(reversed(future)), account)
    return fwd, bwd


def pretrain(dataset, accounts, fwd_encoder, bwd_encoder, config: PretrainConfig):
    """Train forward and backward encoders against in-batch negatives.

    Returns the per-epoch mean loss trace; parameters are updated in place.
    """
    eligible = _eligible_accounts(dataset, accounts)
    if len(eligible) < config.k_negatives + 1:
        raise ConfigError(
            f"{len(eligible)} accounts with >=2 events; need more than k={config.k_negatives}"
        )
    rng = np.random.default_rng(config.seed)
    fwd_state, bwd_state = AdamState(), AdamState()
    n_pairs = config.pairs_per_epoch or len(eligible)
    trace = []
    for _ in range(config.epochs):
        picks = rng.choice(len(eligible), size=n_pairs, replace=n_pairs > len(eligible))
        rng.shuffle(picks)
        epoch_losses = []
        for start in range(0, len(picks), config.batch_size):
            chunk = picks[start : start + config.batch_size]
            if len(chunk) <= config.k_negatives:
                continue
            fwd_feats, bwd_feats = [], []
            for idx in chunk:
                acct = eligible[idx]
                n_events = len(dataset.account_events(acct.id))
                split_idx = int(rng.integers(1, n_events))
                f, b = _pair_features(dataset, acct, split_idx, config.history_limit)
                fwd_feats.append(f)
                bwd_feats.append(b)
            fwd_encoder.bundle.zero_grad()
            bwd_encoder.bundle.zero_grad()
            z = fwd_encoder.forward(fwd_feats, train=True, rng=rng)
            z_pos = bwd_encoder.forward(bwd_feats, train=True, rng=rng)
            n = len(chunk)
            negatives = [
                take_rows(z_pos, (np.arange(n) + 1 + k) % n) for k in range(config.k_negatives)
            ]
            loss = contrastive_loss(z, z_pos, negatives, config.tau, config.include_positive)
            loss.backward()
            adam_step(fwd_encoder.bundle, fwd_encoder.bundle.grads(), fwd_state, config.lr)
            adam_step(bwd_encoder.bundle, bwd_encoder.bundle.grads(), bwd_state, config.lr)
            epoch_losses.append(float(loss.data))
        trace.append(sum(epoch_losses) / len(epoch_losses))
    return trace


def retrieval_accuracy(dataset, accounts, fwd_encoder, bwd_encoder, k=8, n_queries=256, seed=0, history_limit=32):
    """How often a past embedding ranks its own future first among k+1 candidates.

    Each account contributes one (past, future) pair split at the midpoint
    of its history; distractor futures come from other accounts.
    """
    eligible = _eligible_accounts(dataset, accounts)
    if len(eligible) < k + 1:
        raise ConfigError("not enough eligible accounts for retrieval evaluation")
    rng = np.random.default_rng(seed)
    n_queries = min(n_queries, len(eligible))
    query_ids = rng.choice(len(eligible), size=n_queries, replace=False)

    def midpoint_pair(acct):
        n_events = len(dataset.account_events(acct.id))
        return _pair_features(dataset, acct, max(1, n_events // 2), history_limit)

    hits = 0
    for qi in query_ids:
        fwd_feat, bwd_feat = midpoint_pair(eligible[qi])
        others = [i for i in rng.permutation(len(eligible))[: k + 1] if i != qi][:k]
        cand_feats = [bwd_feat] + [midpoint_pair(eligible[oi])[1] for oi in others]
        zq = fwd_encoder.embed([fwd_feat])[0]
        zc = bwd_encoder.embed(cand_feats)
        if int(np.argmax(zc @ zq)) == 0:
            hits += 1
    return hits / n_queries
