"""Distributed training protocols over an in-process party simulation.

Two protocols: peer-to-peer transfer learning (one acting bank trains a
scorer on its own embeddings plus private profiles requested from
partners, adapting them with learned pre-processors), and orchestrated
end-to-end training (a central scorer plus bank-owned encoders exchanging
private profiles forward and per-sample gradients backward, processed in
micro-batches).  Cross-party traffic flows through a message log so the
isolation property is auditable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import datagen, features
from .encoder import EncoderConfig, SequenceEncoder
from .errors import ConfigError, ProtocolError, RoutingError
from .kernel import AdamState, Tensor, adam_step, bce_loss, sgd_step
from .ldp import Mechanism
from .seeding import stable_seed
from .models import MLP

ORCHESTRATOR = "orchestrator"
ALLOWED_MESSAGE_KINDS = frozenset({"profile_request", "private_profile", "gradient_message"})


@dataclass
class TrainConfig:
    protocol: str = "orchestrated"  # "orchestrated" | "p2p"
    epsilon: float = math.inf
    batch_size: int = 1024
    micro_batch: int = 8
    lr: float = 1e-3
    gamma: float = 1e-8
    epochs: int = 1
    seed: int = 0
    optimizer: str = "adam"  # "adam" | "sgd"
    dropout_active: bool = False
    history_limit: int = 32
    embed_dim: int = 8
    cell: str = "simple"
    acting_bank: int = 0  # peer-to-peer only

    def validate(self):
        if self.protocol not in ("orchestrated", "p2p"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        if self.epsilon <= 0:
            raise ConfigError("privacy budget must be positive")
        if self.batch_size <= 0 or self.micro_batch <= 0:
            raise ConfigError("batch sizes must be positive")
        if self.batch_size % self.micro_batch != 0:
            raise ConfigError("batch size must be divisible by the micro-batch size")
        if self.gamma <= 0:
            raise ConfigError("slack term must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


class MessageLog:
    """Aggregated cross-party traffic record, persistable for the audit.

    Counts are kept per (kind, sender, receiver, epsilon); with
    ``full_trace`` every message is also retained verbatim.
    """

    def __init__(self, full_trace=False):
        self.counts: dict[tuple, int] = {}
        self.full_trace = full_trace
        self.records: list[dict] = []

    def send(self, kind, sender, receiver, payload=None, epsilon=None):
        key = (kind, str(sender), str(receiver), epsilon)
        self.counts[key] = self.counts.get(key, 0) + 1
        if self.full_trace:
            self.records.append(
                {"kind": kind, "sender": str(sender), "receiver": str(receiver), "payload": payload}
            )
        return payload

    def kinds(self):
        return {k[0] for k in self.counts}

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for (kind, sender, receiver, eps), count in sorted(
                self.counts.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2], str(kv[0][3]))
            ):
                payload = {"count": count}
                if eps is not None:
                    payload["epsilon"] = "inf" if math.isinf(eps) else eps
                fh.write(
                    json.dumps(
                        {"kind": kind, "sender": sender, "receiver": receiver, "payload": payload}
                    )
                    + "\n"
                )


@dataclass
class GradientMessage:
    """Per-sample upstream gradient routed from the scorer owner to one bank."""

    sample: int
    bank: int
    role: str  # "ordering" | "beneficiary"
    vector: np.ndarray


class Bank:
    """One bank: private histories, its encoder, its release mechanism."""

    def __init__(self, bank_id, dataset, encoder, mechanism):
        self.bank_id = bank_id
        self.dataset = dataset
        self.encoder = encoder
        self.mechanism = mechanism
        self.adam = AdamState()
        self._tapes: dict = {}

    def owns(self, account_id):
        return self.dataset.bank_of(account_id) == self.bank_id

    def publish_batch(self, requests, log, receiver, history_limit, train=False, rng=None,
                      retain_key=None, noise_rng=None):
        """Embed and publish private profiles for (sample, role, account, t) requests.

        Returns the noised vectors in request order.  With ``retain_key``
        the forward tape is kept until the matching gradient messages come
        back.  Raw (pre-noise) embeddings never leave this object.
        """
        seqs = []
        for _, _, account_id, t in requests:
            if not self.owns(account_id):
                raise RoutingError(f"account {account_id} is not managed by bank {self.bank_id}")
            acct = self.dataset.account_by_id[account_id]
            hist = datagen.filter_history(self.dataset, account_id, t, limit=history_limit)
            seqs.append(features.sequence_features(hist, acct))
        z = self.encoder.forward(seqs, train=train, rng=rng)
        noise = self.mechanism.noise(len(requests)) if noise_rng is None else noise_rng(len(requests))
        noised = z.data + noise
        if retain_key is not None:
            self._tapes[retain_key] = (z, [(r[0], r[1]) for r in requests])
        for _ in requests:
            log.send(
                "private_profile",
                sender=f"bank:{self.bank_id}",
                receiver=receiver,
                epsilon=self.mechanism.epsilon,
            )
        return noised

    def consume_gradients(self, retain_key, messages):
        """Backpropagate received per-sample gradients through the retained tape.

        Raises if a message refers to a (sample, role) this bank never
        embedded in that tape; gradients accumulate on the encoder bundle.
        """
        if retain_key not in self._tapes:
            raise ProtocolError(f"bank {self.bank_id} has no retained tape {retain_key!r}")
        z, keys = self._tapes.pop(retain_key)
        index = {key: row for row, key in enumerate(keys)}
        upstream = np.zeros_like(z.data)
        for msg in messages:
            key = (msg.sample, msg.role)
            if key not in index:
                raise ProtocolError(
                    f"gradient message for sample {msg.sample} ({msg.role}) never embedded by bank {self.bank_id}"
                )
            upstream[index[key]] += msg.vector
        z.backward(upstream)

    def drop_tapes(self):
        self._tapes.clear()


def make_scoring_model(embed_dim, x_dim, hidden=(128, 64, 32), dropout_rate=0.1, seed=0):
    dims = (2 * embed_dim + x_dim,) + tuple(hidden) + (1,)
    return MLP(dims, out_activation="sigmoid", dropout_rate=dropout_rate,
               rng=np.random.default_rng(seed))


def make_preprocessor(in_dim, out_dim=8, hidden=32, seed=0):
    rng = np.random.default_rng(seed)
    mlp = MLP((in_dim, hidden, out_dim), out_activation="tanh", rng=rng)
    return mlp


def score(model: MLP, z_o, z_b, x, train=False, rng=None):
    """Score a batch: concat(ordering profile, beneficiary profile, features)."""
    z_o, z_b, x = Tensor._lift(z_o), Tensor._lift(z_b), Tensor._lift(x)
    if z_o.ndim == 1:
        z_o, z_b, x = (t.reshape(1, -1) for t in (z_o, z_b, x))
    from .kernel import concat

    inp = concat([z_o, z_b, x], axis=1)
    out = model.forward(inp, train=train, rng=rng)
    return out.reshape(out.shape[0])


class FederatedSimulation:
    """Parties, routing and shared message log for one training run."""

    def __init__(self, dataset, config: TrainConfig, encoders=None, full_trace=False,
                 preprocessor_in_dims=None):
        config.validate()
        self.config = config
        self.dataset = dataset
        self.log = MessageLog(full_trace=full_trace)
        bank_ids = sorted({a.bank for a in dataset.accounts})
        self.banks: dict[int, Bank] = {}
        for b in bank_ids:
            enc = encoders[b] if encoders else SequenceEncoder(
                EncoderConfig(embed_dim=config.embed_dim, cell=config.cell),
                seed=stable_seed("encoder", config.seed, b),
            )
            mech = Mechanism(
                config.epsilon,
                dim=enc.config.embed_dim,
                seed=stable_seed("mech", config.seed, b),
                bank_id=b,
            )
            self.banks[b] = Bank(b, dataset, enc, mech)
        self.embed_dim = config.embed_dim
        x_dim = features.SCORER_FEATURE_DIM
        self.scorer = make_scoring_model(
            self.embed_dim, x_dim, seed=stable_seed("scorer", config.seed)
        )
        self.scorer_adam = AdamState()
        self.preprocessors: dict[int, MLP] = {}
        self.preprocessor_adam: dict[int, AdamState] = {}
        if config.protocol == "p2p":
            in_dims = preprocessor_in_dims or {}
            for b in bank_ids:
                if b == config.acting_bank:
                    continue
                self.preprocessors[b] = make_preprocessor(
                    in_dims.get(b, self.embed_dim),
                    out_dim=self.embed_dim,
                    seed=stable_seed("preproc", config.seed, b),
                )
                self.preprocessor_adam[b] = AdamState()
        self._step_counter = 0
        self._drop_rng = np.random.default_rng(stable_seed("dropout", config.seed))

    def route(self, tx):
        """(ordering bank, beneficiary bank) from the account ownership map."""
        try:
            eta = self.dataset.bank_of(tx.ordering_account)
            rho = self.dataset.bank_of(tx.beneficiary_account)
        except KeyError as exc:
            raise RoutingError(f"unknown account {exc.args[0]} in transaction {tx.id}") from None
        return eta, rho

    def _update(self, bundle, grads, state, lr):
        if self.config.optimizer == "adam":
            adam_step(bundle, grads, state, lr)
        else:
            sgd_step(bundle, grads, lr)


# ----------------------------------------------------------------------
# Orchestrated end-to-end step
# ----------------------------------------------------------------------


def orchestrated_sgd_step(sim: FederatedSimulation, batch, lr=None):
    """One end-to-end SGD/Adam step for the orchestrated protocol.

    ``batch`` is a list of (transaction, label).  Ordering and beneficiary
    banks publish fresh private profiles per sample; the orchestrator
    scores, updates the scorer with the mean loss gradient, and returns
    per-sample upstream gradients which each bank pushes through its own
    forward tapes (noise treated as constant), scaled by 1/(N_beta + gamma).
    Returns the mean training loss of the batch.
    """
    cfg = sim.config
    lr = lr if lr is not None else cfg.lr
    n = len(batch)
    sim.scorer.bundle.zero_grad()
    for bank in sim.banks.values():
        bank.encoder.bundle.zero_grad()

    n_beta = {b: 0 for b in sim.banks}
    routes = []
    for tx, _ in batch:
        eta, rho = sim.route(tx)
        routes.append((eta, rho))
        n_beta[eta] += 1
        n_beta[rho] += 1  # a bank on both sides counts twice

    total_loss = 0.0
    step_id = sim._step_counter
    sim._step_counter += 1
    bank_messages: dict[int, dict] = {b: {} for b in sim.banks}

    for mb_start in range(0, n, cfg.micro_batch):
        mb = list(range(mb_start, min(n, mb_start + cfg.micro_batch)))
        requests: dict[int, list] = {}
        for i in mb:
            tx, _ = batch[i]
            eta, rho = routes[i]
            requests.setdefault(eta, []).append((i, "ordering", tx.ordering_account, tx.timestamp))
            requests.setdefault(rho, []).append((i, "beneficiary", tx.beneficiary_account, tx.timestamp))

        published: dict[tuple, np.ndarray] = {}
        tape_keys = {}
        for b in sorted(requests):
            key = (step_id, mb_start, b)
            tape_keys[b] = key
            for req in requests[b]:
                sim.log.send("profile_request", ORCHESTRATOR, f"bank:{b}",
                             payload={"sample": req[0], "role": req[1]})
            vecs = sim.banks[b].publish_batch(
                requests[b], sim.log, ORCHESTRATOR, cfg.history_limit,
                train=cfg.dropout_active, rng=sim._drop_rng, retain_key=key,
            )
            for req, vec in zip(requests[b], vecs):
                published[(req[0], req[1])] = vec

        z_o = Tensor(np.stack([published[(i, "ordering")] for i in mb]))
        z_b = Tensor(np.stack([published[(i, "beneficiary")] for i in mb]))
        x = Tensor(np.stack([features.transaction_features(batch[i][0]) for i in mb]))
        y = np.array([batch[i][1] for i in mb], dtype=np.float64)

        scores = score(sim.scorer, z_o, z_b, x, train=cfg.dropout_active, rng=sim._drop_rng)
        loss_sum = bce_loss(scores, y, reduction="sum")
        loss_sum.backward()
        total_loss += float(loss_sum.data)

        go = z_o.grad if z_o.grad is not None else np.zeros_like(z_o.data)
        gb = z_b.grad if z_b.grad is not None else np.zeros_like(z_b.data)
        for pos, i in enumerate(mb):
            eta, rho = routes[i]
            for role, bank_id, g in (("ordering", eta, go[pos]), ("beneficiary", rho, gb[pos])):
                msg = GradientMessage(sample=i, bank=bank_id, role=role, vector=g)
                sim.log.send("gradient_message", ORCHESTRATOR, f"bank:{bank_id}")
                bank_messages[bank_id].setdefault(tape_keys[bank_id], []).append(msg)

        for b, key in tape_keys.items():
            sim.banks[b].consume_gradients(key, bank_messages[b].pop(key, []))

    scorer_grads = {name: g / n for name, g in sim.scorer.bundle.grads().items()}
    sim._update(sim.scorer.bundle, scorer_grads, sim.scorer_adam, lr)
    for b, bank in sim.banks.items():
        if n_beta[b] == 0:
            continue
        scale = 1.0 / (n_beta[b] + cfg.gamma)
        grads = {name: g * scale for name, g in bank.encoder.bundle.grads().items()}
        sim._update(bank.encoder.bundle, grads, bank.adam, lr)
    return total_loss / n


# ----------------------------------------------------------------------
# Peer-to-peer step
# ----------------------------------------------------------------------


def p2p_sgd_step(sim: FederatedSimulation, batch, lr=None):
    """One peer-to-peer SGD/Adam step for the acting bank.

    ``batch`` is a list of (transaction, own_ordering_embedding, label)
    where the embedding is the acting bank's noise-free profile of the
    ordering account.  Beneficiary profiles are requested from partner
    banks through their mechanisms and adapted by per-partner
    pre-processors; internal beneficiaries bypass pre-processing.
    Returns the mean training loss of the batch.
    """
    cfg = sim.config
    lr = lr if lr is not None else cfg.lr
    acting = cfg.acting_bank
    n = len(batch)
    sim.scorer.bundle.zero_grad()
    for mlp in sim.preprocessors.values():
        mlp.bundle.zero_grad()

    groups: dict[int, list[int]] = {}
    for i, (tx, _, _) in enumerate(batch):
        eta, rho = sim.route(tx)
        if eta != acting:
            raise ProtocolError(
                f"peer-to-peer stream must order from bank {acting}, got bank {eta}"
            )
        groups.setdefault(rho, []).append(i)

    row_tensors = []
    row_order = []
    n_partner = {}
    for rho in sorted(groups):
        idxs = groups[rho]
        if rho == acting:
            # internal beneficiary: own noise-free embedding, no pre-processing
            own = _own_embeddings(
                sim, [(batch[i][0].beneficiary_account, batch[i][0].timestamp) for i in idxs]
            )
            row_tensors.append(Tensor(own))
        else:
            reqs = [
                (i, "beneficiary", batch[i][0].beneficiary_account, batch[i][0].timestamp)
                for i in idxs
            ]
            for req in reqs:
                sim.log.send("profile_request", f"bank:{acting}", f"bank:{rho}",
                             payload={"sample": req[0], "role": req[1]})
            vecs = sim.banks[rho].publish_batch(
                reqs, sim.log, f"bank:{acting}", cfg.history_limit
            )
            z_b = Tensor(vecs)
            row_tensors.append(
                sim.preprocessors[rho].forward(z_b, train=cfg.dropout_active, rng=sim._drop_rng)
            )
            n_partner[rho] = len(idxs)
        row_order.extend(idxs)

    from .kernel import concat, take_rows

    stacked = concat(row_tensors, axis=0) if len(row_tensors) > 1 else row_tensors[0]
    perm = np.empty(n, dtype=np.int64)
    perm[np.array(row_order)] = np.arange(n)
    r = take_rows(stacked, perm)

    z_o = Tensor(np.stack([e for _, e, _ in batch]))
    x = Tensor(np.stack([features.transaction_features(tx) for tx, _, _ in batch]))
    y = np.array([lab for _, _, lab in batch], dtype=np.float64)

    scores = score(sim.scorer, z_o, r, x, train=cfg.dropout_active, rng=sim._drop_rng)
    loss_sum = bce_loss(scores, y, reduction="sum")
    loss_sum.backward()

    scorer_grads = {name: g / n for name, g in sim.scorer.bundle.grads().items()}
    sim._update(sim.scorer.bundle, scorer_grads, sim.scorer_adam, lr)
    for rho, mlp in sim.preprocessors.items():
        count = n_partner.get(rho, 0)
        scale = 1.0 / (count + cfg.gamma)
        if count == 0:
            continue  # masked sum is zero; gamma keeps the division safe
        grads = {name: g * scale for name, g in mlp.bundle.grads().items()}
        sim._update(mlp.bundle, grads, sim.preprocessor_adam[rho], lr)
    return float(loss_sum.data) / n


def _own_embedding(sim, account_id, t):
    return _own_embeddings(sim, [(account_id, t)])[0]


def _own_embeddings(sim, account_times):
    """Noise-free embeddings of accounts through their own banks' encoders."""
    out = np.empty((len(account_times), sim.embed_dim))
    by_bank: dict[int, list[int]] = {}
    for i, (account_id, _) in enumerate(account_times):
        by_bank.setdefault(sim.dataset.bank_of(account_id), []).append(i)
    for b, idxs in by_bank.items():
        bank = sim.banks[b]
        seqs = []
        for i in idxs:
            account_id, t = account_times[i]
            acct = bank.dataset.account_by_id[account_id]
            hist = datagen.filter_history(bank.dataset, account_id, t, limit=sim.config.history_limit)
            seqs.append(features.sequence_features(hist, acct))
        out[idxs] = bank.encoder.embed(seqs)
    return out


# ----------------------------------------------------------------------
# Epoch loop and evaluation
# ----------------------------------------------------------------------


def score_samples(sim: FederatedSimulation, samples, noise_seed=None, chunk=1024):
    """Deployed-system scores for (transaction, label) samples.

    Profiles are published with fresh noise from a dedicated seeded stream
    so evaluation does not perturb the training mechanisms' state.
    """
    cfg = sim.config
    rngs = {
        b: np.random.default_rng(stable_seed("eval-noise", cfg.seed, noise_seed, b))
        for b in sim.banks
    }
    out = np.empty(len(samples))
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        p2p = cfg.protocol == "p2p"
        requests: dict[int, list] = {}
        for i, (tx, _) in enumerate(part):
            eta, rho = sim.route(tx)
            if not p2p:
                requests.setdefault(eta, []).append((i, "ordering", tx.ordering_account, tx.timestamp))
            if not (p2p and rho == cfg.acting_bank):
                requests.setdefault(rho, []).append((i, "beneficiary", tx.beneficiary_account, tx.timestamp))
        published = {}
        for b in sorted(requests):
            bank = sim.banks[b]
            vecs = bank.publish_batch(
                requests[b], sim.log, ORCHESTRATOR, cfg.history_limit,
                noise_rng=lambda k, b=b: (
                    np.zeros((k, bank.mechanism.dim))
                    if bank.mechanism.scale == 0.0
                    else _laplace(rngs[b], bank.mechanism.scale, (k, bank.mechanism.dim))
                ),
            )
            for req, vec in zip(requests[b], vecs):
                published[(req[0], req[1])] = vec
        x = np.stack([features.transaction_features(tx) for tx, _ in part])
        if p2p:
            z_o = _own_embeddings(
                sim, [(tx.ordering_account, tx.timestamp) for tx, _ in part]
            )
            z_b = np.empty((len(part), sim.embed_dim))
            internal = [
                i for i, (tx, _) in enumerate(part) if sim.route(tx)[1] == cfg.acting_bank
            ]
            if internal:
                z_b[internal] = _own_embeddings(
                    sim,
                    [(part[i][0].beneficiary_account, part[i][0].timestamp) for i in internal],
                )
            for i, (tx, _) in enumerate(part):
                _, rho = sim.route(tx)
                if rho != cfg.acting_bank:
                    z_b[i] = sim.preprocessors[rho].predict(
                        published[(i, "beneficiary")][None, :]
                    )[0]
        else:
            z_o = np.stack([published[(i, "ordering")] for i in range(len(part))])
            z_b = np.stack([published[(i, "beneficiary")] for i in range(len(part))])
        out[start : start + len(part)] = score(sim.scorer, z_o, z_b, x).data
    return out


def _laplace(rng, scale, size):
    u = rng.random(size) - 0.5
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def train(sim: FederatedSimulation, train_samples, val_samples=None, progress=None):
    """Shuffled-epoch loop around the protocol step; returns the loss trace.

    ``train_samples`` are (transaction, label) pairs for orchestrated mode,
    or (transaction, own_embedding, label) triples for peer-to-peer.
    """
    cfg = sim.config
    rng = np.random.default_rng(stable_seed("shuffle", cfg.seed))
    step = orchestrated_sgd_step if cfg.protocol == "orchestrated" else p2p_sgd_step
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_samples))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = [train_samples[i] for i in idx]
            losses.append(step(sim, batch))
        entry = {"epoch": epoch, "train_loss": sum(losses) / len(losses)}
        if val_samples is not None:
            from .metrics import ScoredSet, auc_pr

            scores = score_samples(sim, val_samples, noise_seed=("val", epoch))
            labels = np.array([lab for _, lab in val_samples])
            entry["val_auc_pr"] = auc_pr(ScoredSet(scores, labels))
        trace.append(entry)
        if progress:
            progress(entry)
    return trace
