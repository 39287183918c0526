"""Experiment cells: one (protocol, epsilon, seed) training + evaluation + attacks.

A cell builds the reference dataset, trains the chosen protocol at one
privacy budget, evaluates ranking utility on a held-out stream, and runs
the attack suite against the profiles that run would publish.  Rows are
plain dicts with a config fingerprint so re-running a cell reproduces its
row byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import attacks, datagen, features, federation, metrics
from .attacks import AttackConfig, AttackData
from .encoder import PretrainConfig, SequenceEncoder, EncoderConfig, pretrain
from .errors import ConfigError
from .kernel import AdamState, Tensor, adam_step, bce_loss
from .models import MLP
from .seeding import stable_seed

EPSILON_GRID = (0.01, 0.5, 1.0, 2.0, 5.0, 10.0, math.inf)


@dataclass
class ExperimentConfig:
    # reference dataset
    n_banks: int = 8
    accounts_per_bank: int = 200
    n_transactions: int = 100_000
    fraud_rate: float = 0.001
    dataset_seed: int = 0
    # training
    protocol: str = "orchestrated"
    epochs: int = 10
    batch_size: int = 512
    micro_batch: int = 512
    lr: float = 1e-3
    optimizer: str = "adam"
    cell: str = "simple"
    history_limit: int = 32
    train_stream_size: int = 4096
    val_stream_size: int = 2048
    acting_bank: int = 0
    pretrain_epochs: int = 0
    # sweep
    epsilon_grid: tuple = EPSILON_GRID
    repeats: int = 5
    base_seed: int = 0
    # attacks
    run_attacks: bool = True
    attack_epochs: int = 20
    attack_batch: int = 256
    shadow_passes: int = 16
    shadow_epochs: int = 5
    membership_accounts: int = 400

    def validate(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be at least 1")
        if not self.epsilon_grid:
            raise ConfigError("epsilon grid must be non-empty")
        if any(e <= 0 for e in self.epsilon_grid):
            raise ConfigError("privacy budgets must be positive")
        if self.protocol not in ("orchestrated", "p2p"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        return self

    def fingerprint(self) -> str:
        payload = {k: ("inf" if isinstance(v, float) and math.isinf(v) else v)
                   for k, v in asdict(self).items() if k != "epsilon_grid"}
        payload["epsilon_grid"] = [format_epsilon(e) for e in self.epsilon_grid]
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dataset_config(self):
        return datagen.GeneratorConfig(
            n_banks=self.n_banks,
            accounts_per_bank=self.accounts_per_bank,
            n_transactions=self.n_transactions,
            fraud_rate=self.fraud_rate,
            seed=self.dataset_seed,
        )


def format_epsilon(eps):
    eps = float(eps)
    if math.isinf(eps):
        return "inf"
    return repr(eps)


def parse_epsilon(text):
    if text in ("inf", "Infinity", "centralised", "centralized"):
        return math.inf
    return float(text)


_DATASET_CACHE: dict = {}


def reference_dataset(config: ExperimentConfig):
    """The seeded synthetic dataset shared by every cell (per-process cache)."""
    gc = config.dataset_config()
    key = tuple(sorted(asdict(gc).items()))
    if key not in _DATASET_CACHE:
        _DATASET_CACHE[key] = datagen.generate(gc)
    return _DATASET_CACHE[key]


# ----------------------------------------------------------------------
# Stream assembly
# ----------------------------------------------------------------------


TRAIN_REGIONS = frozenset({0, 1})


def training_population(dataset):
    """Accounts the deployed system trains on: the initial rollout cohort.

    The scorer is first deployed for half the market (two of the four
    regions), a common staged-rollout pattern; membership in this cohort
    is what the membership attack tries to recover.
    """
    return {a.id for a in dataset.accounts if a.region_token in TRAIN_REGIONS}


def build_streams(dataset, config: ExperimentConfig, seed):
    """(train, val) streams of (transaction, label) pairs.

    Training keeps every fraud case whose ordering account is in the
    training population plus a random fill of legitimate traffic;
    validation is drawn from the held-out later period, unrestricted.
    """
    train_part, val_part = datagen.split(dataset, 0.75)
    split_time = val_part.transactions[0].timestamp if val_part.transactions else math.inf
    members = training_population(dataset)
    rng = np.random.default_rng(stable_seed("streams", seed))

    eligible = [t for t in train_part.transactions if t.ordering_account in members]
    pos = [t for t in eligible if t.label]
    neg = [t for t in eligible if not t.label]
    n_neg = min(len(neg), max(0, config.train_stream_size - len(pos)))
    picked = [neg[i] for i in rng.choice(len(neg), size=n_neg, replace=False)]
    train_stream = pos + picked
    order = rng.permutation(len(train_stream))
    train_stream = [(train_stream[i], float(train_stream[i].label)) for i in order]

    vpos = [t for t in val_part.transactions if t.label]
    vneg = [t for t in val_part.transactions if not t.label]
    n_vneg = min(len(vneg), max(0, config.val_stream_size - len(vpos)))
    vpicked = [vneg[i] for i in rng.choice(len(vneg), size=n_vneg, replace=False)]
    val_stream = [(t, float(t.label)) for t in vpos + vpicked]
    return train_stream, val_stream, members, split_time


# ----------------------------------------------------------------------
# Attack data assembly
# ----------------------------------------------------------------------


def _published_profiles(sim, dataset, account_ids, split_time, seed):
    """One noised profile per account, as released at the training cutoff."""
    raw = federation._own_embeddings(
        sim, [(aid, split_time) for aid in account_ids]
    )
    out = np.empty_like(raw)
    rngs = {b: np.random.default_rng(stable_seed("attack-noise", sim.config.seed, seed, b))
            for b in sim.banks}
    for i, aid in enumerate(account_ids):
        bank = sim.banks[dataset.bank_of(aid)]
        scale = bank.mechanism.scale
        if scale == 0.0:
            out[i] = raw[i]
        else:
            out[i] = raw[i] + federation._laplace(rngs[bank.bank_id], scale, raw[i].shape)
    return out


def _shadow_classifier(sim, dataset, aux_tx, profiles_by_account, seed, config):
    """Attacker-trained stand-in for the scorer, fed noised profiles."""
    m = sim.embed_dim
    dims = (2 * m + features.SCORER_FEATURE_DIM, 128, 64, 32, 1)
    rng = np.random.default_rng(stable_seed("shadow", seed))
    mlp = MLP(dims, out_activation="sigmoid", dropout_rate=0.1, rng=rng)
    rows, labels = [], []
    for tx in aux_tx:
        zo = profiles_by_account.get(tx.ordering_account)
        zb = profiles_by_account.get(tx.beneficiary_account)
        if zo is None or zb is None:
            continue
        rows.append(np.concatenate([zo, zb, features.transaction_features(tx)]))
        labels.append(float(tx.label))
    x = np.stack(rows)
    y = np.array(labels)
    state = AdamState()
    for _ in range(config.shadow_epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.attack_batch):
            idx = order[start : start + config.attack_batch]
            mlp.bundle.zero_grad()
            out = mlp.forward(Tensor(x[idx]), train=True, rng=rng)
            bce_loss(out.reshape(out.shape[0]), y[idx]).backward()
            adam_step(mlp.bundle, mlp.bundle.grads(), state, 1e-3)
    return mlp


def assemble_attack_data(sim, dataset, members, split_time, seed, config: ExperimentConfig):
    """Build the three attack datasets from one trained run's published profiles.

    Auxiliary and evaluation partitions are disjoint account sets; the
    attack models never see evaluation profiles during training.
    """
    # the aux/eval account partition is a property of the dataset, not of
    # the cell: baselines then agree exactly across budgets and seeds
    rng = np.random.default_rng(stable_seed("attack-split", config.dataset_seed))
    histories = {}
    for a in dataset.accounts:
        hist = datagen.filter_history(dataset, a.id, split_time, limit=config.history_limit)
        if hist:
            histories[a.id] = hist
    ids = sorted(histories)
    profiles = _published_profiles(sim, dataset, ids, split_time, seed)
    z = {aid: profiles[i] for i, aid in enumerate(ids)}

    perm = rng.permutation(len(ids))
    n_eval = len(ids) * 3 // 10
    eval_ids = [ids[i] for i in perm[:n_eval]]
    aux_ids = [ids[i] for i in perm[n_eval:]]

    # -- inversion: numeric fields of the final pre-cutoff event ---------
    inv = AttackData(
        aux_x=np.stack([z[a] for a in aux_ids]),
        aux_y=np.stack([features.inversion_targets(histories[a]) for a in aux_ids]),
        eval_x=np.stack([z[a] for a in eval_ids]),
        eval_y=np.stack([features.inversion_targets(histories[a]) for a in eval_ids]),
    )

    # -- attribute inference: the account's region ----------------------
    attr = AttackData(
        aux_x=inv.aux_x,
        aux_y=np.array([dataset.account_by_id[a].region_token for a in aux_ids]),
        eval_x=inv.eval_x,
        eval_y=np.array([dataset.account_by_id[a].region_token for a in eval_ids]),
    )

    # -- membership: (z, mu_s, sigma_s) against the training population --
    aux_members = [a for a in aux_ids if a in members]
    aux_non = [a for a in aux_ids if a not in members]
    eval_members = [a for a in eval_ids if a in members]
    eval_non = [a for a in eval_ids if a not in members]

    half = min(len(eval_members), len(eval_non), config.membership_accounts // 2)
    mem_eval_ids = eval_members[:half] + eval_non[:half]

    # the attacker's auxiliary sample skews toward known members (~60/40)
    n_aux_non = min(len(aux_non), max(1, (2 * len(aux_members)) // 3))
    mem_aux_ids = aux_members + aux_non[:n_aux_non]

    aux_id_set = set(aux_ids)
    aux_tx = [t for t in dataset.transactions
              if t.timestamp < split_time and t.ordering_account in aux_id_set]
    if len(aux_tx) > 4096:
        keep = rng.choice(len(aux_tx), size=4096, replace=False)
        aux_tx = [aux_tx[i] for i in sorted(keep)]
    shadow = _shadow_classifier(sim, dataset, aux_tx, z, seed, config)

    zero = np.zeros(sim.embed_dim)

    def shadow_stats(aid):
        rows = []
        for tx in histories[aid][-10:]:
            zo = z.get(tx.ordering_account, zero)
            zb = z.get(tx.beneficiary_account, zero)
            rows.append(np.concatenate([zo, zb, features.transaction_features(tx)]))
        fn = lambda x, r: shadow.forward(Tensor(x), train=True, rng=r).data[:, 0]
        return attacks.shadow_scores(fn, np.stack(rows), passes=config.shadow_passes,
                                     seed=stable_seed("shadow-pass", seed, aid))

    def mem_features(account_ids):
        feats, labels = [], []
        for aid in account_ids:
            mu, sigma = shadow_stats(aid)
            feats.append(np.concatenate([z[aid], [mu, sigma]]))
            labels.append(1 if aid in members else 0)
        return np.stack(feats), np.array(labels)

    mem_aux_x, mem_aux_y = mem_features(mem_aux_ids)
    mem_eval_x, mem_eval_y = mem_features(mem_eval_ids)
    mem = AttackData(mem_aux_x, mem_aux_y, mem_eval_x, mem_eval_y)
    return {"inversion": inv, "attribute": attr, "membership": mem}


def run_attack_suite(sim, dataset, members, split_time, seed, config: ExperimentConfig):
    data = assemble_attack_data(sim, dataset, members, split_time, seed, config)
    acfg = AttackConfig(epochs=config.attack_epochs, batch_size=config.attack_batch,
                        seed=stable_seed("attack-model", seed),
                        shadow_passes=config.shadow_passes)
    inv = attacks.attack_inversion(data["inversion"], acfg)
    attr = attacks.attack_attribute_inference(data["attribute"], datagen.N_REGIONS, acfg)
    mem = attacks.attack_membership(data["membership"], acfg)
    return {
        "inversion_mean_r2": inv["mean_r2"],
        "inversion_best_r2": inv["best_r2"],
        "attribute_accuracy": attr["accuracy"],
        "attribute_frequency_baseline": attr["frequency_baseline"],
        "membership_f_score": mem["f_score"],
        "membership_baseline": mem["always_positive_baseline"],
    }


# ----------------------------------------------------------------------
# One experiment cell
# ----------------------------------------------------------------------


def build_simulation(dataset, config: ExperimentConfig, epsilon, seed, full_trace=False):
    tc = federation.TrainConfig(
        protocol=config.protocol,
        epsilon=epsilon,
        batch_size=config.batch_size,
        micro_batch=config.micro_batch,
        lr=config.lr,
        epochs=config.epochs,
        seed=seed,
        optimizer=config.optimizer,
        history_limit=config.history_limit,
        cell=config.cell,
        acting_bank=config.acting_bank,
    )
    encoders = None
    if config.pretrain_epochs > 0:
        encoders = pretrained_encoders(dataset, config, seed)
    return federation.FederatedSimulation(dataset, tc, encoders=encoders,
                                          full_trace=full_trace)


def pretrained_encoders(dataset, config: ExperimentConfig, seed):
    """Contrastively pretrained per-bank encoders (used by the p2p protocol)."""
    train_part, _ = datagen.split(dataset, 0.75)
    encoders = {}
    bank_ids = sorted({a.bank for a in dataset.accounts})
    for b in bank_ids:
        fwd = SequenceEncoder(EncoderConfig(cell=config.cell),
                              seed=stable_seed("encoder", seed, b))
        bwd = SequenceEncoder(EncoderConfig(cell=config.cell),
                              seed=stable_seed("bwd-encoder", seed, b))
        accounts = [a for a in dataset.accounts if a.bank == b]
        pc = PretrainConfig(epochs=config.pretrain_epochs,
                            seed=stable_seed("pretrain", seed, b),
                            history_limit=config.history_limit)
        pretrain(train_part, accounts, fwd, bwd, pc)
        encoders[b] = fwd
    return encoders


def p2p_stream(sim, stream):
    """Convert (tx, label) pairs to the acting bank's training triples."""
    acting = sim.config.acting_bank
    mine = [(tx, lab) for tx, lab in stream
            if sim.dataset.bank_of(tx.ordering_account) == acting]
    if not mine:
        raise ConfigError(f"no transactions ordered from bank {acting} in the stream")
    own = federation._own_embeddings(
        sim, [(tx.ordering_account, tx.timestamp) for tx, _ in mine]
    )
    return [(tx, own[i], lab) for i, (tx, lab) in enumerate(mine)]


def run_cell(config: ExperimentConfig, epsilon, seed, dataset=None, sim_out=None):
    """Train + evaluate + attack one (protocol, epsilon, seed) cell.

    Returns the metrics row; pass ``sim_out`` (a list) to also receive the
    trained simulation for artifact persistence.
    """
    config.validate()
    if dataset is None:
        dataset = reference_dataset(config)
    train_stream, val_stream, members, split_time = build_streams(dataset, config, seed)
    sim = build_simulation(dataset, config, epsilon, seed)
    if config.protocol == "p2p":
        fit_stream = p2p_stream(sim, train_stream)
    else:
        fit_stream = train_stream
    trace = federation.train(sim, fit_stream)

    scores = federation.score_samples(sim, val_stream, noise_seed=("cell-eval", seed))
    labels = np.array([lab for _, lab in val_stream])
    scored = metrics.ScoredSet(scores, labels)
    row = {
        "protocol": config.protocol,
        "epsilon": format_epsilon(epsilon),
        "seed": seed,
        "fingerprint": config.fingerprint(),
        "train_loss": trace[-1]["train_loss"],
        "auc_pr": metrics.auc_pr(scored),
        "auc_roc": metrics.auc_roc(scored),
    }
    row.update(metrics.curve_metrics(scored))
    if config.run_attacks:
        row.update(run_attack_suite(sim, dataset, members, split_time, seed, config))
    if sim_out is not None:
        sim_out.append(sim)
    return row


def cell_key(protocol, epsilon, seed):
    return f"{protocol}:{format_epsilon(epsilon)}:{seed}"


def sweep_cells(config: ExperimentConfig):
    """All (epsilon, seed) cells of the grid, in deterministic order."""
    return [
        (eps, stable_seed("cell", config.base_seed, format_epsilon(eps), rep) % 2**31)
        for eps in config.epsilon_grid
        for rep in range(config.repeats)
    ]
