"""Deterministic synthetic multi-bank payment network generator.

Produces accounts with latent behaviour parameters, time-ordered
transactions with sparse fraud labels concentrated on flagged accounts,
temporal train/validation splits, and per-account history lookups.
"""

from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

N_REGIONS = 4
N_CURRENCIES = 4
N_MERCHANTS = 16
HOME_MERCHANTS = 3

FLAG_NONE, FLAG_REVIEW, FLAG_SUSPENDED = 0, 1, 2
_FLAG_PROBS = (0.92, 0.05, 0.03)
_FLAG_FRAUD_WEIGHT = {FLAG_NONE: 0.0, FLAG_REVIEW: 8.0, FLAG_SUSPENDED: 18.0}

TRANSACTION_COLUMNS = (
    "id",
    "timestamp",
    "amount",
    "currency_token",
    "ordering_account",
    "beneficiary_account",
    "ordering_bank",
    "beneficiary_bank",
    "merchant_token",
    "label",
)
ACCOUNT_COLUMNS = ("id", "bank", "region_token", "flag_category", "mean_amount", "activity")


@dataclass(frozen=True)
class Transaction:
    id: int
    timestamp: float
    amount: float
    currency_token: int
    ordering_account: int
    beneficiary_account: int
    ordering_bank: int
    beneficiary_bank: int
    merchant_token: int
    label: int


@dataclass(frozen=True)
class Account:
    id: int
    bank: int
    region_token: int
    flag_category: int
    mean_amount: float
    activity: float


@dataclass
class GeneratorConfig:
    n_banks: int = 8
    accounts_per_bank: int = 200
    n_transactions: int = 100_000
    fraud_rate: float = 0.001
    flag_fraud_correlation: float = 0.95
    horizon: float = 90.0 * 86400.0
    seed: int = 0

    def validate(self):
        if self.n_banks <= 0 or self.accounts_per_bank <= 0 or self.n_transactions <= 0:
            raise ConfigError("counts must be positive")
        if not 0.0 < self.fraud_rate <= 0.05:
            raise ConfigError(f"fraud rate {self.fraud_rate} outside (0, 0.05]")
        if not 0.0 <= self.flag_fraud_correlation <= 1.0:
            raise ConfigError("flag-fraud correlation strength must lie in [0, 1]")
        if self.horizon <= 0:
            raise ConfigError("time horizon must be positive")
        if self.n_banks * self.accounts_per_bank < 2:
            raise ConfigError("need at least two accounts to form transactions")


class Dataset:
    """Accounts plus time-sorted transactions, with per-account event index."""

    def __init__(self, accounts, transactions):
        self.accounts = list(accounts)
        self.transactions = list(transactions)
        self.account_by_id = {a.id: a for a in self.accounts}
        self._index: dict[int, tuple[list[float], list[int]]] | None = None

    def __len__(self):
        return len(self.transactions)

    def bank_of(self, account_id):
        return self.account_by_id[account_id].bank

    def _event_index(self):
        if self._index is None:
            idx: dict[int, tuple[list[float], list[int]]] = {}
            for pos, tx in enumerate(self.transactions):
                for acct in (tx.ordering_account, tx.beneficiary_account):
                    times, positions = idx.setdefault(acct, ([], []))
                    times.append(tx.timestamp)
                    positions.append(pos)
            self._index = idx
        return self._index

    def account_events(self, account_id):
        """All transactions touching the account, in time order."""
        idx = self._event_index().get(account_id)
        if idx is None:
            return []
        return [self.transactions[p] for p in idx[1]]


def home_merchants(account_id):
    """The small fixed merchant set an account normally transacts with."""
    base = (account_id * 7) % N_MERCHANTS
    return [(base + k) % N_MERCHANTS for k in range(HOME_MERCHANTS)]


def generate(config: GeneratorConfig) -> Dataset:
    """Generate a full synthetic dataset; identical config gives identical bytes."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_accounts = config.n_banks * config.accounts_per_bank

    banks = np.repeat(np.arange(config.n_banks), config.accounts_per_bank)
    regions = rng.integers(0, N_REGIONS, size=n_accounts)
    flags = rng.choice(3, size=n_accounts, p=_FLAG_PROBS)
    # Regions shift typical amounts so behaviour correlates with attributes.
    region_scale = 1.0 + 0.6 * regions
    mean_amounts = 40.0 * region_scale * rng.lognormal(0.0, 0.5, size=n_accounts)
    activity = rng.gamma(2.0, 1.0, size=n_accounts) + 0.05

    accounts = [
        Account(
            id=i,
            bank=int(banks[i]),
            region_token=int(regions[i]),
            flag_category=int(flags[i]),
            mean_amount=float(mean_amounts[i]),
            activity=float(activity[i]),
        )
        for i in range(n_accounts)
    ]

    n = config.n_transactions
    timestamps = np.sort(rng.uniform(1.0, config.horizon, size=n))

    p_order = activity / activity.sum()
    ordering = rng.choice(n_accounts, size=n, p=p_order)
    beneficiary = rng.integers(0, n_accounts, size=n)
    clash = beneficiary == ordering
    while np.any(clash):
        beneficiary[clash] = rng.integers(0, n_accounts, size=int(clash.sum()))
        clash = beneficiary == ordering

    # Fraud probability per transaction, driven by the ordering account's
    # flag; normalised empirically so the realised rate tracks the config.
    strength = config.flag_fraud_correlation
    weights = 1.0 + strength * np.array([_FLAG_FRAUD_WEIGHT[int(f)] for f in flags[ordering]])
    probs = np.minimum(config.fraud_rate * weights / weights.mean(), 0.9)
    labels = (rng.random(n) < probs).astype(np.int64)

    mu = np.log(mean_amounts[ordering])
    sigma = np.where(labels == 1, 0.6, 0.35)
    shift = np.where(labels == 1, 1.2, 0.0)
    amounts = np.exp(mu + shift + sigma * rng.standard_normal(n))

    # Currency mostly follows the ordering account's region.
    currency = np.where(
        rng.random(n) < 0.8,
        regions[ordering] % N_CURRENCIES,
        rng.integers(0, N_CURRENCIES, size=n),
    )

    homes = np.array([home_merchants(i) for i in range(n_accounts)])
    home_pick = homes[ordering, rng.integers(0, HOME_MERCHANTS, size=n)]
    off_profile = rng.integers(0, N_MERCHANTS, size=n)
    merchant = np.where(labels == 1, off_profile, home_pick)

    transactions = [
        Transaction(
            id=i,
            timestamp=float(timestamps[i]),
            amount=float(amounts[i]),
            currency_token=int(currency[i]),
            ordering_account=int(ordering[i]),
            beneficiary_account=int(beneficiary[i]),
            ordering_bank=int(banks[ordering[i]]),
            beneficiary_bank=int(banks[beneficiary[i]]),
            merchant_token=int(merchant[i]),
            label=int(labels[i]),
        )
        for i in range(n)
    ]
    return Dataset(accounts, transactions)


def split(dataset: Dataset, train_fraction: float = 0.75):
    """Temporal split: the earliest fraction trains, the rest validates."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train fraction {train_fraction} outside (0, 1)")
    n = len(dataset.transactions)
    n_train = int(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise ConfigError("split leaves one side empty")
    train = Dataset(dataset.accounts, dataset.transactions[:n_train])
    validation = Dataset(dataset.accounts, dataset.transactions[n_train:])
    return train, validation


class Vocabulary:
    """Stable value-to-token mapping built from training data only."""

    UNKNOWN = 0

    def __init__(self, values):
        self._map = {}
        for v in sorted(set(values)):
            self._map[v] = len(self._map) + 1

    def __len__(self):
        return len(self._map) + 1

    def tokenize(self, value):
        return self._map.get(value, self.UNKNOWN)


def filter_history(dataset: Dataset, account_id, t, limit=32):
    """Transactions touching the account with timestamp <= t, most recent ``limit``.

    Unknown accounts yield an empty sequence (a valid new account).
    """
    idx = dataset._event_index().get(account_id)
    if idx is None:
        return []
    times, positions = idx
    hi = bisect.bisect_right(times, t)
    lo = max(0, hi - limit) if limit else 0
    return [dataset.transactions[p] for p in positions[lo:hi]]


def filter_future(dataset: Dataset, account_id, t, limit=32):
    """Transactions touching the account with timestamp > t, nearest ``limit``."""
    idx = dataset._event_index().get(account_id)
    if idx is None:
        return []
    times, positions = idx
    lo = bisect.bisect_right(times, t)
    hi = min(len(times), lo + limit) if limit else len(times)
    return [dataset.transactions[p] for p in positions[lo:hi]]


# ----------------------------------------------------------------------
# On-disk format: header line + one record per line, UTF-8
# ----------------------------------------------------------------------


def _write_csv(path_or_buf, columns, rows):
    own = isinstance(path_or_buf, str)
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)
    finally:
        if own:
            fh.close()


def save_dataset(dataset: Dataset, transactions_path, accounts_path):
    _write_csv(
        str(transactions_path),
        TRANSACTION_COLUMNS,
        (
            (
                tx.id,
                repr(tx.timestamp),
                repr(tx.amount),
                tx.currency_token,
                tx.ordering_account,
                tx.beneficiary_account,
                tx.ordering_bank,
                tx.beneficiary_bank,
                tx.merchant_token,
                tx.label,
            )
            for tx in dataset.transactions
        ),
    )
    _write_csv(
        str(accounts_path),
        ACCOUNT_COLUMNS,
        (
            (a.id, a.bank, a.region_token, a.flag_category, repr(a.mean_amount), repr(a.activity))
            for a in dataset.accounts
        ),
    )


def dataset_to_bytes(dataset: Dataset) -> bytes:
    """Canonical byte serialization (used for determinism checks)."""
    tx_buf, acc_buf = io.StringIO(), io.StringIO()
    _write_csv(
        tx_buf,
        TRANSACTION_COLUMNS,
        (
            (
                tx.id,
                repr(tx.timestamp),
                repr(tx.amount),
                tx.currency_token,
                tx.ordering_account,
                tx.beneficiary_account,
                tx.ordering_bank,
                tx.beneficiary_bank,
                tx.merchant_token,
                tx.label,
            )
            for tx in dataset.transactions
        ),
    )
    _write_csv(
        acc_buf,
        ACCOUNT_COLUMNS,
        (
            (a.id, a.bank, a.region_token, a.flag_category, repr(a.mean_amount), repr(a.activity))
            for a in dataset.accounts
        ),
    )
    return (tx_buf.getvalue() + acc_buf.getvalue()).encode("utf-8")


def load_dataset(transactions_path, accounts_path) -> Dataset:
    with open(accounts_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != ACCOUNT_COLUMNS:
            raise ConfigError(f"unexpected accounts header {header}")
        accounts = [
            Account(int(r[0]), int(r[1]), int(r[2]), int(r[3]), float(r[4]), float(r[5]))
            for r in reader
        ]
    with open(transactions_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != TRANSACTION_COLUMNS:
            raise ConfigError(f"unexpected transactions header {header}")
        transactions = [
            Transaction(
                int(r[0]), float(r[1]), float(r[2]), int(r[3]), int(r[4]),
                int(r[5]), int(r[6]), int(r[7]), int(r[8]), int(r[9]),
            )
            for r in reader
        ]
    return Dataset(accounts, transactions)
