"""Numeric featurization of transactions for encoders, scorer and attacks.

Banks see account-level attributes (flag, region) alongside transaction
fields; the external scorer only sees fields present on the payment
message itself.
"""

from __future__ import annotations

import numpy as np

from .datagen import N_CURRENCIES, N_MERCHANTS, N_REGIONS

N_FLAGS = 3

# marker, log-amount, log-dt, direction + flag + region + currency + merchant
ENCODER_FEATURE_DIM = 4 + N_FLAGS + N_REGIONS + N_CURRENCIES + N_MERCHANTS
# log-amount, same-bank + currency + merchant
SCORER_FEATURE_DIM = 2 + N_CURRENCIES + N_MERCHANTS
# numeric fields of the final event an inversion attack tries to recover
N_INVERSION_TARGETS = 2

# center/scale chosen so both land roughly in [-1.5, 1.5] on typical data,
# comparable to the one-hot features next to them
_AMOUNT_CENTER, _AMOUNT_SCALE = 4.5, 1.5
_DT_CENTER, _DT_SCALE = 10.0, 4.0


def _log_amount(amount):
    return (np.log1p(amount) - _AMOUNT_CENTER) / _AMOUNT_SCALE


def _log_dt(dt):
    return (np.log1p(max(dt, 0.0)) - _DT_CENTER) / _DT_SCALE


def sequence_features(seq, account):
    """Feature matrix (T, ENCODER_FEATURE_DIM) for one account's event sequence.

    The sequence must already be in the order the recurrent cell will
    consume it; inter-event gaps are computed in that order.  An empty
    sequence yields the single reserved no-history event.
    """
    if not seq:
        return no_history_features()
    out = np.zeros((len(seq), ENCODER_FEATURE_DIM))
    prev_ts = None
    for i, tx in enumerate(seq):
        row = out[i]
        row[1] = _log_amount(tx.amount)
        row[2] = 0.0 if prev_ts is None else _log_dt(abs(tx.timestamp - prev_ts))
        row[3] = 1.0 if tx.ordering_account == account.id else 0.0
        row[4 + account.flag_category] = 1.0
        row[4 + N_FLAGS + account.region_token] = 1.0
        row[4 + N_FLAGS + N_REGIONS + tx.currency_token] = 1.0
        row[4 + N_FLAGS + N_REGIONS + N_CURRENCIES + tx.merchant_token] = 1.0
        prev_ts = tx.timestamp
    return out


def no_history_features():
    """Reserved single-event input used when an account has no history."""
    out = np.zeros((1, ENCODER_FEATURE_DIM))
    out[0, 0] = 1.0
    return out


def transaction_features(tx):
    """Scorer-visible numeric features of the transaction being scored."""
    out = np.zeros(SCORER_FEATURE_DIM)
    out[0] = _log_amount(tx.amount)
    out[1] = 1.0 if tx.ordering_bank == tx.beneficiary_bank else 0.0
    out[2 + tx.currency_token] = 1.0
    out[2 + N_CURRENCIES + tx.merchant_token] = 1.0
    return out


def inversion_targets(seq):
    """Numeric fields of the final event in a history sequence.

    Targets for the embedding inversion attack: scaled log-amount and the
    scaled log-gap to the previous event.  Categorical fields are excluded.
    """
    last = seq[-1]
    dt = 0.0 if len(seq) < 2 else abs(last.timestamp - seq[-2].timestamp)
    return np.array([_log_amount(last.amount), _log_dt(dt)])
