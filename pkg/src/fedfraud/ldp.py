"""Local differential privacy release mechanism for embeddings.

Clipping to an l1 ball, per-coordinate Laplace noise at scale
sensitivity/epsilon, and the analytic density-ratio machinery used to
certify the guarantee.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_SENSITIVITY = 1.0
MIN_EPSILON = 0.01  # stands in for the "epsilon -> 0+" experiment arm
MECHANISM_TAG = "laplace"
PROFILE_FORMAT_VERSION = 1


def clip_l1(z, radius):
    """Scale z onto the l1 ball of the given radius, preserving direction."""
    if radius <= 0:
        raise ConfigError("clip radius must be positive")
    z = np.asarray(z, dtype=np.float64)
    norm = np.abs(z).sum()
    if norm <= radius:
        return z.copy()
    return z * (radius / norm)


def laplace_sample(rng, scale, size):
    """Inverse-CDF Laplace draw: w = -b * sgn(u) * ln(1 - 2|u|), u ~ U(-1/2, 1/2)."""
    u = rng.random(size) - 0.5
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


@dataclass(frozen=True)
class PrivateProfile:
    """The unit of cross-party data exchange: a noised embedding plus release metadata."""

    vector: np.ndarray
    bank_id: int
    account_ref: str
    timestamp: float
    epsilon: float
    mechanism: str = MECHANISM_TAG
    format_version: int = PROFILE_FORMAT_VERSION

    def to_line(self):
        eps = "inf" if math.isinf(self.epsilon) else repr(self.epsilon)
        fields = [
            str(self.format_version),
            str(self.bank_id),
            self.account_ref,
            repr(self.timestamp),
            eps,
            self.mechanism,
            str(len(self.vector)),
        ] + [repr(float(v)) for v in self.vector]
        return ",".join(fields)

    @classmethod
    def from_line(cls, line):
        parts = line.strip().split(",")
        version, bank_id, ref, ts, eps, tag, m = parts[:7]
        vec = np.array([float(v) for v in parts[7 : 7 + int(m)]])
        return cls(
            vector=vec,
            bank_id=int(bank_id),
            account_ref=ref,
            timestamp=float(ts),
            epsilon=float(eps),
            mechanism=tag,
            format_version=int(version),
        )


def account_ref(account_id, salt):
    """Opaque salted reference for an account id in released profiles."""
    return hashlib.sha256(f"{salt}:{account_id}".encode()).hexdigest()[:16]


class Mechanism:
    """Laplace release mechanism owned by one bank.

    epsilon = inf disables the noise (the centralised benchmark arm);
    clipping is always applied.  Owns its RNG stream.
    """

    def __init__(self, epsilon, dim, sensitivity=DEFAULT_SENSITIVITY, seed=0, bank_id=0, salt="fedfraud"):
        if epsilon <= 0:
            raise ConfigError(f"privacy budget must be positive, got {epsilon}")
        if sensitivity <= 0:
            raise ConfigError("sensitivity bound must be positive")
        self.epsilon = float(epsilon)
        self.dim = int(dim)
        self.sensitivity = float(sensitivity)
        self.clip_radius = self.sensitivity / 2.0
        self.bank_id = bank_id
        self.salt = salt
        self.rng = np.random.default_rng(seed)

    @property
    def scale(self):
        if math.isinf(self.epsilon):
            return 0.0
        return self.sensitivity / self.epsilon

    def noise(self, n_rows=None):
        """Fresh Laplace noise draw(s) of width ``dim`` from this mechanism's stream."""
        size = self.dim if n_rows is None else (n_rows, self.dim)
        if self.scale == 0.0:
            return np.zeros(size)
        return laplace_sample(self.rng, self.scale, size)

    def publish(self, z, account_id, timestamp):
        """Clip defensively, add noise, and wrap in release metadata."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise ConfigError(f"embedding shape {z.shape} does not match mechanism dim {self.dim}")
        clipped = clip_l1(z, self.clip_radius)
        return PrivateProfile(
            vector=clipped + self.noise(),
            bank_id=self.bank_id,
            account_ref=account_ref(account_id, self.salt),
            timestamp=float(timestamp),
            epsilon=self.epsilon,
        )

    def log_density_ratio(self, z, z_prime, output):
        """log p(output | z) - log p(output | z') under the product Laplace density.

        Bounded above by epsilon * ||z - z'||_1 / sensitivity.
        """
        z = np.asarray(z, dtype=np.float64)
        z_prime = np.asarray(z_prime, dtype=np.float64)
        output = np.asarray(output, dtype=np.float64)
        b = self.scale
        if b == 0.0:
            raise ConfigError("density ratio undefined for the noise-free arm")
        return float((np.abs(output - z_prime) - np.abs(output - z)).sum() / b)
