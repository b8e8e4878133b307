"""Model configuration and simulation grid.

The primary process is a d-dimensional Ornstein-Uhlenbeck (or plain correlated
Brownian) factor vector X driven by Brownian motions W, plus the price
Brownian motion B. Letters index the time-augmented coordinates:

====  =======================
 0    time t
 1-d  factors X^1 ... X^d
 d+1  price Brownian motion B
====  =======================

``rho`` is the (d+1) x (d+1) correlation matrix of (W^1, ..., W^d, B), with B
last. The "B-free" alphabet {0, ..., d} carries the volatility parameters;
the full alphabet {0, ..., d+1} is only needed for the Ito-corrected price
contractions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .sigtensor import tensor_dim


class ConfigError(ValueError):
    """A model or grid configuration violates its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    """Primary-process hyperparameters.

    Parameters
    ----------
    d : number of stochastic factors.
    n : truncation level of the parameter tensor ell.
    kappa, theta, sigma : length-d mean-reversion speeds (1/year), levels and
        vol-of-vol loadings (level / sqrt(year)).
    rho : (d+1) x (d+1) correlation matrix of the driving Brownian motions,
        price Brownian motion last.
    x0 : initial factor values.
    delta : VIX averaging window in years (default 30 days = 1/12).
    kind : "ou" for mean-reverting factors, "bm" for driftless ones
        (requires kappa = 0).
    """

    d: int
    n: int
    kappa: tuple[float, ...]
    theta: tuple[float, ...]
    sigma: tuple[float, ...]
    rho: tuple[tuple[float, ...], ...]
    x0: tuple[float, ...]
    delta: float = 1.0 / 12.0
    kind: Literal["ou", "bm"] = "ou"

    def __post_init__(self):
        d = self.d
        if d < 1:
            raise ConfigError(f"need at least one factor, got d={d}")
        if self.n < 0:
            raise ConfigError(f"truncation level must be >= 0, got {self.n}")
        for name in ("kappa", "theta", "sigma", "x0"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != d:
                raise ConfigError(f"{name} must have length d={d}, got {len(value)}")
            object.__setattr__(self, name, value)
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (d + 1, d + 1):
            raise ConfigError(f"rho must be ({d + 1}, {d + 1}) including the price Brownian motion, got {rho.shape}")
        if not np.allclose(rho, rho.T, atol=1e-12):
            raise ConfigError("rho must be symmetric")
        if not np.allclose(np.diag(rho), 1.0, atol=1e-12):
            raise ConfigError("rho must have a unit diagonal")
        smallest = float(np.linalg.eigvalsh(rho)[0])
        if smallest < -1e-10:
            raise ConfigError(f"rho is not positive semidefinite (smallest eigenvalue {smallest:.3e})")
        object.__setattr__(self, "rho", tuple(tuple(float(v) for v in row) for row in rho))
        if any(k < 0 for k in self.kappa):
            raise ConfigError("kappa must be nonnegative")
        if any(s <= 0 for s in self.sigma):
            raise ConfigError("sigma must be strictly positive")
        if self.delta <= 0:
            raise ConfigError("delta must be positive")
        if self.kind not in ("ou", "bm"):
            raise ConfigError(f"unknown process kind {self.kind!r}")
        if self.kind == "bm" and any(k != 0.0 for k in self.kappa):
            raise ConfigError("kind='bm' requires kappa = 0")

    # -- derived alphabet / dimension helpers -------------------------------

    @property
    def alphabet_bfree(self) -> int:
        """Letters of (t, X): d + 1."""
        return self.d + 1

    @property
    def alphabet_full(self) -> int:
        """Letters of (t, X, B): d + 2."""
        return self.d + 2

    @property
    def b_letter(self) -> int:
        return self.d + 1

    @property
    def sig_level_bfree(self) -> int:
        """Signature level needed for the quadratic-form matrices: 2n + 1."""
        return 2 * self.n + 1

    @property
    def sig_level_full(self) -> int:
        """Signature level needed for the Ito contractions: n + 1."""
        return self.n + 1

    @property
    def n_params(self) -> int:
        """Dimension of the parameter vector ell."""
        return tensor_dim(self.alphabet_bfree, self.n)

    def rho_matrix(self) -> np.ndarray:
        return np.asarray(self.rho, dtype=float)

    def letter_params(self, alphabet: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Per-letter (kappa, theta, sigma, x0) arrays for a given alphabet size.

        Letter 0 (time) gets zeros; the price Brownian motion (if included)
        has kappa 0, sigma 1 and starts at 0.
        """
        if alphabet not in (self.alphabet_bfree, self.alphabet_full):
            raise ConfigError(
                f"alphabet must be {self.alphabet_bfree} (B-free) or {self.alphabet_full} (full), got {alphabet}"
            )
        pad = alphabet - 1 - self.d  # 1 when B is included
        kap = np.array([0.0, *self.kappa] + [0.0] * pad)
        the = np.array([0.0, *self.theta] + [0.0] * pad)
        sig = np.array([0.0, *self.sigma] + [1.0] * pad)
        x0 = np.array([0.0, *self.x0] + [0.0] * pad)
        return kap, the, sig, x0

    def letter_corr(self, alphabet: int) -> np.ndarray:
        """Correlation matrix indexed by letters (letter 0 row/col zero)."""
        out = np.zeros((alphabet, alphabet))
        k = alphabet - 1
        out[1:, 1:] = self.rho_matrix()[:k, :k]
        return out


@dataclass(frozen=True)
class PathGrid:
    """Uniform simulation grid on [0, horizon]."""

    horizon: float
    steps_per_year: int = 2520

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.steps_per_year < 1:
            raise ConfigError("steps_per_year must be >= 1")

    @property
    def h(self) -> float:
        return 1.0 / self.steps_per_year

    @property
    def n_steps(self) -> int:
        # Cover the horizon: last grid point is at or just beyond it.
        return max(1, int(round(self.horizon * self.steps_per_year)))

    def snap(self, t: float) -> tuple[int, float]:
        """Nearest grid index for time ``t`` and the snap distance.

        The distance must be below one step; callers report it.
        """
        idx = int(round(t * self.steps_per_year))
        if idx < 0 or idx > self.n_steps:
            raise ConfigError(f"time {t} outside grid horizon {self.horizon}")
        dist = abs(t - idx * self.h)
        if dist >= self.h:
            raise ConfigError(f"snap distance {dist:.3e} for t={t} is not below one step h={self.h:.3e}")
        return idx, dist

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.h
