"""Pathwise price representation for the equity leg.

The discounted price solves dS = S sigma dB with sigma linear in the
signature of (t, X), so log S_t(l) splits into a quadratic form of the
stored signature (the integrated variance, no expectation involved) and a
linear pairing against Ito-corrected words of the full path (t, X, B):

    log S_t(l) = -1/2 l^T Q0(t) l + sum_I l_I <e~_I, Z_t>

Both ingredients live in the sample store, so pricing never simulates the
price itself; every new parameter tensor reuses the same draws.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse

from .model import ModelConfig
from .polyproc import DualMatrix, matrix_exponential
from .sigtensor import CoeffTensor, Labeling, enumerate_words, vec
from .vixcore import AssemblyError, ParamSlices, pair_contraction_matrix, _quad


@dataclass(frozen=True)
class QZero:
    """Pathwise integrated-variance form: entries <(e_I sh e_J) x e_0, sig>."""

    time: float
    matrix: np.ndarray


def e_tilde_coeffs(cfg: ModelConfig) -> list[CoeffTensor]:
    """Ito-corrected price words, ordered like the parameter labeling.

    Appending the price letter to a word I computes the Stratonovich
    integral of <e_I, path> against B; the Ito version subtracts half the
    quadratic covariation, which replaces the last letter of I by the time
    letter and scales by sigma rho against the price Brownian motion. Words
    ending in the time letter need no correction, and the empty word maps
    to the price letter itself.
    """
    alphabet = cfg.alphabet_full
    b = cfg.b_letter
    rho = cfg.rho_matrix()
    out: list[CoeffTensor] = []
    for word in enumerate_words(cfg.alphabet_bfree, cfg.n):
        coeffs = {word + (b,): 1.0}
        if word and word[-1] != 0:
            factor = cfg.sigma[word[-1] - 1] * rho[word[-1] - 1, cfg.d]
            if factor != 0.0:
                coeffs[word[:-1] + (0,)] = -0.5 * factor
        out.append(CoeffTensor(alphabet, len(word) + 1, coeffs))
    return out


def assemble_q0(
    sig_rows: np.ndarray, pair_rows: scipy.sparse.csr_matrix, n_params: int
) -> np.ndarray:
    """Batched pathwise Q0 stacks (paths, m, m) from flat signature rows."""
    sig_rows = np.atleast_2d(np.asarray(sig_rows, dtype=float))
    flat = sig_rows @ pair_rows.T
    return np.asarray(flat).reshape(sig_rows.shape[0], n_params, n_params)


def q0_matrix(
    sig_x,
    labeling: Labeling,
    *,
    lab_params: Labeling | None = None,
    pair_rows: scipy.sparse.csr_matrix | None = None,
) -> QZero:
    """Single-sample integrated-variance form from a level-(2n+1) signature."""
    if isinstance(sig_x, CoeffTensor):
        sig_x = vec(sig_x, labeling)
    sig_x = np.asarray(sig_x, dtype=float)
    if sig_x.shape != (len(labeling),):
        raise AssemblyError(f"expected a flat row of length {len(labeling)}, got {sig_x.shape}")
    if labeling.level % 2 == 0:
        raise AssemblyError(f"signature must live at an odd level 2n+1, got {labeling.level}")
    n = (labeling.level - 1) // 2
    if lab_params is None:
        lab_params = enumerate_words(labeling.alphabet, n)
    if pair_rows is None:
        pair_rows = pair_contraction_matrix(lab_params, labeling)
    matrix = assemble_q0(sig_x, pair_rows, len(lab_params))[0]
    return QZero(time=float(matrix[0, 0]), matrix=matrix)


def pair_weights(pair_rows: scipy.sparse.csr_matrix, ell: np.ndarray) -> np.ndarray:
    """Collapse the pair map against l x l: quadratic forms become one dot.

    l^T Q0(t) l = <pair_weights, vec(sig_t)>, so a calibration loop touches
    each stored signature row exactly once per parameter trial.
    """
    ell = np.asarray(ell, dtype=float)
    return np.asarray(pair_rows.T @ np.kron(ell, ell)).ravel()


def q0_quad_values(
    sig_rows: np.ndarray, pair_rows: scipy.sparse.csr_matrix, ell: np.ndarray
) -> np.ndarray:
    """Per-sample l^T Q0 l without materializing the matrix stacks."""
    sig_rows = np.atleast_2d(np.asarray(sig_rows, dtype=float))
    return sig_rows @ pair_weights(pair_rows, ell)


def log_price(ell: np.ndarray, q0: np.ndarray, ito: np.ndarray) -> np.ndarray | float:
    """Pathwise log-price at one time: quadratic drain plus the Ito pairing.

    ``q0`` is one (m, m) matrix or a stack; ``ito`` the matching contraction
    row(s). The price starts at 1, so l = 0 gives log-price 0.
    """
    ell = np.asarray(ell, dtype=float)
    quad = _quad(np.asarray(q0, dtype=float), ell)
    lin = np.asarray(ito, dtype=float) @ ell
    out = -0.5 * quad + lin
    return float(out) if np.ndim(out) == 0 else out


def log_prices_from_rows(
    ell: np.ndarray,
    sig_rows: np.ndarray,
    ito_rows: np.ndarray,
    pair_rows: scipy.sparse.csr_matrix,
) -> np.ndarray:
    """Store-facing log-price: one sparse collapse, two dense dots."""
    return -0.5 * q0_quad_values(sig_rows, pair_rows, ell) + np.atleast_2d(
        np.asarray(ito_rows, dtype=float)
    ) @ np.asarray(ell, dtype=float)


def log_price_tv(
    slices: ParamSlices,
    q0_of: Callable[[float], np.ndarray],
    ito_of: Callable[[float], np.ndarray],
    t: float,
) -> np.ndarray:
    """Log-price under piecewise-constant parameters.

    ``q0_of(s)`` / ``ito_of(s)`` return the pathwise quantities at time s;
    they are only called at breakpoints clamped by t (and t itself), which
    is exactly the set of running values the store keeps. Slices starting
    at or after t contribute nothing.
    """
    bounds = slices.boundaries()
    acc = None
    for i, ell in enumerate(slices.ells):
        lo = min(bounds[i], t)
        hi = min(bounds[i + 1], t)
        if hi <= lo:
            continue
        dq = q0_of(hi) - q0_of(lo) if lo > 0.0 else q0_of(hi)
        dito = ito_of(hi) - ito_of(lo) if lo > 0.0 else ito_of(hi)
        piece = -0.5 * _quad(np.asarray(dq, dtype=float), ell) + np.asarray(dito, dtype=float) @ ell
        acc = piece if acc is None else acc + piece
    if acc is None:
        raise ValueError(f"no slice covers (0, {t}]")
    return acc


def undiscount(price: np.ndarray | float, r: float, q: float, t: float):
    """Remove the discounting/dividend drift from the modeled price."""
    for name, value in (("r", r), ("q", q), ("t", t)):
        if not np.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value}")
    return np.exp((r - q) * t) * np.asarray(price, dtype=float)


def discounted_call_payoff(undiscounted: np.ndarray, strike: float, r: float, t: float) -> np.ndarray:
    """e^{-rt} (S - K)^+ per sample."""
    return np.exp(-r * t) * np.clip(np.asarray(undiscounted, dtype=float) - strike, 0.0, None)


def q0_cv(
    G: DualMatrix,
    maturity: float,
    *,
    lab_params: Labeling | None = None,
    pair_rows: scipy.sparse.csr_matrix | None = None,
) -> np.ndarray:
    """Deterministic mean of Q0(T): one exponential applied to the unit state.

    -1/2 l^T q0_cv l is the exact mean of log S_T(l), which centers the
    control variate below.
    """
    if G.level % 2 == 0:
        raise AssemblyError(f"G must live at an odd level 2n+1, got {G.level}")
    n = (G.level - 1) // 2
    if lab_params is None:
        lab_params = enumerate_words(G.alphabet, n)
    if pair_rows is None:
        pair_rows = pair_contraction_matrix(lab_params, G.labeling)
    state = matrix_exponential(maturity * G.matrix.T.toarray())[:, 0]
    m = len(lab_params)
    return np.asarray(pair_rows @ state).reshape(m, m)


def spx_control_variate(
    payoffs: np.ndarray,
    log_prices: np.ndarray,
    ell: np.ndarray,
    q0_cv_matrix: np.ndarray,
) -> tuple[np.ndarray, float]:
    """Subtract the best multiple of the centered log-price from the payoffs.

    E[log S_T] = -1/2 l^T q0_cv l exactly, so the variate needs no extra
    simulation. Degenerate variates (variance below 1e-16) pass the stream
    through with c* = 0.
    """
    payoffs = np.asarray(payoffs, dtype=float)
    log_prices = np.asarray(log_prices, dtype=float)
    if payoffs.shape != log_prices.shape:
        raise ValueError("payoffs and log-prices must align")
    mean_log = -0.5 * float(_quad(np.asarray(q0_cv_matrix, dtype=float), np.asarray(ell, dtype=float)))
    var = float(log_prices.var())
    if var < 1e-16:
        return payoffs, 0.0
    c_star = float(np.cov(payoffs, log_prices, ddof=0)[0, 1] / var)
    return payoffs - c_star * (log_prices - mean_log), c_star


def novikov_diagnostic(ell: np.ndarray, sig_rows: np.ndarray, pair_rows) -> tuple[float, bool]:
    """Sample mean of exp(1/2 l^T Q0(T) l) and a heavy-tail flag.

    Finite values suggest (but cannot prove) that the price is a true
    martingale for this parameter; the model prices correctly either way,
    so this is a report line, never a gate.
    """
    quad = q0_quad_values(sig_rows, pair_rows, ell)
    with np.errstate(over="ignore"):
        values = np.exp(0.5 * quad)
    mean = float(values.mean())
    return mean, bool(np.isfinite(mean))
