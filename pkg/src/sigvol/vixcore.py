"""Forward-variance quadratic forms and VIX evaluation per sample.

The squared VIX at maturity T is a quadratic form of the parameter tensor:
VIX_T^2(l) = (1/delta) l^T Q(T, delta) l, with Q assembled from the stored
level-(2n+1) signature of (t, X) by pairing shuffle products, appended by the
time letter, against the conditional-expectation window e^{delta G^T} - Id.
Appending the time letter does the time integral, so no quadrature enters.

A Cholesky factor per sample turns every evaluation into one thin matrix
product, `(1/sqrt(delta)) ||U^T l||`, which is what calibration loops over.
This module also provides the deterministic mean matrix used by the control
variates and the maturity-dependent-parameter extension.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse

from .polyproc import DualMatrix, matrix_exponential
from .sigtensor import CoeffTensor, Labeling, shuffle_words, vec


class AssemblyError(ValueError):
    """A quadratic-form input violates a structural guarantee (symmetry)."""


@dataclass(frozen=True)
class QMatrix:
    """One sample's forward-variance form over words up to level n."""

    maturity: float
    delta: float
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise AssemblyError(f"Q must be square, got {m.shape}")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class ParamSlices:
    """Maturity-dependent parameters, constant between breakpoints.

    With breakpoints T_1 < ... < T_N, the parameter path takes value
    ells[i] on [T_i, T_{i+1}), where T_0 = 0 and T_{N+1} = infinity; so
    there is one more vector than breakpoints and the last one rules the
    tail.
    """

    maturities: tuple[float, ...]
    ells: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.ells) != len(self.maturities) + 1:
            raise ValueError(
                f"need {len(self.maturities) + 1} parameter vectors for "
                f"{len(self.maturities)} breakpoints, got {len(self.ells)}"
            )
        if any(t <= 0 for t in self.maturities):
            raise ValueError("maturities must be positive")
        if any(b <= a for a, b in zip(self.maturities, self.maturities[1:])):
            raise ValueError("maturities must be strictly increasing")
        object.__setattr__(self, "maturities", tuple(float(t) for t in self.maturities))
        object.__setattr__(self, "ells", tuple(np.asarray(l, dtype=float) for l in self.ells))

    def boundaries(self) -> tuple[float, ...]:
        """(0, T_1, ..., T_N, inf): slice i lives on [b[i], b[i+1])."""
        return (0.0, *self.maturities, float("inf"))


def pair_contraction_matrix(lab_params: Labeling, lab_big: Labeling) -> scipy.sparse.csr_matrix:
    """Rows vec((e_I shuffle e_J) x e_0), one per word pair (I, J).

    Row order is lab_params-major: pair (I, J) sits at row label(I)*m +
    label(J). Symmetric pairs share one shuffle expansion, which is what
    makes the assembled Q exactly symmetric.
    """
    if lab_params.alphabet != lab_big.alphabet:
        raise AssemblyError("labelings must share the alphabet")
    if lab_big.level < 2 * lab_params.level + 1:
        raise AssemblyError(
            f"pair map needs level {2 * lab_params.level + 1}, labeling has {lab_big.level}"
        )
    m = len(lab_params)
    rows, cols, vals = [], [], []
    for i, wi in enumerate(lab_params):
        for j in range(i, m):
            wj = lab_params.unlabel(j)
            for word, mult in shuffle_words(wi, wj).items():
                col = lab_big.label(word + (0,))
                rows.append(i * m + j)
                cols.append(col)
                vals.append(float(mult))
                if j != i:
                    rows.append(j * m + i)
                    cols.append(col)
                    vals.append(float(mult))
    return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(m * m, len(lab_big)))


def assemble_q(
    sig_rows: np.ndarray, window: np.ndarray, pair_rows: scipy.sparse.csr_matrix, n_params: int
) -> np.ndarray:
    """Batched Q from flat signature rows: (paths, m, m).

    ``window`` is the dense propagation matrix applied to vec(sig) before the
    pairing (e.g. e^{delta G^T} - Id).
    """
    sig_rows = np.atleast_2d(np.asarray(sig_rows, dtype=float))
    pushed = sig_rows @ window.T
    flat = pushed @ pair_rows.T
    return np.asarray(flat).reshape(sig_rows.shape[0], n_params, n_params)


def window_matrix(G: DualMatrix, tau: float) -> np.ndarray:
    """e^{tau G^T} - Id, the conditional increment over a window of tau years."""
    dense = G.matrix.T.toarray()
    return matrix_exponential(float(tau) * dense) - np.eye(G.dim)


def q_matrix(
    sig_x,
    G: DualMatrix,
    delta: float,
    *,
    maturity: float = float("nan"),
    lab_params: Labeling | None = None,
    pair_rows: scipy.sparse.csr_matrix | None = None,
) -> QMatrix:
    """Forward-variance form for a single sample.

    ``sig_x`` is the level-(2n+1) signature of (t, X) at the maturity, as a
    CoeffTensor or a flat row in G's labeling. Batch callers precompute
    ``pair_rows`` once and use :func:`assemble_q` directly.
    """
    from .sigtensor import enumerate_words

    if isinstance(sig_x, CoeffTensor):
        sig_x = vec(sig_x, G.labeling)
    sig_x = np.asarray(sig_x, dtype=float)
    if sig_x.shape != (G.dim,):
        raise AssemblyError(f"signature should be a flat row of length {G.dim}, got {sig_x.shape}")
    if G.level % 2 == 0:
        raise AssemblyError(f"G must live at an odd level 2n+1, got {G.level}")
    n = (G.level - 1) // 2
    if lab_params is None:
        lab_params = enumerate_words(G.alphabet, n)
    if pair_rows is None:
        pair_rows = pair_contraction_matrix(lab_params, G.labeling)
    q = assemble_q(sig_x, window_matrix(G, delta), pair_rows, len(lab_params))[0]
    return QMatrix(maturity=maturity, delta=delta, matrix=q)


# -- Cholesky with PSD repair ----------------------------------------------------


def cholesky_psd(q: np.ndarray) -> np.ndarray:
    """Upper-triangular U with U U^T = q (after clipping negative eigenvalues).

    Works on one matrix or a stack. Asymmetry beyond 1e-10 relative is an
    assembly bug upstream and is refused rather than silently symmetrized.
    """
    q = np.asarray(q, dtype=float)
    single = q.ndim == 2
    if single:
        q = q[None]
    m = q.shape[-1]
    sym_err = np.abs(q - q.transpose(0, 2, 1)).max(axis=(1, 2))
    scale = 1.0 + np.abs(q).max(axis=(1, 2))
    worst = int(np.argmax(sym_err / scale))
    if sym_err[worst] > 1e-10 * scale[worst]:
        raise AssemblyError(
            f"Q[{worst}] asymmetric by {sym_err[worst]:.3e} (scale {scale[worst]:.3e})"
        )
    flip = slice(None, None, -1)
    out = np.empty_like(q)
    try:
        # exchange trick: reversing rows and columns swaps lower for upper
        lower = np.linalg.cholesky(q[:, flip, flip])
        out = lower[:, flip, flip]
    except np.linalg.LinAlgError:
        for k in range(q.shape[0]):
            try:
                out[k] = np.linalg.cholesky(q[k][flip, flip])[flip, flip]
            except np.linalg.LinAlgError:
                out[k] = _psd_repair_factor(q[k])
    return out[0] if single else out


def _psd_repair_factor(q: np.ndarray) -> np.ndarray:
    """Eigenvalue-clipped upper factor; keeps exact zeros on the diagonal
    for the degenerate directions instead of jittering them."""
    lam, v = np.linalg.eigh(0.5 * (q + q.T))
    root = v * np.sqrt(np.clip(lam, 0.0, None))
    r, _ = scipy.linalg.rq(root, mode="full")
    # rq may return negative diagonal entries; the sign is irrelevant to
    # U U^T but keep the diagonal nonnegative for predictability
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return r * signs


# -- evaluation -------------------------------------------------------------------


def vix_value(ell: np.ndarray, u: np.ndarray, delta: float) -> np.ndarray | float:
    """(1/sqrt(delta)) ||U^T ell|| per sample; nonnegative by construction."""
    ell = np.asarray(ell, dtype=float)
    u = np.asarray(u, dtype=float)
    proj = np.einsum("...ij,i->...j", u, ell)
    out = np.linalg.norm(proj, axis=-1) / np.sqrt(delta)
    return float(out) if out.ndim == 0 else out


def vix_squared(ell: np.ndarray, u: np.ndarray, delta: float) -> np.ndarray:
    """l^T Q l / delta evaluated through the stored factor."""
    ell = np.asarray(ell, dtype=float)
    proj = np.einsum("...ij,i->...j", np.asarray(u, dtype=float), ell)
    return np.einsum("...j,...j->...", proj, proj) / delta


def vix_future(ell: np.ndarray, u_samples: np.ndarray, delta: float) -> tuple[float, float]:
    """Monte Carlo VIX future: mean of vix_value and its standard error."""
    u_samples = np.asarray(u_samples, dtype=float)
    if u_samples.ndim != 3 or u_samples.shape[0] < 1:
        raise ValueError("need a nonempty stack of factors")
    values = vix_value(ell, u_samples, delta)
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return mean, se


def q_cv(
    G: DualMatrix,
    maturity: float,
    delta: float,
    *,
    lab_params: Labeling | None = None,
    pair_rows: scipy.sparse.csr_matrix | None = None,
    expm_method: str = "pade",
) -> np.ndarray:
    """Deterministic mean of Q(T, delta): the tower property collapses the
    sample average to two exponentials applied to the time-zero state.

    l^T q_cv l / delta equals E[VIX_T^2(l)] exactly (up to expm accuracy).
    """
    from .sigtensor import enumerate_words

    if G.level % 2 == 0:
        raise AssemblyError(f"G must live at an odd level 2n+1, got {G.level}")
    n = (G.level - 1) // 2
    if lab_params is None:
        lab_params = enumerate_words(G.alphabet, n)
    if pair_rows is None:
        pair_rows = pair_contraction_matrix(lab_params, G.labeling)
    gt = G.matrix.T.toarray()
    far = matrix_exponential((maturity + delta) * gt, method=expm_method)
    near = matrix_exponential(maturity * gt, method=expm_method)
    # vec of the unit tensor is the first basis vector
    y = far[:, 0] - near[:, 0]
    m = len(lab_params)
    return np.asarray(pair_rows @ y).reshape(m, m)


# -- control variate ---------------------------------------------------------------


def vix_control_variate(
    payoffs: np.ndarray,
    v2_samples: np.ndarray,
    v2_mean: float,
    m: int = 1,
    second_moment: float | None = None,
) -> tuple[np.ndarray, float]:
    """Center a polynomial-in-VIX^2 variate and subtract its best multiple.

    Parameters
    ----------
    payoffs : raw per-sample payoffs.
    v2_samples : per-sample squared VIX.
    v2_mean : exact E[VIX^2] from :func:`q_cv`.
    m : polynomial order of the variate (1 or 2).
    second_moment : E[(VIX^2)^2] for m=2, from an offline high-path run.

    Returns the adjusted payoff stream and the fitted multiplier c*. When the
    variate is degenerate (variance below 1e-16) the raw stream returns
    unchanged with c* = 0.
    """
    payoffs = np.asarray(payoffs, dtype=float)
    v2 = np.asarray(v2_samples, dtype=float)
    if payoffs.shape != v2.shape:
        raise ValueError("payoffs and VIX^2 samples must align")
    if m == 1:
        variate = v2
        variate_mean = float(v2_mean)
    elif m == 2:
        if second_moment is None:
            raise ValueError("m=2 needs the offline E[(VIX^2)^2] moment")
        basis = np.column_stack([np.ones_like(v2), v2, v2**2])
        alpha, *_ = np.linalg.lstsq(basis, payoffs, rcond=None)
        variate = basis @ alpha
        variate_mean = float(alpha[0] + alpha[1] * v2_mean + alpha[2] * second_moment)
    else:
        raise ValueError(f"variate order must be 1 or 2, got {m}")
    var = float(variate.var())
    if var < 1e-16:
        return payoffs, 0.0
    c_star = float(np.cov(payoffs, variate, ddof=0)[0, 1] / var)
    return payoffs - c_star * (variate - variate_mean), c_star


# -- maturity-dependent parameters ---------------------------------------------------


def vix_tv(
    slices: ParamSlices,
    q_of: Callable[[int, float], np.ndarray],
    delta: float,
) -> list[np.ndarray]:
    """Per-sample VIX at each breakpoint under piecewise-constant parameters.

    ``q_of(k, tau)`` returns the per-sample stack Q(T_k, tau) for breakpoint
    index k (0-based) and window tau > 0. The averaging window after T_k is
    cut along the parameter breakpoints:

        VIX_{T_k}^2 = (1/delta) sum_{j >= k} l_j^T [Q(T_k, (T_{j+1}-T_k) ^ delta)
                                                  - Q(T_k, (T_j -T_k) ^ delta)] l_j

    with T_{N+1} = infinity. Breakpoints past T_k + delta contribute nothing
    and are skipped, which is also the wide-spacing reduction to the
    constant-parameter formula.
    """
    bounds = slices.boundaries()
    n_breaks = len(slices.maturities)
    out: list[np.ndarray] = []
    for k in range(1, n_breaks + 1):
        t_k = bounds[k]
        acc = None
        for j in range(k, n_breaks + 1):
            lo = min(max(bounds[j] - t_k, 0.0), delta)
            hi = min(bounds[j + 1] - t_k, delta)
            if hi <= lo:
                continue
            ell = slices.ells[j]
            piece = _quad(q_of(k - 1, hi), ell)
            if lo > 0.0:
                piece = piece - _quad(q_of(k - 1, lo), ell)
            acc = piece if acc is None else acc + piece
        acc = np.clip(acc, 0.0, None)
        out.append(np.sqrt(acc / delta))
    return out


def _quad(q: np.ndarray, ell: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.einsum("...ij,i,j->...", q, ell, ell)
