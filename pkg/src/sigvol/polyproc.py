"""Action of the factor process generator on truncated tensors.

For polynomial diffusions the conditional expectation of the (time-augmented)
signature solves a linear ODE: there is a matrix G, indexed by words, with

    G @ vec(u) = vec(L u)

for every truncated tensor u, where L acts on basis words by shuffling the
word's prefix against the drift/covariance tensors of its last letters. The
expected signature at horizon t is then ``expm(t * G.T) @ vec(sig_0)``.

This module builds the drift/covariance tensors from a ModelConfig, applies L
to words, assembles G (sparse, one column per word image) and exposes the
exponential-map helpers used by the pricing formulas, including the time
integral of the semigroup computed three ways.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .model import ModelConfig
from .sigtensor import (
    CoeffTensor,
    Labeling,
    Word,
    enumerate_words,
    shuffle,
    vec,
)


class NumericalRangeError(ArithmeticError):
    """A matrix exponential left the representable floating-point range."""


@dataclass(frozen=True)
class PolyCoefficients:
    """Drift and covariance of the augmented factor process, as tensors.

    ``b[j]`` is the drift of coordinate j (a level <= 1 tensor) and
    ``a[(i, j)]`` the instantaneous covariance of coordinates i and j
    (level 0 here; polynomial models of higher degree would use level 2).
    Zero entries are omitted from ``a``.
    """

    alphabet: int
    b: tuple[CoeffTensor, ...]
    a: dict[tuple[int, int], CoeffTensor]

    def __post_init__(self):
        if len(self.b) != self.alphabet:
            raise ValueError(f"need one drift tensor per letter, got {len(self.b)} for alphabet {self.alphabet}")
        for j, tensor in enumerate(self.b):
            if tensor.alphabet != self.alphabet:
                raise ValueError(f"b[{j}] is over alphabet {tensor.alphabet}, expected {self.alphabet}")
        for (i, j), tensor in self.a.items():
            if not (0 <= i < self.alphabet and 0 <= j < self.alphabet):
                raise ValueError(f"covariance key ({i}, {j}) outside alphabet {self.alphabet}")
            if tensor.alphabet != self.alphabet:
                raise ValueError(f"a[{i},{j}] is over alphabet {tensor.alphabet}, expected {self.alphabet}")

    def cov(self, i: int, j: int) -> CoeffTensor:
        key = (i, j) if (i, j) in self.a else (j, i)
        found = self.a.get(key)
        if found is None:
            return CoeffTensor.zero(self.alphabet)
        return found


def build_coefficients(cfg: ModelConfig, alphabet: int) -> PolyCoefficients:
    """Drift/covariance tensors of (t, X) or (t, X, B) for the given alphabet.

    Time has unit drift and no noise. A mean-reverting factor j with speed
    kappa, level theta and start x0 contributes

        b_j = kappa * (theta - x0) * e_() - kappa * e_(j)

    because the factor increment is x0 + <e_(j), path>. Covariances are the
    constant tensors sigma_i * sigma_j * corr_ij * e_().
    """
    kap, the, sig, x0 = cfg.letter_params(alphabet)
    corr = cfg.letter_corr(alphabet)

    b: list[CoeffTensor] = [CoeffTensor(alphabet, 1, {(): 1.0})]
    for j in range(1, alphabet):
        coeffs: dict[Word, float] = {}
        if kap[j] != 0.0:
            coeffs[()] = kap[j] * (the[j] - x0[j])
            coeffs[(j,)] = -kap[j]
        b.append(CoeffTensor(alphabet, 1, coeffs))

    a: dict[tuple[int, int], CoeffTensor] = {}
    for i in range(1, alphabet):
        for j in range(i, alphabet):
            value = sig[i] * sig[j] * corr[i, j]
            if value != 0.0:
                a[(i, j)] = CoeffTensor(alphabet, 2, {(): value})
    return PolyCoefficients(alphabet=alphabet, b=tuple(b), a=a)


def apply_dual(word: Word, coeffs: PolyCoefficients) -> CoeffTensor:
    """The image L e_I, a tensor of level at most |I|.

    The empty word maps to zero. Otherwise the prefix shuffles against the
    drift of the last letter, plus half the second prefix shuffled against
    the covariance of the last two letters.
    """
    if len(word) == 0:
        return CoeffTensor.zero(coeffs.alphabet)
    prefix = CoeffTensor.basis(coeffs.alphabet, word[:-1])
    out = shuffle(prefix, coeffs.b[word[-1]], level=len(word))
    if len(word) >= 2:
        cov = coeffs.cov(word[-2], word[-1])
        if len(cov) > 0:
            prefix2 = CoeffTensor.basis(coeffs.alphabet, word[:-2])
            out = out + 0.5 * shuffle(prefix2, cov, level=len(word))
    return out


@dataclass(frozen=True)
class DualMatrix:
    """Matrix form of L on words up to a level, columns = images of words.

    ``matrix @ vec(u) == vec(L u)`` with ``vec`` taken in the graded
    lexicographic labeling. The expected-signature map is the transpose
    exponential, see :func:`expected_signature`.
    """

    labeling: Labeling
    matrix: scipy.sparse.csr_matrix

    @property
    def alphabet(self) -> int:
        return self.labeling.alphabet

    @property
    def level(self) -> int:
        return self.labeling.level

    @property
    def dim(self) -> int:
        return len(self.labeling)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def build_G(coeffs: PolyCoefficients, level: int, labeling: Labeling | None = None) -> DualMatrix:
    """Assemble the sparse matrix of L on all words up to ``level``.

    Column ``label(I)`` holds vec(L e_I); the empty-word column is zero, so
    constant tensors are harmonic.
    """
    if labeling is not None:
        if labeling.alphabet != coeffs.alphabet or labeling.level != level:
            raise ValueError("labeling does not match the requested alphabet/level")
        lab = labeling
    else:
        lab = enumerate_words(coeffs.alphabet, level)
    rows: list[int] = []
    cols: list[int] = []
    vals: list[float] = []
    for k, word in enumerate(lab):
        image = apply_dual(word, coeffs)
        for w, v in image.items():
            rows.append(lab.label(w))
            cols.append(k)
            vals.append(v)
    matrix = scipy.sparse.csr_matrix(
        (vals, (rows, cols)), shape=(len(lab), len(lab))
    )
    return DualMatrix(labeling=lab, matrix=matrix)


def matrix_exponential(m: np.ndarray, method: str = "pade") -> np.ndarray:
    """Dense expm with a numerical-range guard on input and output.

    ``pade`` is scaling-and-squaring with the order-13 diagonal approximant;
    ``series`` sums the power series directly, which terminates exactly for
    nilpotent input and is refused when it fails to converge.
    """
    m = np.asarray(m, dtype=float)
    if not np.all(np.isfinite(m)):
        raise NumericalRangeError("matrix exponential input has non-finite entries")
    if method == "pade":
        with np.errstate(over="ignore", invalid="ignore"):
            out = scipy.linalg.expm(m)
    elif method == "series":
        out = np.eye(m.shape[0])
        term = np.eye(m.shape[0])
        for k in range(1, 401):
            term = (term @ m) / k
            if not term.any():
                break
            out += term
        else:
            if np.abs(term).max() > 1e-14 * (1.0 + np.abs(out).max()):
                raise NumericalRangeError("power series did not terminate in 400 terms")
    else:
        raise ValueError(f"unknown method {method!r}; expected pade or series")
    if not np.all(np.isfinite(out)):
        raise NumericalRangeError(
            f"matrix exponential overflowed (input 1-norm {np.linalg.norm(m, 1):.3e})"
        )
    return out


def transition_matrix(G: DualMatrix, t: float) -> np.ndarray:
    """The semigroup e^{t G^T} that pushes vec(sig) forward by time t."""
    return matrix_exponential(float(t) * G.matrix.T.toarray())


def expected_signature(G: DualMatrix, t: float, state: np.ndarray) -> np.ndarray:
    """Conditional expectation of vec(sig) t years ahead of ``state``.

    ``state`` is the current signature vector in the same labeling as G
    (use ``vec(tensor, G.labeling)``).
    """
    state = np.asarray(state, dtype=float)
    if state.shape[-1] != G.dim:
        raise ValueError(f"state has dimension {state.shape[-1]}, G expects {G.dim}")
    return state @ transition_matrix(G, t).T


def propagate_rows(G: DualMatrix, t: float, rows: np.ndarray) -> np.ndarray:
    """Apply e^{t G^T} to a batch of signature rows without densifying G.

    Equivalent to ``rows @ transition_matrix(G, t).T`` but computed with a
    Krylov-style action of the sparse exponential, so it stays feasible when
    the labeling has tens of thousands of words.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] != G.dim:
        raise ValueError(f"rows have dimension {rows.shape[1]}, G expects {G.dim}")
    op = (float(t) * G.matrix.T).tocsc()
    return np.ascontiguousarray(scipy.sparse.linalg.expm_multiply(op, rows.T).T)


def initial_state(G: DualMatrix) -> np.ndarray:
    """vec of the signature at time zero (the unit tensor)."""
    return vec(CoeffTensor(G.alphabet, 0, {(): 1.0}), G.labeling)


def restrict_alphabet(coeffs: PolyCoefficients, letters: tuple[int, ...], level: int) -> DualMatrix:
    """The dual matrix of the sub-process using only ``letters``.

    Words over a sub-alphabet are stable under L (drifts touch only the
    word's own letters, covariances only the constant), so restriction just
    relabels letters by their position in ``letters`` and rebuilds.
    """
    letters = tuple(sorted(set(int(x) for x in letters)))
    if not letters:
        raise ValueError("letter subset must be non-empty")
    if letters[0] < 0 or letters[-1] >= coeffs.alphabet:
        raise ValueError(f"letters {letters} outside the alphabet of size {coeffs.alphabet}")
    source = coeffs
    sub = len(letters)
    remap = {old: new for new, old in enumerate(letters)}

    def relabel(tensor: CoeffTensor, new_level: int) -> CoeffTensor:
        coeffs = {}
        for w, v in tensor.items():
            if all(letter in remap for letter in w):
                coeffs[tuple(remap[letter] for letter in w)] = v
        return CoeffTensor(sub, new_level, coeffs)

    b = tuple(relabel(source.b[old], 1) for old in letters)
    a = {}
    for (i, j), tensor in source.a.items():
        if i in remap and j in remap:
            a[(remap[i], remap[j])] = relabel(tensor, 2)
    return build_G(PolyCoefficients(alphabet=sub, b=b, a=a), level)


def embed_indices(small: Labeling, big: Labeling, letters: tuple[int, ...]) -> np.ndarray:
    """Positions in ``big`` of the words of ``small`` relabeled via ``letters``.

    ``letters[k]`` is the big-alphabet letter written as k in the small one.
    """
    letters = tuple(int(x) for x in letters)
    if len(letters) != small.alphabet:
        raise ValueError(f"need {small.alphabet} letters, got {len(letters)}")
    out = np.empty(len(small), dtype=np.int64)
    for k, word in enumerate(small):
        out[k] = big.label(tuple(letters[letter] for letter in word))
    return out


def integrated_exponential(
    G: DualMatrix, delta: float, method: str = "augmented", n: int = 200
) -> np.ndarray:
    """The time integral of the semigroup, int_0^delta e^{t G^T} dt.

    Methods
    -------
    augmented
        Exact up to expm accuracy: one exponential of the block matrix
        [[G^T, I], [0, 0]], whose top-right block is the integral. This is
        the matrix-level counterpart of appending the time letter to the
        quadratic-form words, which the pricing path does instead (see
        ``vixcore.q_matrix``); both avoid quadrature entirely.
    trapezoid
        Composite trapezoid rule with n subintervals; O(n^-2) error.
    taylor
        delta * sum_k (G^T delta)^k / (k+1)! up to order n. Requires the
        spectral radius of G^T delta to be below one; exact after finitely
        many terms when G is nilpotent (driftless factors kill the powers).
    """
    delta = float(delta)
    if delta < 0:
        raise ValueError(f"delta must be nonnegative, got {delta}")
    gt = G.matrix.T.toarray()
    dim = G.dim
    if method == "augmented":
        block = np.zeros((2 * dim, 2 * dim))
        block[:dim, :dim] = delta * gt
        block[:dim, dim:] = delta * np.eye(dim)
        return matrix_exponential(block)[:dim, dim:]
    if method == "trapezoid":
        if n < 1:
            raise ValueError("trapezoid needs at least one subinterval")
        step = matrix_exponential((delta / n) * gt)
        power = np.eye(dim)
        acc = 0.5 * np.eye(dim)
        for k in range(1, n + 1):
            power = power @ step
            acc += 0.5 * power if k == n else power
        return (delta / n) * acc
    if method == "taylor":
        if n < 0:
            raise ValueError("taylor order must be nonnegative")
        radius = float(np.max(np.abs(np.linalg.eigvals(delta * gt)))) if delta > 0 else 0.0
        if radius >= 1.0:
            raise NumericalRangeError(
                f"taylor expansion needs spectral radius below 1, got {radius:.3f}; "
                "use method='augmented' or a smaller window"
            )
        term = delta * np.eye(dim)
        acc = term.copy()
        for k in range(1, n + 1):
            term = (delta / (k + 1.0)) * (term @ gt)
            if not term.any():
                break
            acc += term
        return acc
    raise ValueError(f"unknown method {method!r}; expected augmented, trapezoid or taylor")


def dump_coordinate_list(G: DualMatrix, path: str) -> None:
    """Write G as text lines ``row_word column_word value`` for inspection."""
    coo = G.matrix.tocoo()
    lab = G.labeling

    def fmt(word: Word) -> str:
        return "(" + ",".join(str(x) for x in word) + ")"

    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# row_word column_word value\n")
        for r, c, v in sorted(zip(coo.row, coo.col, coo.data), key=lambda t: (t[1], t[0])):
            fh.write(f"{fmt(lab.unlabel(int(r)))} {fmt(lab.unlabel(int(c)))} {float(v)!r}\n")
