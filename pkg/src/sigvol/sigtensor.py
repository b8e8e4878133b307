"""Truncated tensor algebra over a finite alphabet.

Words (multi-indices) over letters ``{0, ..., A-1}`` index the components of a
truncated tensor series. This module provides word enumeration with a graded
lexicographic labeling, sparse coefficient tensors, concatenation, shuffle
products, and the dense ``vec``/``unvec`` boundary used by the matrix layer.

Letter 0 is reserved for the time coordinate by every caller in this package,
and the labeling puts it first inside each length block, so labels are stable
across runs and can be persisted in sample-store headers.
"""

from __future__ import annotations

from functools import lru_cache
from math import comb
from typing import Iterable, Iterator, Mapping

import numpy as np

Word = tuple[int, ...]

EMPTY_WORD: Word = ()

#: Guard against nonsensical dimension blowups (A_n beyond this is refused).
MAX_DIMENSION = 50_000_000


class AlphabetError(ValueError):
    """Operands live over different alphabets."""


class TruncationError(ValueError):
    """An operation would produce words beyond the permitted level."""


def tensor_dim(alphabet: int, level: int) -> int:
    """Number of words of length <= level over ``alphabet`` letters.

    Equals (A**(level+1) - 1) / (A - 1) for A > 1 and level + 1 for A = 1.
    """
    if alphabet < 1 or level < 0:
        raise ValueError(f"need alphabet >= 1 and level >= 0, got {alphabet}, {level}")
    if alphabet == 1:
        return level + 1
    dim = (alphabet ** (level + 1) - 1) // (alphabet - 1)
    if dim > MAX_DIMENSION:
        raise ValueError(
            f"word count {dim} for alphabet={alphabet}, level={level} "
            f"exceeds the supported maximum {MAX_DIMENSION}"
        )
    return dim


class Labeling:
    """Graded lexicographic bijection between words and ``{0, ..., A_n - 1}``.

    Shorter words come first; within a length block, words are ordered
    lexicographically with letter 0 smallest. The empty word has label 0.
    """

    __slots__ = ("alphabet", "level", "_words", "_index")

    def __init__(self, alphabet: int, level: int):
        dim = tensor_dim(alphabet, level)
        words: list[Word] = [EMPTY_WORD]
        for length in range(1, level + 1):
            block: Iterable[Word]
            if length == 1:
                block = ((a,) for a in range(alphabet))
            else:
                block = (
                    w + (a,)
                    for w in words[_offset(alphabet, length - 1) : _offset(alphabet, length)]
                    for a in range(alphabet)
                )
            words.extend(block)
        assert len(words) == dim
        self.alphabet = alphabet
        self.level = level
        self._words = tuple(words)
        self._index = {w: k for k, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self._words)

    def __iter__(self) -> Iterator[Word]:
        return iter(self._words)

    @property
    def words(self) -> tuple[Word, ...]:
        return self._words

    def label(self, word: Word) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise KeyError(f"word {word} not covered by alphabet={self.alphabet}, level={self.level}") from None

    def unlabel(self, k: int) -> Word:
        return self._words[k]

    def words_of_length(self, length: int) -> tuple[Word, ...]:
        lo = _offset(self.alphabet, length)
        hi = _offset(self.alphabet, length + 1)
        return self._words[lo:hi]


def _offset(alphabet: int, length: int) -> int:
    """Label of the first word of the given length."""
    if length == 0:
        return 0
    if alphabet == 1:
        return length
    return (alphabet**length - 1) // (alphabet - 1)


def enumerate_words(alphabet: int, level: int) -> Labeling:
    """Build the graded-lexicographic labeling of all words up to ``level``."""
    return Labeling(alphabet, level)


class CoeffTensor:
    """Sparse element of the truncated tensor algebra.

    Maps words to real coefficients; absent words are zero. Instances are
    treated as immutable values: all arithmetic returns new tensors and the
    coefficient mapping is copied on construction.
    """

    __slots__ = ("alphabet", "level", "_coeffs")

    def __init__(self, alphabet: int, level: int, coeffs: Mapping[Word, float] | None = None):
        if alphabet < 1 or level < 0:
            raise ValueError(f"need alphabet >= 1 and level >= 0, got {alphabet}, {level}")
        clean: dict[Word, float] = {}
        for word, c in (coeffs or {}).items():
            word = tuple(word)
            if len(word) > level:
                raise TruncationError(f"word {word} exceeds level {level}")
            if any(a < 0 or a >= alphabet for a in word):
                raise AlphabetError(f"word {word} uses letters outside 0..{alphabet - 1}")
            if c != 0.0:
                clean[word] = float(c)
        self.alphabet = alphabet
        self.level = level
        self._coeffs = clean

    # -- basic protocol ----------------------------------------------------

    def coeff(self, word: Word) -> float:
        return self._coeffs.get(tuple(word), 0.0)

    def items(self):
        return self._coeffs.items()

    def __len__(self) -> int:
        return len(self._coeffs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CoeffTensor):
            return NotImplemented
        return self.alphabet == other.alphabet and self._coeffs == other._coeffs

    def __hash__(self):
        raise TypeError("CoeffTensor is not hashable")

    def __repr__(self) -> str:
        body = " + ".join(f"{c:g}*e{w}" for w, c in sorted(self._coeffs.items(), key=_grade_key))
        return f"CoeffTensor(A={self.alphabet}, n={self.level}: {body or '0'})"

    # -- linear structure --------------------------------------------------

    def __add__(self, other: "CoeffTensor") -> "CoeffTensor":
        self._check_alphabet(other)
        out = dict(self._coeffs)
        for w, c in other.items():
            out[w] = out.get(w, 0.0) + c
        return CoeffTensor(self.alphabet, max(self.level, other.level), out)

    def __sub__(self, other: "CoeffTensor") -> "CoeffTensor":
        return self + (-1.0) * other

    def __mul__(self, scalar: float) -> "CoeffTensor":
        return CoeffTensor(self.alphabet, self.level, {w: c * scalar for w, c in self.items()})

    __rmul__ = __mul__

    def _check_alphabet(self, other: "CoeffTensor") -> None:
        if self.alphabet != other.alphabet:
            raise AlphabetError(f"alphabet mismatch: {self.alphabet} vs {other.alphabet}")

    @classmethod
    def basis(cls, alphabet: int, word: Word, level: int | None = None) -> "CoeffTensor":
        """The basis tensor e_word with coefficient 1."""
        word = tuple(word)
        return cls(alphabet, len(word) if level is None else level, {word: 1.0})

    @classmethod
    def zero(cls, alphabet: int, level: int = 0) -> "CoeffTensor":
        return cls(alphabet, level, {})


def _grade_key(item):
    word = item[0]
    return (len(word), word)


@lru_cache(maxsize=200_000)
def _shuffle_words_cached(a: Word, b: Word) -> tuple[tuple[Word, int], ...]:
    if not a:
        return ((b, 1),)
    if not b:
        return ((a, 1),)
    out: dict[Word, int] = {}
    # e_a sh e_b = (e_{a'} sh e_b) x e_{last(a)} + (e_a sh e_{b'}) x e_{last(b)}
    for word, mult in _shuffle_words_cached(a[:-1], b):
        key = word + (a[-1],)
        out[key] = out.get(key, 0) + mult
    for word, mult in _shuffle_words_cached(a, b[:-1]):
        key = word + (b[-1],)
        out[key] = out.get(key, 0) + mult
    return tuple(out.items())


def shuffle_words(a: Word, b: Word) -> dict[Word, int]:
    """Shuffle product of two basis words, with exact integer coefficients.

    The result is supported on words of length ``len(a) + len(b)`` and its
    coefficients sum to ``comb(len(a) + len(b), len(a))``, the number of
    order-preserving interleavings.
    """
    return dict(_shuffle_words_cached(tuple(a), tuple(b)))


def shuffle(u: CoeffTensor, v: CoeffTensor, level: int | None = None) -> CoeffTensor:
    """Bilinear extension of the word shuffle.

    Without ``level`` the result keeps every word (natural level
    ``u.level + v.level``); passing ``level`` is the explicit permission to
    drop longer words. Words are never dropped silently.
    """
    u._check_alphabet(v)
    natural = u.level + v.level
    target = natural if level is None else level
    out: dict[Word, float] = {}
    for wa, ca in u.items():
        for wb, cb in v.items():
            if level is not None and len(wa) + len(wb) > level:
                continue
            c = ca * cb
            for word, mult in _shuffle_words_cached(wa, wb):
                out[word] = out.get(word, 0.0) + c * mult
    return CoeffTensor(u.alphabet, target, out)


def concat(a: Word, b: Word) -> Word:
    """Concatenation of two words."""
    return tuple(a) + tuple(b)


def concat_tensor(u: CoeffTensor, word: Word, level: int | None = None) -> CoeffTensor:
    """Right-concatenate every key of ``u`` by ``word``.

    Raises :class:`TruncationError` if the result would exceed ``level``
    (when given); there is no silent dropping.
    """
    word = tuple(word)
    natural = u.level + len(word)
    if level is not None and natural > level:
        raise TruncationError(
            f"concatenation reaches level {natural}, beyond permitted {level}"
        )
    out = {w + word: c for w, c in u.items()}
    return CoeffTensor(u.alphabet, natural, out)


def tensor_product(u: CoeffTensor, v: CoeffTensor, level: int | None = None) -> CoeffTensor:
    """Concatenation (non-commutative) product of two tensors.

    The coefficient of a word w sums u_a * v_b over every split w = a + b.
    Passing ``level`` truncates, which is the group operation used when
    composing signatures of adjoining path pieces; without it nothing is
    dropped.
    """
    u._check_alphabet(v)
    natural = u.level + v.level
    target = natural if level is None else level
    out: dict[Word, float] = {}
    for wa, ca in u.items():
        for wb, cb in v.items():
            if len(wa) + len(wb) > target:
                continue
            key = wa + wb
            out[key] = out.get(key, 0.0) + ca * cb
    return CoeffTensor(u.alphabet, target, out)


def interleaving_count(a: Word, b: Word) -> int:
    """Number of shuffles of two words, counted with multiplicity."""
    return comb(len(a) + len(b), len(a))


def vec(u: CoeffTensor, lab: Labeling) -> np.ndarray:
    """Dense coefficient array of ``u`` in the given labeling (zeros filled)."""
    if u.level > lab.level:
        raise TruncationError(f"tensor level {u.level} exceeds labeling level {lab.level}")
    if u.alphabet != lab.alphabet:
        raise AlphabetError(f"alphabet mismatch: {u.alphabet} vs {lab.alphabet}")
    out = np.zeros(len(lab))
    for word, c in u.items():
        out[lab.label(word)] = c
    return out


def unvec(arr: np.ndarray, lab: Labeling) -> CoeffTensor:
    """Inverse of :func:`vec`: rebuild the sparse tensor from a dense array."""
    arr = np.asarray(arr)
    if arr.shape != (len(lab),):
        raise ValueError(f"expected shape ({len(lab)},), got {arr.shape}")
    coeffs = {lab.unlabel(k): float(arr[k]) for k in np.flatnonzero(arr)}
    return CoeffTensor(lab.alphabet, lab.level, coeffs)
