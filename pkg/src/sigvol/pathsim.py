"""Path simulation, truncated signatures and the offline sample store.

The augmented process Z = (t, X, B) is simulated by Euler-Maruyama on a
uniform grid with increments correlated through the Cholesky factor of rho.
Signatures of the piecewise-linear interpolation are composed segment by
segment with Chen's identity; the segment signature of a straight move is a
truncated tensor exponential, so the level-2 Stratonovich area comes out of
the composition by itself.

Everything the pricing layer needs per Monte Carlo path is computed once and
frozen into a :class:`SampleStore`: the level-(2n+1) signature over the
price-free letters, the Ito-corrected price contractions, and the upper
Cholesky factor of the forward-variance quadratic form. Stores can be written
to a single binary file and memory-mapped back unchanged.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .model import ConfigError, ModelConfig, PathGrid
from .sigtensor import (
    AlphabetError,
    CoeffTensor,
    Labeling,
    TruncationError,
    enumerate_words,
    tensor_dim,
    unvec,
)

STORE_MAGIC = b"SVSTORE1\n"
STORE_FORMAT = 1


class StoreError(RuntimeError):
    """A sample-store file is unreadable or belongs to different inputs."""


# -- random numbers ------------------------------------------------------------


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based generator for one path.

    Each path owns a Philox stream keyed by (seed, path index), so path i is
    reproducible no matter how paths are batched or scheduled.
    """
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(path_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _corr_factor(rho: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(rho)
    except np.linalg.LinAlgError:
        # semidefinite corner: factor through the eigendecomposition
        lam, vec_ = np.linalg.eigh(rho)
        return vec_ * np.sqrt(np.clip(lam, 0.0, None))


# -- simulation ----------------------------------------------------------------


def simulate_increments(
    cfg: ModelConfig, grid: PathGrid, path_indices: range, seed: int
) -> np.ndarray:
    """Per-step increments of (t, X, B), shape (paths, steps, d + 2).

    Column 0 is the constant time step; the factor columns hold the
    Euler-Maruyama moves kappa (theta - X) h + sigma dW; the last column is
    the price Brownian increment.
    """
    d, h = cfg.d, grid.h
    steps = grid.n_steps
    n_paths = len(path_indices)
    factor = _corr_factor(cfg.rho_matrix())

    z = np.empty((n_paths, steps, d + 1))
    for row, index in enumerate(path_indices):
        z[row] = path_rng(seed, index).standard_normal((steps, d + 1))
    dw = np.sqrt(h) * (z @ factor.T)

    out = np.empty((n_paths, steps, d + 2))
    out[:, :, 0] = h
    out[:, :, d + 1] = dw[:, :, d]
    kappa = np.asarray(cfg.kappa)
    theta = np.asarray(cfg.theta)
    sigma = np.asarray(cfg.sigma)
    x = np.broadcast_to(np.asarray(cfg.x0), (n_paths, d)).copy()
    for k in range(steps):
        move = kappa * (theta - x) * h + sigma * dw[:, k, :d]
        out[:, k, 1 : d + 1] = move
        x += move
    return out


def simulate_paths(cfg: ModelConfig, grid: PathGrid, n_paths: int, seed: int) -> np.ndarray:
    """Grid trajectories of (t, X, B), shape (n_paths, steps + 1, d + 2).

    Time runs through the grid exactly; X starts at x0 and B at zero.
    """
    if n_paths < 1:
        raise ConfigError(f"n_paths must be >= 1, got {n_paths}")
    inc = simulate_increments(cfg, grid, range(n_paths), seed)
    start = np.r_[0.0, cfg.x0, 0.0]
    out = np.empty((n_paths, grid.n_steps + 1, cfg.d + 2))
    out[:, 0] = start
    np.cumsum(inc, axis=1, out=out[:, 1:])
    out[:, 1:] += start
    return out


# -- signatures of piecewise-linear paths ---------------------------------------


def _level_offsets(alphabet: int, level: int) -> np.ndarray:
    """offsets[q] = first flat index of the length-q block; offsets[level+1] = dim."""
    sizes = alphabet ** np.arange(level + 1)
    return np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)


def segment_signature(increment: np.ndarray, level: int) -> CoeffTensor:
    """Signature of one straight segment: the truncated tensor exponential.

    The coefficient of a word is the product of the displaced coordinates
    divided by the factorial of the word length.
    """
    increment = np.asarray(increment, dtype=float)
    if increment.ndim != 1 or increment.size < 1:
        raise ValueError("increment must be a 1-d vector")
    if level < 0:
        raise ValueError("level must be >= 0")
    alphabet = increment.size
    blocks = _segment_blocks(increment[None, :], level)
    flat = np.concatenate([b[0] for b in blocks])
    return unvec(flat, enumerate_words(alphabet, level))


def _segment_blocks(dx: np.ndarray, level: int) -> list[np.ndarray]:
    """Length-graded blocks of exp(dx) for a batch of segments, block q has
    shape (paths, alphabet**q)."""
    n_paths, alphabet = dx.shape
    blocks = [np.ones((n_paths, 1))]
    for q in range(1, level + 1):
        nxt = (blocks[-1][:, :, None] * dx[:, None, :]).reshape(n_paths, -1) / q
        blocks.append(nxt)
    return blocks


def chen_signatures(
    increments: np.ndarray,
    level: int,
    snapshot_steps=None,
    engine: str = "numpy",
) -> np.ndarray:
    """Signatures of piecewise-linear paths given per-step increments.

    Parameters
    ----------
    increments : (paths, steps, alphabet) array.
    snapshot_steps : increasing step counts (1-based) at which to record the
        running signature; default is the final step only.
    engine : "numpy" (vectorized across paths, the reference), "numba"
        (per-path compiled kernel for large jobs) or "auto".

    Returns
    -------
    (len(snapshot_steps), paths, dim) array of flat signature rows in graded
    lexicographic word order.
    """
    increments = np.ascontiguousarray(increments, dtype=np.float64)
    if increments.ndim != 3:
        raise ValueError("increments must have shape (paths, steps, alphabet)")
    n_paths, steps, alphabet = increments.shape
    if level < 0:
        raise TruncationError("level must be >= 0")
    snaps = np.array([steps] if snapshot_steps is None else sorted(snapshot_steps), dtype=np.int64)
    if snaps.size == 0 or snaps[0] < 1 or snaps[-1] > steps or len(set(snaps.tolist())) != snaps.size:
        raise ValueError(f"snapshot steps must be distinct and within 1..{steps}")

    if engine == "auto":
        engine = "numba" if _numba_kernel() is not None else "numpy"
    if engine == "numba":
        kernel = _numba_kernel()
        if kernel is None:
            raise RuntimeError("numba engine requested but numba is not importable")
        out = np.zeros((snaps.size, n_paths, tensor_dim(alphabet, level)))
        kernel(increments, level, _level_offsets(alphabet, level), snaps, out)
        return out
    if engine != "numpy":
        raise ValueError(f"unknown engine {engine!r}")

    dim = tensor_dim(alphabet, level)
    out = np.empty((snaps.size, n_paths, dim))
    blocks = [np.ones((n_paths, 1))] + [
        np.zeros((n_paths, alphabet**q)) for q in range(1, level + 1)
    ]
    snap_set = {int(s): i for i, s in enumerate(snaps)}
    for k in range(steps):
        seg = _segment_blocks(increments[:, k, :], level)
        for target in range(level, 0, -1):
            acc = blocks[target]
            for q in range(1, target + 1):
                low = blocks[target - q]
                acc += (low[:, :, None] * seg[q][:, None, :]).reshape(n_paths, -1)
        slot = snap_set.get(k + 1)
        if slot is not None:
            np.concatenate(blocks, axis=1, out=out[slot])
    return out


def path_signature(path: np.ndarray, level: int, snapshot_steps=None):
    """Signature of a single piecewise-linear path given its node values.

    With ``snapshot_steps`` a list of tensors (running values) is returned,
    otherwise the terminal signature alone.
    """
    path = np.asarray(path, dtype=float)
    if path.ndim != 2 or path.shape[0] < 2:
        raise ValueError("path must be (nodes, alphabet) with at least two nodes")
    lab = enumerate_words(path.shape[1], level)
    rows = chen_signatures(np.diff(path, axis=0)[None], level, snapshot_steps)
    tensors = [unvec(rows[s, 0], lab) for s in range(rows.shape[0])]
    return tensors[-1] if snapshot_steps is None else tensors


_NUMBA_CACHE: list = []


def _numba_kernel():
    """Compile (once) the per-path kernel; None when numba is unavailable."""
    if _NUMBA_CACHE:
        return _NUMBA_CACHE[0]
    try:
        import numba
    except ImportError:
        _NUMBA_CACHE.append(None)
        return None

    @numba.njit(cache=False, fastmath=False)
    def kernel(inc, level, offsets, snaps, out):  # pragma: no cover - compiled
        n_paths, steps, alphabet = inc.shape
        dim = offsets[level + 1]
        sig = np.empty(dim)
        seg = np.empty(dim)
        for p in range(n_paths):
            sig[:] = 0.0
            sig[0] = 1.0
            seg[0] = 1.0
            snap_ptr = 0
            for k in range(steps):
                for q in range(1, level + 1):
                    prev, cur = offsets[q - 1], offsets[q]
                    idx = cur
                    for u in range(cur - prev):
                        base = seg[prev + u] / q
                        for a in range(alphabet):
                            seg[idx] = base * inc[p, k, a]
                            idx += 1
                for target in range(level, 0, -1):
                    toff = offsets[target]
                    for q in range(1, target + 1):
                        loff = offsets[target - q]
                        soff = offsets[q]
                        nlow = offsets[target - q + 1] - loff
                        nseg = offsets[q + 1] - soff
                        idx = toff
                        for u in range(nlow):
                            su = sig[loff + u]
                            if su != 0.0:
                                for v in range(nseg):
                                    sig[idx] += su * seg[soff + v]
                                    idx += 1
                            else:
                                idx += nseg
                if snap_ptr < snaps.size and k + 1 == snaps[snap_ptr]:
                    out[snap_ptr, p, :] = sig
                    snap_ptr += 1

    _NUMBA_CACHE.append(kernel)
    return kernel


# -- Ito-corrected price contractions -------------------------------------------


def contraction_matrix(family, labeling: Labeling):
    """Sparse rows of tensor coefficients: row i pairs family[i] against a
    flat signature in ``labeling`` order."""
    import scipy.sparse

    rows, cols, vals = [], [], []
    for i, tensor in enumerate(family):
        if tensor.alphabet != labeling.alphabet:
            raise AlphabetError(
                f"family member {i} over alphabet {tensor.alphabet}, labeling has {labeling.alphabet}"
            )
        if tensor.level > labeling.level:
            raise TruncationError(f"family member {i} exceeds labeling level {labeling.level}")
        for word, c in tensor.items():
            rows.append(i)
            cols.append(labeling.label(word))
            vals.append(c)
    return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(len(family), len(labeling)))


def ito_contractions(sig_z: CoeffTensor, e_tilde) -> np.ndarray:
    """Pair every corrected price word against one full-alphabet signature.

    ``e_tilde`` is the family from spxcore, ordered like the price-free
    labeling of the parameter tensor.
    """
    out = np.empty(len(e_tilde))
    for i, tensor in enumerate(e_tilde):
        if tensor.alphabet != sig_z.alphabet:
            raise AlphabetError(
                f"e_tilde[{i}] over alphabet {tensor.alphabet}, signature has {sig_z.alphabet}"
            )
        if tensor.level > sig_z.level:
            raise TruncationError(f"e_tilde[{i}] needs level {tensor.level}, signature has {sig_z.level}")
        out[i] = sum(c * sig_z.coeff(w) for w, c in tensor.items())
    return out


# -- sample store ----------------------------------------------------------------


@dataclass(frozen=True)
class SampleStore:
    """Immutable per-maturity Monte Carlo blocks for the pricing layer.

    For maturity index i:
      sigx[i]  (n_paths, dim(2n+1, price-free))  flat signatures of (t, X)
      ito[i]   (n_paths, n_params)               <corrected price words, Z_T>
      chol[i]  (n_paths, n_params, n_params)     upper factors U with
                                                 U U^T = Q(T_i, delta)
    """

    fingerprint: str
    cfg: ModelConfig
    grid: PathGrid
    maturities: tuple[float, ...]
    maturity_steps: tuple[int, ...]
    n_paths: int
    seed: int
    engine: str
    sigx: tuple[np.ndarray, ...]
    ito: tuple[np.ndarray, ...]
    chol: tuple[np.ndarray, ...]

    def maturity_index(self, t: float) -> int:
        for i, m in enumerate(self.maturities):
            if abs(m - t) < 0.5 * self.grid.h:
                return i
        raise StoreError(f"maturity {t} not in store (have {self.maturities})")

    @property
    def labeling_bfree(self) -> Labeling:
        return enumerate_words(self.cfg.alphabet_bfree, self.cfg.sig_level_bfree)

    @property
    def labeling_params(self) -> Labeling:
        return enumerate_words(self.cfg.alphabet_bfree, self.cfg.n)


def _config_payload(cfg: ModelConfig, grid: PathGrid) -> dict:
    return {
        "config": {
            "d": cfg.d,
            "n": cfg.n,
            "kappa": list(cfg.kappa),
            "theta": list(cfg.theta),
            "sigma": list(cfg.sigma),
            "rho": [list(r) for r in cfg.rho],
            "x0": list(cfg.x0),
            "delta": cfg.delta,
            "kind": cfg.kind,
        },
        "grid": {"horizon": grid.horizon, "steps_per_year": grid.steps_per_year},
    }


def store_fingerprint(
    cfg: ModelConfig, grid: PathGrid, maturities, n_paths: int, seed: int
) -> str:
    """Hash of everything that determines store contents (except the engine,
    which is recorded separately: it changes rounding, not identity)."""
    payload = _config_payload(cfg, grid)
    payload.update(
        {
            "format": STORE_FORMAT,
            "generator": "philox4x64 keyed by (seed, path)",
            "maturities": [float(t) for t in maturities],
            "n_paths": int(n_paths),
            "seed": int(seed),
            "levels": {"sigx": cfg.sig_level_bfree, "full": cfg.sig_level_full, "params": cfg.n},
            "word_order": "graded lexicographic, time letter first",
        }
    )
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def build_sample_store(
    cfg: ModelConfig,
    grid: PathGrid,
    maturities,
    n_paths: int,
    seed: int,
    *,
    path: str | None = None,
    chunk_size: int = 4096,
    engine: str = "numpy",
) -> SampleStore:
    """Simulate, sign and factor everything the pricing layer needs.

    Paths are processed in chunks; with ``path`` given the blocks are
    memory-mapped into the target file as they fill, which keeps the resident
    set independent of n_paths.
    """
    from . import spxcore, vixcore
    from .polyproc import build_G, build_coefficients, matrix_exponential

    if n_paths < 1:
        raise ConfigError("n_paths must be >= 1")
    snapped: list[float] = []
    steps: list[int] = []
    for t in maturities:
        idx, _ = grid.snap(float(t))
        if idx < 1:
            raise ConfigError(f"maturity {t} snaps to the grid origin")
        snapped.append(idx * grid.h)
        steps.append(idx)
    order = np.argsort(steps)
    if len(set(steps)) != len(steps):
        raise ConfigError("two maturities snap to the same grid step")
    snapped = [snapped[i] for i in order]
    steps = [steps[i] for i in order]
    if steps[-1] > grid.n_steps:
        raise ConfigError("maturities exceed the grid horizon")

    d = cfg.d
    lab_params = enumerate_words(cfg.alphabet_bfree, cfg.n)
    lab_big = enumerate_words(cfg.alphabet_bfree, cfg.sig_level_bfree)
    lab_full = enumerate_words(cfg.alphabet_full, cfg.sig_level_full)
    n_params = len(lab_params)
    dim_big = len(lab_big)

    G_big = build_G(build_coefficients(cfg, cfg.alphabet_bfree), cfg.sig_level_bfree, lab_big)
    window = matrix_exponential(cfg.delta * G_big.matrix.T.toarray()) - np.eye(dim_big)
    pair_rows = vixcore.pair_contraction_matrix(lab_params, lab_big)
    e_tilde = spxcore.e_tilde_coeffs(cfg)
    ito_rows = contraction_matrix(e_tilde, lab_full)

    fingerprint = store_fingerprint(cfg, grid, snapped, n_paths, seed)
    n_mat = len(snapped)

    if path is None:
        sigx = [np.empty((n_paths, dim_big)) for _ in range(n_mat)]
        ito = [np.empty((n_paths, n_params)) for _ in range(n_mat)]
        chol = [np.empty((n_paths, n_params, n_params)) for _ in range(n_mat)]
    else:
        sigx, ito, chol = _create_mapped_blocks(
            path, fingerprint, cfg, grid, snapped, steps, n_paths, seed, engine
        )

    for start in range(0, n_paths, chunk_size):
        stop = min(start + chunk_size, n_paths)
        inc = simulate_increments(cfg, grid, range(start, stop), seed)
        sig_rows = chen_signatures(inc[:, : steps[-1], : d + 1], cfg.sig_level_bfree, steps, engine)
        full_rows = chen_signatures(inc[:, : steps[-1], :], cfg.sig_level_full, steps, engine)
        for i in range(n_mat):
            sigx[i][start:stop] = sig_rows[i]
            ito[i][start:stop] = full_rows[i] @ ito_rows.T
            q = vixcore.assemble_q(sig_rows[i], window, pair_rows, n_params)
            chol[i][start:stop] = vixcore.cholesky_psd(q)

    if path is not None:
        for block in (*sigx, *ito, *chol):
            block.flush()
        return read_store(path)
    return SampleStore(
        fingerprint=fingerprint,
        cfg=cfg,
        grid=grid,
        maturities=tuple(snapped),
        maturity_steps=tuple(steps),
        n_paths=n_paths,
        seed=seed,
        engine=engine,
        sigx=tuple(sigx),
        ito=tuple(ito),
        chol=tuple(chol),
    )


def _header_bytes(store_like: dict) -> bytes:
    header = json.dumps(store_like, sort_keys=True, separators=(",", ":")).encode()
    return STORE_MAGIC + len(header).to_bytes(8, "little") + header


def _block_table(cfg: ModelConfig, n_paths: int, n_mat: int) -> list[dict]:
    dim_big = tensor_dim(cfg.alphabet_bfree, cfg.sig_level_bfree)
    n_params = tensor_dim(cfg.alphabet_bfree, cfg.n)
    table = []
    for kind, shape in (
        ("sigx", (n_paths, dim_big)),
        ("ito", (n_paths, n_params)),
        ("chol", (n_paths, n_params, n_params)),
    ):
        for i in range(n_mat):
            table.append({"kind": kind, "maturity": i, "shape": list(shape)})
    return table


def _assemble_header(
    fingerprint: str, cfg: ModelConfig, grid: PathGrid, maturities, steps, n_paths, seed, engine
) -> tuple[bytes, list[dict]]:
    table = _block_table(cfg, n_paths, len(maturities))
    payload = _config_payload(cfg, grid)
    payload.update(
        {
            "format": STORE_FORMAT,
            "fingerprint": fingerprint,
            "generator": "philox4x64 keyed by (seed, path)",
            "engine": engine,
            "maturities": [float(t) for t in maturities],
            "maturity_steps": [int(s) for s in steps],
            "n_paths": int(n_paths),
            "seed": int(seed),
            "levels": {"sigx": cfg.sig_level_bfree, "full": cfg.sig_level_full, "params": cfg.n},
            "word_order": "graded lexicographic, time letter first",
            "dtype": "<f8",
            "blocks": table,
        }
    )
    # offsets are relative to the end of the header
    offset = 0
    for entry in table:
        entry["offset"] = offset
        offset += int(np.prod(entry["shape"])) * 8
    return _header_bytes(payload), table


def _create_mapped_blocks(path, fingerprint, cfg, grid, maturities, steps, n_paths, seed, engine):
    header, table = _assemble_header(
        fingerprint, cfg, grid, maturities, steps, n_paths, seed, engine
    )
    total = len(header) + sum(int(np.prod(e["shape"])) * 8 for e in table)
    with open(path, "wb") as fh:
        fh.truncate(total)
        fh.write(header)
    base = len(header)
    blocks: dict[str, list[np.ndarray]] = {"sigx": [], "ito": [], "chol": []}
    for entry in table:
        mm = np.memmap(
            path, dtype="<f8", mode="r+", offset=base + entry["offset"], shape=tuple(entry["shape"])
        )
        blocks[entry["kind"]].append(mm)
    return blocks["sigx"], blocks["ito"], blocks["chol"]


def write_store(store: SampleStore, path: str) -> None:
    """Serialize a store; the file layout is header + contiguous <f8 blocks."""
    header, table = _assemble_header(
        store.fingerprint,
        store.cfg,
        store.grid,
        store.maturities,
        store.maturity_steps,
        store.n_paths,
        store.seed,
        store.engine,
    )
    arrays = {"sigx": store.sigx, "ito": store.ito, "chol": store.chol}
    with open(path, "wb") as fh:
        fh.write(header)
        for entry in table:
            block = np.ascontiguousarray(arrays[entry["kind"]][entry["maturity"]], dtype="<f8")
            fh.write(block.tobytes())


def read_store(path: str, fingerprint: str | None = None) -> SampleStore:
    """Memory-map a store file back; arrays are read-only views.

    A caller holding the fingerprint of the store it expects passes it in;
    any mismatch (or a header inconsistent with its own content hash) is a
    hard error, never a warning.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(STORE_MAGIC))
        if magic != STORE_MAGIC:
            raise StoreError(f"{path} is not a sample store (bad magic {magic!r})")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode())
        base = fh.tell()
    if header.get("format") != STORE_FORMAT:
        raise StoreError(f"unsupported store format {header.get('format')!r}")
    c = header["config"]
    cfg = ModelConfig(
        d=c["d"], n=c["n"], kappa=tuple(c["kappa"]), theta=tuple(c["theta"]),
        sigma=tuple(c["sigma"]), rho=tuple(tuple(r) for r in c["rho"]),
        x0=tuple(c["x0"]), delta=c["delta"], kind=c["kind"],
    )
    grid = PathGrid(horizon=header["grid"]["horizon"], steps_per_year=header["grid"]["steps_per_year"])
    expected = store_fingerprint(cfg, grid, header["maturities"], header["n_paths"], header["seed"])
    if header["fingerprint"] != expected:
        raise StoreError(
            f"store header inconsistent: recorded fingerprint {header['fingerprint'][:12]}..., "
            f"recomputed {expected[:12]}..."
        )
    if fingerprint is not None and fingerprint != header["fingerprint"]:
        raise StoreError(
            f"store fingerprint mismatch: expected {fingerprint[:12]}..., "
            f"file has {header['fingerprint'][:12]}..."
        )
    blocks: dict[str, list[np.ndarray]] = {"sigx": [], "ito": [], "chol": []}
    for entry in header["blocks"]:
        mm = np.memmap(
            path, dtype="<f8", mode="r", offset=base + entry["offset"], shape=tuple(entry["shape"])
        )
        blocks[entry["kind"]].append(mm)
    return SampleStore(
        fingerprint=header["fingerprint"],
        cfg=cfg,
        grid=grid,
        maturities=tuple(float(t) for t in header["maturities"]),
        maturity_steps=tuple(int(s) for s in header["maturity_steps"]),
        n_paths=int(header["n_paths"]),
        seed=int(header["seed"]),
        engine=header.get("engine", "numpy"),
        sigx=tuple(blocks["sigx"]),
        ito=tuple(blocks["ito"]),
        chol=tuple(blocks["chol"]),
    )
