"""Command-line front end tying the pipeline together.

Five subcommands: ``simulate`` writes a sample store, ``calibrate`` fits
parameters to a quote book, ``price`` tabulates model prices and implied
vols on the configured strike grids, ``timeseries`` samples joint
(spot, VIX, variance) trajectories without a store, and ``ingest-check``
validates a quote CSV. Configuration is one JSON document; the bundled
presets are selectable by name with ``--preset``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .calib import (
    CalibError,
    PricingContext,
    Quote,
    QuoteBook,
    VolBoundsError,
    bs_call,
    build_report,
    calibrate_rolling,
    implied_vol,
    initial_guess,
    loss_joint,
    loss_vix,
    mc_future,
    mc_price,
    optimize,
)
from .model import ConfigError, ModelConfig, PathGrid
from .pathsim import (
    StoreError,
    build_sample_store,
    chen_signatures,
    contraction_matrix,
    read_store,
    simulate_increments,
    store_fingerprint,
)
from .polyproc import NumericalRangeError, build_G, build_coefficients, propagate_rows
from .sigtensor import enumerate_words
from .spxcore import e_tilde_coeffs, pair_weights
from .vixcore import AssemblyError, ParamSlices, pair_contraction_matrix

log = logging.getLogger(__name__)

QUOTE_COLUMNS = (
    "instrument", "maturity", "strike", "bid", "ask",
    "iv_bid", "iv_ask", "future", "rate", "dividend",
)
MODES = ("vix", "joint", "rolling")
TS_STEPS_PER_YEAR = 4380  # 12 grid points per calendar day
TS_SEED_OFFSET = 7919  # keeps trajectory noise disjoint from store noise


class IngestError(ValueError):
    """A quote CSV that cannot be turned into a book."""


# -- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class MarketLeg:
    """Maturities and per-maturity moneyness windows for one instrument."""

    maturities: tuple[float, ...]
    moneyness: tuple[tuple[float, float], ...]
    n_strikes: int = 9

    def __post_init__(self):
        if not self.maturities:
            raise ConfigError("a market leg needs at least one maturity")
        if len(self.moneyness) != len(self.maturities):
            raise ConfigError(
                f"need one moneyness window per maturity, got {len(self.moneyness)} "
                f"for {len(self.maturities)} maturities"
            )
        for lo, hi in self.moneyness:
            if not 0 < lo < hi:
                raise ConfigError(f"moneyness window must satisfy 0 < lo < hi, got ({lo}, {hi})")
        if self.n_strikes < 1:
            raise ConfigError("n_strikes must be >= 1")
        if list(self.maturities) != sorted(set(self.maturities)):
            raise ConfigError("maturities must be strictly increasing")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    grid: PathGrid
    n_paths: int
    engine: str
    spx: MarketLeg | None
    vix: MarketLeg | None
    rate: float
    dividend: float
    mode: str
    beta: int
    lam: float | None
    budget: int
    n_draws: int
    n_boxes: int
    seed: int
    variate: bool
    n_vr: int | None
    method: str
    out: str

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1")
        if self.mode in ("joint", "rolling"):
            if self.lam is None or not 0.0 < self.lam < 1.0:
                raise ConfigError(
                    f"{self.mode} mode needs lam strictly inside (0, 1), got {self.lam}"
                )
        if self.vix is None:
            raise ConfigError("every mode prices VIX options; the vix market leg is required")
        if self.mode in ("joint", "rolling") and self.spx is None:
            raise ConfigError(f"{self.mode} mode needs an spx market leg")
        horizon = self.grid.horizon
        for leg in (self.spx, self.vix):
            if leg is None:
                continue
            beyond = [t for t in leg.maturities if t > horizon + 1e-12]
            if beyond:
                raise ConfigError(
                    f"maturities {beyond} exceed the grid horizon {horizon}; "
                    f"extend grid.horizon"
                )

    def maturities(self) -> tuple[float, ...]:
        """Sorted union of both legs' maturities."""
        every: set[float] = set()
        for leg in (self.spx, self.vix):
            if leg is not None:
                every.update(leg.maturities)
        return tuple(sorted(every))

    def snapped_maturities(self) -> tuple[float, ...]:
        """Maturities moved onto the simulation grid, as the store records them."""
        steps = sorted(self.grid.snap(t)[0] for t in self.maturities())
        return tuple(k * self.grid.h for k in steps)

    def expected_fingerprint(self) -> str:
        return store_fingerprint(
            self.model, self.grid, self.snapped_maturities(), self.n_paths, self.seed
        )

    def legs(self):
        for instrument, leg in (("SPX", self.spx), ("VIX", self.vix)):
            if leg is not None:
                yield instrument, leg


def _require(block: dict, key: str, where: str):
    if key not in block:
        raise ConfigError(f"missing {where}.{key} in config")
    return block[key]


def _parse_leg(block: dict | None, where: str) -> MarketLeg | None:
    if block is None:
        return None
    maturities = tuple(float(t) for t in _require(block, "maturities", where))
    raw = _require(block, "moneyness", where)
    if raw and isinstance(raw[0], (int, float)):
        raw = [raw] * len(maturities)
    moneyness = tuple((float(lo), float(hi)) for lo, hi in raw)
    return MarketLeg(maturities, moneyness, int(block.get("n_strikes", 9)))


def parse_config(doc: dict) -> RunConfig:
    for name in ("model", "grid", "market", "run"):
        if name not in doc:
            raise ConfigError(f"config is missing the {name!r} block")
    mb, gb, kb, rb = doc["model"], doc["grid"], doc["market"], doc["run"]
    model = ModelConfig(
        d=int(_require(mb, "d", "model")),
        n=int(_require(mb, "n", "model")),
        kappa=tuple(float(x) for x in _require(mb, "kappa", "model")),
        theta=tuple(float(x) for x in _require(mb, "theta", "model")),
        sigma=tuple(float(x) for x in _require(mb, "sigma", "model")),
        rho=tuple(tuple(float(x) for x in row) for row in _require(mb, "rho", "model")),
        x0=tuple(float(x) for x in _require(mb, "x0", "model")),
        delta=float(mb.get("delta", 1.0 / 12.0)),
        kind=mb.get("kind", "ou"),
    )
    grid = PathGrid(
        horizon=float(_require(gb, "horizon", "grid")),
        steps_per_year=int(gb.get("steps_per_year", 2520)),
    )
    lam = rb.get("lam")
    return RunConfig(
        model=model,
        grid=grid,
        n_paths=int(_require(gb, "n_paths", "grid")),
        engine=gb.get("engine", "auto"),
        spx=_parse_leg(kb.get("spx"), "market.spx"),
        vix=_parse_leg(kb.get("vix"), "market.vix"),
        rate=float(kb.get("rate", 0.0)),
        dividend=float(kb.get("dividend", 0.0)),
        mode=_require(rb, "mode", "run"),
        beta=int(rb.get("beta", 1)),
        lam=None if lam is None else float(lam),
        budget=int(rb.get("budget", 2000)),
        n_draws=int(rb.get("n_draws", 200)),
        n_boxes=int(rb.get("n_boxes", 4)),
        seed=int(rb.get("seed", 0)),
        variate=bool(rb.get("variate", True)),
        n_vr=None if rb.get("n_vr") is None else int(rb["n_vr"]),
        method=rb.get("method", "quasi-newton"),
        out=rb.get("out", "out"),
    )


def preset_names() -> tuple[str, ...]:
    root = resources.files("sigvol") / "presets"
    return tuple(sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json")))


def load_preset(name: str) -> RunConfig:
    root = resources.files("sigvol") / "presets"
    candidate = root / f"{name}.json"
    if not candidate.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return parse_config(json.loads(candidate.read_text()))


def load_config(path: str) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err}")
    return parse_config(doc)


def _config_from_args(args) -> RunConfig:
    if getattr(args, "preset", None):
        return load_preset(args.preset)
    if getattr(args, "config", None):
        return load_config(args.config)
    raise ConfigError("provide --config FILE or --preset NAME")


# -- quote ingestion ---------------------------------------------------------------


def ingest_quotes(path: str) -> QuoteBook:
    """Read a quote CSV into a book.

    Rows with bid above ask are dropped with a logged line number; any other
    malformed row aborts with the offending line. A file with no data rows
    yields an empty book and a warning.
    """
    try:
        handle = open(path, newline="")
    except OSError as err:
        raise IngestError(f"cannot read quotes {path}: {err}")
    with handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            log.warning("quote file %s is empty; continuing with an empty book", path)
            return QuoteBook([])
        missing = [c for c in QUOTE_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise IngestError(f"{path} is missing columns: {', '.join(missing)}")
        quotes: list[Quote] = []
        crossed: list[int] = []
        for line, row in enumerate(reader, start=2):
            try:
                fields = {c: row[c] for c in QUOTE_COLUMNS}
                instrument = fields.pop("instrument").strip()
                values = {k: float(v) for k, v in fields.items()}
            except (AttributeError, TypeError, ValueError) as err:
                raise IngestError(f"{path} line {line}: malformed row ({err})")
            if values["bid"] > values["ask"]:
                crossed.append(line)
                continue
            try:
                quotes.append(Quote(instrument=instrument, **values))
            except CalibError as err:
                raise IngestError(f"{path} line {line}: {err}")
    if crossed:
        log.warning(
            "rejected %d crossed row(s) (bid > ask) in %s at line(s) %s",
            len(crossed), path, ", ".join(str(n) for n in crossed),
        )
    if not quotes:
        log.warning("no usable quote rows in %s; continuing with an empty book", path)
    return QuoteBook(quotes)


# -- table emission ----------------------------------------------------------------


def _cell(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def _scale_for(instrument: str, vix_scale_100: bool) -> float:
    return 100.0 if (vix_scale_100 and instrument == "VIX") else 1.0


def write_quote_fits(path: Path, fits, fingerprint: str, vix_scale_100: bool = False) -> None:
    header = (
        "instrument", "maturity", "strike", "bid", "ask", "price_model", "price_se",
        "iv_bid", "iv_ask", "iv_model", "inside", "fingerprint",
    )
    rows = []
    for f in fits:
        s = _scale_for(f.instrument, vix_scale_100)
        rows.append((
            f.instrument, f.maturity, s * f.strike, s * f.bid, s * f.ask,
            s * f.price_model, s * f.price_se, f.iv_bid, f.iv_ask, f.iv_model,
            f.inside, fingerprint,
        ))
    _write_csv(path, header, rows)


def write_futures_fits(path: Path, fits, fingerprint: str, vix_scale_100: bool = False) -> None:
    s = 100.0 if vix_scale_100 else 1.0
    header = ("maturity", "market", "model", "eps", "fingerprint")
    rows = [(f.maturity, s * f.market, s * f.model, f.error, fingerprint) for f in fits]
    _write_csv(path, header, rows)


def write_trace(path: Path, stage_traces, fingerprint: str) -> None:
    header = ("stage", "evaluation", "best_loss", "fingerprint")
    rows = []
    for stage, trace in enumerate(stage_traces, start=1):
        for i, value in enumerate(np.asarray(trace).ravel(), start=1):
            rows.append((stage, i, float(value), fingerprint))
    _write_csv(path, header, rows)


def write_params(path: Path, params, metadata: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(params, ParamSlices):
        doc = {
            "kind": "slices",
            "maturities": [float(t) for t in params.maturities],
            "ells": [[float(x) for x in ell] for ell in params.ells],
        }
    else:
        doc = {"kind": "flat", "ell": [float(x) for x in np.asarray(params).ravel()]}
    doc["metadata"] = metadata
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_params(path: str):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read parameters {path}: {err}")
    kind = doc.get("kind")
    if kind == "flat":
        return np.asarray(doc["ell"], dtype=float)
    if kind == "slices":
        return ParamSlices(
            tuple(float(t) for t in doc["maturities"]),
            [np.asarray(e, dtype=float) for e in doc["ells"]],
        )
    raise ConfigError(f"parameters {path}: kind must be 'flat' or 'slices', got {kind!r}")


def write_synthetic_quotes(path: Path, quotes) -> None:
    rows = [
        (
            q.instrument, q.maturity, q.strike, q.bid, q.ask,
            q.iv_bid, q.iv_ask, q.future, q.rate, q.dividend,
        )
        for q in quotes
    ]
    _write_csv(path, QUOTE_COLUMNS, rows)


# -- commands ----------------------------------------------------------------------


def _read_matching_store(config: RunConfig, path: str):
    expected = config.expected_fingerprint()
    store = read_store(path, expected)
    log.info("store %s fingerprint %s", path, store.fingerprint)
    return store


def _check_book_coverage(store, book: QuoteBook) -> None:
    for instrument in ("SPX", "VIX"):
        for t in book.maturities(instrument):
            store.maturity_index(t)


def cmd_simulate(args) -> int:
    config = _config_from_args(args)
    store = build_sample_store(
        config.model,
        config.grid,
        config.maturities(),
        config.n_paths,
        config.seed,
        path=args.store,
        engine=config.engine,
    )
    log.info("wrote store %s", args.store)
    print(f"store {args.store} fingerprint {store.fingerprint}")
    return 0


def _flat_calibration(config: RunConfig, book: QuoteBook, ctx: PricingContext):
    beta, variate = config.beta, config.variate
    if config.mode == "vix":
        objective = lambda ell: loss_vix(ell, book, ctx, beta=beta, variate=variate)
    else:
        objective = lambda ell: loss_joint(
            ell, book, ctx, lam=config.lam, beta=beta, variate=variate
        )
    start = initial_guess(
        objective, ctx.n_params, n_draws=config.n_draws, n_boxes=config.n_boxes,
        seed=config.seed + 1,
    )
    result = optimize(
        objective, start, budget=config.budget, method=config.method, seed=config.seed + 2
    )
    return result.ell, result.best_loss, [result.trace], result.n_evals


def cmd_calibrate(args) -> int:
    config = _config_from_args(args)
    store = _read_matching_store(config, args.store)
    book = ingest_quotes(args.quotes)
    if len(book) == 0:
        raise CalibError("the quote book is empty; nothing to calibrate")
    _check_book_coverage(store, book)
    ctx = PricingContext(store)

    if config.mode == "rolling":
        rolled = calibrate_rolling(
            book, ctx,
            lam=config.lam, beta=config.beta, budget=config.budget,
            seed=config.seed + 1, n_draws=config.n_draws, n_boxes=config.n_boxes,
            variate=config.variate, method=config.method,
        )
        params = rolled.slices
        final_loss = rolled.final_loss
        traces = [r.trace for r in rolled.stage_results]
        n_evals = rolled.n_evals
    else:
        params, final_loss, traces, n_evals = _flat_calibration(config, book, ctx)

    metadata = {
        "mode": config.mode,
        "beta": config.beta,
        "lam": config.lam,
        "seed": config.seed,
        "budget": config.budget,
        "variate": config.variate,
        "method": config.method,
        "n_evals": int(n_evals),
        "final_loss": float(final_loss),
        "fingerprint": store.fingerprint,
    }
    report = build_report(
        params, book, ctx,
        final_loss=final_loss, variate=config.variate, metadata=metadata,
    )
    out = Path(args.out or config.out)
    write_quote_fits(out / "quotes_fit.csv", report.quote_fits, store.fingerprint, args.vix_scale_100)
    write_futures_fits(out / "futures_fit.csv", report.futures_fits, store.fingerprint, args.vix_scale_100)
    write_trace(out / "trace.csv", traces, store.fingerprint)
    write_params(out / "params.json", params, metadata)
    print(f"final loss {final_loss!r}")
    print(f"inside-spread fraction {report.inside_fraction:.4f}")
    for fit in report.futures_fits:
        print(f"futures T={fit.maturity:g} eps {fit.error:.3e}")
    print(f"wrote {out / 'quotes_fit.csv'}, futures_fit.csv, trace.csv, params.json")
    return 0


def _grid_quotes(config: RunConfig, ctx: PricingContext, params, spread_vol: float):
    """Synthetic book on the configured moneyness grids, priced from ``params``.

    Strikes resolve against the model future of each maturity. Strikes whose
    price cannot be inverted (no time value at the model parameters) are
    skipped with a warning.
    """
    quotes: list[Quote] = []
    fits = []
    skipped = 0
    rate, dividend = config.rate, config.dividend
    for instrument, leg in config.legs():
        for t, (lo, hi) in zip(leg.maturities, leg.moneyness):
            future, _ = mc_future(ctx, instrument, params, t, r=rate, q=dividend)
            xi = math.exp(-rate * t) * future
            for k in np.linspace(lo * future, hi * future, leg.n_strikes):
                strike = float(k)
                price, se = mc_price(
                    ctx, instrument, params, t, strike,
                    r=rate, q=dividend, variate=config.variate, n_vr=config.n_vr,
                )
                try:
                    iv = implied_vol(price, xi, strike, t, rate)
                except VolBoundsError:
                    skipped += 1
                    continue
                iv_bid, iv_ask = iv - spread_vol / 2, iv + spread_vol / 2
                if iv_bid <= 0:
                    skipped += 1
                    continue
                quote = Quote(
                    instrument=instrument, maturity=t, strike=strike,
                    bid=bs_call(xi, strike, iv_bid, t, rate),
                    ask=bs_call(xi, strike, iv_ask, t, rate),
                    iv_bid=iv_bid, iv_ask=iv_ask, future=future,
                    rate=rate, dividend=dividend,
                )
                quotes.append(quote)
                fits.append((quote, price, se, iv, future))
    if skipped:
        log.warning("skipped %d strike(s) without invertible time value", skipped)
    return quotes, fits


def cmd_price(args) -> int:
    config = _config_from_args(args)
    store = _read_matching_store(config, args.store)
    params = load_params(args.params)
    ctx = PricingContext(store)
    quotes, priced = _grid_quotes(config, ctx, params, args.spread_vol)

    from .calib import FuturesFit, QuoteFit  # local: keeps the public import block lean

    quote_fits = [
        QuoteFit(
            instrument=q.instrument, maturity=q.maturity, strike=q.strike,
            bid=q.bid, ask=q.ask, iv_bid=q.iv_bid, iv_ask=q.iv_ask,
            iv_model=iv, price_model=price, price_se=se, inside=bool(q.iv_bid <= iv <= q.iv_ask),
        )
        for q, price, se, iv, _ in priced
    ]
    seen: dict[float, float] = {}
    for q, _, _, _, future in priced:
        if q.instrument == "VIX":
            seen.setdefault(q.maturity, future)
    futures_fits = [
        FuturesFit(maturity=t, market=f, model=f, error=0.0) for t, f in sorted(seen.items())
    ]

    out = Path(args.out or config.out)
    write_quote_fits(out / "quotes_fit.csv", quote_fits, store.fingerprint, args.vix_scale_100)
    write_futures_fits(out / "futures_fit.csv", futures_fits, store.fingerprint, args.vix_scale_100)
    write_synthetic_quotes(out / "synthetic_quotes.csv", quotes)
    print(f"priced {len(quote_fits)} contracts over {len(futures_fits)} VIX maturities")
    print(f"wrote {out / 'quotes_fit.csv'}, futures_fit.csv, synthetic_quotes.csv")
    return 0


def cmd_timeseries(args) -> int:
    config = _config_from_args(args)
    params = load_params(args.params)
    if isinstance(params, ParamSlices):
        raise ConfigError(
            "timeseries needs a flat parameter vector; time-varying slices are not supported"
        )
    cfg = config.model
    lab_params = enumerate_words(cfg.alphabet_bfree, cfg.n)
    lab_big = enumerate_words(cfg.alphabet_bfree, cfg.sig_level_bfree)
    lab_full = enumerate_words(cfg.alphabet_full, cfg.sig_level_full)
    m = len(lab_params)
    ell = np.asarray(params, dtype=float)
    if ell.shape != (m,):
        raise ConfigError(f"parameter vector has {ell.size} entries, model needs {m}")

    horizon = args.horizon if args.horizon is not None else config.grid.horizon
    grid = PathGrid(horizon=horizon, steps_per_year=TS_STEPS_PER_YEAR)
    n_paths = args.paths
    if n_paths < 1:
        raise ConfigError("need at least one path")
    seed = config.seed + TS_SEED_OFFSET
    fingerprint = store_fingerprint(cfg, grid, (), n_paths, seed)

    G = build_G(build_coefficients(cfg, cfg.alphabet_bfree), cfg.sig_level_bfree, lab_big)
    pair_rows = pair_contraction_matrix(lab_params, lab_big)
    weights = pair_weights(pair_rows, ell)
    ito_rows = contraction_matrix(e_tilde_coeffs(cfg), lab_full)
    times = grid.times()
    steps = range(1, grid.n_steps + 1)
    unit = np.zeros(len(lab_big))
    unit[0] = 1.0

    out = Path(args.out or config.out)
    header = ("path", "time", "spot", "vix", "variance", "fingerprint")
    rows = []
    for p in range(n_paths):
        inc = simulate_increments(cfg, grid, range(p, p + 1), seed)
        big = chen_signatures(inc[:, :, : cfg.d + 1], cfg.sig_level_bfree, steps, config.engine)
        full = chen_signatures(inc, cfg.sig_level_full, steps, config.engine)
        big = np.vstack([unit, big[:, 0, :]])
        drift = np.concatenate([[0.0], full[:, 0, :] @ (ito_rows.T @ ell)])
        variance = (big[:, :m] @ ell) ** 2
        spread = propagate_rows(G, cfg.delta, big) - big
        vix = np.sqrt(np.clip(spread @ weights, 0.0, None) / cfg.delta)
        spot = np.exp(-0.5 * (big @ weights) + drift)
        for i, t in enumerate(times):
            rows.append((p, float(t), spot[i], vix[i], variance[i], fingerprint))
    _write_csv(out / "timeseries.csv", header, rows)
    print(f"wrote {out / 'timeseries.csv'} ({n_paths} path(s), {len(times)} points each)")
    return 0


def cmd_ingest_check(args) -> int:
    book = ingest_quotes(args.quotes)
    for instrument in ("SPX", "VIX"):
        for t in book.maturities(instrument):
            count = sum(1 for q in book.select(instrument) if q.maturity == t)
            print(f"{instrument} T={t:g}: {count} quote(s)")
    print(f"usable quotes {len(book)}, vega-excluded {len(book.excluded)}")
    return 0


# -- entry point -------------------------------------------------------------------


def _add_config_flags(parser):
    parser.add_argument("--config", help="path to a JSON run configuration")
    parser.add_argument("--preset", help=f"bundled configuration ({', '.join(preset_names())})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sigvol",
        description="Simulate, calibrate and price a signature-based stochastic volatility model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="build and write the Monte Carlo sample store")
    _add_config_flags(p)
    p.add_argument("--store", required=True, help="output path for the store")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="fit parameters to a quote book")
    _add_config_flags(p)
    p.add_argument("--store", required=True, help="sample store written by simulate")
    p.add_argument("--quotes", required=True, help="quote CSV")
    p.add_argument("--out", default=None, help="output directory (default: config run.out)")
    p.add_argument("--vix-scale-100", action="store_true", help="display VIX levels x100")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("price", help="tabulate model prices on the configured strike grids")
    _add_config_flags(p)
    p.add_argument("--store", required=True)
    p.add_argument("--params", required=True, help="params.json with a flat vector or slices")
    p.add_argument("--out", default=None)
    p.add_argument("--spread-vol", type=float, default=0.01,
                   help="synthetic bid/ask half-width in vol points x2 (default 0.01)")
    p.add_argument("--vix-scale-100", action="store_true")
    p.set_defaults(func=cmd_price)

    p = sub.add_parser("timeseries", help="sample joint (spot, VIX, variance) trajectories")
    _add_config_flags(p)
    p.add_argument("--params", required=True, help="params.json with a flat vector")
    p.add_argument("--paths", type=int, default=1)
    p.add_argument("--horizon", type=float, default=None,
                   help="trajectory length in years (default: grid horizon)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_timeseries)

    p = sub.add_parser("ingest-check", help="validate a quote CSV and summarize it")
    p.add_argument("--quotes", required=True)
    p.set_defaults(func=cmd_ingest_check)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CalibError, StoreError, IngestError, AssemblyError, NumericalRangeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
