"""Render smile panels and the futures term structure from fit CSVs.

This tool is a pure view: it draws exactly what the two tables say and never
reprices anything. The one derived number, the relative futures error written
next to each term-structure point, is recomputed from the market and model
columns and must agree with the table's own ``eps`` column to 1e-12,
otherwise the input is rejected as inconsistent.

Figures are built straight on the Agg canvas (no pyplot, no global state), so
the same inputs render the same pixels wherever the renderer version matches.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

log = logging.getLogger(__name__)

QUOTE_HEADER = (
    "instrument", "maturity", "strike", "bid", "ask", "price_model", "price_se",
    "iv_bid", "iv_ask", "iv_model", "inside", "fingerprint",
)
FUTURES_HEADER = ("maturity", "market", "model", "eps", "fingerprint")

FIGSIZE = (6.4, 4.8)
DPI = 100


class SchemaError(ValueError):
    """The CSV does not match the fit-table contract."""


# -- reading ------------------------------------------------------------------------


def _read_rows(path, header):
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            found = tuple(next(reader))
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {header}")
        if found != header:
            raise SchemaError(f"{path}: header {found} does not match {header}")
        return [dict(zip(header, row)) for row in reader]


def _floats(row, path, line, columns):
    out = {}
    for name in columns:
        try:
            out[name] = float(row[name])
        except (ValueError, KeyError):
            raise SchemaError(f"{path} line {line}: bad value for {name!r}")
    return out


def read_quote_fits(path) -> list[dict]:
    """Quote rows with numeric fields typed; order preserved."""
    rows = []
    for line, raw in enumerate(_read_rows(path, QUOTE_HEADER), start=2):
        row = _floats(raw, path, line, QUOTE_HEADER[1:10])
        row["instrument"] = raw["instrument"]
        if raw["inside"] not in ("0", "1"):
            raise SchemaError(f"{path} line {line}: inside must be 0 or 1")
        row["inside"] = raw["inside"] == "1"
        rows.append(row)
    return rows


def read_futures_fits(path) -> list[dict]:
    rows = []
    for line, raw in enumerate(_read_rows(path, FUTURES_HEADER), start=2):
        rows.append(_floats(raw, path, line, FUTURES_HEADER[:4]))
    return rows


# -- geometry -----------------------------------------------------------------------


def padded_limits(values, fraction=0.05):
    """Data extent plus a symmetric margin; a flat extent pads off its level."""
    lo, hi = min(values), max(values)
    span = hi - lo
    if span == 0.0:
        span = max(abs(hi), 1.0)
    return lo - fraction * span, hi + fraction * span


def _new_axes():
    figure = Figure(figsize=FIGSIZE, dpi=DPI)
    FigureCanvasAgg(figure)
    return figure, figure.subplots()


# -- smiles -------------------------------------------------------------------------


def build_smile_figure(rows, futures_pair=None) -> Figure:
    """One panel: bid/ask crosses and model dots for a single (instrument, T).

    ``futures_pair`` is the (market, model) future for VIX panels, drawn as
    vertical dashed lines.
    """
    rows = sorted(rows, key=lambda r: r["strike"])
    instrument = rows[0]["instrument"]
    maturity = rows[0]["maturity"]

    figure, ax = _new_axes()
    strikes = [r["strike"] for r in rows]
    ax.plot(strikes, [r["iv_bid"] for r in rows], "x", color="red", label="bid/ask")
    ax.plot(strikes, [r["iv_ask"] for r in rows], "x", color="red")
    ax.plot(strikes, [r["iv_model"] for r in rows], "o", color="tab:blue",
            markersize=4, label="model")

    xs = list(strikes)
    if instrument == "VIX" and futures_pair is not None:
        market, model = futures_pair
        ax.axvline(market, color="red", linestyle="--", linewidth=1.0,
                   label="market future")
        ax.axvline(model, color="tab:blue", linestyle="--", linewidth=1.0,
                   label="model future")
        xs += [market, model]

    vols = [r["iv_bid"] for r in rows] + [r["iv_ask"] for r in rows] \
        + [r["iv_model"] for r in rows]
    ax.set_xlim(*padded_limits(xs))
    ax.set_ylim(*padded_limits(vols))
    ax.set_xlabel("strike")
    ax.set_ylabel("implied volatility")
    ax.set_title(f"{instrument} T={maturity:g}")
    ax.legend(loc="upper right", fontsize=8)
    return figure


def plot_smiles(fit_path, out_dir, futures_path=None) -> list[Path]:
    """Write one ``<instrument>_<T>.png`` per maturity; returns written paths."""
    rows = read_quote_fits(fit_path)
    if not rows:
        log.warning("%s: empty fit table, no smile panels to draw", fit_path)
        return []

    futures = {}
    if futures_path is not None:
        futures = {r["maturity"]: (r["market"], r["model"])
                   for r in read_futures_fits(futures_path)}

    groups: dict[tuple, list] = {}
    for row in rows:
        groups.setdefault((row["instrument"], row["maturity"]), []).append(row)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for (instrument, maturity), group in sorted(groups.items()):
        figure = build_smile_figure(group, futures.get(maturity))
        target = out_dir / f"{instrument}_{maturity:g}.png"
        figure.savefig(target)
        written.append(target)
    return written


# -- term structure -----------------------------------------------------------------


def recomputed_errors(rows):
    """Relative futures errors from the market/model columns.

    Raises if any disagrees with the table's eps column by more than 1e-12;
    the plot must never silently contradict the data it annotates.
    """
    errors = []
    for row in rows:
        eps = abs(row["market"] - row["model"]) / row["market"]
        if abs(eps - row["eps"]) > 1e-12:
            raise SchemaError(
                f"eps column {row['eps']!r} at T={row['maturity']:g} does not match "
                f"|market-model|/market = {eps!r}"
            )
        errors.append(eps)
    return errors


def build_term_structure_figure(rows) -> Figure:
    """Market vs model futures, linearly interpolated, one eps note per point."""
    rows = sorted(rows, key=lambda r: r["maturity"])
    errors = recomputed_errors(rows)

    figure, ax = _new_axes()
    maturities = [r["maturity"] for r in rows]
    market = [r["market"] for r in rows]
    model = [r["model"] for r in rows]
    line = "-" if len(rows) > 1 else "none"
    ax.plot(maturities, market, marker="x", linestyle=line, color="red",
            label="market")
    ax.plot(maturities, model, marker="o", markersize=4, linestyle=line,
            color="tab:blue", label="model")
    for maturity, value, eps in zip(maturities, model, errors):
        ax.annotate(f"eps={eps:.2e}", (maturity, value),
                    textcoords="offset points", xytext=(0, 8), fontsize=7)

    ax.set_xlim(*padded_limits(maturities))
    ax.set_ylim(*padded_limits(market + model))
    ax.set_xlabel("maturity")
    ax.set_ylabel("future")
    ax.set_title("VIX futures term structure")
    ax.legend(loc="upper right", fontsize=8)
    return figure


def plot_term_structure(futures_path, out_path) -> Path | None:
    rows = read_futures_fits(futures_path)
    if not rows:
        log.warning("%s: empty futures table, no term structure to draw", futures_path)
        return None
    figure = build_term_structure_figure(rows)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    figure.savefig(out_path)
    return out_path


# -- stability ----------------------------------------------------------------------


def figure_hash(figure) -> str:
    """sha256 of the rendered RGBA buffer; stable per renderer version."""
    canvas = figure.canvas
    canvas.draw()
    width, height = canvas.get_width_height()
    digest = hashlib.sha256()
    digest.update(f"{width}x{height}|".encode())
    digest.update(bytes(canvas.buffer_rgba()))
    return digest.hexdigest()


# -- entry point --------------------------------------------------------------------


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="smileplot",
        description="Draw smile panels and the futures term structure from fit CSVs.",
    )
    parser.add_argument("--fit", required=True, help="quotes_fit.csv")
    parser.add_argument("--futures", required=True, help="futures_fit.csv")
    parser.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)

    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        panels = plot_smiles(args.fit, out, futures_path=args.futures)
        term = plot_term_structure(args.futures, out / "futures.png")
    except (OSError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for path in panels + ([term] if term else []):
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
