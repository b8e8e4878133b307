"""Calibration toolkit: Black-Scholes analytics, Monte Carlo estimators on a
sample store, bid/ask loss functions, initial-guess search, a budgeted
optimizer and randomized parameter projection.

Every price here is a dot product against precomputed store blocks, so one
loss evaluation costs a handful of matrix-vector products and no simulation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.optimize

from .model import ModelConfig
from .pathsim import SampleStore, StoreError
from .polyproc import build_G, build_coefficients
from .sigtensor import Labeling
from .spxcore import (
    assemble_q0,
    discounted_call_payoff,
    log_price_tv,
    log_prices_from_rows,
    q0_cv,
    spx_control_variate,
    undiscount,
)
from .vixcore import (
    ParamSlices,
    assemble_q,
    pair_contraction_matrix,
    q_cv,
    vix_control_variate,
    vix_tv,
    vix_value,
    window_matrix,
)

log = logging.getLogger(__name__)

VEGA_FLOOR = 1e-8
INSTRUMENTS = ("SPX", "VIX")


class CalibError(ValueError):
    """Bad market data, parameters or calibration settings."""


class VolBoundsError(CalibError):
    """Price outside the no-arbitrage band or the vol bracket."""


# -- Black-Scholes block -------------------------------------------------------------
#
# xi is either the spot or the discounted futures price e^{-rT} F; with the
# latter this is the Black formula for options on futures.


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def _check_bs_inputs(xi, k, sigma, t, r):
    for name, value in (("xi", xi), ("k", k), ("sigma", sigma), ("t", t), ("r", r)):
        if not math.isfinite(value):
            raise CalibError(f"{name} must be finite, got {value}")
    if xi <= 0 or k <= 0:
        raise CalibError(f"need positive spot and strike, got xi={xi}, k={k}")
    if sigma <= 0 or t <= 0:
        raise CalibError(f"need sigma > 0 and t > 0, got sigma={sigma}, t={t}")


def _d1(xi, k, sigma, t, r):
    return (math.log(xi / k) + (r + 0.5 * sigma * sigma) * t) / (sigma * math.sqrt(t))


def bs_call(xi: float, k: float, sigma: float, t: float, r: float = 0.0) -> float:
    _check_bs_inputs(xi, k, sigma, t, r)
    d1 = _d1(xi, k, sigma, t, r)
    d2 = d1 - sigma * math.sqrt(t)
    return xi * _norm_cdf(d1) - k * math.exp(-r * t) * _norm_cdf(d2)


def bs_vega(xi: float, k: float, sigma: float, t: float, r: float = 0.0) -> float:
    _check_bs_inputs(xi, k, sigma, t, r)
    d1 = _d1(xi, k, sigma, t, r)
    return xi * math.exp(-0.5 * d1 * d1) / math.sqrt(2.0 * math.pi) * math.sqrt(t)


def bs_delta(xi: float, k: float, sigma: float, t: float, r: float = 0.0) -> float:
    _check_bs_inputs(xi, k, sigma, t, r)
    return _norm_cdf(_d1(xi, k, sigma, t, r))


VOL_BRACKET = (1e-4, 5.0)
IV_TOL = 1e-10


def implied_vol(price: float, xi: float, k: float, t: float, r: float = 0.0) -> float:
    """Invert the call price: bisection to locate, Newton to polish.

    Prices outside the no-arbitrage band (intrinsic, xi) or outside the
    bracket's price range are reported, never clamped.
    """
    if not math.isfinite(price):
        raise CalibError(f"price must be finite, got {price}")
    intrinsic = max(xi - k * math.exp(-r * t), 0.0)
    if price < intrinsic:
        raise VolBoundsError(
            f"price {price:.6g} below intrinsic {intrinsic:.6g} (xi={xi:.6g}, k={k:.6g})"
        )
    if price >= xi:
        raise VolBoundsError(f"price {price:.6g} at or above the spot bound {xi:.6g}")
    lo, hi = VOL_BRACKET
    f_lo = bs_call(xi, k, lo, t, r) - price
    f_hi = bs_call(xi, k, hi, t, r) - price
    if f_lo > 0:
        raise VolBoundsError(
            f"price {price:.6g} below the sigma={lo} price; vol under the bracket"
        )
    if f_hi < 0:
        raise VolBoundsError(
            f"price {price:.6g} above the sigma={hi} price; vol over the bracket"
        )
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if bs_call(xi, k, mid, t, r) - price > 0:
            hi = mid
        else:
            lo = mid
    sigma = 0.5 * (lo + hi)
    for _ in range(20):
        diff = bs_call(xi, k, sigma, t, r) - price
        if abs(diff) <= IV_TOL:
            break
        vega = bs_vega(xi, k, sigma, t, r)
        if vega <= 0:
            break
        step = diff / vega
        sigma = min(max(sigma - step, VOL_BRACKET[0]), VOL_BRACKET[1])
    if abs(bs_call(xi, k, sigma, t, r) - price) > IV_TOL:
        raise VolBoundsError(f"no vol in {VOL_BRACKET} matches price {price:.6g} to {IV_TOL}")
    return sigma


# -- quotes -----------------------------------------------------------------------


@dataclass(frozen=True)
class Quote:
    """One market option quote plus the futures/forward level it references."""

    instrument: str
    maturity: float
    strike: float
    bid: float
    ask: float
    iv_bid: float
    iv_ask: float
    future: float
    rate: float = 0.0
    dividend: float = 0.0

    def __post_init__(self):
        if self.instrument not in INSTRUMENTS:
            raise CalibError(f"instrument must be one of {INSTRUMENTS}, got {self.instrument!r}")
        if not self.maturity > 0:
            raise CalibError(f"maturity must be positive, got {self.maturity}")
        if not self.strike > 0:
            raise CalibError(f"strike must be positive, got {self.strike}")
        if self.bid > self.ask:
            raise CalibError(f"bid {self.bid} above ask {self.ask}")
        if self.iv_bid > self.iv_ask:
            raise CalibError(f"iv_bid {self.iv_bid} above iv_ask {self.iv_ask}")
        if not self.future > 0:
            raise CalibError(f"future must be positive, got {self.future}")

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)

    @property
    def iv_mid(self) -> float:
        return 0.5 * (self.iv_bid + self.iv_ask)

    @property
    def xi_market(self) -> float:
        return math.exp(-self.rate * self.maturity) * self.future

    @property
    def vega(self) -> float:
        """Market vega at the mid implied vol; weights the loss."""
        return bs_vega(self.xi_market, self.strike, self.iv_mid, self.maturity, self.rate)

    @property
    def delta(self) -> float:
        return bs_delta(self.xi_market, self.strike, self.iv_mid, self.maturity, self.rate)


class QuoteBook:
    """Validated quotes; vega-degenerate ones are excluded with a warning."""

    def __init__(self, quotes: Sequence[Quote], vega_floor: float = VEGA_FLOOR):
        usable, dropped = [], []
        for quote in quotes:
            if quote.vega < vega_floor:
                dropped.append(quote)
                log.warning(
                    "excluding %s quote T=%g K=%g: vega %.3e below %.0e",
                    quote.instrument, quote.maturity, quote.strike, quote.vega, vega_floor,
                )
            else:
                usable.append(quote)
        self._usable = tuple(usable)
        self.excluded = tuple(dropped)

    def __len__(self) -> int:
        return len(self._usable)

    def __iter__(self):
        return iter(self._usable)

    def select(self, instrument: str) -> tuple[Quote, ...]:
        return tuple(q for q in self._usable if q.instrument == instrument)

    def maturities(self, instrument: str) -> tuple[float, ...]:
        return tuple(sorted({q.maturity for q in self.select(instrument)}))


# -- loss functions -----------------------------------------------------------------


def smooth_step(x: float) -> float:
    """0.5 tanh(100 x) + 0.5, a smooth 0-to-1 switch."""
    return 0.5 * math.tanh(100.0 * x) + 0.5


def smooth_indicator_outside(x: float, lo: float, hi: float) -> float:
    """Smooth version of 1_{x not in [lo, hi]}."""
    return smooth_step(lo - x) + smooth_step(x - hi)


def _check_beta(beta):
    if beta not in (0, 1):
        raise CalibError(f"beta must be 0 or 1, got {beta}")


def loss_quote(price: float, quote: Quote, *, beta: int = 1, future: float | None = None) -> float:
    """Vega-normalized squared pricing error for one quote.

    With ``future`` the futures mismatch joins the numerator through the
    market delta (the VIX case); without it only the option term remains
    (the SPX case, whose forward is not calibrated). ``beta=0`` targets the
    mid, ``beta=1`` only penalizes prices outside the bid/ask band.
    """
    _check_beta(beta)
    vega = quote.vega
    if vega < VEGA_FLOOR:
        raise CalibError("vega-degenerate quote; exclude it via QuoteBook")
    weight = beta * smooth_indicator_outside(price, quote.bid, quote.ask) + (1 - beta)
    numerator = weight * abs(price - quote.mid)
    if future is not None:
        discount = math.exp(-quote.rate * quote.maturity)
        numerator += abs(quote.delta * discount * (future - quote.future))
    spread = quote.iv_ask - quote.iv_bid
    if spread <= 0:
        raise CalibError(f"need iv_ask > iv_bid, got spread {spread}")
    return (numerator / (vega * spread)) ** 2


def loss_vix(ell, book: QuoteBook, ctx: "PricingContext", *, beta: int = 1,
             variate: bool = False) -> float:
    """Sum of per-quote losses over the VIX book, futures mismatch included."""
    _check_beta(beta)
    quotes = book.select("VIX")
    if not quotes:
        raise CalibError("no usable VIX quotes")
    total = 0.0
    for maturity in book.maturities("VIX"):
        group = [q for q in quotes if q.maturity == maturity]
        values = ctx.vix_samples(ell, maturity)
        f_model = float(values.mean())
        for quote in group:
            payoffs = np.clip(values - quote.strike, 0.0, None)
            if variate:
                payoffs = ctx.adjust_vix_payoffs(payoffs, values, ell, maturity)
            price = math.exp(-quote.rate * maturity) * float(payoffs.mean())
            total += loss_quote(price, quote, beta=beta, future=f_model)
    return total


def loss_spx(ell, book: QuoteBook, ctx: "PricingContext", *, beta: int = 1,
             variate: bool = False) -> float:
    """Sum of per-quote losses over the SPX book; no futures term."""
    _check_beta(beta)
    quotes = book.select("SPX")
    if not quotes:
        raise CalibError("no usable SPX quotes")
    total = 0.0
    for maturity in book.maturities("SPX"):
        group = [q for q in quotes if q.maturity == maturity]
        logs = ctx.log_price_samples(ell, maturity)
        for quote in group:
            spot = undiscount(np.exp(logs), quote.rate, quote.dividend, maturity)
            payoffs = discounted_call_payoff(spot, quote.strike, quote.rate, maturity)
            if variate:
                payoffs = ctx.adjust_spx_payoffs(payoffs, logs, ell, maturity)
            price = float(payoffs.mean())
            total += loss_quote(price, quote, beta=beta)
    return total


def loss_joint(ell, book: QuoteBook, ctx: "PricingContext", *, lam: float, beta: int = 1,
               variate: bool = False) -> float:
    """lam * L_SPX + (1 - lam) * L_VIX with lam strictly inside (0, 1)."""
    if not 0.0 < lam < 1.0:
        raise CalibError(f"lambda must lie strictly inside (0, 1), got {lam}")
    spx = loss_spx(ell, book, ctx, beta=beta, variate=variate)
    vix = loss_vix(ell, book, ctx, beta=beta, variate=variate)
    return lam * spx + (1.0 - lam) * vix


def futures_error(f_mkt: float, f_model: float) -> float:
    """Relative absolute futures mismatch."""
    if not f_mkt > 0:
        raise CalibError(f"market future must be positive, got {f_mkt}")
    return abs(f_mkt - f_model) / f_mkt


# -- pricing on a store ----------------------------------------------------------------


class PricingContext:
    """A sample store plus the reusable maps pricing needs.

    The pair-contraction matrix and the generator are built once; the
    deterministic control-variate means are cached per maturity. All methods
    are read-only over the store, so one context serves a whole calibration.
    """

    def __init__(self, store: SampleStore):
        self.store = store
        self.cfg: ModelConfig = store.cfg
        self.lab_params: Labeling = store.labeling_params
        self.lab_big: Labeling = store.labeling_bfree
        self.n_params = len(self.lab_params)
        self.pair_rows = pair_contraction_matrix(self.lab_params, self.lab_big)
        self._g = None
        self._q_cv: dict[int, np.ndarray] = {}
        self._q0_cv: dict[int, np.ndarray] = {}
        self._windows: dict[float, np.ndarray] = {}

    @property
    def generator(self):
        if self._g is None:
            coeffs = build_coefficients(self.cfg, self.cfg.alphabet_bfree)
            self._g = build_G(coeffs, self.cfg.sig_level_bfree, labeling=self.lab_big)
        return self._g

    def index_of(self, maturity: float) -> int:
        return self.store.maturity_index(maturity)

    # per-sample model quantities

    def vix_samples(self, ell, maturity: float) -> np.ndarray:
        """VIX_T per sample; `ell` is a flat vector or ParamSlices."""
        if isinstance(ell, ParamSlices):
            try:
                k = ell.maturities.index(maturity)
            except ValueError:
                raise StoreError(f"maturity {maturity} is not a breakpoint of the slices")
            return vix_tv(ell, self._tv_q_of(ell), self.cfg.delta)[k]
        idx = self.index_of(maturity)
        return vix_value(np.asarray(ell, dtype=float), self.store.chol[idx], self.cfg.delta)

    def log_price_samples(self, ell, maturity: float) -> np.ndarray:
        """log S_T per sample; `ell` is a flat vector or ParamSlices."""
        idx = self.index_of(maturity)
        if isinstance(ell, ParamSlices):
            def q0_of(s):
                i = self.index_of(s)
                return assemble_q0(self.store.sigx[i], self.pair_rows, self.n_params)

            def ito_of(s):
                return np.asarray(self.store.ito[self.index_of(s)])

            return log_price_tv(ell, q0_of, ito_of, maturity)
        return np.asarray(
            log_prices_from_rows(
                np.asarray(ell, dtype=float),
                self.store.sigx[idx],
                self.store.ito[idx],
                self.pair_rows,
            )
        ).ravel()

    def _tv_q_of(self, slices: ParamSlices):
        def q_of(k: int, tau: float) -> np.ndarray:
            idx = self.index_of(slices.maturities[k])
            key = round(float(tau), 15)
            if key not in self._windows:
                self._windows[key] = window_matrix(self.generator, tau)
            return assemble_q(
                self.store.sigx[idx], self._windows[key], self.pair_rows, self.n_params
            )

        return q_of

    # control-variate support

    def q_cv_matrix(self, maturity: float) -> np.ndarray:
        idx = self.index_of(maturity)
        if idx not in self._q_cv:
            self._q_cv[idx] = q_cv(
                self.generator, maturity, self.cfg.delta,
                lab_params=self.lab_params, pair_rows=self.pair_rows,
            )
        return self._q_cv[idx]

    def q0_cv_matrix(self, maturity: float) -> np.ndarray:
        idx = self.index_of(maturity)
        if idx not in self._q0_cv:
            self._q0_cv[idx] = q0_cv(
                self.generator, maturity,
                lab_params=self.lab_params, pair_rows=self.pair_rows,
            )
        return self._q0_cv[idx]

    def adjust_vix_payoffs(self, payoffs, values, ell, maturity) -> np.ndarray:
        if isinstance(ell, ParamSlices):
            # the variate's exact mean is only available for a single
            # parameter vector; sliced parameters keep the raw estimator
            return np.asarray(payoffs, dtype=float)
        ell = np.asarray(ell, dtype=float)
        mean_v2 = float(ell @ self.q_cv_matrix(maturity) @ ell) / self.cfg.delta
        adjusted, _ = vix_control_variate(payoffs, values**2, mean_v2)
        return _variance_guard(payoffs, adjusted)

    def adjust_spx_payoffs(self, payoffs, logs, ell, maturity) -> np.ndarray:
        if isinstance(ell, ParamSlices):
            return np.asarray(payoffs, dtype=float)
        adjusted, _ = spx_control_variate(
            payoffs, logs, np.asarray(ell, dtype=float), self.q0_cv_matrix(maturity)
        )
        return _variance_guard(payoffs, adjusted)


def _variance_guard(raw: np.ndarray, adjusted: np.ndarray) -> np.ndarray:
    """Never let the variate make the estimator worse by more than 1%."""
    if adjusted.var() > raw.var() * 1.01:
        return raw
    return adjusted


def as_context(store_or_ctx) -> PricingContext:
    if isinstance(store_or_ctx, PricingContext):
        return store_or_ctx
    return PricingContext(store_or_ctx)


def mc_price(
    store_or_ctx,
    instrument: str,
    ell,
    maturity: float,
    strike: float,
    *,
    r: float = 0.0,
    q: float = 0.0,
    variate: bool = False,
    n_vr: int | None = None,
) -> tuple[float, float]:
    """Discounted Monte Carlo call price and its standard error.

    With ``variate`` the centered control variate is subtracted first;
    ``n_vr`` restricts the variate-adjusted estimator to the first n_vr
    samples (the reduced variance needs fewer of them).
    """
    if instrument not in INSTRUMENTS:
        raise CalibError(f"instrument must be one of {INSTRUMENTS}, got {instrument!r}")
    if not strike > 0:
        raise CalibError(f"strike must be positive, got {strike}")
    ctx = as_context(store_or_ctx)
    if instrument == "VIX":
        values = ctx.vix_samples(ell, maturity)
        payoffs = np.clip(values - strike, 0.0, None)
        if variate:
            cut = slice(None) if n_vr is None else slice(0, int(n_vr))
            payoffs = ctx.adjust_vix_payoffs(payoffs[cut], values[cut], ell, maturity)
    else:
        logs = ctx.log_price_samples(ell, maturity)
        spot = undiscount(np.exp(logs), r, q, maturity)
        payoffs = discounted_call_payoff(spot, strike, r, maturity)
        if variate:
            cut = slice(None) if n_vr is None else slice(0, int(n_vr))
            payoffs = ctx.adjust_spx_payoffs(payoffs[cut], logs[cut], ell, maturity)
    discount = math.exp(-r * maturity) if instrument == "VIX" else 1.0
    mean = discount * float(payoffs.mean())
    se = discount * float(payoffs.std(ddof=1) / math.sqrt(payoffs.size)) if payoffs.size > 1 else 0.0
    return mean, se


def mc_future(
    store_or_ctx, instrument: str, ell, maturity: float, *, r: float = 0.0, q: float = 0.0
) -> tuple[float, float]:
    """Model futures/forward level and its standard error."""
    if instrument not in INSTRUMENTS:
        raise CalibError(f"instrument must be one of {INSTRUMENTS}, got {instrument!r}")
    ctx = as_context(store_or_ctx)
    if instrument == "VIX":
        values = ctx.vix_samples(ell, maturity)
    else:
        values = undiscount(np.exp(ctx.log_price_samples(ell, maturity)), r, q, maturity)
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return mean, se


# -- initial guess and optimizer ---------------------------------------------------


def initial_guess(
    loss_fn: Callable[[np.ndarray], float],
    dim: int,
    n_draws: int = 200,
    n_boxes: int = 4,
    seed: int = 0,
) -> np.ndarray:
    """Coarse search over nested boxes [-10^-i, 10^-i]^dim, i = 1..n_boxes.

    Every box gets ``n_draws`` uniform samples; the box with the best
    observed loss wins and its best draw is returned.
    """
    if n_draws < 1 or n_boxes < 1:
        raise CalibError("need at least one draw and one box")
    rng = np.random.default_rng(seed)
    best_value = math.inf
    best_draw = np.zeros(dim)
    for i in range(1, n_boxes + 1):
        scale = 10.0**-i
        draws = rng.uniform(-scale, scale, size=(n_draws, dim))
        for draw in draws:
            value = float(loss_fn(draw))
            if math.isfinite(value) and value < best_value:
                best_value = value
                best_draw = draw.copy()
    return best_draw


@dataclass(frozen=True)
class OptimResult:
    ell: np.ndarray
    best_loss: float
    trace: np.ndarray
    n_evals: int


class _BudgetExhausted(Exception):
    pass


def optimize(
    loss_fn: Callable[[np.ndarray], float],
    ell0: np.ndarray,
    budget: int = 2000,
    *,
    method: str = "quasi-newton",
    fd_step: float = 1e-6,
    seed: int = 0,
) -> OptimResult:
    """Budgeted minimization; the budget counts loss evaluations.

    ``quasi-newton`` runs L-BFGS-B on central finite differences with step
    fd_step * (1 + |ell_i|); non-finite losses surface as a huge value, which
    the line search rejects and shrinks away from. ``random-search`` is a
    seeded adaptive Gaussian search for rough landscapes. Both return the
    best iterate seen and a per-evaluation best-so-far trace.
    """
    ell0 = np.asarray(ell0, dtype=float).copy()
    if budget < 1:
        raise CalibError("budget must be at least one evaluation")
    state = {"best_x": ell0.copy(), "best_f": math.inf, "evals": 0}
    trace: list[float] = []

    def evaluate(x: np.ndarray) -> float:
        value = float(loss_fn(np.asarray(x, dtype=float)))
        state["evals"] += 1
        if math.isfinite(value) and value < state["best_f"]:
            state["best_f"] = value
            state["best_x"] = np.asarray(x, dtype=float).copy()
        trace.append(state["best_f"])
        if state["evals"] >= budget:
            raise _BudgetExhausted
        return value if math.isfinite(value) else 1e30

    try:
        first = evaluate(ell0)
        if first >= 1e30:
            raise CalibError("loss is not finite at the starting point")
        if method == "quasi-newton":
            _run_lbfgs(evaluate, ell0, fd_step)
        elif method == "random-search":
            _run_random_search(evaluate, ell0, seed)
        else:
            raise CalibError(f"unknown method {method!r}")
    except _BudgetExhausted:
        pass
    return OptimResult(
        ell=state["best_x"],
        best_loss=state["best_f"],
        trace=np.asarray(trace),
        n_evals=state["evals"],
    )


def _run_lbfgs(evaluate, ell0, fd_step):
    def gradient(x):
        x = np.asarray(x, dtype=float)
        grad = np.zeros_like(x)
        for i in range(x.size):
            h = fd_step * (1.0 + abs(x[i]))
            up, down = x.copy(), x.copy()
            up[i] += h
            down[i] -= h
            grad[i] = (evaluate(up) - evaluate(down)) / (2.0 * h)
        return grad

    scipy.optimize.minimize(
        evaluate, ell0, jac=gradient, method="L-BFGS-B",
        options={"maxiter": 10**7, "ftol": 0.0, "gtol": 1e-14, "maxls": 40},
    )


def _run_random_search(evaluate, ell0, seed):
    rng = np.random.default_rng(seed)
    x = np.asarray(ell0, dtype=float).copy()
    best = evaluate(x)
    scale = 0.1 * (1.0 + np.abs(x))
    while True:
        candidate = x + scale * rng.standard_normal(x.size)
        value = evaluate(candidate)
        if value < best:
            best = value
            x = candidate
            scale *= 1.3
        else:
            scale *= 0.97
        if np.all(scale < 1e-14):
            scale = 0.1 * (1.0 + np.abs(x))


# -- randomized projection ------------------------------------------------------------


def randomized_projection(d_full: int, d_reduced: int, seed: int = 0) -> np.ndarray:
    """Gaussian sketch A with entries N(0, 1/d_reduced), shape (d_reduced, d_full).

    The reduced problem optimizes ell_tilde in R^{d_reduced}; the full-space
    parameter is the pullback A^T ell_tilde.
    """
    if d_reduced < 1:
        raise CalibError(f"need at least one reduced dimension, got {d_reduced}")
    if d_reduced > d_full:
        raise CalibError(f"projection must reduce: {d_reduced} > {d_full}")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0 / math.sqrt(d_reduced), size=(d_reduced, d_full))


def pullback(a: np.ndarray, ell_tilde: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=float).T @ np.asarray(ell_tilde, dtype=float)


def reduce_loss(loss_fn: Callable[[np.ndarray], float], a: np.ndarray):
    """Compose a full-space loss with the pullback."""
    a = np.asarray(a, dtype=float)

    def reduced(ell_tilde: np.ndarray) -> float:
        return loss_fn(pullback(a, ell_tilde))

    return reduced


# -- reporting --------------------------------------------------------------------


@dataclass(frozen=True)
class QuoteFit:
    instrument: str
    maturity: float
    strike: float
    bid: float
    ask: float
    iv_bid: float
    iv_ask: float
    iv_model: float
    price_model: float
    price_se: float
    inside: bool


@dataclass(frozen=True)
class FuturesFit:
    maturity: float
    market: float
    model: float
    error: float

    def __post_init__(self):
        if self.error < 0:
            raise CalibError("futures error cannot be negative")


@dataclass(frozen=True)
class CalibReport:
    parameters: object
    quote_fits: tuple[QuoteFit, ...]
    futures_fits: tuple[FuturesFit, ...]
    final_loss: float
    trace: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def inside_fraction(self) -> float:
        if not self.quote_fits:
            return 0.0
        return sum(f.inside for f in self.quote_fits) / len(self.quote_fits)


def build_report(
    ell,
    book: QuoteBook,
    ctx: PricingContext,
    *,
    final_loss: float = math.nan,
    trace: np.ndarray | None = None,
    variate: bool = False,
    metadata: dict | None = None,
) -> CalibReport:
    """Price every quote at ``ell`` and invert model IVs from model futures.

    Model implied vols always invert against the model's own futures level;
    mixing market futures with model prices shifts every smile point.
    """
    quote_fits: list[QuoteFit] = []
    futures_fits: list[FuturesFit] = []
    for instrument in INSTRUMENTS:
        quotes = book.select(instrument)
        for maturity in book.maturities(instrument):
            group = [q for q in quotes if q.maturity == maturity]
            rate = group[0].rate
            dividend = group[0].dividend
            f_model, _ = mc_future(ctx, instrument, ell, maturity, r=rate, q=dividend)
            if instrument == "VIX":
                futures_fits.append(
                    FuturesFit(
                        maturity=maturity,
                        market=group[0].future,
                        model=f_model,
                        error=futures_error(group[0].future, f_model),
                    )
                )
            xi_model = math.exp(-rate * maturity) * f_model
            for quote in group:
                price, se = mc_price(
                    ctx, instrument, ell, maturity, quote.strike,
                    r=rate, q=dividend, variate=variate,
                )
                try:
                    iv = implied_vol(price, xi_model, quote.strike, maturity, rate)
                except VolBoundsError:
                    iv = math.nan
                inside = bool(quote.iv_bid <= iv <= quote.iv_ask) if math.isfinite(iv) else False
                quote_fits.append(
                    QuoteFit(
                        instrument=instrument,
                        maturity=maturity,
                        strike=quote.strike,
                        bid=quote.bid,
                        ask=quote.ask,
                        iv_bid=quote.iv_bid,
                        iv_ask=quote.iv_ask,
                        iv_model=iv,
                        price_model=price,
                        price_se=se,
                        inside=inside,
                    )
                )
    return CalibReport(
        parameters=ell,
        quote_fits=tuple(quote_fits),
        futures_fits=tuple(futures_fits),
        final_loss=final_loss,
        trace=np.asarray(trace if trace is not None else []),
        metadata=dict(metadata or {}),
    )


# -- rolling calibration ---------------------------------------------------------------


@dataclass(frozen=True)
class RollingResult:
    slices: ParamSlices
    stage_results: tuple[OptimResult, ...]
    final_loss: float

    @property
    def n_evals(self) -> int:
        return sum(r.n_evals for r in self.stage_results)


def _last_slice(maturity: float, breakpoints: Sequence[float]) -> int:
    """Index of the last parameter slice a horizon-``maturity`` price touches.

    A maturity landing exactly on a breakpoint belongs to the segment ending
    there, not the one starting there.
    """
    s = 0
    for i, bp in enumerate(breakpoints, start=1):
        if maturity > bp + 1e-12:
            s = i
    return s


def _book_loss(ell, sub_book: QuoteBook, ctx: PricingContext, *, lam: float,
               beta: int, variate: bool) -> float:
    has_spx = bool(sub_book.select("SPX"))
    has_vix = bool(sub_book.select("VIX"))
    if has_spx and has_vix:
        return loss_joint(ell, sub_book, ctx, lam=lam, beta=beta, variate=variate)
    if has_vix:
        return loss_vix(ell, sub_book, ctx, beta=beta, variate=variate)
    return loss_spx(ell, sub_book, ctx, beta=beta, variate=variate)


def calibrate_rolling(
    book: QuoteBook,
    ctx: PricingContext,
    *,
    lam: float,
    beta: int = 1,
    budget: int = 2000,
    seed: int = 0,
    n_draws: int = 200,
    n_boxes: int = 4,
    variate: bool = False,
    method: str = "quasi-newton",
    ell0: np.ndarray | None = None,
) -> RollingResult:
    """Calibrate a time-varying parameter vector one maturity bucket at a time.

    The VIX maturities become the breakpoints of a ``ParamSlices``. The first
    stage fits the two leading slices jointly against every quote they price
    (the first VIX maturity plus any shorter-dated equity maturities and the
    one just beyond). Each later stage freezes everything already solved and
    fits the next slice, warm-started from the previous one, against the
    quotes whose horizon ends inside it. Slices past the newest one are
    extrapolated as constant while it is being fit.

    ``budget`` is spent per stage, not in total. ``ell0`` optionally replaces
    the random search that seeds stage one.
    """
    if not 0.0 < lam < 1.0:
        raise CalibError(f"lambda must lie strictly inside (0, 1), got {lam}")
    breakpoints = book.maturities("VIX")
    if not breakpoints:
        raise CalibError("rolling calibration needs VIX quotes to set its breakpoints")
    n_stages = len(breakpoints)
    m = ctx.n_params

    # stage of a quote = the stage that optimizes the last slice it touches
    def stage_of(quote: Quote) -> int:
        if quote.instrument == "VIX":
            return max(1, breakpoints.index(quote.maturity) + 1)
        return max(1, _last_slice(quote.maturity, breakpoints))

    stage_quotes: dict[int, list[Quote]] = {k: [] for k in range(1, n_stages + 1)}
    for quote in book:
        stage_quotes[stage_of(quote)].append(quote)

    solved: list[np.ndarray] = []
    stage_results: list[OptimResult] = []
    for k in range(1, n_stages + 1):
        sub_book = QuoteBook(stage_quotes[k])
        first_free = 0 if k == 1 else k
        n_free = 2 if k == 1 else 1

        def stage_loss(x: np.ndarray) -> float:
            free = np.asarray(x, dtype=float).reshape(n_free, m)
            ells = []
            for i in range(n_stages + 1):
                if i < first_free:
                    ells.append(solved[i])
                elif i < first_free + n_free:
                    ells.append(free[i - first_free])
                else:
                    ells.append(free[-1])
            slices = ParamSlices(breakpoints, ells)
            return _book_loss(slices, sub_book, ctx, lam=lam, beta=beta, variate=variate)

        if k == 1:
            start = (
                np.asarray(ell0, dtype=float).ravel()
                if ell0 is not None
                else initial_guess(stage_loss, 2 * m, n_draws=n_draws, n_boxes=n_boxes, seed=seed)
            )
            if start.size != 2 * m:
                raise CalibError(f"stage-one start needs {2 * m} entries, got {start.size}")
        else:
            start = solved[k - 1]
        result = optimize(stage_loss, start, budget=budget, method=method, seed=seed + k)
        stage_results.append(result)
        solved.extend(result.ell.reshape(n_free, m))

    slices = ParamSlices(breakpoints, solved)
    final_loss = _book_loss(slices, book, ctx, lam=lam, beta=beta, variate=variate)
    return RollingResult(
        slices=slices,
        stage_results=tuple(stage_results),
        final_loss=float(final_loss),
    )
