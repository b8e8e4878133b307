"""Analytics, losses, search and reporting for the calibration layer."""

import math

import numpy as np
import pytest

from sigvol.calib import (
    CalibError,
    OptimResult,
    PricingContext,
    Quote,
    QuoteBook,
    VolBoundsError,
    _last_slice,
    _variance_guard,
    bs_call,
    bs_delta,
    bs_vega,
    build_report,
    calibrate_rolling,
    futures_error,
    implied_vol,
    initial_guess,
    loss_joint,
    loss_quote,
    loss_spx,
    loss_vix,
    mc_future,
    mc_price,
    optimize,
    pullback,
    randomized_projection,
    reduce_loss,
    smooth_indicator_outside,
    smooth_step,
)
from sigvol.model import ModelConfig, PathGrid
from sigvol.pathsim import StoreError, build_sample_store
from sigvol.vixcore import ParamSlices


# -- Black-Scholes ---------------------------------------------------------------


def test_atm_call_against_the_cdf_identity():
    # with S=K=1, T=1, r=0 the price collapses to 2 Phi(sigma/2) - 1
    oracle = math.erf(0.1 / math.sqrt(2.0))
    assert bs_call(1.0, 1.0, 0.2, 1.0, 0.0) == pytest.approx(oracle, abs=1e-15)
    assert bs_call(1.0, 1.0, 0.2, 1.0, 0.0) == pytest.approx(0.0796557, abs=5e-8)


def test_vanishing_vol_gives_intrinsic():
    assert bs_call(1.2, 1.0, 1e-9, 1.0, 0.0) == pytest.approx(0.2, abs=1e-12)


def test_vega_positive_and_delta_monotone():
    for k in (0.5, 0.9, 1.0, 1.3, 2.5):
        assert bs_vega(1.0, k, 0.3, 0.7, 0.01) > 0
    deltas = [bs_delta(xi, 1.0, 0.25, 0.5) for xi in (0.6, 0.9, 1.2, 1.8)]
    assert all(0 <= d <= 1 for d in deltas)
    assert deltas == sorted(deltas)


def test_bs_rejects_bad_inputs():
    with pytest.raises(CalibError, match="finite"):
        bs_call(float("inf"), 1.0, 0.2, 1.0)
    with pytest.raises(CalibError):
        bs_call(1.0, 1.0, -0.2, 1.0)
    with pytest.raises(CalibError):
        bs_call(1.0, 1.0, 0.2, 0.0)


def test_implied_vol_round_trips():
    for sigma in (0.05, 0.2, 1.0):
        price = bs_call(1.1, 0.95, sigma, 0.75, 0.02)
        assert implied_vol(price, 1.1, 0.95, 0.75, 0.02) == pytest.approx(sigma, abs=1e-8)


def test_implied_vol_round_trips_across_a_smile():
    t, r, xi = 0.5, 0.02, 1.0
    for k in np.linspace(0.5, 2.0, 13):
        sigma = 0.15 + 0.1 * math.log(k) ** 2
        price = bs_call(xi, k, sigma, t, r)
        assert implied_vol(price, xi, k, t, r) == pytest.approx(sigma, abs=1e-7)


def test_implied_vol_refuses_out_of_bounds_prices():
    with pytest.raises(VolBoundsError, match="intrinsic"):
        implied_vol(0.049, 1.05, 1.0, 1.0, 0.0)
    with pytest.raises(VolBoundsError, match="spot"):
        implied_vol(1.0, 1.0, 1.0, 1.0, 0.0)
    nearly_spot = bs_call(1.0, 1.0, 5.0, 1.0, 0.0) + 1e-4
    with pytest.raises(VolBoundsError, match="bracket"):
        implied_vol(nearly_spot, 1.0, 1.0, 1.0, 0.0)


def test_inverse_of_the_frozen_example():
    assert implied_vol(0.0796557, 1.0, 1.0, 1.0, 0.0) == pytest.approx(0.2, abs=1e-6)


# -- quotes -----------------------------------------------------------------------


def ok_quote(**kw):
    base = dict(
        instrument="VIX", maturity=0.1, strike=0.2, bid=0.010, ask=0.014,
        iv_bid=0.80, iv_ask=0.90, future=0.21,
    )
    base.update(kw)
    return Quote(**base)


def test_quote_validation():
    ok_quote()
    with pytest.raises(CalibError, match="bid"):
        ok_quote(bid=0.02, ask=0.01)
    with pytest.raises(CalibError, match="iv_bid"):
        ok_quote(iv_bid=0.95)
    with pytest.raises(CalibError, match="maturity"):
        ok_quote(maturity=0.0)
    with pytest.raises(CalibError, match="strike"):
        ok_quote(strike=-1.0)
    with pytest.raises(CalibError, match="instrument"):
        ok_quote(instrument="VVIX")


def test_quote_book_excludes_degenerate_vega(caplog):
    dead = ok_quote(strike=60.0, iv_bid=0.05, iv_ask=0.06)
    assert dead.vega < 1e-8
    with caplog.at_level("WARNING", logger="sigvol.calib"):
        book = QuoteBook([ok_quote(), dead])
    assert len(book) == 1
    assert book.excluded == (dead,)
    assert "vega" in caplog.text


# -- single-quote loss --------------------------------------------------------------


def test_smooth_step_values():
    assert smooth_step(0.0) == 0.5
    assert smooth_step(1.0) == pytest.approx(1.0, abs=1e-15)
    assert smooth_step(-1.0) == pytest.approx(0.0, abs=1e-15)
    assert smooth_indicator_outside(0.5, 0.0, 1.0) == pytest.approx(
        smooth_step(-0.5) * 2, rel=1e-12
    )


def test_beta_zero_loss_vanishes_exactly_at_mid_and_matching_future():
    quote = ok_quote()
    assert loss_quote(quote.mid, quote, beta=0, future=quote.future) == 0.0
    assert loss_quote(quote.mid + 1e-4, quote, beta=0, future=quote.future) > 0.0
    assert loss_quote(quote.mid, quote, beta=0, future=quote.future * 1.01) > 0.0


def test_beta_one_loss_is_flat_inside_the_spread():
    # the 1/100 indicator width needs price distances on the paper's quote
    # scale before it saturates, hence the wide spread here
    quote = ok_quote(bid=0.45, ask=0.65, strike=0.5, future=0.55, iv_bid=0.8, iv_ask=0.9)
    inside = loss_quote(quote.mid + 0.02, quote, beta=1, future=quote.future)
    outside = loss_quote(quote.ask + 0.08, quote, beta=1, future=quote.future)
    assert inside < outside / 1e3
    assert inside >= 0.0
    pinned_to_mid = loss_quote(quote.mid + 0.02, quote, beta=0, future=quote.future)
    assert inside < pinned_to_mid / 1e3


def test_spx_loss_drops_the_futures_term():
    quote = ok_quote(instrument="SPX", strike=1.0, future=1.0, bid=0.04, ask=0.05,
                     iv_bid=0.18, iv_ask=0.22)
    with_term = loss_quote(quote.mid, quote, beta=0, future=1.05)
    without = loss_quote(quote.mid, quote, beta=0)
    assert without == 0.0
    assert with_term > 0.0


def test_loss_quote_guards():
    with pytest.raises(CalibError, match="beta"):
        loss_quote(0.01, ok_quote(), beta=0.5)


def test_futures_error_examples():
    assert futures_error(20.0, 20.0) == 0.0
    assert futures_error(20.0, 20.2) == pytest.approx(0.01, abs=1e-12)
    assert futures_error(20.0, 19.8) == pytest.approx(0.01, abs=1e-12)
    with pytest.raises(CalibError):
        futures_error(0.0, 1.0)


# -- store-backed pricing -------------------------------------------------------------


@pytest.fixture(scope="module")
def ctx():
    cfg = ModelConfig(
        d=1, n=1, kappa=(1.1,), theta=(0.4,), sigma=(0.8,),
        rho=((1.0, -0.5), (-0.5, 1.0)), x0=(0.9,),
    )
    grid = PathGrid(horizon=0.15, steps_per_year=2520)
    store = build_sample_store(cfg, grid, maturities=[0.05, 0.15], n_paths=3000, seed=7)
    return PricingContext(store)


ELL = np.array([0.22, -0.05, 0.30])


def synthetic_book(ctx, ell, spread_vol=0.01):
    quotes = []
    for instrument, moneyness in (("VIX", (0.95, 1.0, 1.1)), ("SPX", (0.97, 1.0, 1.03))):
        for t in (0.05, 0.15):
            future, _ = mc_future(ctx, instrument, ell, t)
            xi = future  # r = 0
            for m in moneyness:
                strike = m * future
                price, _ = mc_price(ctx, instrument, ell, t, strike)
                iv = implied_vol(price, xi, strike, t, 0.0)
                iv_bid, iv_ask = iv - spread_vol / 2, iv + spread_vol / 2
                quotes.append(
                    Quote(
                        instrument=instrument, maturity=t, strike=strike,
                        bid=bs_call(xi, strike, iv_bid, t), ask=bs_call(xi, strike, iv_ask, t),
                        iv_bid=iv_bid, iv_ask=iv_ask, future=future,
                    )
                )
    return QuoteBook(quotes)


def test_flat_vix_parameter_prices_in_closed_form(ctx):
    ell = np.array([0.25, 0.0, 0.0])
    price, se = mc_price(ctx, "VIX", ell, 0.05, 0.2, r=0.03)
    assert se <= 1e-13
    assert price == pytest.approx(math.exp(-0.03 * 0.05) * 0.05, abs=1e-13)
    future, fse = mc_future(ctx, "VIX", ell, 0.05)
    assert future == pytest.approx(0.25, abs=1e-13)
    assert fse <= 1e-13


def test_flat_spx_parameter_matches_black_scholes(ctx):
    ell = np.array([0.2, 0.0, 0.0])
    for strike in (0.9, 1.0, 1.1):
        price, se = mc_price(ctx, "SPX", ell, 0.15, strike, variate=True)
        target = bs_call(1.0, strike, 0.2, 0.15, 0.0)
        assert abs(price - target) <= 3 * se


def test_control_variate_tightens_the_estimate(ctx):
    raw, raw_se = mc_price(ctx, "SPX", ELL, 0.15, 1.0)
    adj, adj_se = mc_price(ctx, "SPX", ELL, 0.15, 1.0, variate=True)
    assert adj_se < raw_se
    assert abs(adj - raw) <= 4 * (raw_se + adj_se)
    vraw, vraw_se = mc_price(ctx, "VIX", ELL, 0.05, 0.25)
    vadj, vadj_se = mc_price(ctx, "VIX", ELL, 0.05, 0.25, variate=True)
    assert vadj_se < vraw_se
    assert abs(vadj - vraw) <= 4 * (vraw_se + vadj_se)


def test_subset_estimator_uses_fewer_samples(ctx):
    full, full_se = mc_price(ctx, "VIX", ELL, 0.05, 0.25, variate=True)
    sub, sub_se = mc_price(ctx, "VIX", ELL, 0.05, 0.25, variate=True, n_vr=500)
    assert sub_se > full_se
    assert abs(sub - full) <= 4 * (sub_se + full_se)


def test_far_strike_price_is_zero(ctx):
    price, se = mc_price(ctx, "VIX", ELL, 0.05, 50.0)
    assert price == 0.0
    assert se == 0.0


def test_mc_price_guards(ctx):
    with pytest.raises(CalibError, match="instrument"):
        mc_price(ctx, "FTSE", ELL, 0.05, 0.2)
    with pytest.raises(CalibError, match="strike"):
        mc_price(ctx, "VIX", ELL, 0.05, 0.0)
    with pytest.raises(StoreError):
        mc_price(ctx, "VIX", ELL, 0.07, 0.2)


def test_variance_guard_prefers_raw_when_adjustment_backfires():
    rng = np.random.default_rng(1)
    raw = rng.standard_normal(100)
    worse = raw * 1.2
    assert _variance_guard(raw, worse) is raw
    better = raw * 0.5
    assert _variance_guard(raw, better) is better


# -- book-level losses ---------------------------------------------------------------


def test_losses_vanish_near_the_generating_parameter(ctx):
    book = synthetic_book(ctx, ELL)
    at_truth = loss_joint(ELL, book, ctx, lam=0.35, beta=1)
    perturbed = loss_joint(ELL * 1.6 + 0.05, book, ctx, lam=0.35, beta=1)
    assert at_truth >= 0.0
    assert at_truth < perturbed / 100.0


def test_joint_loss_is_the_convex_combination(ctx):
    book = synthetic_book(ctx, ELL)
    probe = ELL * 1.2
    spx = loss_spx(probe, book, ctx, beta=1)
    vix = loss_vix(probe, book, ctx, beta=1)
    for lam in (0.25, 0.5, 0.75):
        joint = loss_joint(probe, book, ctx, lam=lam, beta=1)
        assert joint == pytest.approx(lam * spx + (1 - lam) * vix, rel=1e-12)
    assert loss_joint(probe, book, ctx, lam=0.5, beta=1) >= 0.0


def test_lambda_boundaries_rejected(ctx):
    book = synthetic_book(ctx, ELL)
    for lam in (0.0, 1.0, -0.2, 1.7):
        with pytest.raises(CalibError, match="lambda"):
            loss_joint(ELL, book, ctx, lam=lam)


def test_empty_books_are_refused(ctx):
    empty = QuoteBook([])
    with pytest.raises(CalibError, match="VIX"):
        loss_vix(ELL, empty, ctx)
    with pytest.raises(CalibError, match="SPX"):
        loss_spx(ELL, empty, ctx)


# -- initial guess and optimizer -----------------------------------------------------


def test_initial_guess_prefers_the_smallest_box():
    guess = initial_guess(lambda x: float(x @ x), dim=6, n_draws=50, n_boxes=4, seed=3)
    assert np.abs(guess).max() <= 1e-4


def test_initial_guess_is_deterministic():
    loss = lambda x: float(np.sum((x - 0.03) ** 2))
    a = initial_guess(loss, dim=4, seed=11)
    b = initial_guess(loss, dim=4, seed=11)
    assert np.array_equal(a, b)


def test_initial_guess_beats_zero_start_on_most_seeds():
    target = np.array([0.05, -0.04, 0.02])
    loss = lambda x: float(np.sum((x - target) ** 2))
    at_zero = loss(np.zeros(3))
    wins = sum(loss(initial_guess(loss, dim=3, seed=s)) < at_zero for s in range(10))
    assert wins >= 8


def test_optimizer_solves_a_quadratic_bowl():
    target = np.array([0.3, -0.2, 0.7, 0.05, -0.4])
    loss = lambda x: float(np.sum((x - target) ** 2))
    result = optimize(loss, np.zeros(5), budget=100 * (2 * 5 + 2))
    assert isinstance(result, OptimResult)
    assert np.abs(result.ell - target).max() <= 1e-6
    assert result.best_loss <= 1e-10


def test_trace_is_monotone_and_budget_respected():
    loss = lambda x: float(np.sum(x**2))
    result = optimize(loss, np.full(4, 0.8), budget=37)
    assert result.n_evals <= 37
    assert len(result.trace) == result.n_evals
    assert np.all(np.diff(result.trace) <= 0)
    assert result.best_loss == loss(result.ell)


def test_optimizer_survives_non_finite_regions():
    def loss(x):
        if x[0] > 0.5:
            return float("inf")
        return float(np.sum((x - 0.4) ** 2))

    result = optimize(loss, np.array([0.45, -0.3]), budget=400)
    assert result.best_loss <= loss(np.array([0.45, -0.3]))
    assert result.ell[0] <= 0.5


def test_optimizer_rejects_non_finite_start():
    with pytest.raises(CalibError, match="finite"):
        optimize(lambda x: float("nan"), np.zeros(2), budget=10)


def test_random_search_improves_and_is_seeded():
    loss = lambda x: float(np.sum((x - 0.25) ** 2))
    a = optimize(loss, np.zeros(3), budget=300, method="random-search", seed=5)
    b = optimize(loss, np.zeros(3), budget=300, method="random-search", seed=5)
    assert a.best_loss < loss(np.zeros(3))
    assert np.array_equal(a.ell, b.ell)
    with pytest.raises(CalibError, match="method"):
        optimize(loss, np.zeros(3), budget=10, method="annealing")


# -- randomized projection ------------------------------------------------------------


def test_projection_shape_and_variance():
    a = randomized_projection(400, 16, seed=2)
    assert a.shape == (16, 400)
    target = 1.0 / 16
    sample = a.var()
    se = target * math.sqrt(2.0 / (a.size - 1))
    assert abs(sample - target) <= 4 * se


def test_projection_rejects_expansion():
    with pytest.raises(CalibError, match="reduce"):
        randomized_projection(10, 11)
    with pytest.raises(CalibError):
        randomized_projection(10, 0)


def test_identity_pullback_reproduces_prices(ctx):
    eye = np.eye(3)
    direct, _ = mc_price(ctx, "VIX", ELL, 0.05, 0.2)
    pulled, _ = mc_price(ctx, "VIX", pullback(eye, ELL), 0.05, 0.2)
    assert pulled == direct
    loss = lambda x: float(np.sum(x**2))
    assert reduce_loss(loss, eye)(ELL) == loss(ELL)


# -- reporting --------------------------------------------------------------------


def test_report_rows_and_futures_errors(ctx):
    book = synthetic_book(ctx, ELL)
    report = build_report(ELL, book, ctx, final_loss=0.0, metadata={"seed": 7})
    assert len(report.quote_fits) == len(book)
    assert {f.maturity for f in report.futures_fits} == {0.05, 0.15}
    for fit in report.futures_fits:
        assert fit.error >= 0.0
        assert fit.error == pytest.approx(futures_error(fit.market, fit.model), abs=0)
    assert report.metadata["seed"] == 7
    # generating parameter should price back inside its own synthetic spread
    assert report.inside_fraction == 1.0


def test_report_inverts_against_model_futures(ctx):
    book = synthetic_book(ctx, ELL)
    report = build_report(ELL, book, ctx)
    fit = next(f for f in report.quote_fits if f.instrument == "VIX")
    f_model, _ = mc_future(ctx, "VIX", ELL, fit.maturity)
    price, _ = mc_price(ctx, "VIX", ELL, fit.maturity, fit.strike)
    assert fit.iv_model == pytest.approx(
        implied_vol(price, f_model, fit.strike, fit.maturity, 0.0), abs=1e-12
    )


# -- rolling calibration -----------------------------------------------------------


def test_last_slice_respects_breakpoint_boundaries():
    bps = (0.05, 0.15)
    assert _last_slice(0.03, bps) == 0
    assert _last_slice(0.05, bps) == 0  # exact hit belongs to the ending segment
    assert _last_slice(0.08, bps) == 1
    assert _last_slice(0.15, bps) == 1
    assert _last_slice(0.20, bps) == 2


@pytest.fixture(scope="module")
def rolling_ctx():
    cfg = ModelConfig(
        d=1, n=1, kappa=(1.1,), theta=(0.4,), sigma=(0.8,),
        rho=((1.0, -0.5), (-0.5, 1.0)), x0=(0.9,),
    )
    grid = PathGrid(horizon=0.25, steps_per_year=2520)
    store = build_sample_store(
        cfg, grid, maturities=[0.05, 0.12, 0.15, 0.2], n_paths=1500, seed=23
    )
    return PricingContext(store)


def rolling_book(ctx, slices, rel_spread=0.05):
    # bid/ask symmetric in price, so the mid is exactly the model price and a
    # beta=0 loss vanishes at the generating parameters
    quotes = []
    legs = (
        ("VIX", slices.maturities, (0.95, 1.05)),
        ("SPX", (0.05, 0.12, 0.2), (0.98, 1.02)),
    )
    for instrument, maturities, moneyness in legs:
        for t in maturities:
            future, _ = mc_future(ctx, instrument, slices, t)
            for m in moneyness:
                strike = m * future
                price, _ = mc_price(ctx, instrument, slices, t, strike)
                bid, ask = price * (1 - rel_spread / 2), price * (1 + rel_spread / 2)
                quotes.append(
                    Quote(
                        instrument=instrument, maturity=t, strike=strike,
                        bid=bid, ask=ask,
                        iv_bid=implied_vol(bid, future, strike, t, 0.0),
                        iv_ask=implied_vol(ask, future, strike, t, 0.0),
                        future=future,
                    )
                )
    return QuoteBook(quotes)


TRUTH_SLICES = ParamSlices(
    (0.05, 0.15),
    [
        np.array([0.20, 0.02, 0.05]),
        np.array([0.30, -0.03, 0.08]),
        np.array([0.25, 0.01, 0.06]),
    ],
)


def test_rolling_stays_put_when_started_on_the_generator(rolling_ctx):
    book = rolling_book(rolling_ctx, TRUTH_SLICES)
    start = np.concatenate([TRUTH_SLICES.ells[0], TRUTH_SLICES.ells[1]])
    result = calibrate_rolling(
        book, rolling_ctx, lam=0.4, beta=0, budget=120, seed=3, ell0=start
    )
    assert result.slices.maturities == (0.05, 0.15)
    assert len(result.slices.ells) == 3
    assert len(result.stage_results) == 2
    # the first stage starts at the generating parameters, so its loss is zero
    # already and the best point never moves off them
    assert result.stage_results[0].best_loss <= 1e-12
    assert np.allclose(result.slices.ells[0], TRUTH_SLICES.ells[0], atol=1e-9)
    assert np.allclose(result.slices.ells[1], TRUTH_SLICES.ells[1], atol=1e-9)
    # the second stage warm-starts from the middle slice and has to move
    stage2 = result.stage_results[1]
    assert stage2.best_loss < 0.25 * stage2.trace[0]
    assert abs(result.slices.ells[2][0] - 0.25) < abs(0.30 - 0.25)
    for r in result.stage_results:
        assert all(b <= a + 1e-15 for a, b in zip(r.trace, r.trace[1:]))
    assert result.n_evals <= 2 * 120
    assert math.isfinite(result.final_loss)


def test_rolling_input_validation(rolling_ctx):
    book = rolling_book(rolling_ctx, TRUTH_SLICES)
    spx_only = QuoteBook([q for q in book if q.instrument == "SPX"])
    with pytest.raises(CalibError, match="breakpoints"):
        calibrate_rolling(spx_only, rolling_ctx, lam=0.4)
    with pytest.raises(CalibError, match="lambda"):
        calibrate_rolling(book, rolling_ctx, lam=1.0)
    with pytest.raises(CalibError, match="stage-one start"):
        calibrate_rolling(book, rolling_ctx, lam=0.4, ell0=np.zeros(5))


def test_variate_flag_is_inert_for_sliced_parameters(rolling_ctx):
    # the control variates need a single parameter vector; with slices the
    # raw estimator must come back instead of an error
    for instrument, maturity in (("VIX", 0.05), ("SPX", 0.15)):
        raw = mc_price(rolling_ctx, instrument, TRUTH_SLICES, maturity, 0.2, variate=False)
        var = mc_price(rolling_ctx, instrument, TRUTH_SLICES, maturity, 0.2, variate=True)
        assert var == raw
