"""Generator action on words, its matrix form and the exponential maps."""

import math

import numpy as np
import pytest

from sigvol.model import ModelConfig
from sigvol.polyproc import (
    NumericalRangeError,
    apply_dual,
    build_G,
    build_coefficients,
    dump_coordinate_list,
    embed_indices,
    expected_signature,
    initial_state,
    integrated_exponential,
    matrix_exponential,
    propagate_rows,
    restrict_alphabet,
    transition_matrix,
)
from sigvol.sigtensor import CoeffTensor, enumerate_words, shuffle, unvec, vec

RHO2 = (
    (1.0, -0.4, 0.3),
    (-0.4, 1.0, -0.6),
    (0.3, -0.6, 1.0),
)


def ou2(n=3, kind="ou"):
    """Two-factor mean-reverting config with unremarkable parameters."""
    kappa = (0.0, 0.0) if kind == "bm" else (1.2, 0.4)
    return ModelConfig(
        d=2, n=n, kappa=kappa, theta=(0.09, 1.5), sigma=(0.7, 2.0),
        rho=RHO2, x0=(1.0, 0.25), kind=kind,
    )


def ou1(kappa=2.0, theta=0.5, x0=1.0, sigma=0.9, n=2, kind="ou"):
    rho = ((1.0, 0.2), (0.2, 1.0))
    if kind == "bm":
        kappa = 0.0
    return ModelConfig(
        d=1, n=n, kappa=(kappa,), theta=(theta,), sigma=(sigma,),
        rho=rho, x0=(x0,), kind=kind,
    )


# -- drift/covariance tensors -------------------------------------------------


def test_time_coordinate_has_unit_drift_and_no_noise():
    coeffs = build_coefficients(ou2(), alphabet=3)
    assert coeffs.b[0] == CoeffTensor(3, 1, {(): 1.0})
    for j in range(3):
        assert len(coeffs.cov(0, j)) == 0


def test_bm_kind_drops_factor_drifts():
    cfg = ou2(kind="bm")
    coeffs = build_coefficients(cfg, alphabet=3)
    for j in (1, 2):
        assert len(coeffs.b[j]) == 0
    # covariances stay: sigma_i sigma_j rho_ij on the constant word
    assert coeffs.cov(1, 2).coeff(()) == pytest.approx(0.7 * 2.0 * -0.4, abs=0)
    assert coeffs.cov(1, 1).coeff(()) == 0.7**2


def test_ou_drift_closed_form():
    # kappa (theta - x0) = 2 (0.5 - 1) = -1 on the constant, -kappa on e_(1)
    coeffs = build_coefficients(ou1(kappa=2.0, theta=0.5, x0=1.0), alphabet=2)
    assert dict(coeffs.b[1].items()) == {(): -1.0, (1,): -2.0}


def test_full_alphabet_gives_price_brownian_unit_vol():
    cfg = ou2()
    coeffs = build_coefficients(cfg, alphabet=4)
    assert len(coeffs.b[3]) == 0
    assert coeffs.cov(3, 3).coeff(()) == 1.0
    assert coeffs.cov(1, 3).coeff(()) == pytest.approx(0.7 * 0.3, abs=0)
    assert coeffs.a[(1, 2)] == coeffs.cov(2, 1)


def test_symmetric_covariance_lookup():
    coeffs = build_coefficients(ou2(), alphabet=3)
    assert coeffs.cov(2, 1) == coeffs.cov(1, 2)


# -- the dual action ----------------------------------------------------------


def test_dual_kills_the_empty_word():
    coeffs = build_coefficients(ou2(), alphabet=3)
    assert len(apply_dual((), coeffs)) == 0


def test_dual_single_factor_letter():
    kappa, theta, x0 = 1.7, 0.3, 0.9
    coeffs = build_coefficients(ou1(kappa=kappa, theta=theta, x0=x0), alphabet=2)
    got = apply_dual((1,), coeffs)
    assert dict(got.items()) == {(): kappa * (theta - x0), (1,): -kappa}


def test_dual_time_appended_word_recovers_prefix():
    coeffs = build_coefficients(ou2(), alphabet=3)
    for prefix in [(), (1,), (2, 0), (1, 1, 2)]:
        got = apply_dual(prefix + (0,), coeffs)
        assert got == CoeffTensor.basis(3, prefix, level=len(prefix) + 1)


def test_dual_three_letter_word():
    """L e_(0,1,2) in closed form, coefficient by coefficient."""
    cfg = ou2()
    kappa2, theta2, x02 = cfg.kappa[1], cfg.theta[1], cfg.x0[1]
    sig1, sig2, rho12 = cfg.sigma[0], cfg.sigma[1], cfg.rho[0][1]
    coeffs = build_coefficients(cfg, alphabet=3)

    got = apply_dual((0, 1, 2), coeffs)

    expected = kappa2 * (theta2 - x02) * CoeffTensor.basis(3, (0, 1), level=3)
    expected = expected - kappa2 * shuffle(
        CoeffTensor.basis(3, (0, 1)), CoeffTensor.basis(3, (2,))
    )
    expected = expected + 0.5 * sig1 * sig2 * rho12 * CoeffTensor.basis(3, (0,), level=3)
    assert dict(got.items()) == dict(expected.items())
    # the shuffle expands over exactly the three interleavings
    assert got.coeff((0, 1)) == pytest.approx(kappa2 * (theta2 - x02), abs=0)
    assert got.coeff((0, 1, 2)) == -kappa2
    assert got.coeff((0, 2, 1)) == -kappa2
    assert got.coeff((2, 0, 1)) == -kappa2
    assert got.coeff((0,)) == pytest.approx(0.5 * sig1 * sig2 * rho12, abs=0)


def test_dual_never_lengthens_words():
    coeffs = build_coefficients(ou2(), alphabet=3)
    lab = enumerate_words(3, 3)
    for word in lab:
        image = apply_dual(word, coeffs)
        assert all(len(w) <= len(word) for w, _ in image.items())


# -- matrix form --------------------------------------------------------------


def test_G_columns_are_dual_images():
    coeffs = build_coefficients(ou2(), alphabet=3)
    G = build_G(coeffs, level=3)
    for word in G.labeling:
        column = G.matrix @ vec(CoeffTensor.basis(3, word, level=3), G.labeling)
        assert np.array_equal(column, vec(apply_dual(word, coeffs), G.labeling))


def test_G_maps_vec_to_vec_of_dual_on_a_random_tensor():
    coeffs = build_coefficients(ou2(), alphabet=3)
    G = build_G(coeffs, level=2)
    rng = np.random.default_rng(5)
    u = unvec(rng.standard_normal(G.dim), G.labeling)
    image = unvec(G.matrix @ vec(u, G.labeling), G.labeling)
    by_hand = CoeffTensor.zero(3, 2)
    for w, c in u.items():
        by_hand = by_hand + c * apply_dual(w, coeffs)
    for w in G.labeling:
        assert image.coeff(w) == pytest.approx(by_hand.coeff(w), rel=1e-12, abs=1e-14)


def test_G_constant_word_column_is_zero():
    # constants are harmonic, so the empty-word column (not row: the drift of
    # single letters feeds back into the constant) vanishes
    G = build_G(build_coefficients(ou2(), alphabet=3), level=3)
    dense = G.dense()
    assert not dense[:, 0].any()
    assert dense[0, :].any()


def test_G_nilpotent_for_driftless_factors():
    for cfg, level in [(ou2(kind="bm"), 3), (ou1(kind="bm"), 2)]:
        coeffs = build_coefficients(cfg, alphabet=cfg.d + 1)
        G = build_G(coeffs, level=level)
        power = G.matrix**(level + 1)
        assert power.nnz == 0
        # one power less is still nonzero
        assert (G.matrix**level).nnz > 0


def test_coordinate_dump_round_trips(tmp_path):
    G = build_G(build_coefficients(ou1(), alphabet=2), level=2)
    path = tmp_path / "G.txt"
    dump_coordinate_list(G, str(path))
    rebuilt = np.zeros((G.dim, G.dim))
    lines = path.read_text().splitlines()
    assert lines[0].startswith("#")
    for line in lines[1:]:
        row_word, col_word, value = line.split()
        parse = lambda s: tuple(int(x) for x in s.strip("()").split(",") if x)
        rebuilt[G.labeling.label(parse(row_word)), G.labeling.label(parse(col_word))] = float(value)
    assert np.array_equal(rebuilt, G.dense())


# -- exponential maps ---------------------------------------------------------


def test_expm_examples():
    assert np.array_equal(matrix_exponential(np.zeros((3, 3))), np.eye(3))
    nil = matrix_exponential(np.array([[0.0, 1.0], [0.0, 0.0]]))
    assert np.allclose(nil, [[1.0, 1.0], [0.0, 1.0]], atol=1e-15)
    diag = matrix_exponential(np.diag([0.3, -1.2]))
    assert np.allclose(diag, np.diag([math.exp(0.3), math.exp(-1.2)]), rtol=1e-13)


def test_expm_rejects_non_finite_and_overflow():
    with pytest.raises(NumericalRangeError):
        matrix_exponential(np.array([[np.nan, 0.0], [0.0, 0.0]]))
    with pytest.raises(NumericalRangeError):
        matrix_exponential(np.array([[800.0]]))


def test_expected_signature_at_zero_is_identity():
    G = build_G(build_coefficients(ou2(), alphabet=3), level=3)
    rng = np.random.default_rng(11)
    state = rng.standard_normal(G.dim)
    assert np.allclose(expected_signature(G, 0.0, state), state, atol=1e-15)


def test_expected_time_component_is_t():
    G = build_G(build_coefficients(ou2(), alphabet=3), level=3)
    out = expected_signature(G, 0.37, initial_state(G))
    assert out[G.labeling.label((0,))] == pytest.approx(0.37, abs=1e-12)


def test_driftless_second_moment_component():
    """From the unit state, the (1,1)-component grows like t/2 when the factor
    is a standard Brownian motion: twice the component is the expected square.
    Frozen value checked against a direct Monte Carlo estimate as well."""
    cfg = ou1(sigma=1.0, kind="bm")
    G = build_G(build_coefficients(cfg, alphabet=2), level=2)
    t = 0.73
    out = expected_signature(G, t, initial_state(G))
    value = out[G.labeling.label((1, 1))]
    assert value == pytest.approx(t / 2.0, abs=1e-12)

    rng = np.random.default_rng(123)
    half_squares = 0.5 * t * rng.standard_normal(200_000) ** 2
    se = half_squares.std() / math.sqrt(half_squares.size)
    assert abs(value - half_squares.mean()) < 4 * se


def test_expected_signature_batched_rows():
    G = build_G(build_coefficients(ou2(), alphabet=3), level=2)
    rng = np.random.default_rng(3)
    states = rng.standard_normal((5, G.dim))
    batched = expected_signature(G, 0.2, states)
    for k in range(5):
        assert np.allclose(batched[k], expected_signature(G, 0.2, states[k]), atol=1e-14)


def test_semigroup_property():
    G = build_G(build_coefficients(ou2(), alphabet=3), level=3)
    rng = np.random.default_rng(17)
    v = rng.standard_normal(G.dim)
    one_hop = expected_signature(G, 0.75, v)
    two_hops = expected_signature(G, 0.3, expected_signature(G, 0.45, v))
    assert np.allclose(one_hop, two_hops, rtol=1e-10, atol=1e-12)


def test_constant_component_stays_one():
    G = build_G(build_coefficients(ou2(), alphabet=3), level=3)
    for t in (0.1, 1.0, 5.0):
        out = expected_signature(G, t, initial_state(G))
        assert out[0] == pytest.approx(1.0, abs=1e-13)


def test_state_dimension_mismatch_rejected():
    G = build_G(build_coefficients(ou1(), alphabet=2), level=2)
    with pytest.raises(ValueError):
        expected_signature(G, 0.1, np.zeros(G.dim + 1))


# -- alphabet restriction -----------------------------------------------------


def test_restrict_to_full_alphabet_is_identity():
    coeffs = build_coefficients(ou2(), alphabet=3)
    G = build_G(coeffs, level=3)
    restricted = restrict_alphabet(coeffs, (0, 1, 2), level=3)
    assert np.array_equal(restricted.dense(), G.dense())


def test_restrict_to_time_gives_power_series():
    coeffs = build_coefficients(ou2(), alphabet=3)
    G0 = restrict_alphabet(coeffs, (0,), level=4)
    t = 1.3
    out = expected_signature(G0, t, initial_state(G0))
    for k in range(5):
        assert out[G0.labeling.label((0,) * k)] == pytest.approx(t**k / math.factorial(k), rel=1e-12)


def test_restriction_commutes_with_prediction():
    """Predicting on the full alphabet then reading off the price-free words
    must match predicting with the restricted matrix."""
    cfg = ou2(n=2)
    coeffs_full = build_coefficients(cfg, alphabet=4)
    G_full = build_G(coeffs_full, level=2)
    G_sub = restrict_alphabet(coeffs_full, (0, 1, 2), level=2)
    idx = embed_indices(G_sub.labeling, G_full.labeling, (0, 1, 2))

    state_full = initial_state(G_full)
    state_sub = initial_state(G_sub)
    for t in (0.08, 0.5):
        full = expected_signature(G_full, t, state_full)[idx]
        sub = expected_signature(G_sub, t, state_sub)
        assert np.allclose(full, sub, atol=1e-12, rtol=1e-12)


def test_restricted_matrix_matches_direct_build():
    # relabeled sub-alphabet build == native build on the same parameters
    cfg = ou2()
    coeffs_full = build_coefficients(cfg, alphabet=3)
    native = build_G(build_coefficients(cfg, alphabet=3), level=2)
    via_restrict = restrict_alphabet(coeffs_full, (0, 1, 2), level=2)
    assert np.array_equal(native.dense(), via_restrict.dense())


def test_restrict_rejects_bad_letters():
    coeffs = build_coefficients(ou2(), alphabet=3)
    with pytest.raises(ValueError):
        restrict_alphabet(coeffs, (), level=2)
    with pytest.raises(ValueError):
        restrict_alphabet(coeffs, (0, 7), level=2)


# -- time integral of the semigroup -------------------------------------------


def test_integrated_exponential_of_zero_matrix():
    cfg = ou1(kind="bm")
    coeffs = build_coefficients(cfg, alphabet=2)
    # level 0: the only word is constant, G = 0
    G = build_G(coeffs, level=0)
    delta = 0.6
    for method in ("augmented", "trapezoid", "taylor"):
        out = integrated_exponential(G, delta, method=method, n=8)
        assert np.allclose(out, delta * np.eye(1), atol=1e-15)


def test_trapezoid_error_quarters_when_doubling_nodes():
    G = build_G(build_coefficients(ou1(kappa=0.8), alphabet=2), level=2)
    delta = 0.5
    exact = integrated_exponential(G, delta, method="augmented")
    errors = []
    for n in (8, 16, 32):
        approx = integrated_exponential(G, delta, method="trapezoid", n=n)
        errors.append(np.linalg.norm(approx - exact))
    assert errors[0] / errors[1] == pytest.approx(4.0, rel=0.15)
    assert errors[1] / errors[2] == pytest.approx(4.0, rel=0.15)


def test_taylor_exact_on_nilpotent_generator():
    G = build_G(build_coefficients(ou2(kind="bm"), alphabet=3), level=3)
    delta = 0.4
    exact = integrated_exponential(G, delta, method="augmented")
    series = integrated_exponential(G, delta, method="taylor", n=1000)
    assert np.allclose(series, exact, atol=1e-13)


def test_taylor_refuses_large_spectral_radius():
    G = build_G(build_coefficients(ou1(kappa=3.0), alphabet=2), level=2)
    with pytest.raises(NumericalRangeError, match="spectral radius"):
        integrated_exponential(G, 1.0, method="taylor", n=50)


def test_integrated_exponential_matches_quadrature_limit():
    # dense trapezoid at high resolution converges to the block-matrix value
    G = build_G(build_coefficients(ou2(), alphabet=3), level=2)
    delta = 0.25
    exact = integrated_exponential(G, delta, method="augmented")
    fine = integrated_exponential(G, delta, method="trapezoid", n=4000)
    assert np.allclose(fine, exact, atol=1e-9)


def test_unknown_method_rejected():
    G = build_G(build_coefficients(ou1(), alphabet=2), level=1)
    with pytest.raises(ValueError, match="unknown method"):
        integrated_exponential(G, 0.1, method="simpson")


def test_transition_matrix_row_convention():
    # states are rows; the transition acts from the right as its transpose
    G = build_G(build_coefficients(ou1(), alphabet=2), level=2)
    state = initial_state(G)
    direct = transition_matrix(G, 0.3) @ state
    assert np.allclose(expected_signature(G, 0.3, state), direct, atol=1e-14)


def test_propagate_rows_matches_dense_prediction():
    G = build_G(build_coefficients(ou2(), alphabet=3), level=3)
    rng = np.random.default_rng(31)
    rows = rng.normal(size=(7, G.dim))
    rows[:, 0] = 1.0
    sparse_route = propagate_rows(G, 0.4, rows)
    dense_route = expected_signature(G, 0.4, rows)
    assert np.allclose(sparse_route, dense_route, rtol=1e-10, atol=1e-12)


def test_propagate_rows_identity_at_zero_and_shape_guard():
    G = build_G(build_coefficients(ou1(), alphabet=2), level=2)
    rows = np.arange(2.0 * G.dim).reshape(2, G.dim)
    assert np.allclose(propagate_rows(G, 0.0, rows), rows, atol=1e-14)
    with pytest.raises(ValueError, match="dimension"):
        propagate_rows(G, 0.1, np.zeros((3, G.dim + 2)))
