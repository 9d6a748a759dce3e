import numpy as np
import pytest

from odediscover import basis
from odediscover.basis import (
    AlreadyComposedError,
    compose_layer2,
    default_xi,
    default_xi_extended,
    eval_library,
    grad_x,
    grad_xi,
    library_from_dict,
    library_to_dict,
    make_library,
    term_strings,
    vjp_xi,
)


def test_base_library_size_and_order():
    lib = make_library(2)
    assert lib.m == 8  # 1 + 2 + 3 + 2
    kinds = [f.kind for f in lib.functions]
    assert kinds == ["constant", "linear", "linear", "quadratic", "quadratic",
                     "quadratic", "sine", "sine"]
    assert lib.n_xi == 4


def test_eval_identity_parameters():
    lib = make_library(2)
    xi = default_xi(lib)
    out = eval_library(lib, xi, np.array([2.0, 3.0]))
    expect = [1.0, 2.0, 3.0, 4.0, 6.0, 9.0, np.sin(2.0), np.sin(3.0)]
    assert np.allclose(out, expect, atol=1e-15)


def test_eval_zero_state():
    lib = make_library(3)
    out = eval_library(lib, default_xi(lib), np.zeros(3))
    assert out[0] == 1.0
    assert np.allclose(out[1:], 0.0, atol=1e-15)


def test_eval_phase_shift_identity():
    lib = make_library(1)
    xi = np.array([2.0, np.pi / 2])
    out = eval_library(lib, xi, np.array([0.5]))
    # sin(2*0.5 + pi/2) = cos(1)
    assert out[-1] == pytest.approx(np.cos(1.0), abs=1e-15)


def test_eval_batched_shapes():
    lib = make_library(2)
    xi = default_xi(lib)
    x = np.random.default_rng(0).normal(size=(5, 7, 2))
    out = eval_library(lib, xi, x)
    assert out.shape == (5, 7, lib.m)
    assert np.allclose(out[2, 3], eval_library(lib, xi, x[2, 3]))


def test_grad_xi_at_origin():
    lib = make_library(1)
    g = grad_xi(lib, default_xi(lib), np.array([0.0]))
    # scale=1, phase=0, x=0: d/dscale = x cos(0) = 0, d/dphase = cos(0) = 1
    sine_row = g[-1]
    assert sine_row[0] == pytest.approx(0.0, abs=1e-15)
    assert sine_row[1] == pytest.approx(1.0, abs=1e-15)


def test_polynomial_rows_have_zero_xi_grad():
    lib = make_library(2)
    g = grad_xi(lib, default_xi(lib), np.array([0.3, -0.7]))
    assert np.all(g[:6] == 0.0)


def _fd_check_grads(lib, xi, x, h=1e-5, tol=1e-6):
    gxi = grad_xi(lib, xi, x)
    gx = grad_x(lib, xi, x)
    for s in range(lib.n_xi):
        xp, xm = xi.copy(), xi.copy()
        xp[s] += h
        xm[s] -= h
        fd = (eval_library(lib, xp, x) - eval_library(lib, xm, x)) / (2 * h)
        assert np.allclose(gxi[:, s], fd, rtol=tol, atol=tol)
    for j in range(lib.d):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fd = (eval_library(lib, xi, xp) - eval_library(lib, xi, xm)) / (2 * h)
        assert np.allclose(gx[:, j], fd, rtol=tol, atol=tol)


def test_grads_match_finite_differences_base():
    rng = np.random.default_rng(42)
    lib = make_library(2)
    for _ in range(100):
        xi = default_xi(lib) + rng.normal(0, 0.5, lib.n_xi)
        x = rng.normal(0, 1.5, 2)
        _fd_check_grads(lib, xi, x)


def test_grads_match_finite_differences_composed():
    rng = np.random.default_rng(43)
    lib = compose_layer2(make_library(2))
    for _ in range(25):
        xi = default_xi(lib) + rng.normal(0, 0.3, lib.n_xi)
        x = rng.normal(0, 1.0, 2)
        _fd_check_grads(lib, xi, x)


def test_grad_x_quadratic_diagonal():
    lib = make_library(2)
    g = grad_x(lib, default_xi(lib), np.array([3.0, 1.0]))
    k = next(i for i, f in enumerate(lib.functions) if f.kind == "quadratic" and f.j == 0 and f.l == 0)
    assert g[k, 0] == pytest.approx(6.0)
    assert g[k, 1] == 0.0


def test_grad_x_linear_one_hot():
    lib = make_library(3)
    g = grad_x(lib, default_xi(lib), np.array([0.1, 0.2, 0.3]))
    for j in range(3):
        k = 1 + j
        row = np.zeros(3)
        row[j] = 1.0
        assert np.array_equal(g[k], row)


def test_vjp_xi_matches_dense_grad():
    rng = np.random.default_rng(7)
    lib = compose_layer2(make_library(2))
    xi = default_xi(lib) + rng.normal(0, 0.2, lib.n_xi)
    x = rng.normal(0, 1.0, (6, 2))
    q = rng.normal(size=(6, lib.m))
    dense = grad_xi(lib, xi, x)  # (6, m, n_xi)
    expect = np.einsum("nm,nms->s", q, dense)
    assert np.allclose(vjp_xi(lib, xi, x, q), expect, rtol=1e-12, atol=1e-12)


def test_compose_layer2_counts():
    lib = make_library(2)
    comp = compose_layer2(lib)
    # 8 base + 8 sine-of-basis + (6 polynomials x 2 sines) products
    assert comp.m == 8 + 8 + 12
    assert comp.composed
    with pytest.raises(AlreadyComposedError):
        compose_layer2(comp)


def test_composed_prefix_matches_base():
    lib = make_library(2)
    comp = compose_layer2(lib)
    xi_b = default_xi(lib)
    xi_c = default_xi_extended(comp, xi_b)
    x = np.array([0.4, -1.2])
    assert np.allclose(eval_library(comp, xi_c, x)[: lib.m], eval_library(lib, xi_b, x))


def test_composed_represents_sin_of_q_squared():
    lib = make_library(2)
    comp = compose_layer2(lib)
    xi = default_xi(comp)
    q2 = next(
        i for i, f in enumerate(lib.functions) if f.kind == "quadratic" and f.j == 1 and f.l == 1
    )
    k = next(
        i for i, f in enumerate(comp.functions) if f.kind == "sine_of" and f.inner == q2
    )
    x = np.array([0.3, 0.8])
    assert eval_library(comp, xi, x)[k] == pytest.approx(np.sin(0.8**2), abs=1e-15)


def test_linear_independence_rank():
    rng = np.random.default_rng(11)
    lib = make_library(2)
    xi = np.array([1.3, 0.2, 0.7, -0.1])  # generic parameters
    x = rng.normal(0, 2.0, (200, 2))
    mat = eval_library(lib, xi, x)
    assert np.linalg.matrix_rank(mat) == lib.m


def test_serialization_round_trip_bit_identical():
    lib = compose_layer2(make_library(3))
    xi = default_xi(lib) + 0.01
    spec = library_to_dict(lib)
    lib2 = library_from_dict(spec)
    assert lib2 == lib
    x = np.random.default_rng(3).normal(size=(10, 3))
    a = eval_library(lib, xi, x)
    b = eval_library(lib2, xi, x)
    assert np.array_equal(a, b)


def test_term_strings_canonical():
    lib = make_library(2)
    xi = default_xi(lib)
    terms = term_strings(lib, xi, ["theta", "omega"])
    assert terms[0] == "1"
    assert terms[1] == "theta"
    assert terms[3] == "theta^2"
    assert terms[4] == "theta*omega"
    assert terms[6] == "sin(1.0*theta + 0.0)"
