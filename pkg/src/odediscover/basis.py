"""Ordered dictionary of candidate basis functions with analytic partials.

The base library over a d-dimensional state holds, in canonical order: the
constant 1, the d coordinates, the d(d+1)/2 degree-2 monomials, and one
parameterized sine per coordinate, sin(scale * x_j + phase). The sine scale
and phase are the only trainable global parameters; they are packed into a
single flat vector `xi`, two slots per owner, initialized to (1, 0).

An optional second layer (``compose_layer2``) appends sine-of-basis terms
sin(a * f_k(x) + b) with fresh slots, plus polynomial-times-sine products.
Inner references always point at earlier entries, so a single left-to-right
pass evaluates everything.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

CONSTANT = "constant"
LINEAR = "linear"
QUADRATIC = "quadratic"
SINE = "sine"
SINE_OF = "sine_of"
PRODUCT = "product"

_POLY_KINDS = (CONSTANT, LINEAR, QUADRATIC)


class AlreadyComposedError(ValueError):
    """compose_layer2 called on a library that already has a second layer."""


@dataclass(frozen=True)
class BasisFunction:
    kind: str
    j: int = -1  # primary coordinate (linear, quadratic, sine)
    l: int = -1  # secondary coordinate (quadratic, j <= l)
    inner: int = -1  # referenced basis index (sine_of, first product factor)
    inner2: int = -1  # second product factor
    xi_offset: int = -1  # start of owned slots in the flat xi vector
    xi_slots: int = 0


@dataclass(frozen=True)
class BasisLibrary:
    d: int
    functions: tuple[BasisFunction, ...]
    composed: bool = False

    @property
    def m(self) -> int:
        return len(self.functions)

    @property
    def n_xi(self) -> int:
        return sum(f.xi_slots for f in self.functions)


def make_library(d: int) -> BasisLibrary:
    """Canonical base library: 1, x_j, x_j x_l (j<=l), sin(xi x_j + xi')."""
    if d < 1:
        raise ValueError(f"state dimension must be >= 1, got {d}")
    funcs = [BasisFunction(CONSTANT)]
    for j in range(d):
        funcs.append(BasisFunction(LINEAR, j=j))
    for j in range(d):
        for l in range(j, d):
            funcs.append(BasisFunction(QUADRATIC, j=j, l=l))
    offset = 0
    for j in range(d):
        funcs.append(BasisFunction(SINE, j=j, xi_offset=offset, xi_slots=2))
        offset += 2
    return BasisLibrary(d=d, functions=tuple(funcs))


def default_xi(lib: BasisLibrary) -> np.ndarray:
    """Neutral start: every (scale, phase) pair is (1, 0)."""
    xi = np.zeros(lib.n_xi)
    xi[0::2] = 1.0
    return xi


def compose_layer2(lib: BasisLibrary) -> BasisLibrary:
    """Append sine-of-basis terms and polynomial-times-sine products.

    For every first-layer f_k a term sin(a f_k(x) + b) with two fresh slots;
    then f_p * f_s for every first-layer polynomial p and first-layer sine s.
    Ordering of the appended block is the first-layer ordering, so the
    extension is stable.
    """
    if lib.composed:
        raise AlreadyComposedError("library already has a second layer")
    funcs = list(lib.functions)
    offset = lib.n_xi
    for k in range(lib.m):
        funcs.append(BasisFunction(SINE_OF, inner=k, xi_offset=offset, xi_slots=2))
        offset += 2
    poly_idx = [k for k, f in enumerate(lib.functions) if f.kind in _POLY_KINDS]
    sine_idx = [k for k, f in enumerate(lib.functions) if f.kind == SINE]
    for p in poly_idx:
        for s in sine_idx:
            funcs.append(BasisFunction(PRODUCT, inner=p, inner2=s))
    return BasisLibrary(d=lib.d, functions=tuple(funcs), composed=True)


def default_xi_extended(lib: BasisLibrary, base_xi: np.ndarray) -> np.ndarray:
    """Extend a base xi vector with neutral (1, 0) pairs for new layer-2 slots."""
    xi = default_xi(lib)
    xi[: base_xi.size] = base_xi
    return xi


def eval_library(lib: BasisLibrary, xi: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate all basis functions; x has shape (..., d), result (..., m)."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape[:-1] + (lib.m,))
    for k, f in enumerate(lib.functions):
        out[..., k] = _eval_one(f, xi, x, out)
    return out


def _eval_one(f: BasisFunction, xi: np.ndarray, x: np.ndarray, cols: np.ndarray):
    if f.kind == CONSTANT:
        return np.ones(x.shape[:-1])
    if f.kind == LINEAR:
        return x[..., f.j]
    if f.kind == QUADRATIC:
        return x[..., f.j] * x[..., f.l]
    if f.kind == SINE:
        return np.sin(xi[f.xi_offset] * x[..., f.j] + xi[f.xi_offset + 1])
    if f.kind == SINE_OF:
        return np.sin(xi[f.xi_offset] * cols[..., f.inner] + xi[f.xi_offset + 1])
    if f.kind == PRODUCT:
        return cols[..., f.inner] * cols[..., f.inner2]
    raise ValueError(f"unknown basis kind {f.kind!r}")


def grad_x(lib: BasisLibrary, xi: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Jacobian of the library in the state: shape (..., m, d)."""
    x = np.asarray(x, dtype=float)
    cols = eval_library(lib, xi, x)
    out = np.zeros(x.shape[:-1] + (lib.m, lib.d))
    for k, f in enumerate(lib.functions):
        if f.kind == CONSTANT:
            continue
        elif f.kind == LINEAR:
            out[..., k, f.j] = 1.0
        elif f.kind == QUADRATIC:
            out[..., k, f.j] += x[..., f.l]
            out[..., k, f.l] += x[..., f.j]
        elif f.kind == SINE:
            a = xi[f.xi_offset]
            out[..., k, f.j] = a * np.cos(a * x[..., f.j] + xi[f.xi_offset + 1])
        elif f.kind == SINE_OF:
            a = xi[f.xi_offset]
            c = a * np.cos(a * cols[..., f.inner] + xi[f.xi_offset + 1])
            out[..., k, :] = c[..., None] * out[..., f.inner, :]
        elif f.kind == PRODUCT:
            out[..., k, :] = (
                cols[..., f.inner, None] * out[..., f.inner2, :]
                + cols[..., f.inner2, None] * out[..., f.inner, :]
            )
    return out


def _xi_partials(lib, xi, x, cols, k, memo):
    """List of (slot, dF_k/dxi_slot) pairs for function k; arrays match x[..., 0]."""
    if k in memo:
        return memo[k]
    f = lib.functions[k]
    parts: list[tuple[int, np.ndarray]] = []
    if f.kind == SINE:
        arg = xi[f.xi_offset] * x[..., f.j] + xi[f.xi_offset + 1]
        c = np.cos(arg)
        parts = [(f.xi_offset, x[..., f.j] * c), (f.xi_offset + 1, c)]
    elif f.kind == SINE_OF:
        inner_val = cols[..., f.inner]
        a = xi[f.xi_offset]
        c = np.cos(a * inner_val + xi[f.xi_offset + 1])
        parts = [(f.xi_offset, inner_val * c), (f.xi_offset + 1, c)]
        for slot, dinner in _xi_partials(lib, xi, x, cols, f.inner, memo):
            parts.append((slot, a * c * dinner))
    elif f.kind == PRODUCT:
        for slot, d1 in _xi_partials(lib, xi, x, cols, f.inner, memo):
            parts.append((slot, cols[..., f.inner2] * d1))
        for slot, d2 in _xi_partials(lib, xi, x, cols, f.inner2, memo):
            parts.append((slot, cols[..., f.inner] * d2))
    memo[k] = parts
    return parts


def grad_xi(lib: BasisLibrary, xi: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Partials of every basis output in xi: shape (..., m, n_xi).

    Rows of parameter-free functions are identically zero.
    """
    x = np.asarray(x, dtype=float)
    cols = eval_library(lib, xi, x)
    out = np.zeros(x.shape[:-1] + (lib.m, lib.n_xi))
    memo: dict = {}
    for k in range(lib.m):
        for slot, part in _xi_partials(lib, xi, x, cols, k, memo):
            out[..., k, slot] += part
    return out


def vjp_xi(lib: BasisLibrary, xi: np.ndarray, x: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Accumulate sum_cells q[..., k] * dF_k/dxi without materializing grad_xi.

    q has shape (..., m) matching eval_library's output; returns (n_xi,).
    """
    x = np.asarray(x, dtype=float)
    cols = eval_library(lib, xi, x)
    g = np.zeros(lib.n_xi)
    memo: dict = {}
    for k in range(lib.m):
        parts = _xi_partials(lib, xi, x, cols, k, memo)
        for slot, part in parts:
            g[slot] += float(np.sum(q[..., k] * part))
    return g


def xi_dependent_columns(lib: BasisLibrary) -> np.ndarray:
    """Boolean mask of columns whose value depends on xi."""
    dep = np.zeros(lib.m, dtype=bool)
    for k, f in enumerate(lib.functions):
        if f.kind in (SINE, SINE_OF):
            dep[k] = True
        elif f.kind == PRODUCT:
            dep[k] = dep[f.inner] or dep[f.inner2]
    return dep


def _fmt(v: float) -> str:
    return repr(float(v))


def term_strings(lib: BasisLibrary, xi: np.ndarray, names: list[str] | None = None) -> list[str]:
    """Canonical printable form of each basis function, e.g. 'sin(1.0*x1 + 0.0)'.

    These strings are the contract between extract_equation and
    parse_equation: they round-trip exactly.
    """
    if names is None:
        names = [f"x{j + 1}" for j in range(lib.d)]
    out: list[str] = []
    for f in lib.functions:
        if f.kind == CONSTANT:
            out.append("1")
        elif f.kind == LINEAR:
            out.append(names[f.j])
        elif f.kind == QUADRATIC:
            if f.j == f.l:
                out.append(f"{names[f.j]}^2")
            else:
                out.append(f"{names[f.j]}*{names[f.l]}")
        elif f.kind == SINE:
            out.append(
                f"sin({_fmt(xi[f.xi_offset])}*{names[f.j]} + {_fmt(xi[f.xi_offset + 1])})"
            )
        elif f.kind == SINE_OF:
            out.append(
                f"sin({_fmt(xi[f.xi_offset])}*{out[f.inner]} + {_fmt(xi[f.xi_offset + 1])})"
            )
        elif f.kind == PRODUCT:
            out.append(f"{out[f.inner]}*{out[f.inner2]}")
    return out


def library_to_dict(lib: BasisLibrary) -> dict:
    return {
        "d": lib.d,
        "composed": lib.composed,
        "functions": [
            {
                "kind": f.kind,
                "j": f.j,
                "l": f.l,
                "inner": f.inner,
                "inner2": f.inner2,
                "xi_offset": f.xi_offset,
                "xi_slots": f.xi_slots,
            }
            for f in lib.functions
        ],
    }


def library_from_dict(spec: dict) -> BasisLibrary:
    funcs = tuple(
        BasisFunction(
            kind=f["kind"],
            j=f["j"],
            l=f["l"],
            inner=f["inner"],
            inner2=f["inner2"],
            xi_offset=f["xi_offset"],
            xi_slots=f["xi_slots"],
        )
        for f in spec["functions"]
    )
    return BasisLibrary(d=spec["d"], functions=funcs, composed=spec["composed"])
