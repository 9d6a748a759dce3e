"""Gated dictionary model: binary structure gates over basis outputs.

The model predicts dx/dt = (W * gates) F(x; xi) where gates is the
hard-thresholded binarization of real logits (open iff logit > 0, so a
logit of exactly zero is a closed gate). The forward pass is always exactly
binary; straight-through gradient treatment lives in the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import basis
from .basis import BasisLibrary
from .ode_sim import Diverged, DivergenceGuard, TimeGrid, Trajectory, VectorField, integrate


@dataclass(frozen=True)
class MetaModel:
    """Learned shared structure plus training-time per-task coefficients.

    train_weights (n_train, d, m) are kept for diagnostics and for the
    no-adaptation ablation; forecasting re-fits task weights from a prefix.
    """

    lib: BasisLibrary
    xi: np.ndarray
    gate_logits: np.ndarray  # (d, m)
    train_weights: np.ndarray | None = None
    selection_record: dict | None = None

    def __post_init__(self):
        logits = np.asarray(self.gate_logits, dtype=float)
        object.__setattr__(self, "gate_logits", logits)
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        if logits.shape != (self.lib.d, self.lib.m):
            raise ValueError(
                f"gate logits shape {logits.shape} != (d, m) = ({self.lib.d}, {self.lib.m})"
            )
        if not np.all(np.isfinite(logits)):
            raise ValueError("gate logits must be finite")

    @property
    def d(self) -> int:
        return self.lib.d

    @property
    def m(self) -> int:
        return self.lib.m

    def gates(self) -> np.ndarray:
        return gates(self.gate_logits)

    def with_selection(self, record: dict) -> "MetaModel":
        return replace(self, selection_record=record)


def gates(logits: np.ndarray) -> np.ndarray:
    """Binarize logits: open (1.0) iff sigmoid(logit) > 0.5, i.e. logit > 0."""
    return (np.asarray(logits, dtype=float) > 0.0).astype(float)


def predict_derivative(model: MetaModel, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """dx/dt prediction at states x of shape (..., d); w is (d, m)."""
    eff = np.asarray(w, dtype=float) * model.gates()
    feats = basis.eval_library(model.lib, model.xi, x)
    return feats @ eff.T


def model_field(model: MetaModel, w: np.ndarray) -> VectorField:
    eff = np.asarray(w, dtype=float) * model.gates()
    lib, xi = model.lib, model.xi

    def f(x):
        return basis.eval_library(lib, xi, x) @ eff.T

    return VectorField(dim=model.d, func=f)


def rollout(
    model: MetaModel,
    w: np.ndarray,
    x0: np.ndarray,
    grid: TimeGrid,
    guard: DivergenceGuard | None = None,
    n_sub: int = 10,
) -> Trajectory | Diverged:
    """Integrate the learned field from x0 over grid."""
    return integrate(model_field(model, w), x0, grid, guard=guard, n_sub=n_sub)


def extract_equation(
    model: MetaModel,
    w: np.ndarray | None = None,
    state_names: list[str] | None = None,
) -> str:
    """Human- and machine-readable form of the learned ODE.

    One clause per output dimension, joined by ' ; '. Open-gated terms appear
    in canonical library order. With w given, numeric coefficients are
    printed at full precision; otherwise symbolic placeholders W1, W2, ...
    are numbered row-major over the open gates.
    """
    names = state_names or [f"x{j + 1}" for j in range(model.d)]
    terms = basis.term_strings(model.lib, model.xi, names)
    g = model.gates()
    rows = []
    counter = 1
    for j in range(model.d):
        parts = []
        for k in range(model.m):
            if g[j, k] == 0.0:
                continue
            factor = terms[k]
            if w is None:
                coef_str = f"W{counter}"
                counter += 1
                parts.append(f"{coef_str}*{factor}" if factor != "1" else coef_str)
            else:
                c = float(w[j, k])
                mag = repr(abs(c))
                body = f"{mag}*{factor}" if factor != "1" else mag
                if not parts:
                    parts.append(body if c >= 0 else f"-{body}")
                else:
                    parts.append(f"+ {body}" if c >= 0 else f"- {body}")
        if not parts:
            rhs = "0"
        elif w is None:
            rhs = " + ".join(parts)
        else:
            rhs = " ".join(parts)
        rows.append(f"d{names[j]}/dt = {rhs}")
    return " ; ".join(rows)


def parse_equation(
    text: str,
    lib: BasisLibrary,
    xi: np.ndarray,
    state_names: list[str] | None = None,
) -> np.ndarray:
    """Inverse of extract_equation for numeric equations.

    Returns the effective (d, m) coefficient matrix (weights already masked
    by gates). Factors are matched against the library's canonical term
    strings, so parse(extract(model, w)) reproduces (w * gates) exactly.
    """
    names = state_names or [f"x{j + 1}" for j in range(lib.d)]
    term_index = {t: k for k, t in enumerate(basis.term_strings(lib, xi, names))}
    coeffs = np.zeros((lib.d, lib.m))
    rows = text.split(" ; ")
    if len(rows) != lib.d:
        raise ValueError(f"expected {lib.d} equation rows, found {len(rows)}")
    for j, row in enumerate(rows):
        lhs, rhs = row.split(" = ", 1)
        if lhs != f"d{names[j]}/dt":
            raise ValueError(f"unexpected left-hand side {lhs!r}")
        if rhs == "0":
            continue
        for sign, body in _split_terms(rhs):
            if "*" in body:
                mag_str, factor = body.split("*", 1)
            else:
                mag_str, factor = body, "1"
            if factor not in term_index:
                raise ValueError(f"unknown term {factor!r}")
            coeffs[j, term_index[factor]] = sign * float(mag_str)
    return coeffs


def _split_terms(rhs: str) -> list[tuple[float, str]]:
    """Split 'a*x + b*y - c*z' into signed terms, respecting parentheses."""
    out = []
    sign = 1.0
    if rhs.startswith("-"):
        sign = -1.0
        rhs = rhs[1:]
    depth = 0
    start = 0
    i = 0
    while i < len(rhs):
        ch = rhs[i]
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif (
            depth == 0
            and ch in "+-"
            and 0 < i < len(rhs) - 1
            and rhs[i - 1] == " "
            and rhs[i + 1] == " "
        ):
            out.append((sign, rhs[start:i - 1]))
            sign = 1.0 if ch == "+" else -1.0
            start = i + 2
        i += 1
    out.append((sign, rhs[start:]))
    return out


def count_open_gates(model: MetaModel) -> int:
    """||gates||_0, the sparsity statistic used for model selection."""
    return int(model.gates().sum())


def fit_weights_lsq(
    model: MetaModel,
    states: np.ndarray,
    targets: np.ndarray,
    ridge: float = 1e-8,
) -> np.ndarray:
    """Exact least-squares task weights against derivative targets.

    Solves, per output row, min_w ||F_open w - y||^2 over the open-gated
    columns via ridge-regularized normal equations (the tiny default ridge
    doubles as the singular-fit fallback). Closed-gate entries stay zero.
    """
    feats = basis.eval_library(model.lib, model.xi, np.asarray(states, dtype=float))
    g = model.gates()
    w = np.zeros((model.d, model.m))
    for j in range(model.d):
        active = np.where(g[j] > 0)[0]
        if active.size == 0:
            continue
        fa = feats[:, active]
        gram = fa.T @ fa + ridge * np.eye(active.size)
        rhs = fa.T @ targets[:, j]
        try:
            sol = np.linalg.solve(gram, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(fa, targets[:, j], rcond=None)[0]
        w[j, active] = sol
    return w
