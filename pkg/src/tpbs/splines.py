"""Univariate B-spline bases on [0, 1].

Open-uniform knot vectors, Cox-de Boor evaluation of basis values and first
derivatives, and exact L2 inner-product (Gram) matrices of the basis or its
derivative over the full domain or any subinterval.  Gram entries are computed
with Gauss-Legendre quadrature per knot span, which is exact for the
piecewise-polynomial integrands involved, so "exact" below means exact up to
floating-point rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["SplineSpace", "BandedGram", "build_space", "eval_basis", "gram", "basis_masses"]


@dataclass
class SplineSpace:
    """One input dimension's B-spline basis.

    Attributes:
        degree: polynomial degree p >= 0.
        num_basis: number K of basis functions, K >= p + 1.
        knots: open-uniform knot vector on [0, 1], length K + p + 1.
        quad_order: Gauss-Legendre nodes per knot-span piece (p + 1 by
            default, exact for products of two degree-p polynomials).

    Immutable after construction; safe to share across threads.
    """

    degree: int
    num_basis: int
    knots: np.ndarray
    quad_order: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_spans(self) -> int:
        return self.num_basis - self.degree

    def span_breaks(self) -> np.ndarray:
        """Distinct knot values, i.e. the K - p + 1 span boundaries."""
        p = self.degree
        return self.knots[p : len(self.knots) - p]


@dataclass(frozen=True)
class BandedGram:
    """Symmetric K x K Gram matrix with entries vanishing for |i - j| > p.

    ``bands[d, i]`` holds the entry (i, i + d) for diagonal offsets
    d = 0..bandwidth; the tail of each diagonal row is zero padding.
    """

    bandwidth: int
    num_basis: int
    deriv_order: int
    interval: tuple[float, float]
    bands: np.ndarray

    def toarray(self) -> np.ndarray:
        """Dense symmetric matrix."""
        k = self.num_basis
        g = np.zeros((k, k))
        for d in range(self.bandwidth + 1):
            idx = np.arange(k - d)
            g[idx, idx + d] = self.bands[d, : k - d]
            g[idx + d, idx] = self.bands[d, : k - d]
        return g

    def matvec(self, c: np.ndarray) -> np.ndarray:
        """G @ c for a length-K coefficient vector."""
        out = self.bands[0] * c
        for d in range(1, self.bandwidth + 1):
            band = self.bands[d, : self.num_basis - d]
            out[: self.num_basis - d] += band * c[d:]
            out[d:] += band * c[: self.num_basis - d]
        return out

    def quad_form(self, c1: np.ndarray, c2: np.ndarray | None = None) -> float:
        """c1^T G c2 (c2 defaults to c1)."""
        if c2 is None:
            c2 = c1
        return float(c1 @ self.matvec(np.asarray(c2, dtype=float)))

    def right_apply(self, coeffs: np.ndarray) -> np.ndarray:
        """coeffs @ G for a stack of coefficient rows (..., K)."""
        k = self.num_basis
        out = coeffs * self.bands[0]
        for d in range(1, self.bandwidth + 1):
            band = self.bands[d, : k - d]
            out[..., d:] += coeffs[..., : k - d] * band
            out[..., : k - d] += coeffs[..., d:] * band
        return out

    def contract_pair(self, c_left: np.ndarray, c_right: np.ndarray | None = None) -> np.ndarray:
        """c_left @ G @ c_right^T for coefficient stacks of shape (R, K)."""
        if c_right is None:
            c_right = c_left
        return self.right_apply(c_left) @ c_right.T


def build_space(num_basis: int, degree: int = 3, quad_order: int | None = None) -> SplineSpace:
    """Open-uniform B-spline space with ``num_basis`` functions on [0, 1].

    The first and last knots are repeated degree + 1 times and the
    num_basis - degree spans are uniform.

    Raises:
        ValueError: if num_basis < degree + 1 or degree < 0.
    """
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    if num_basis < degree + 1:
        raise ValueError(f"num_basis must be >= degree + 1, got {num_basis} < {degree + 1}")
    interior = np.linspace(0.0, 1.0, num_basis - degree + 1)[1:-1]
    knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
    if quad_order is None:
        quad_order = degree + 1
    return SplineSpace(degree=degree, num_basis=num_basis, knots=knots, quad_order=quad_order)


def _find_span(space: SplineSpace, x: float) -> int:
    """Knot index j with knots[j] <= x < knots[j+1] (x = 1 maps to the last span)."""
    p = space.degree
    hi = len(space.knots) - p - 2
    j = int(np.searchsorted(space.knots, x, side="right")) - 1
    return min(max(j, p), hi)


def _basis_values(knots: np.ndarray, p: int, j: int, x: float) -> np.ndarray:
    """Values of the p + 1 degree-p basis functions active on span j."""
    vals = np.empty(p + 1)
    vals[0] = 1.0
    left = np.empty(p + 1)
    right = np.empty(p + 1)
    for d in range(1, p + 1):
        left[d] = x - knots[j + 1 - d]
        right[d] = knots[j + d] - x
        saved = 0.0
        for r in range(d):
            tmp = vals[r] / (right[r + 1] + left[d - r])
            vals[r] = saved + right[r + 1] * tmp
            saved = left[d - r] * tmp
        vals[d] = saved
    return vals


def _basis_deriv_values(knots: np.ndarray, p: int, j: int, x: float) -> np.ndarray:
    """First derivatives of the p + 1 degree-p basis functions active on span j."""
    vals = np.zeros(p + 1)
    if p == 0:
        return vals  # piecewise constants: zero derivative a.e.
    # B'_{i,p} = p * (N_{i,p-1}/(t_{i+p}-t_i) - N_{i+1,p-1}/(t_{i+p+1}-t_{i+1}))
    low = _basis_values(knots, p - 1, j, x)  # N_{j-p+1..j, p-1}
    first = j - p
    for a in range(p + 1):
        i = first + a
        acc = 0.0
        if a >= 1:  # N_{i,p-1} active iff i in [j-p+1, j]
            den = knots[i + p] - knots[i]
            if den > 0.0:
                acc += low[a - 1] / den
        if a <= p - 1:  # N_{i+1,p-1}
            den = knots[i + p + 1] - knots[i + 1]
            if den > 0.0:
                acc -= low[a] / den
        vals[a] = p * acc
    return vals


def eval_basis(space: SplineSpace, x: float, deriv: int = 0) -> tuple[int, np.ndarray]:
    """Nonzero basis (or first-derivative) values at x.

    Returns:
        (first_active_index, values): ``values`` has length degree + 1 and
        holds B_k(x) (or B_k'(x)) for k = first_active_index, ...; for
        deriv = 0 the values sum to 1.

    Raises:
        ValueError: if x is outside [0, 1] (inputs are scaled upstream) or
            deriv is not 0 or 1.
    """
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x = {x} outside [0, 1]")
    if deriv not in (0, 1):
        raise ValueError("deriv must be 0 or 1")
    p = space.degree
    j = _find_span(space, x)
    if deriv == 0:
        return j - p, _basis_values(space.knots, p, j, x)
    return j - p, _basis_deriv_values(space.knots, p, j, x)


def eval_basis_dense(space: SplineSpace, x: float, deriv: int = 0) -> np.ndarray:
    """All K basis (or derivative) values at x, densely."""
    first, vals = eval_basis(space, x, deriv)
    out = np.zeros(space.num_basis)
    out[first : first + space.degree + 1] = vals
    return out


def design_matrix(space: SplineSpace, xs: np.ndarray, deriv: int = 0) -> np.ndarray:
    """Dense (len(xs), K) matrix of basis values at each point."""
    xs = np.asarray(xs, dtype=float)
    out = np.zeros((len(xs), space.num_basis))
    for m, x in enumerate(xs):
        first, vals = eval_basis(space, float(x), deriv)
        out[m, first : first + space.degree + 1] = vals
    return out


def _gauss_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return nodes, weights


def _span_block(space: SplineSpace, j_span: int, lo: float, hi: float, deriv: int) -> np.ndarray:
    """Local (p+1) x (p+1) Gram block of span ``j_span`` restricted to [lo, hi]."""
    p = space.degree
    nodes, weights = _gauss_rule(space.quad_order)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (hi + lo)
    block = np.zeros((p + 1, p + 1))
    j = j_span + p  # knot index of the span
    for node, w in zip(nodes, weights):
        x = mid + half * node
        if deriv == 0:
            v = _basis_values(space.knots, p, j, x)
        else:
            v = _basis_deriv_values(space.knots, p, j, x)
        block += (w * half) * np.outer(v, v)
    return block


def _full_span_blocks(space: SplineSpace, deriv: int) -> np.ndarray:
    """Per-span local Gram blocks over full spans, cached on the space."""
    key = ("span_blocks", deriv)
    if key not in space._cache:
        breaks = space.span_breaks()
        blocks = np.empty((space.num_spans, space.degree + 1, space.degree + 1))
        for s in range(space.num_spans):
            blocks[s] = _span_block(space, s, breaks[s], breaks[s + 1], deriv)
        space._cache[key] = blocks
    return space._cache[key]


def gram(
    space: SplineSpace,
    interval: tuple[float, float] = (0.0, 1.0),
    deriv_order: int = 0,
) -> BandedGram:
    """Gram matrix G_ij = integral over [a, b] of B_i^(d) B_j^(d).

    Full spans inside [a, b] reuse cached per-span blocks; partially covered
    spans are integrated over the clipped piece.  a = b yields the zero
    matrix.  Accumulation order is fixed (ascending spans) so results are
    deterministic.

    Raises:
        ValueError: if the interval is not 0 <= a <= b <= 1, or deriv_order
            is not 0 or 1.
    """
    a, b = float(interval[0]), float(interval[1])
    if not (0.0 <= a <= b <= 1.0):
        raise ValueError(f"interval must satisfy 0 <= a <= b <= 1, got [{a}, {b}]")
    if deriv_order not in (0, 1):
        raise ValueError("deriv_order must be 0 or 1")
    p = space.degree
    k = space.num_basis
    bands = np.zeros((p + 1, k))
    if a == b:
        return BandedGram(p, k, deriv_order, (a, b), bands)

    breaks = space.span_breaks()
    full_blocks = _full_span_blocks(space, deriv_order)
    s_first = max(int(np.searchsorted(breaks, a, side="right")) - 1, 0)
    s_last = min(int(np.searchsorted(breaks, b, side="left")) - 1, space.num_spans - 1)
    for s in range(s_first, s_last + 1):
        lo = max(a, breaks[s])
        hi = min(b, breaks[s + 1])
        if hi <= lo:
            continue
        if lo == breaks[s] and hi == breaks[s + 1]:
            block = full_blocks[s]
        else:
            block = _span_block(space, s, lo, hi, deriv_order)
        for d in range(p + 1):
            for i in range(p + 1 - d):
                bands[d, s + i] += block[i, i + d]
    return BandedGram(p, k, deriv_order, (a, b), bands)


def basis_masses(space: SplineSpace, interval: tuple[float, float] = (0.0, 1.0)) -> np.ndarray:
    """Vector of integrals of each basis function over [a, b]."""
    a, b = float(interval[0]), float(interval[1])
    if not (0.0 <= a <= b <= 1.0):
        raise ValueError(f"interval must satisfy 0 <= a <= b <= 1, got [{a}, {b}]")
    p = space.degree
    out = np.zeros(space.num_basis)
    if a == b:
        return out
    nodes, weights = _gauss_rule(space.quad_order)
    breaks = space.span_breaks()
    s_first = max(int(np.searchsorted(breaks, a, side="right")) - 1, 0)
    s_last = min(int(np.searchsorted(breaks, b, side="left")) - 1, space.num_spans - 1)
    for s in range(s_first, s_last + 1):
        lo = max(a, breaks[s])
        hi = min(b, breaks[s + 1])
        if hi <= lo:
            continue
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        local = np.zeros(p + 1)
        for node, w in zip(nodes, weights):
            local += (w * half) * _basis_values(space.knots, p, s + p, mid + half * node)
        out[s : s + p + 1] += local
    return out
