"""Dirichlet energy of separable spline models, in closed form.

The squared gradient norm of a rank-R separable model integrates to

    energy = sum_{r,k} (v_r . v_k) sum_q <g'_{q,r}, g'_{q,k}>
             prod_{n != q} <g_{n,r}, g_{n,k}>,

a finite sum of products of univariate Gram quadratic forms.  The same
assembly evaluated with interval-restricted Grams gives the localized energy:
a sum of box integrals over sup-norm balls of radius rho around given points,
clipped to the unit cube, each box counted independently.

This product form never divides by inner products; the cosine/ratio
decomposition (component norms, angle products, derivative-to-value ratio
sums) is exposed separately with explicit degeneracy flags for near-zero
denominators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import TpbsModel
from .splines import SplineSpace, _full_span_blocks, _span_block, gram

__all__ = [
    "LdeConfig",
    "ParamGrad",
    "EnergyDecomposition",
    "DegenerateModelError",
    "EnergyAssembler",
    "dirichlet_energy",
    "local_dirichlet_energy",
    "grad_energy",
    "de_decomposition",
]


class DegenerateModelError(ValueError):
    """Some component norm vanishes; the ratio decomposition is unavailable."""


@dataclass
class LdeConfig:
    """Localized-energy configuration: box radius and box centers.

    ``rho`` is the half side length of the sup-norm balls, in (0, 0.5];
    ``points`` are the box centers (training samples), shape (M, N).
    """

    rho: float
    points: np.ndarray

    def __post_init__(self):
        if not 0.0 < self.rho <= 0.5:
            raise ValueError(f"rho must be in (0, 0.5], got {self.rho}")
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size and (self.points.min() < 0.0 or self.points.max() > 1.0):
            raise ValueError("box centers must lie in the unit hypercube")


@dataclass
class ParamGrad:
    """Parameter-shaped gradient: one array per coefficient block plus one
    for the output vectors."""

    coeff_grads: list[np.ndarray]
    out_grad: np.ndarray


class _DimIntervals:
    """Per-dimension interval structure for a box set.

    A box's Gram over [lo, hi] splits into fully covered spans (a contiguous
    run, summed via a cumulative table of per-span contractions) plus at most
    two partially covered end spans whose local (p+1) x (p+1) blocks are
    integrated once here.  For a box inside a single span the whole integral
    is the "lo" partial block and the span run is empty.
    """

    def __init__(self, space: SplineSpace, los: np.ndarray, his: np.ndarray):
        self.space = space
        p = space.degree
        breaks = space.span_breaks()
        num_spans = space.num_spans
        self.span_blocks0 = _full_span_blocks(space, 0)
        self.span_blocks1 = _full_span_blocks(space, 1)
        locate = lambda x: np.minimum(
            np.maximum(np.searchsorted(breaks, x, side="right") - 1, 0), num_spans - 1
        )
        self.lo_span = locate(los).astype(int)
        self.hi_span = locate(his).astype(int)
        m = len(los)
        self.lo_block0 = np.zeros((m, p + 1, p + 1))
        self.lo_block1 = np.zeros((m, p + 1, p + 1))
        self.hi_block0 = np.zeros((m, p + 1, p + 1))
        self.hi_block1 = np.zeros((m, p + 1, p + 1))
        # run of fully covered spans: [full_start, full_stop)
        self.full_start = np.empty(m, dtype=int)
        self.full_stop = np.empty(m, dtype=int)
        for i, (lo, hi) in enumerate(zip(los, his)):
            s_lo, s_hi = self.lo_span[i], self.hi_span[i]
            if s_lo == s_hi:
                if hi > lo:
                    self.lo_block0[i] = _span_block(space, s_lo, lo, hi, 0)
                    self.lo_block1[i] = _span_block(space, s_lo, lo, hi, 1)
                self.full_start[i] = self.full_stop[i] = s_lo + 1
                continue
            self.lo_block0[i] = _span_block(space, s_lo, lo, breaks[s_lo + 1], 0)
            self.lo_block1[i] = _span_block(space, s_lo, lo, breaks[s_lo + 1], 1)
            if hi > breaks[s_hi]:
                self.hi_block0[i] = _span_block(space, s_hi, breaks[s_hi], hi, 0)
                self.hi_block1[i] = _span_block(space, s_hi, breaks[s_hi], hi, 1)
            self.full_start[i] = s_lo + 1
            self.full_stop[i] = s_hi


def _coeff_span_slices(coeffs: np.ndarray, first: np.ndarray, width: int) -> np.ndarray:
    """Gather (len(first), R, width) windows of coefficient columns."""
    cols = first[:, None] + np.arange(width)[None, :]
    return coeffs[:, cols].transpose(1, 0, 2)


class EnergyAssembler:
    """Evaluates the closed-form energy (and its gradient) for a fixed set of
    integration boxes.

    Interval structures are precomputed once per (spaces, boxes) pair;
    evaluation is then pure linear algebra in the model parameters, so the
    assembler is reused across optimizer steps.  Boxes are processed in
    fixed-size chunks in a fixed order: results are deterministic and memory
    stays bounded.
    """

    def __init__(self, spaces: list[SplineSpace], intervals: np.ndarray):
        """intervals: (M, N, 2) array of per-box per-dimension [lo, hi]."""
        self.spaces = spaces
        self.num_boxes = intervals.shape[0]
        self.dims = [
            _DimIntervals(space, intervals[:, n, 0], intervals[:, n, 1])
            for n, space in enumerate(spaces)
        ]

    @classmethod
    def global_domain(cls, spaces: list[SplineSpace]) -> "EnergyAssembler":
        """Single box covering the whole unit cube."""
        intervals = np.zeros((1, len(spaces), 2))
        intervals[:, :, 1] = 1.0
        return cls(spaces, intervals)

    @classmethod
    def boxes(cls, spaces: list[SplineSpace], points: np.ndarray, rho: float) -> "EnergyAssembler":
        """One box per point: [x - rho, x + rho] clipped to [0, 1] per axis."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        intervals = np.stack(
            [np.clip(points - rho, 0.0, 1.0), np.clip(points + rho, 0.0, 1.0)], axis=-1
        )
        return cls(spaces, intervals)

    def _chunk_size(self, rank: int) -> int:
        # keep the (N, chunk, R, R) working stacks near cache size
        ndim = max(len(self.spaces), 1)
        budget = 400_000 // max(ndim * rank * rank, 1)
        return max(4, min(self.num_boxes, budget))

    def box_energies(self, coeffs: list[np.ndarray], out_vectors: np.ndarray) -> np.ndarray:
        """Energy of every box separately, shape (num_boxes,)."""
        energies, _ = self._run(coeffs, out_vectors, idx=None, want_grad=False)
        return energies

    def value(
        self,
        coeffs: list[np.ndarray],
        out_vectors: np.ndarray,
        idx: np.ndarray | None = None,
    ) -> float:
        """Sum of box energies (restricted to boxes ``idx`` if given)."""
        energies, _ = self._run(coeffs, out_vectors, idx=idx, want_grad=False)
        return float(energies.sum())

    def value_and_grad(
        self,
        coeffs: list[np.ndarray],
        out_vectors: np.ndarray,
        idx: np.ndarray | None = None,
    ) -> tuple[float, ParamGrad]:
        energies, grad = self._run(coeffs, out_vectors, idx=idx, want_grad=True)
        return float(energies.sum()), grad

    def _span_tables(self, n: int, coeffs: np.ndarray, rank: int):
        """Per-call span windows, per-span contractions, and (memory
        permitting) the cumulative pairwise-product tables."""
        dim = self.dims[n]
        p1 = dim.space.degree + 1
        num_spans = dim.space.num_spans
        windows = _coeff_span_slices(coeffs, np.arange(num_spans), p1)
        span_e0 = windows @ dim.span_blocks0
        span_e1 = windows @ dim.span_blocks1
        cums = None
        if len(self.spaces) * 2 * (num_spans + 1) * rank * rank <= 40_000_000:
            cums = (self._cum_table(windows, span_e0), self._cum_table(windows, span_e1))
        return windows, span_e0, span_e1, cums

    @staticmethod
    def _cum_table(windows, span_e):
        num_spans, rank, _ = span_e.shape
        cum = np.zeros((num_spans + 1, rank, rank))
        np.cumsum(span_e @ windows.transpose(0, 2, 1), axis=0, out=cum[1:])
        return cum

    def _pair_products(self, n: int, deriv: int, coeffs: np.ndarray, ids: np.ndarray, table):
        """Gram quadratic forms C G C^T for every box of the chunk, via the
        cumulative span table plus the two partial end blocks."""
        dim = self.dims[n]
        p1 = dim.space.degree + 1
        windows, span_e0, span_e1, cums = table
        span_e = span_e1 if deriv else span_e0
        lo_block = (dim.lo_block1 if deriv else dim.lo_block0)[ids]
        hi_block = (dim.hi_block1 if deriv else dim.hi_block0)[ids]
        cum = cums[deriv] if cums is not None else self._cum_table(windows, span_e)
        start, stop = dim.full_start[ids], dim.full_stop[ids]
        prods = cum[stop] - cum[start]
        lo_win = _coeff_span_slices(coeffs, dim.lo_span[ids], p1)
        hi_win = _coeff_span_slices(coeffs, dim.hi_span[ids], p1)
        lo_e = lo_win @ lo_block
        hi_e = hi_win @ hi_block
        prods += lo_e @ lo_win.transpose(0, 2, 1)
        prods += hi_e @ hi_win.transpose(0, 2, 1)
        return prods, (span_e, lo_e, hi_e, lo_win, hi_win)

    def _run(self, coeffs, out_vectors, idx, want_grad):
        """Chunked evaluation.  Gradient pieces that live on whole spans are
        accumulated as per-span weight deltas across all chunks and resolved
        with a single prefix sum per dimension at the end; the partial end
        blocks scatter-add per box as chunks are processed."""
        box_ids = np.arange(self.num_boxes) if idx is None else np.asarray(idx)
        ndim = len(self.spaces)
        rank = out_vectors.shape[0]
        vv = out_vectors @ out_vectors.T
        tables = [self._span_tables(n, c, rank) for n, c in enumerate(coeffs)]
        energies = np.empty(len(box_ids))
        if want_grad:
            coeff_grads = [np.zeros_like(c) for c in coeffs]
            out_grad = np.zeros_like(out_vectors)
            deltas = [
                np.zeros((2, d.space.num_spans + 1, rank, rank)) for d in self.dims
            ]
        step = self._chunk_size(rank)
        for lo in range(0, len(box_ids), step):
            ids = box_ids[lo : lo + step]
            nbox = len(ids)
            # Per-dimension pairwise Gram products: P_n = C G0 C^T, D_n = C G1 C^T.
            value_prods = np.empty((ndim, nbox, rank, rank))
            deriv_prods = np.empty((ndim, nbox, rank, rank))
            parts0, parts1 = [], []
            for n, c in enumerate(coeffs):
                value_prods[n], t0 = self._pair_products(n, 0, c, ids, tables[n])
                deriv_prods[n], t1 = self._pair_products(n, 1, c, ids, tables[n])
                parts0.append(t0)
                parts1.append(t1)
            # Prefix/suffix Hadamard products over dimensions (the hot-loop cache).
            pre = np.empty_like(value_prods)
            suf = np.empty_like(value_prods)
            pre[0] = 1.0
            for n in range(1, ndim):
                np.multiply(pre[n - 1], value_prods[n - 1], out=pre[n])
            suf[ndim - 1] = 1.0
            for n in range(ndim - 2, -1, -1):
                np.multiply(suf[n + 1], value_prods[n + 1], out=suf[n])
            total = np.zeros((nbox, rank, rank))
            for n in range(ndim):
                total += deriv_prods[n] * pre[n] * suf[n]
            energies[lo : lo + nbox] = np.einsum("mrs,rs->m", total, vv)
            if not want_grad:
                continue

            out_grad += 2.0 * total.sum(axis=0) @ out_vectors
            # Left/right partial energies exclude one dimension from the
            # product, giving the coefficient of P_n in the energy.
            left = np.zeros((nbox, rank, rank))
            rights = np.empty_like(value_prods)
            rights[ndim - 1] = 0.0
            for n in range(ndim - 2, -1, -1):
                rights[n] = rights[n + 1] * value_prods[n + 1] + deriv_prods[n + 1] * suf[n + 1]
            for n in range(ndim):
                dim = self.dims[n]
                deriv_weight = vv * pre[n] * suf[n]
                value_weight = vv * (left * suf[n] + rights[n] * pre[n])
                start, stop = dim.full_start[ids], dim.full_stop[ids]
                np.add.at(deltas[n][1], start, deriv_weight)
                np.add.at(deltas[n][1], stop, -deriv_weight)
                np.add.at(deltas[n][0], start, value_weight)
                np.add.at(deltas[n][0], stop, -value_weight)
                _, lo_e0, hi_e0, _, _ = parts0[n]
                _, lo_e1, hi_e1, _, _ = parts1[n]
                p1 = dim.space.degree + 1
                lo_contrib = deriv_weight @ lo_e1 + value_weight @ lo_e0  # (m, R, p1)
                hi_contrib = deriv_weight @ hi_e1 + value_weight @ hi_e0
                grad_t = coeff_grads[n].T
                cols = dim.lo_span[ids][:, None] + np.arange(p1)[None, :]
                np.add.at(
                    grad_t, cols.ravel(), lo_contrib.transpose(0, 2, 1).reshape(-1, rank)
                )
                cols = dim.hi_span[ids][:, None] + np.arange(p1)[None, :]
                np.add.at(
                    grad_t, cols.ravel(), hi_contrib.transpose(0, 2, 1).reshape(-1, rank)
                )
                if n < ndim - 1:
                    left = left * value_prods[n] + deriv_prods[n] * pre[n]
        if not want_grad:
            return energies, None
        for n in range(ndim):
            dim = self.dims[n]
            num_spans = dim.space.num_spans
            p1 = dim.space.degree + 1
            _, span_e0, span_e1, _ = tables[n]
            contrib = np.cumsum(deltas[n][1][:num_spans], axis=0) @ span_e1
            contrib += np.cumsum(deltas[n][0][:num_spans], axis=0) @ span_e0
            for offset in range(p1):
                coeff_grads[n][:, offset : offset + num_spans] += contrib[:, :, offset].T
            coeff_grads[n] *= 2.0
        return energies, ParamGrad(coeff_grads=coeff_grads, out_grad=out_grad)


def dirichlet_energy(model: TpbsModel) -> float:
    """Integral of the squared gradient Frobenius norm over the unit cube."""
    asm = EnergyAssembler.global_domain(model.spaces)
    return asm.value(model.coeffs, model.out_vectors)


def local_dirichlet_energy(model: TpbsModel, cfg: LdeConfig) -> float:
    """Sum of gradient-norm integrals over the clipped boxes around
    ``cfg.points`` (overlapping boxes counted independently)."""
    if cfg.points.size == 0:
        return 0.0
    asm = EnergyAssembler.boxes(model.spaces, cfg.points, cfg.rho)
    return asm.value(model.coeffs, model.out_vectors)


def grad_energy(model: TpbsModel, cfg: LdeConfig | None = None) -> tuple[float, ParamGrad]:
    """Energy and its gradient with respect to every parameter.

    ``cfg`` selects the localized energy; None means the global one.
    """
    if cfg is None:
        asm = EnergyAssembler.global_domain(model.spaces)
    else:
        if cfg.points.size == 0:
            return 0.0, ParamGrad(
                coeff_grads=[np.zeros_like(c) for c in model.coeffs],
                out_grad=np.zeros_like(model.out_vectors),
            )
        asm = EnergyAssembler.boxes(model.spaces, cfg.points, cfg.rho)
    return asm.value_and_grad(model.coeffs, model.out_vectors)


@dataclass
class EnergyDecomposition:
    """Norm/angle/ratio split of the closed-form energy.

    energy = norms @ (cosines * grad_ratio_sums) @ norms on the pairs where
    no denominator degenerates.  ``cosines`` multiplies the output-vector
    cosine with the per-dimension factor cosines (entries bounded by 1 in
    magnitude up to rounding, unit diagonal); ``grad_ratio_sums`` sums the
    derivative-to-value inner-product ratios over dimensions; ``coupling``
    is their elementwise product.  Entries flagged in ``degenerate`` carry
    NaN instead of a value.
    """

    norms: np.ndarray
    cosines: np.ndarray
    grad_ratio_sums: np.ndarray
    coupling: np.ndarray
    degenerate: np.ndarray = field(repr=False)

    def quadratic_form(self) -> float:
        """norms @ coupling @ norms; NaN if any pair is degenerate."""
        if self.degenerate.any():
            return float("nan")
        return float(self.norms @ self.coupling @ self.norms)

    def coupling_eigenvalues(self) -> np.ndarray | None:
        """Eigenvalues of the symmetric coupling matrix (diagnostic only;
        nonnegativity is an empirical observation, not asserted)."""
        if self.degenerate.any():
            return None
        return np.linalg.eigvalsh(self.coupling)


def de_decomposition(model: TpbsModel, tol_den: float = 1e-12) -> EnergyDecomposition:
    """Cosine/ratio decomposition of the global energy.

    Pairs whose value inner product (or output-vector inner product) falls
    below ``tol_den`` in magnitude are flagged degenerate rather than
    divided through.

    Raises:
        DegenerateModelError: if some component has zero norm (the energy
            itself is still computable through :func:`dirichlet_energy`).
    """
    vv = model.out_vectors @ model.out_vectors.T
    value_prods = []
    deriv_prods = []
    for space, c in zip(model.spaces, model.coeffs):
        g0 = gram(space, (0.0, 1.0), 0)
        g1 = gram(space, (0.0, 1.0), 1)
        value_prods.append(g0.contract_pair(c))
        deriv_prods.append(g1.contract_pair(c))
    v_norms = np.sqrt(np.diag(vv))
    factor_norms = [np.sqrt(np.maximum(np.diag(p), 0.0)) for p in value_prods]
    norms = v_norms * np.prod(factor_norms, axis=0)
    if np.any(v_norms <= tol_den) or any(np.any(f <= tol_den) for f in factor_norms):
        raise DegenerateModelError(
            "a component norm vanishes; ratio decomposition unavailable"
        )
    degenerate = np.abs(vv) <= tol_den
    for p in value_prods:
        degenerate |= np.abs(p) <= tol_den
    rank = model.rank
    cosines = vv / np.outer(v_norms, v_norms)
    ratio_sums = np.zeros((rank, rank))
    with np.errstate(divide="ignore", invalid="ignore"):
        for p, d, f in zip(value_prods, deriv_prods, factor_norms):
            cosines = cosines * (p / np.outer(f, f))
            ratio_sums = ratio_sums + d / p
    coupling = cosines * ratio_sums
    for arr in (cosines, ratio_sums, coupling):
        arr[degenerate] = np.nan
    return EnergyDecomposition(
        norms=norms,
        cosines=cosines,
        grad_ratio_sums=ratio_sums,
        coupling=coupling,
        degenerate=degenerate,
    )
