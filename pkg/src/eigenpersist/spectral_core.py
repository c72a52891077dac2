"""Embedded point spectrum: localized eigenpairs, the shift ``Hbar = H + P0``,
and hypothesis diagnostics.

On a finite box an embedded eigenvalue is not spectrally isolated: the window
around it also contains discretized continuum states (box standing waves).
The two populations separate by boundary amplitude, not by eigenvalue.  A
localized state decays exponentially toward the walls (below 1e-5 on the
default grids), while a standing wave keeps O(1/sqrt(L)) mass there; the
classifier threshold sits orders of magnitude between them.

Extraction runs shift-inverted Lanczos around the window center with a fixed
start vector, classifies by edge amplitude, clusters degenerate values, and
refines the selected cluster by inverse iteration plus a Rayleigh-Ritz
projection.  The refined basis is realified if needed, weighted-orthonormal,
and deterministic in sign and (for degenerate pairs) in angular parity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh

from ._banded import BandedLU, BorderedLU
from .errors import (
    ConfigError,
    DimensionMismatch,
    EmbeddedNotFound,
    WindowNotIsolated,
)
from .operator_lab import (
    FOURTH_ORDER_LINE,
    Dirichlet,
    DiscreteOperator,
    Grid1D,
    ModelSpec,
    PerturbationBasis,
)

__all__ = [
    "SpectralData",
    "HypothesisReport",
    "find_embedded_eigenpairs",
    "make_hbar",
    "check_hypotheses",
]


@dataclass
class SpectralData:
    """An embedded eigenvalue with its real, weighted-orthonormal eigenbasis.

    ``eigvecs`` has shape ``(multiplicity, n_total)``; row ``i`` is psi_i with
    ``<psi_i, psi_j> = delta_ij`` in the grid inner product.  The rank-n
    projection ``P0 = sum_i psi_i <psi_i, .>`` is stored through this factor,
    never as a dense matrix.
    """

    lambda0: float
    eigvecs: np.ndarray
    multiplicity: int
    residuals: np.ndarray
    edge_amplitude: float
    isolation_radius: float
    nearest_other: float
    window: tuple
    grid: Grid1D
    model: ModelSpec
    continuum_edge: float = 0.0

    def __post_init__(self):
        vecs = np.asarray(self.eigvecs, dtype=float)
        if vecs.ndim != 2 or vecs.shape[0] != self.multiplicity:
            raise DimensionMismatch(
                f"eigvecs must be ({self.multiplicity}, n), got shape {vecs.shape}"
            )
        self.eigvecs = vecs
        self.residuals = np.asarray(self.residuals, dtype=float)

    @property
    def p0(self) -> np.ndarray:
        """Factor of the rank-n projection (rows are the basis vectors)."""
        return self.eigvecs

    def project(self, v: np.ndarray) -> np.ndarray:
        """Apply P0 to a grid vector."""
        overlap = self.grid.h * (self.eigvecs @ v)
        return self.eigvecs.T @ overlap

    def gram_defect(self) -> float:
        """Largest deviation of <psi_i, psi_j> from the identity."""
        g = self.grid.h * (self.eigvecs @ self.eigvecs.T)
        return float(np.max(np.abs(g - np.eye(self.multiplicity))))

    def summary_dict(self) -> dict:
        return {
            "lambda0": self.lambda0,
            "multiplicity": self.multiplicity,
            "residuals": [float(r) for r in self.residuals],
            "edge_amplitude": self.edge_amplitude,
            "isolation_radius": self.isolation_radius,
            "nearest_other": self.nearest_other,
            "window": [float(self.window[0]), float(self.window[1])],
            "continuum_edge": self.continuum_edge,
        }


@dataclass(frozen=True)
class HypothesisReport:
    """Pass/fail proxies for the structural assumptions, with diagnostics.

    ``real_basis`` and the rank fields stay ``None`` when the corresponding
    input was not supplied; :attr:`passed` then ignores them.
    """

    symmetric: bool
    symmetry_defect: float
    real_basis: Optional[bool]
    edge_localized: bool
    edge_amplitude: float
    isolated: bool
    nearest_other: float
    isolation_radius: float
    embedded: bool
    lambda0: float
    multiplicity: int
    h5_rank: Optional[int]
    h5_expected: Optional[int]

    @property
    def h5_ok(self) -> Optional[bool]:
        if self.h5_rank is None:
            return None
        return self.h5_rank == self.h5_expected

    @property
    def passed(self) -> bool:
        ok = self.symmetric and self.edge_localized and self.isolated and self.embedded
        if self.real_basis is not None:
            ok = ok and self.real_basis
        if self.h5_rank is not None:
            ok = ok and bool(self.h5_ok)
        return ok

    def summary_dict(self) -> dict:
        return {
            "passed": self.passed,
            "symmetric": self.symmetric,
            "symmetry_defect": self.symmetry_defect,
            "real_basis": self.real_basis,
            "edge_localized": self.edge_localized,
            "edge_amplitude": self.edge_amplitude,
            "isolated": self.isolated,
            "nearest_other": self.nearest_other,
            "isolation_radius": self.isolation_radius,
            "embedded": self.embedded,
            "lambda0": self.lambda0,
            "multiplicity": self.multiplicity,
            "h5_rank": self.h5_rank,
            "h5_expected": self.h5_expected,
            "h5_ok": self.h5_ok,
        }


def _edge_amplitude(op: DiscreteOperator, psi: np.ndarray, fraction: float) -> float:
    """Largest |psi| over the outermost ``fraction`` of node layers, both ends."""
    nz, nm = op.nz, op.n_modes
    layers = max(op.boundary_depth + 1, int(math.ceil(fraction * nz)))
    block = np.abs(np.asarray(psi)).reshape(nz, nm)
    return float(max(block[:layers].max(), block[nz - layers :].max()))


def _default_isolation(op: DiscreteOperator, lam: float) -> float:
    """Half the distance to the nearest channel threshold; 0.2 on the line."""
    if op.model.kind == FOURTH_ORDER_LINE:
        return 0.2
    return 0.5 * min(abs(lam - j * j) for j, _ in op.modes)


def _shifted_lu(op: DiscreteOperator, sigma: float):
    """Factorization of op - sigma (projector term included when present)."""
    shifted = op.band.copy()
    shifted.add_diagonal(0, np.full(op.n_total, -sigma))
    if op.projector_vecs is None:
        return BandedLU(shifted)
    dtype = shifted.data.dtype
    left = (op.weight * op.projector_vecs.T).astype(dtype)
    if op.bc_rows.size:
        left[op.bc_rows, :] = 0
    return BorderedLU(shifted, left, op.projector_vecs.T.astype(dtype))


def _shift_invert(op: DiscreteOperator, sigma: float, k: int):
    """Eigenvalues nearest ``sigma`` by Lanczos on the inverted shift.

    The start vector is fixed (constant vector), so the returned pairs are
    reproducible bit for bit.
    """
    n = op.n_total
    lu = _shifted_lu(op, sigma)
    opinv = LinearOperator((n, n), matvec=lu.solve, dtype=float)
    action = LinearOperator((n, n), matvec=op.apply, dtype=float)
    v0 = np.full(n, 1.0 / math.sqrt(n))
    vals, vecs = eigsh(action, k=k, sigma=sigma, OPinv=opinv, v0=v0, tol=0, which="LM")
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def _scan(op: DiscreteOperator, lo: float, hi: float, pad: float, k: int, spacing: float, rtol: float):
    """Merged shift-inverted sweep over the padded window.

    One shift sees only its k nearest states, so shifts are spread about
    every ``spacing`` energy units and the results deduplicated (same value
    and essentially the same vector).  Eigenvalues are returned sorted with
    l2-orthonormal representative columns.
    """
    lo_s = max(lo - pad, 0.5 * lo)
    hi_s = hi + pad
    count = max(1, int(math.ceil((hi_s - lo_s) / spacing)))
    step = (hi_s - lo_s) / count
    vals: list[float] = []
    cols: list[np.ndarray] = []
    for i in range(count):
        sigma = lo_s + (i + 0.5) * step
        sv, sx = _shift_invert(op, sigma, k)
        for v, x in zip(sv, sx.T):
            dup = any(
                abs(v - w) <= rtol * max(1.0, abs(v)) and abs(float(x @ y)) > 0.5
                for w, y in zip(vals, cols)
            )
            if not dup:
                vals.append(float(v))
                cols.append(x)
    order = np.argsort(vals)
    return np.asarray(vals)[order], np.column_stack([cols[i] for i in order])


def _complete_cluster(
    op: DiscreteOperator,
    lam_hat: float,
    cols: np.ndarray,
    edge_tol: float,
    edge_fraction: float,
    cluster_rtol: float,
    max_extra: int = 6,
) -> np.ndarray:
    """Recover degenerate partners that single-vector Lanczos cannot see.

    A Krylov space grown from one start vector meets a multiple eigenvalue
    through a single direction of its eigenspace, so the sweep may return a
    degenerate cluster short of vectors.  Deflated inverse iteration from a
    fixed generic probe pulls in one missing partner per pass: after
    projecting out the known vectors, the solve amplifies a remaining
    eigendirection by ~1/1e-9 while the nearest continuum state gains orders
    of magnitude less.  A candidate is accepted only if its Rayleigh quotient
    rejoins the cluster, its residual is small, and it is edge-localized.
    """
    n = op.n_total
    lu = _shifted_lu(op, lam_hat + 1e-9)
    probe = np.random.default_rng(987654321).standard_normal(n)
    scale = max(1.0, abs(lam_hat))
    for _ in range(max_extra):
        x = probe.copy()
        for _ in range(6):
            x = x - cols @ (cols.T @ x)
            nrm = float(np.linalg.norm(x))
            if nrm < 1e-200:
                return cols
            x = lu.solve(x / nrm)
        x = x - cols @ (cols.T @ x)
        nrm = float(np.linalg.norm(x))
        if nrm < 1e-200:
            return cols
        x /= nrm
        hx = op.apply(x)
        rq = float(x @ hx)
        resid = float(np.linalg.norm(hx - rq * x))
        localized = _edge_amplitude(op, x / math.sqrt(op.weight), edge_fraction) < edge_tol
        if abs(rq - lam_hat) <= 10.0 * cluster_rtol * scale and resid <= 1e-6 * scale and localized:
            cols = np.column_stack([cols, x])
        else:
            return cols
    return cols


def _cluster(values: np.ndarray, indices: np.ndarray, rtol: float) -> list[np.ndarray]:
    """Group sorted eigenvalue indices whose gaps are below rtol * max(1, |value|)."""
    groups: list[list[int]] = []
    for idx in indices:
        v = values[idx]
        if groups and abs(v - values[groups[-1][-1]]) <= rtol * max(1.0, abs(v)):
            groups[-1].append(idx)
        else:
            groups.append([idx])
    return [np.asarray(g, dtype=int) for g in groups]


def _realify(vecs: np.ndarray) -> np.ndarray:
    """Real representatives of a complex basis: the larger of Re and Im per vector."""
    if not np.iscomplexobj(vecs):
        return vecs
    out = []
    for v in vecs:
        re, im = v.real, v.imag
        out.append(re if np.linalg.norm(re) >= np.linalg.norm(im) else im)
    return np.asarray(out, dtype=float)


def _parity_split(op: DiscreteOperator, vecs: np.ndarray) -> np.ndarray:
    """Rotate a degenerate cylinder cluster onto angular-reflection eigenvectors.

    Reflection theta -> -theta keeps cos modes and flips sin modes, commutes
    with the operator, and splits a cos/sin pair deterministically where the
    eigenvalue alone cannot.
    """
    r = vecs.shape[0]
    signs = np.array([1.0 if parity == "cos" else -1.0 for _, parity in op.modes])
    reflected = (vecs.reshape(r, op.nz, op.n_modes) * signs).reshape(r, -1)
    g = op.weight * (vecs @ reflected.T)
    w, u = np.linalg.eigh((g + g.T) / 2.0)
    return u[:, np.argsort(-w)].T @ vecs


def _canonicalize(op: DiscreteOperator, vecs: np.ndarray) -> np.ndarray:
    """Weighted-orthonormal real basis with a deterministic orientation."""
    vecs = _realify(vecs)
    q, _ = np.linalg.qr(vecs.T)
    vecs = q.T / math.sqrt(op.weight)
    if vecs.shape[0] > 1 and op.model.is_cylinder:
        vecs = _parity_split(op, vecs)
    for i in range(vecs.shape[0]):
        peak = int(np.argmax(np.abs(vecs[i])))
        if vecs[i, peak] < 0:
            vecs[i] = -vecs[i]
    return vecs


def _apply_ext(op: DiscreteOperator, v: np.ndarray) -> np.ndarray:
    """Operator action in extended precision (for residual measurement)."""
    ve = v.astype(np.longdouble)
    y = op.band.matvec(ve)
    if op.projector_vecs is not None:
        pv = op.projector_vecs.astype(np.longdouble)
        contrib = pv.T @ (np.longdouble(op.weight) * (pv @ ve))
        if op.bc_rows.size:
            contrib[op.bc_rows] = 0
        y = y + contrib
    return y


def _residuals_ext(op: DiscreteOperator, lam0: float, vecs: np.ndarray) -> np.ndarray:
    out = []
    for v in vecs:
        r = _apply_ext(op, v) - np.longdouble(lam0) * v.astype(np.longdouble)
        out.append(math.sqrt(op.weight) * float(np.linalg.norm(r.astype(float))))
    return np.asarray(out)


def _refine(op: DiscreteOperator, lam_hat: float, block: np.ndarray, tol_eig: float, max_rounds: int = 4):
    """Inverse iteration plus Rayleigh-Ritz on the selected cluster.

    The shift is offset by 1e-9 so the factored matrix is merely
    ill-conditioned, which is exactly what inverse iteration wants.
    """
    lu = _shifted_lu(op, lam_hat + 1e-9)
    x = block.T * math.sqrt(op.weight)  # l2-orthonormal columns
    r = x.shape[1]
    lam0, ritz, resid = lam_hat, None, None
    for round_ in range(max_rounds):
        y = np.column_stack([lu.solve(x[:, i]) for i in range(r)])
        x, _ = np.linalg.qr(y)
        hx = np.column_stack([op.apply(x[:, i]) for i in range(r)])
        s = x.T @ hx
        ritz, u = np.linalg.eigh((s + s.T) / 2.0)
        x = x @ u
        hx = hx @ u
        lam0 = float(np.mean(ritz))
        resid = max(
            float(np.linalg.norm(hx[:, i] - ritz[i] * x[:, i])) for i in range(r)
        )
        if round_ >= 1 and resid <= tol_eig:
            break
    return lam0, x.T / math.sqrt(op.weight)


def find_embedded_eigenpairs(
    op: DiscreteOperator,
    window,
    *,
    isolation: Optional[float] = None,
    edge_tol: float = 1e-3,
    edge_fraction: float = 0.02,
    tol_eig: float = 1e-8,
    max_states: int = 8,
    cluster_rtol: float = 1e-6,
    sweep_spacing: float = 0.5,
) -> SpectralData:
    """Locate the edge-localized eigenvalue cluster inside ``window``.

    Raises :class:`EmbeddedNotFound` when every state near the window is a
    box standing wave, and :class:`WindowNotIsolated` when a second localized
    cluster sits in the window or within the isolation radius of the found
    one.  ``isolation`` overrides the model default (0.2 on the line, half
    the distance to the nearest channel threshold on cylinders).  The scan
    covers the window padded by the isolation radius; localized states
    beyond that horizon are out of scope.
    """
    if not isinstance(op.bc, Dirichlet):
        raise ConfigError("eigenpair extraction needs the symmetric Dirichlet realization")
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ConfigError(f"empty window ({lo:g}, {hi:g})")
    if lo <= 0.0:
        raise ConfigError("window must sit inside the continuous spectrum (lower edge > 0)")

    k = min(max_states, op.n_total - 2)
    pad = float(isolation) if isolation is not None else _default_isolation(op, 0.5 * (lo + hi))
    vals, raw = _scan(op, lo, hi, pad, k, sweep_spacing, cluster_rtol)
    psi = raw.T / math.sqrt(op.weight)

    edge = np.array([_edge_amplitude(op, p, edge_fraction) for p in psi])
    localized = np.flatnonzero(edge < edge_tol)
    clusters = _cluster(vals, localized, cluster_rtol)
    means = [float(np.mean(vals[g])) for g in clusters]

    inside = [i for i, m in enumerate(means) if lo <= m <= hi]
    if not inside:
        raise EmbeddedNotFound(
            f"no edge-localized eigenvalue in ({lo:g}, {hi:g}); "
            f"nearest candidates have edge amplitude >= {edge.min():.3e}"
            if edge.size
            else f"no states found near ({lo:g}, {hi:g})"
        )
    if len(inside) > 1:
        found = ", ".join(f"{means[i]:.6g}" for i in inside)
        raise WindowNotIsolated(f"several localized eigenvalues in the window: {found}")

    sel = inside[0]
    lam_hat = means[sel]
    delta1 = float(isolation) if isolation is not None else _default_isolation(op, lam_hat)
    nearest = min(
        (abs(m - lam_hat) for i, m in enumerate(means) if i != sel),
        default=math.inf,
    )
    if nearest < delta1:
        raise WindowNotIsolated(
            f"another localized eigenvalue at distance {nearest:.3e} "
            f"< isolation radius {delta1:.3e}"
        )

    cols = raw[:, clusters[sel]]
    cols, _ = np.linalg.qr(cols)
    cols = _complete_cluster(op, lam_hat, cols, edge_tol, edge_fraction, cluster_rtol)
    lam0, block = _refine(op, lam_hat, cols.T / math.sqrt(op.weight), tol_eig)
    block = _canonicalize(op, block)
    residuals = _residuals_ext(op, lam0, block)
    edge_amp = max(_edge_amplitude(op, p, edge_fraction) for p in block)

    return SpectralData(
        lambda0=lam0,
        eigvecs=block,
        multiplicity=block.shape[0],
        residuals=residuals,
        edge_amplitude=edge_amp,
        isolation_radius=delta1,
        nearest_other=nearest,
        window=(lo, hi),
        grid=op.grid,
        model=op.model,
    )


def make_hbar(op: DiscreteOperator, spec: SpectralData) -> DiscreteOperator:
    """Shifted operator ``op + P0`` with the projector kept in factored form.

    The one-dimensional raise moves the embedded eigenvalue to lambda0 + 1
    and leaves the operator untouched on the orthogonal complement, so the
    window around lambda0 holds no localized state of the result.
    """
    if op.projector_vecs is not None:
        raise ConfigError("operator already carries a projector shift")
    if not isinstance(op.bc, Dirichlet):
        raise ConfigError("build the projector shift on the Dirichlet realization")
    vecs = np.asarray(spec.eigvecs, dtype=float)
    if vecs.ndim != 2 or vecs.shape[1] != op.n_total:
        raise DimensionMismatch(
            f"eigenbasis has shape {vecs.shape}, operator size is {op.n_total}"
        )
    tag = "Hbar" if op.kind_tag == "H" else "HbarPlusW"
    return replace(op, projector_vecs=vecs.copy(), kind_tag=tag)


def check_hypotheses(
    spec: SpectralData,
    op: DiscreteOperator,
    *,
    basis: Optional[PerturbationBasis] = None,
    jacobian=None,
    edge_tol: float = 1e-3,
    rank_rtol: float = 1e-6,
) -> HypothesisReport:
    """Diagnostics for the structural assumptions behind the persistence theory.

    Checks operator symmetry (with basis reality when a basis is given),
    embeddedness with edge decay and isolation of the eigenvalue, and, once a
    frame Jacobian is available, the surjectivity proxy: the rank of the
    frame-versus-basis pairing matrix must equal the number of its rows.
    """
    defect = op.symmetry_defect()
    h5_rank = h5_expected = None
    if jacobian is not None:
        j = np.asarray(jacobian, dtype=float)
        if j.ndim != 2:
            raise DimensionMismatch(f"jacobian must be a matrix, got shape {j.shape}")
        sv = np.linalg.svd(j, compute_uv=False)
        top = float(sv[0]) if sv.size else 0.0
        h5_rank = int(np.sum(sv > rank_rtol * top)) if top > 0 else 0
        h5_expected = j.shape[0]
    return HypothesisReport(
        symmetric=defect == 0.0,
        symmetry_defect=defect,
        real_basis=None if basis is None else basis.is_real,
        edge_localized=spec.edge_amplitude < edge_tol,
        edge_amplitude=spec.edge_amplitude,
        isolated=spec.nearest_other >= spec.isolation_radius,
        nearest_other=spec.nearest_other,
        isolation_radius=spec.isolation_radius,
        embedded=spec.lambda0 > spec.continuum_edge,
        lambda0=spec.lambda0,
        multiplicity=spec.multiplicity,
        h5_rank=h5_rank,
        h5_expected=h5_expected,
    )
