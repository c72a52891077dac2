"""Banded matrix storage, products, and LU solves.

Everything downstream (fourth-order line operators, mode-stacked cylinder
operators, radiation closures) is a square banded matrix with equal lower and
upper bandwidth ``kb``.  This module keeps them in diagonal-ordered storage

    data[kb + i - j, j] = a[i, j],        |i - j| <= kb,

which is the layout ``scipy.linalg.solve_banded`` uses and which LAPACK's
``gbtrf``/``gbtrs`` accept after padding ``kb`` fill-in rows on top.  Factor
objects are kept so one factorization serves many right-hand sides (resolvent
sweeps, Woodbury corrections, shift-invert iterations).
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import get_lapack_funcs

__all__ = ["BandMatrix", "BandedLU", "WoodburyLU", "BorderedLU"]


class BandMatrix:
    """Square banded matrix with bandwidth ``kb`` in diagonal-ordered storage.

    Parameters
    ----------
    n : int
        Matrix dimension.
    kb : int
        Number of sub- and super-diagonals.
    dtype : dtype, optional
        Storage dtype, float64 by default.
    """

    def __init__(self, n: int, kb: int, dtype=np.float64):
        self.n = int(n)
        self.kb = int(kb)
        self.data = np.zeros((2 * self.kb + 1, self.n), dtype=dtype)

    def copy(self) -> "BandMatrix":
        out = BandMatrix(self.n, self.kb, self.data.dtype)
        out.data[:] = self.data
        return out

    def astype(self, dtype) -> "BandMatrix":
        out = BandMatrix(self.n, self.kb, dtype)
        out.data[:] = self.data
        return out

    # -- element access ------------------------------------------------

    def set_diagonal(self, offset: int, values) -> None:
        """Set diagonal ``j - i = offset`` to ``values`` (scalar or vector).

        A vector must have length ``n - |offset|`` and is laid down in order
        of increasing column index.
        """
        d = int(offset)
        if abs(d) > self.kb:
            raise ValueError(f"offset {d} outside bandwidth {self.kb}")
        m = self.n - abs(d)
        values = np.asarray(values, dtype=self.data.dtype)
        if values.ndim == 0:
            values = np.full(m, values)
        if values.shape != (m,):
            raise ValueError(f"diagonal {d} needs {m} values, got {values.shape}")
        if d >= 0:
            self.data[self.kb - d, d:] = values
        else:
            self.data[self.kb - d, : self.n + d] = values

    def add_diagonal(self, offset: int, values) -> None:
        d = int(offset)
        if abs(d) > self.kb:
            raise ValueError(f"offset {d} outside bandwidth {self.kb}")
        m = self.n - abs(d)
        values = np.asarray(values, dtype=self.data.dtype)
        if values.ndim == 0:
            values = np.full(m, values)
        if d >= 0:
            self.data[self.kb - d, d:] += values
        else:
            self.data[self.kb - d, : self.n + d] += values

    def get(self, i: int, j: int):
        if abs(i - j) > self.kb:
            return self.data.dtype.type(0)
        return self.data[self.kb + i - j, j]

    def set_row(self, i: int, cols, vals) -> None:
        """Overwrite row ``i``: zero it within the band, then place ``vals``."""
        i = int(i)
        lo = max(0, i - self.kb)
        hi = min(self.n - 1, i + self.kb)
        for j in range(lo, hi + 1):
            self.data[self.kb + i - j, j] = 0
        for j, v in zip(cols, vals):
            j = int(j)
            if abs(i - j) > self.kb:
                raise ValueError(f"entry ({i},{j}) outside bandwidth {self.kb}")
            self.data[self.kb + i - j, j] = v

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Columns and values of row ``i`` within the band."""
        lo = max(0, i - self.kb)
        hi = min(self.n - 1, i + self.kb)
        cols = np.arange(lo, hi + 1)
        vals = self.data[self.kb + i - cols, cols]
        return cols, vals

    # -- linear algebra --------------------------------------------------

    def matvec(self, v: np.ndarray) -> np.ndarray:
        """Banded matrix-vector product (columns of ``v`` handled together)."""
        v = np.asarray(v)
        out_dtype = np.result_type(self.data.dtype, v.dtype)
        y = np.zeros(v.shape, dtype=out_dtype)
        n, kb = self.n, self.kb
        for d in range(-kb, kb + 1):
            # contribution of diagonal j - i = d: y[i] += a[i, i+d] v[i+d]
            if d >= 0:
                y[: n - d] += (self.data[kb - d, d:].T * v[d:].T).T
            else:
                y[-d:] += (self.data[kb - d, : n + d].T * v[: n + d].T).T
        return y

    def symmetry_defect(self) -> float:
        """max |a[i,j] - a[j,i]| over the band."""
        worst = 0.0
        for d in range(1, self.kb + 1):
            upper = self.data[self.kb - d, d:]
            lower = self.data[self.kb + d, : self.n - d]
            worst = max(worst, float(np.max(np.abs(upper - lower), initial=0.0)))
        return worst

    def to_dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n), dtype=self.data.dtype)
        for d in range(-self.kb, self.kb + 1):
            if d >= 0:
                a[np.arange(self.n - d), np.arange(d, self.n)] = self.data[self.kb - d, d:]
            else:
                a[np.arange(-d, self.n), np.arange(self.n + d)] = self.data[self.kb - d, : self.n + d]
        return a

    def lu(self) -> "BandedLU":
        return BandedLU(self)


class BandedLU:
    """LU factorization of a :class:`BandMatrix` via LAPACK ``gbtrf``."""

    def __init__(self, band: BandMatrix):
        kb, n = band.kb, band.n
        ab = np.zeros((3 * kb + 1, n), dtype=band.data.dtype, order="F")
        ab[kb:, :] = band.data
        gbtrf = get_lapack_funcs("gbtrf", (ab,))
        lu, ipiv, info = gbtrf(ab, kb, kb)
        if info < 0:
            raise ValueError(f"gbtrf: illegal argument {-info}")
        if info > 0:
            raise np.linalg.LinAlgError(f"banded matrix is singular (pivot {info})")
        self._lu = lu
        self._ipiv = ipiv
        self.kb = kb
        self.n = n
        self._gbtrs = get_lapack_funcs("gbtrs", (lu,))

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b)
        squeeze = b.ndim == 1
        bmat = np.asfortranarray(b.reshape(self.n, -1), dtype=self._lu.dtype)
        x, info = self._gbtrs(self._lu, self.kb, self.kb, bmat, self._ipiv)
        if info != 0:
            raise np.linalg.LinAlgError(f"gbtrs failed (info={info})")
        return x[:, 0] if squeeze else x


class WoodburyLU:
    """Solver for ``M + L @ R.T`` given an LU of the banded ``M``.

    The low-rank part arrives as explicit skinny factors ``L`` (n, r) and
    ``R`` (n, r).  Solves use the Woodbury identity

        (M + L R^T)^{-1} b = y - Z (I + R^T Z)^{-1} (R^T y),
        y = M^{-1} b,  Z = M^{-1} L,

    so the banded factorization is reused for every right-hand side.
    """

    def __init__(self, base: BandedLU, left: np.ndarray, right: np.ndarray):
        self.base = base
        left = np.asarray(left)
        right = np.asarray(right)
        if left.shape != right.shape or left.shape[0] != base.n:
            raise ValueError("low-rank factors must both be (n, r)")
        self.right = right
        self._z = base.solve(left)
        if self._z.ndim == 1:
            self._z = self._z[:, None]
        r = right.shape[1]
        self._core = np.eye(r, dtype=self._z.dtype) + right.T @ self._z
        self._core_lu = np.linalg.inv(self._core)

    def solve(self, b: np.ndarray) -> np.ndarray:
        y = self.base.solve(b)
        return y - self._z @ (self._core_lu @ (self.right.T @ y))


class BorderedLU:
    """Solver for ``M + L @ R.T`` that stays stable when ``M`` is singular.

    Woodbury block elimination pivots on the banded part first, so its
    intermediates blow up like 1/sigma_min(M).  Projector-shifted resolvents
    are solved exactly where the unshifted banded part loses invertibility
    (the embedded eigenvalue), so instead factor the bordered system

        [[M, L], [R^T, -I]] [u, s] = [b, 0]   =>   (M + L R^T) u = b

    with sparse partial-pivoted LU over the whole augmented matrix.
    """

    def __init__(self, band: BandMatrix, left: np.ndarray, right: np.ndarray):
        from scipy import sparse
        from scipy.sparse.linalg import splu

        left = np.asarray(left)
        right = np.asarray(right)
        if left.shape != right.shape or left.shape[0] != band.n:
            raise ValueError("low-rank factors must both be (n, r)")
        n, r = left.shape
        dtype = np.result_type(band.data.dtype, left.dtype, right.dtype)
        kb = band.kb
        diagonals = []
        offsets = list(range(-kb, kb + 1))
        for d in offsets:
            if d >= 0:
                diagonals.append(band.data[kb - d, d:])
            else:
                diagonals.append(band.data[kb - d, : n + d])
        body = sparse.diags(diagonals, offsets, shape=(n, n), dtype=dtype)
        aug = sparse.bmat(
            [
                [body, sparse.csc_matrix(left.astype(dtype))],
                [sparse.csc_matrix(right.T.astype(dtype)), -sparse.identity(r, dtype=dtype)],
            ],
            format="csc",
        )
        self._lu = splu(aug)
        self.n = n
        self._r = r
        self._dtype = dtype
        self._band = band
        self._left = left.astype(dtype)
        self._right = right.astype(dtype)

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b)
        if b.ndim == 1:
            bb = np.zeros(self.n + self._r, dtype=np.result_type(b.dtype, self._dtype))
            bb[: self.n] = b
            return self._lu.solve(bb)[: self.n]
        bb = np.zeros((self.n + self._r, b.shape[1]), dtype=np.result_type(b.dtype, self._dtype))
        bb[: self.n] = b
        return self._lu.solve(bb)[: self.n]

    def solve_refined(self, b: np.ndarray, iterations: int = 2) -> np.ndarray:
        """Solve with iterative refinement, residuals taken in extended precision.

        The LU forward error is eps * cond; two refinement passes with
        long-double residuals push it to working precision, which matters for
        functionals probed at the 1e-10 level (eigenvalue shifts, A-equation
        roots).  Requires eps * cond < 1, comfortably true for the stencils
        used here.
        """
        ext = np.clongdouble if np.issubdtype(self._dtype, np.complexfloating) else np.longdouble
        x = self.solve(b)
        be = np.asarray(b).astype(ext)
        for _ in range(iterations):
            xe = x.astype(ext)
            r = be - self._band.matvec(xe) - self._left.astype(ext) @ (self._right.astype(ext).T @ xe)
            x = x + self.solve(r.astype(self._dtype))
        return x
