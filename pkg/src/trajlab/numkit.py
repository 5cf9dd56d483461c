"""Small deterministic numerical helpers shared by the fitting code.

Matrices are plain ``float64`` numpy arrays. Random streams wrap numpy's
counter-based Philox bit generator, keyed by a 64-bit seed plus an optional
tuple of integer tags, so independent streams (parameter init, train data,
validation data, ...) can be derived from one user-facing seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

RANK_RTOL = 1e-10


class DegenerateFitError(ValueError):
    """Raised when a design matrix is rank deficient."""

    def __init__(self, message: str, null_direction: np.ndarray):
        super().__init__(message)
        self.null_direction = null_direction


class RngStream:
    """Seeded random stream built on Philox-4x64.

    Philox is a counter-based generator with a fixed published algorithm, so a
    given ``(seed, tags)`` yields the same raw stream on every platform.
    """

    def __init__(self, seed: int, *tags: int):
        self.seed = int(seed)
        self.tags = tuple(int(t) for t in tags)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.tags])
        self._bitgen = np.random.Philox(seq)
        self.gen = np.random.Generator(self._bitgen)

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw 64-bit outputs."""
        return self._bitgen.random_raw(n)

    def uniform(self, n: int) -> np.ndarray:
        # 53 high bits -> double in [0, 1); avoids any version-dependent transform
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=size)

    @property
    def state(self) -> dict:
        return self._bitgen.state

    @state.setter
    def state(self, value: dict) -> None:
        self._bitgen.state = value


@dataclass
class LstsqResult:
    x: np.ndarray
    residual_norm: float
    singular_values: np.ndarray


def solve_least_squares(A, b, rtol: float = RANK_RTOL) -> LstsqResult:
    """Minimise ``||A x - b||`` through an SVD of ``A``.

    Raises :class:`DegenerateFitError` if the smallest singular value falls
    below ``rtol`` times the largest; the error carries the offending right
    singular vector as ``null_direction``.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"A must be 2-D, got shape {A.shape}")
    m, n = A.shape
    if b.shape != (m,):
        raise ValueError(f"b must have shape ({m},), got {b.shape}")
    if m < n:
        raise DegenerateFitError(f"underdetermined system: {m} rows < {n} unknowns", np.zeros(n))
    if not (np.isfinite(A).all() and np.isfinite(b).all()):
        raise ValueError("non-finite entries in least-squares input")

    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[0] == 0.0 or s[-1] < rtol * s[0]:
        null = Vt[-1].copy()
        raise DegenerateFitError(
            f"rank-deficient design (sigma_min/sigma_max = {s[-1] / s[0] if s[0] else 0.0:.3e}); "
            f"null direction {np.array2string(null, precision=4)}",
            null,
        )
    x = Vt.T @ ((U.T @ b) / s)
    return LstsqResult(x=x, residual_norm=float(np.linalg.norm(A @ x - b)), singular_values=s)


def eigen_sym2(H) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form eigen-decomposition of a symmetric 2x2 matrix.

    Returns ``(vals, vecs)`` with ``vals`` sorted descending and unit
    eigenvectors in the columns of ``vecs``. Each eigenvector is oriented so
    its first nonzero component is positive.
    """
    H = np.asarray(H, dtype=np.float64)
    a = H[0, 0]
    d = H[1, 1]
    b = 0.5 * (H[0, 1] + H[1, 0])
    mean = 0.5 * (a + d)
    half_diff = 0.5 * (a - d)
    r = math.hypot(half_diff, b)
    l1, l2 = mean + r, mean - r

    if r == 0.0:
        # multiple of the identity: any basis works
        vecs = np.eye(2)
    else:
        # pick the better conditioned of the two equivalent forms
        if half_diff >= 0:
            v1 = np.array([half_diff + r, b])
        else:
            v1 = np.array([b, r - half_diff])
        v1 /= np.abs(v1).max()  # rescale first so tiny entries do not underflow in the norm
        v1 /= np.linalg.norm(v1)
        v2 = np.array([-v1[1], v1[0]])
        vecs = np.column_stack([_orient(v1), _orient(v2)])
    return np.array([l1, l2]), vecs


def _orient(v: np.ndarray) -> np.ndarray:
    for c in v:
        if c != 0.0:
            return v if c > 0 else -v
    return v
