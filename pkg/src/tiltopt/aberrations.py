"""Aberration coefficients, the wave aberration phase and tilt-induced transforms.

Coefficients ``c_mn`` are indexed by order ``m`` and foldness ``n`` with
``m - n`` even.  Complex coefficients (``n > 0``) are packed into two real
slots (real part first); rotationally symmetric ones (``n = 0``) take a single
real slot.  The canonical order is ascending ``m`` then ascending ``n``, so for
``max_order = 2`` the packed vector is ``(Re c11, Im c11, c20, Re c22, Im c22)``.

Tilts are given in radians as ``(tx, ty)`` and correspond to the complex tilt
``t = tx + i ty``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from math import comb
from pathlib import Path

import numpy as np

MAX_SUPPORTED_ORDER = 8


@dataclass(frozen=True, order=True)
class AberrationIndex:
    """Order/foldness pair of a single aberration coefficient."""

    m: int
    n: int

    def __post_init__(self):
        if self.m < 1 or self.n < 0 or self.n > self.m or (self.m - self.n) % 2:
            raise ValueError(f"invalid aberration index (m={self.m}, n={self.n})")

    @property
    def is_complex(self) -> bool:
        return self.n > 0

    @property
    def width(self) -> int:
        """Number of real slots occupied in a packed vector."""
        return 2 if self.n > 0 else 1

    @property
    def label(self) -> str:
        return f"c{self.m}{self.n}"


@dataclass(frozen=True)
class AberrationBasis:
    """All coefficients up to ``max_order`` in canonical packing order."""

    max_order: int
    indices: tuple[AberrationIndex, ...]
    offsets: tuple[int, ...] = field(repr=False)
    real_dim: int

    def offset(self, m: int, n: int) -> int:
        """Position of the first real slot of ``c_mn`` in a packed vector."""
        return self.offsets[self.indices.index(AberrationIndex(m, n))]

    @cached_property
    def slot_labels(self) -> tuple[str, ...]:
        labels = []
        for idx in self.indices:
            if idx.is_complex:
                labels += [f"Re {idx.label}", f"Im {idx.label}"]
            else:
                labels.append(idx.label)
        return tuple(labels)

    @cached_property
    def slot_orders(self) -> np.ndarray:
        """Order ``m`` of the coefficient owning each real slot."""
        return np.repeat([i.m for i in self.indices], [i.width for i in self.indices])

    def to_complex(self, values) -> np.ndarray:
        """Unpack a real vector into one complex value per index."""
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.real_dim:
            raise ValueError(
                f"expected {self.real_dim} packed values, got {values.shape[-1]}"
            )
        out = np.empty(values.shape[:-1] + (len(self.indices),), dtype=complex)
        for j, (idx, off) in enumerate(zip(self.indices, self.offsets)):
            if idx.is_complex:
                out[..., j] = values[..., off] + 1j * values[..., off + 1]
            else:
                out[..., j] = values[..., off]
        return out

    def from_complex(self, coeffs) -> np.ndarray:
        """Pack complex coefficients; imaginary parts of ``n = 0`` terms are dropped."""
        coeffs = np.asarray(coeffs, dtype=complex)
        out = np.empty(coeffs.shape[:-1] + (self.real_dim,))
        for j, (idx, off) in enumerate(zip(self.indices, self.offsets)):
            out[..., off] = coeffs[..., j].real
            if idx.is_complex:
                out[..., off + 1] = coeffs[..., j].imag
        return out

    def magnitudes(self, values) -> np.ndarray:
        """Per-coefficient magnitude ``|c_mn|`` of a packed vector."""
        return np.abs(self.to_complex(values))


def enumerate_basis(max_order: int) -> AberrationBasis:
    """Enumerate every valid ``(m, n)`` with ``1 <= m <= max_order``.

    >>> enumerate_basis(2).real_dim
    5
    """
    if int(max_order) != max_order or max_order < 1:
        raise ValueError(f"max_order must be a positive integer, got {max_order!r}")
    if max_order > MAX_SUPPORTED_ORDER:
        raise ValueError(f"orders above {MAX_SUPPORTED_ORDER} are not supported")
    indices = tuple(
        AberrationIndex(m, n)
        for m in range(1, max_order + 1)
        for n in range(m % 2, m + 1, 2)
    )
    offsets = tuple(np.cumsum([0] + [i.width for i in indices[:-1]]).tolist())
    return AberrationBasis(
        max_order=int(max_order),
        indices=indices,
        offsets=offsets,
        real_dim=sum(i.width for i in indices),
    )


@dataclass(frozen=True)
class AberrationVector:
    """Packed real aberration coefficients (meters) on a basis."""

    basis: AberrationBasis
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.basis.real_dim,):
            raise ValueError(
                f"values must have shape ({self.basis.real_dim},), got {values.shape}"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, basis: AberrationBasis) -> AberrationVector:
        return cls(basis, np.zeros(basis.real_dim))

    @classmethod
    def from_dict(cls, basis: AberrationBasis, coeffs: dict) -> AberrationVector:
        """Build from ``{(m, n): complex}``; missing entries are zero."""
        packed = np.zeros(len(basis.indices), dtype=complex)
        for (m, n), value in coeffs.items():
            packed[basis.indices.index(AberrationIndex(m, n))] = value
        return cls(basis, basis.from_complex(packed))

    def as_complex(self) -> np.ndarray:
        return self.basis.to_complex(self.values)


def wave_aberration_phase(c: AberrationVector, g, wavelength: float):
    """Phase shift ``chi(g)`` in radians at complex spatial frequency ``g`` (1/m).

    Each term contributes ``(2 pi / lambda) (|c|/m) (lambda |g|)^m
    cos(n arg g - n arg c)``.  For rotationally symmetric terms (``n = 0``) the
    signed coefficient is used, so a negative defocus gives a negative phase.

    Parameters
    ----------
    c : AberrationVector
        Aberration coefficients.
    g : complex or array_like of complex
        Spatial frequencies ``gx + i gy``.
    wavelength : float
        Electron wavelength in meters.

    Returns
    -------
    float or ndarray
        Phase with the same shape as ``g``.
    """
    if not wavelength > 0:
        raise ValueError("wavelength must be positive")
    g = np.asarray(g, dtype=complex)
    modulus = np.abs(g)
    angle = np.angle(g)
    coeffs = c.as_complex()
    chi = np.zeros(g.shape)
    for idx, coef in zip(c.basis.indices, coeffs):
        if coef == 0:
            continue
        radial = (2 * np.pi / wavelength) / idx.m * (wavelength * modulus) ** idx.m
        if idx.n == 0:
            chi += coef.real * radial
        else:
            chi += abs(coef) * radial * np.cos(idx.n * angle - idx.n * np.angle(coef))
    return chi if chi.ndim else float(chi)


def phase_plate_grid(
    c: AberrationVector, wavelength: float, g_max: float, resolution: int
) -> np.ndarray:
    """Sample the phase on a square ``[-g_max, g_max]^2`` lattice.

    Row ``i`` corresponds to ``gy = linspace(-g_max, g_max)[i]`` and column
    ``j`` to ``gx``; the returned array is ``(resolution, resolution)``.
    """
    if not g_max > 0:
        raise ValueError("g_max must be positive")
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    axis = np.linspace(-g_max, g_max, resolution)
    gx, gy = np.meshgrid(axis, axis)
    return wave_aberration_phase(c, gx + 1j * gy, wavelength)


def write_phase_plate_csv(path, grid: np.ndarray, g_max: float) -> None:
    """Write a phase plate grid as row-major CSV with a commented header."""
    grid = np.asarray(grid)
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(
            f"# g_min={-g_max!r} g_max={g_max!r} resolution={grid.shape[0]} "
            "rows=gy cols=gx\n"
        )
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])


def read_phase_plate_csv(path) -> tuple[np.ndarray, float]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline()
        fields = dict(tok.split("=") for tok in header.lstrip("# ").split())
        grid = np.array([[float(v) for v in row] for row in csv.reader(fh)])
    return grid, float(fields["g_max"])


# --- tilt transform -------------------------------------------------------
#
# Polynomials in (tx, ty) are dicts {(a, b): complex} meaning sum coef tx^a ty^b.


def _poly_mul(p: dict, q: dict) -> dict:
    out: dict = {}
    for (a1, b1), c1 in p.items():
        for (a2, b2), c2 in q.items():
            key = (a1 + a2, b1 + b2)
            out[key] = out.get(key, 0) + c1 * c2
    return out


def _poly_pow(p: dict, k: int) -> dict:
    out = {(0, 0): 1 + 0j}
    for _ in range(k):
        out = _poly_mul(out, p)
    return out


def _binom(n: int, k: int) -> int:
    # comb() raises for negative arguments; the tilt expansion needs 0 there.
    if k < 0 or n < 0 or k > n:
        return 0
    return comb(n, k)


def _monomials(max_degree: int) -> np.ndarray:
    return np.array(
        [(a, deg - a) for deg in range(max_degree + 1) for a in range(deg, -1, -1)],
        dtype=int,
    ).reshape(-1, 2)


def _expand_transform(basis: AberrationBasis) -> tuple[np.ndarray, np.ndarray]:
    """Exact monomial coefficients of the full tilt transform.

    Returns ``exponents`` of shape ``(K, 2)`` and ``coeffs`` of shape
    ``(real_dim, real_dim, K)`` such that the transformed packed vector is
    ``sum_k coeffs[:, :, k] tx^a_k ty^b_k @ c``.
    """
    M = basis.max_order
    exponents = _monomials(M - 1)
    mono_pos = {tuple(e): k for k, e in enumerate(exponents.tolist())}
    t = {(1, 0): 1 + 0j, (0, 1): 1j}
    t_conj = {(1, 0): 1 + 0j, (0, 1): -1j}
    t_pows = [_poly_pow(t, k) for k in range(M + 1)]
    tc_pows = [_poly_pow(t_conj, k) for k in range(M + 1)]

    coeffs = np.zeros((basis.real_dim, basis.real_dim, len(exponents)))
    for out_idx, out_off in zip(basis.indices, basis.offsets):
        alpha = (out_idx.m + out_idx.n) // 2
        gamma = (out_idx.m - out_idx.n) // 2
        rho = 0.5 if alpha == gamma else 1.0
        for in_idx, in_off in zip(basis.indices, basis.offsets):
            beta = (in_idx.m + in_idx.n) // 2
            delta = (in_idx.m - in_idx.n) // 2
            if beta < alpha or delta < gamma or delta > min(beta, M - beta):
                continue
            scale = rho * (alpha + gamma) / (beta + delta)
            # coefficient polynomials multiplying c and conj(c)
            k_direct: dict = {}
            k_conj: dict = {}
            w1 = _binom(beta, alpha) * _binom(delta, gamma)
            if w1:
                k_direct = _poly_mul(tc_pows[beta - alpha], t_pows[delta - gamma])
                k_direct = {e: w1 * scale * v for e, v in k_direct.items()}
            w2 = _binom(beta, gamma) * _binom(delta, alpha)
            if w2:
                k_conj = _poly_mul(tc_pows[delta - alpha], t_pows[beta - gamma])
                k_conj = {e: w2 * scale * v for e, v in k_conj.items()}
            # K1 c + K2 c* with c = x + i y  ->  (K1 + K2) x + i (K1 - K2) y
            keys = set(k_direct) | set(k_conj)
            for e in keys:
                k1 = k_direct.get(e, 0j)
                k2 = k_conj.get(e, 0j)
                px = k1 + k2
                py = 1j * (k1 - k2)
                pos = mono_pos[e]
                coeffs[out_off, in_off, pos] += px.real
                if in_idx.is_complex:
                    coeffs[out_off, in_off + 1, pos] += py.real
                if out_idx.is_complex:
                    coeffs[out_off + 1, in_off, pos] += px.imag
                    if in_idx.is_complex:
                        coeffs[out_off + 1, in_off + 1, pos] += py.imag
    coeffs[np.abs(coeffs) < 1e-15] = 0.0
    return exponents, coeffs


@dataclass(frozen=True)
class TiltPolynomialTable:
    """Monomial expansion of a tilt-dependent linear map.

    ``coeffs[r, j, k]`` is the coefficient of ``tx**exponents[k, 0] *
    ty**exponents[k, 1]`` in entry ``(r, j)`` of the map.
    """

    basis: AberrationBasis
    exponents: np.ndarray
    coeffs: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.coeffs.shape[0]

    def with_monomials(self, extra) -> TiltPolynomialTable:
        """Same map with zero-coefficient columns for any missing ``extra`` exponents."""
        have = {tuple(e) for e in self.exponents.tolist()}
        new = [tuple(e) for e in extra if tuple(e) not in have]
        if not new:
            return self
        exps = np.vstack([self.exponents, np.array(new, dtype=self.exponents.dtype)])
        pad = np.zeros(self.coeffs.shape[:2] + (len(new),))
        return TiltPolynomialTable(self.basis, exps, np.concatenate([self.coeffs, pad], axis=-1))

    def _powers(self, theta):
        theta = np.asarray(theta, dtype=float)
        top = int(self.exponents.max()) if self.exponents.size else 0
        px = np.ones(theta.shape[:-1] + (top + 1,))
        py = np.ones_like(px)
        for p in range(1, top + 1):
            px[..., p] = px[..., p - 1] * theta[..., 0]
            py[..., p] = py[..., p - 1] * theta[..., 1]
        return px, py

    def monomials(self, theta) -> np.ndarray:
        """Monomial values for tilts of shape ``(..., 2)``; output ``(..., K)``."""
        px, py = self._powers(theta)
        return px[..., self.exponents[:, 0]] * py[..., self.exponents[:, 1]]

    def monomial_gradients(self, theta) -> tuple[np.ndarray, np.ndarray]:
        px, py = self._powers(theta)
        a = self.exponents[:, 0]
        b = self.exponents[:, 1]
        d_tx = a * px[..., np.maximum(a - 1, 0)] * py[..., b]
        d_ty = b * px[..., a] * py[..., np.maximum(b - 1, 0)]
        return d_tx, d_ty

    def terms(self, row: int, col: int) -> dict[tuple[int, int], float]:
        """Nonzero monomials ``{(a, b): coeff}`` of one entry."""
        return {
            tuple(e): float(v)
            for e, v in zip(self.exponents.tolist(), self.coeffs[row, col])
            if v != 0
        }

    def evaluate(self, theta) -> np.ndarray:
        """Map at tilt(s) ``theta``; shape ``(..., n_rows, real_dim)``."""
        return np.einsum("...k,rjk->...rj", self.monomials(theta), self.coeffs)

    def gradient(self, theta) -> tuple[np.ndarray, np.ndarray]:
        d_tx, d_ty = self.monomial_gradients(theta)
        return (
            np.einsum("...k,rjk->...rj", d_tx, self.coeffs),
            np.einsum("...k,rjk->...rj", d_ty, self.coeffs),
        )


def build_transform_table(basis: AberrationBasis) -> TiltPolynomialTable:
    """Table for the full transform ``c -> c'`` (all output coefficients)."""
    exponents, coeffs = _expand_transform(basis)
    return TiltPolynomialTable(basis, exponents, coeffs)


def build_tilt_polynomial_table(basis: AberrationBasis) -> TiltPolynomialTable:
    """Table for the image-shift rows (``Re c'11``, ``Im c'11``) only."""
    full = build_transform_table(basis)
    return TiltPolynomialTable(basis, full.exponents, full.coeffs[:2].copy())


_TABLE_CACHE: dict[int, TiltPolynomialTable] = {}


def _full_table(basis: AberrationBasis) -> TiltPolynomialTable:
    if basis.max_order not in _TABLE_CACHE:
        _TABLE_CACHE[basis.max_order] = build_transform_table(basis)
    return _TABLE_CACHE[basis.max_order]


def tilt_transform(c: AberrationVector, t) -> AberrationVector:
    """Effective aberrations after applying beam tilt ``t = (tx, ty)``."""
    table = _full_table(c.basis)
    return AberrationVector(c.basis, table.evaluate(t) @ c.values)


def observation_matrix(table: TiltPolynomialTable, theta) -> np.ndarray:
    """Linear map from packed aberrations to the image shift, ``(2, l)``."""
    return table.evaluate(theta)[..., :2, :]


def observation_matrix_gradient(
    table: TiltPolynomialTable, theta
) -> tuple[np.ndarray, np.ndarray]:
    """Exact partial derivatives of :func:`observation_matrix` in ``tx`` and ``ty``."""
    d_tx, d_ty = table.gradient(theta)
    return d_tx[..., :2, :], d_ty[..., :2, :]
