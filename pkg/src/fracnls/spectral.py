"""Truncated Fourier states on the circle and exact spectral operations.

A state of truncation order ``N`` stores the coefficients of

    u(x) = sum_{|n| <= N} c_n exp(i n x)

in ascending order ``n = -N, ..., N`` (zero mode at index ``N``).  Every
integral over the circle is normalized by 1/(2 pi), so that the mass is
the plain coefficient sum ``sum |c_n|^2``.

Most operations accept either a :class:`SpectralState` or a raw complex
array whose last axis has length ``2N+1``.  Arrays may carry leading batch
axes; this is how ensembles are pushed through the same code path.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class DimensionError(ValueError):
    """Raised when array sizes or truncation orders are incompatible."""


@dataclass(frozen=True)
class ModelParams:
    """Equation, measure and norm scales.

    Attributes:
        alpha: Fractional order, ``1/2 < alpha <= 1``.
        gamma: ``+1`` focusing, ``-1`` defocusing.
        n_modes: Truncation order ``N``.
        s: Sobolev index used for measure coordinates and norms.
    """

    alpha: float
    gamma: int
    n_modes: int
    s: float = 0.2

    def __post_init__(self):
        if not 0.5 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (1/2, 1], got {self.alpha}")
        if self.gamma not in (1, -1):
            raise ValueError(f"gamma must be +1 or -1, got {self.gamma}")
        if int(self.n_modes) != self.n_modes or self.n_modes < 1:
            raise ValueError(f"n_modes must be a positive integer, got {self.n_modes}")

    def with_modes(self, n_modes: int) -> "ModelParams":
        return ModelParams(self.alpha, self.gamma, n_modes, self.s)


@dataclass(frozen=True, eq=False)
class SpectralState:
    """Coefficients ``c_n``, ``n = -N..N``, of a degree-N trigonometric polynomial."""

    n_modes: int
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=np.complex128)
        if c.ndim != 1 or c.shape[0] != 2 * self.n_modes + 1:
            raise DimensionError(
                f"expected {2 * self.n_modes + 1} coefficients for N={self.n_modes}, "
                f"got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("state coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, n_modes: int) -> "SpectralState":
        return cls(n_modes, np.zeros(2 * n_modes + 1, dtype=np.complex128))

    @classmethod
    def from_modes(cls, n_modes: int, values: dict[int, complex]) -> "SpectralState":
        """Build a state from a sparse ``{n: c_n}`` mapping."""
        c = np.zeros(2 * n_modes + 1, dtype=np.complex128)
        for n, v in values.items():
            if abs(n) > n_modes:
                raise DimensionError(f"mode {n} outside |n| <= {n_modes}")
            c[n + n_modes] = v
        return cls(n_modes, c)

    @property
    def wavenumbers(self) -> np.ndarray:
        return wavenumbers(self.n_modes)

    def __getitem__(self, n: int) -> complex:
        if abs(n) > self.n_modes:
            return 0j
        return complex(self.coeffs[n + self.n_modes])

    def __eq__(self, other):
        if not isinstance(other, SpectralState):
            return NotImplemented
        return self.n_modes == other.n_modes and np.array_equal(self.coeffs, other.coeffs)

    def __mul__(self, scalar):
        return SpectralState(self.n_modes, self.coeffs * scalar)

    __rmul__ = __mul__

    def distance(self, other: "SpectralState") -> float:
        """l2 distance between coefficient vectors (after zero-extension)."""
        n = max(self.n_modes, other.n_modes)
        return float(np.linalg.norm(extend(self, n).coeffs - extend(other, n).coeffs))


@dataclass(frozen=True, eq=False)
class GridField:
    """Samples ``u(x_j)`` at ``x_j = 2 pi j / M``, ``j = 0..M-1``."""

    m_points: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.complex128)
        if v.ndim != 1 or v.shape[0] != self.m_points:
            raise DimensionError(f"expected {self.m_points} grid values, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def points(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.m_points) / self.m_points


# ---------------------------------------------------------------------------
# helpers

def wavenumbers(n_modes: int) -> np.ndarray:
    return np.arange(-n_modes, n_modes + 1)


def japanese_bracket(n) -> np.ndarray:
    """<n> = (1 + n^2)^(1/2)."""
    return np.sqrt(1.0 + np.asarray(n, dtype=float) ** 2)


@lru_cache(maxsize=128)
def _symbol(n_modes: int, alpha: float) -> np.ndarray:
    sym = np.abs(wavenumbers(n_modes)).astype(float) ** (2 * alpha)
    sym.setflags(write=False)
    return sym


def fractional_symbol(n_modes: int, alpha: float) -> np.ndarray:
    """|n|^(2 alpha) on ``n = -N..N``; exactly zero at ``n = 0``."""
    return _symbol(int(n_modes), float(alpha))


def modes_of(coeffs: np.ndarray) -> int:
    size = coeffs.shape[-1]
    if size % 2 != 1:
        raise DimensionError(f"coefficient axis must have odd length, got {size}")
    return (size - 1) // 2


def quadrature_size(n_modes: int, degree: int = 4) -> int:
    """Smallest power of two ``>= degree*N + 1``."""
    need = degree * n_modes + 1
    return 1 << (need - 1).bit_length()


def _unwrap(x):
    if isinstance(x, SpectralState):
        return x.coeffs, True
    arr = np.asarray(x, dtype=np.complex128)
    modes_of(arr)
    return arr, False


def _wrap(coeffs, as_state):
    if as_state:
        return SpectralState(modes_of(coeffs), coeffs)
    return coeffs


def _scalar(value, as_state):
    return float(value) if as_state else value


# ---------------------------------------------------------------------------
# transforms

# Single states on small grids go through cached dense DFT matrices: the
# per-call overhead of numpy.fft dominates below a few hundred points.
_MATRIX_MAX_POINTS = 512
_MATRIX_MAX_POINTS_BATCH = 256


def _use_matrix(ndim: int, m_points: int) -> bool:
    """Dense DFT products beat FFTs on short grids (and single states)."""
    return m_points <= (_MATRIX_MAX_POINTS if ndim == 1 else _MATRIX_MAX_POINTS_BATCH)


@lru_cache(maxsize=64)
def _dft_matrices(n_modes: int, m_points: int) -> tuple[np.ndarray, np.ndarray]:
    x = 2 * np.pi * np.arange(m_points) / m_points
    synth = np.exp(1j * np.outer(wavenumbers(n_modes), x))
    return synth, np.ascontiguousarray(synth.conj().T) / m_points


def coeffs_to_grid(coeffs: np.ndarray, m_points: int) -> np.ndarray:
    """Evaluate ``sum c_n e^{i n x_j}`` on ``m_points`` nodes (batched)."""
    n = modes_of(coeffs)
    if m_points < 2 * n + 1:
        raise DimensionError(f"m_points={m_points} < 2N+1={2 * n + 1} loses information")
    if _use_matrix(coeffs.ndim, m_points):
        return coeffs @ _dft_matrices(n, m_points)[0]
    buf = np.zeros(coeffs.shape[:-1] + (m_points,), dtype=np.complex128)
    buf[..., : n + 1] = coeffs[..., n:]
    if n:
        buf[..., m_points - n:] = coeffs[..., :n]
    return np.fft.ifft(buf, axis=-1, norm="forward")


def grid_to_coeffs(values: np.ndarray, n_modes: int) -> np.ndarray:
    """Discrete Fourier coefficients ``|n| <= n_modes`` of grid samples (batched)."""
    m = values.shape[-1]
    if m < 2 * n_modes + 1:
        raise DimensionError(f"m_points={m} < 2N+1={2 * n_modes + 1}")
    if _use_matrix(values.ndim, m):
        return values @ _dft_matrices(n_modes, m)[1]
    f = np.fft.fft(values, axis=-1, norm="forward")
    if n_modes == 0:
        return f[..., :1].copy()
    return np.concatenate([f[..., m - n_modes:], f[..., : n_modes + 1]], axis=-1)


def to_grid(state: SpectralState, m_points: int) -> GridField:
    return GridField(m_points, coeffs_to_grid(state.coeffs, m_points))


def from_grid(grid: GridField, n_modes: int) -> SpectralState:
    return SpectralState(n_modes, grid_to_coeffs(grid.values, n_modes))


# ---------------------------------------------------------------------------
# functionals

def sobolev_norm(state, sigma: float):
    """H^sigma norm ``sqrt(sum <n>^(2 sigma) |c_n|^2)``."""
    c, as_state = _unwrap(state)
    w = japanese_bracket(wavenumbers(modes_of(c))) ** (2 * sigma)
    return _scalar(np.sqrt(np.sum(w * (c.real ** 2 + c.imag ** 2), axis=-1)), as_state)


def mass(state):
    c, as_state = _unwrap(state)
    return _scalar(np.sum(c.real ** 2 + c.imag ** 2, axis=-1), as_state)


def quartic_integral(state, m_points: int | None = None):
    """(1/2 pi) * integral of |u|^4, exact for M >= 4N+1 nodes."""
    c, as_state = _unwrap(state)
    n = modes_of(c)
    m = m_points or quadrature_size(n)
    if m < 4 * n + 1:
        raise DimensionError(f"quartic quadrature needs M >= 4N+1={4 * n + 1}, got {m}")
    u = coeffs_to_grid(c, m)
    a2 = u.real ** 2 + u.imag ** 2
    return _scalar(np.mean(a2 * a2, axis=-1), as_state)


def kinetic_energy(state, alpha: float):
    c, as_state = _unwrap(state)
    sym = fractional_symbol(modes_of(c), alpha)
    return _scalar(0.5 * np.sum(sym * (c.real ** 2 + c.imag ** 2), axis=-1), as_state)


def hamiltonian(state, params: ModelParams):
    """H_N(u) = 1/2 sum |n|^(2 alpha)|c_n|^2 - gamma/4 * quartic_integral(u)."""
    c, as_state = _unwrap(state)
    if modes_of(c) != params.n_modes:
        raise DimensionError(
            f"state has N={modes_of(c)} but params expect N={params.n_modes}")
    value = kinetic_energy(c, params.alpha) - 0.25 * params.gamma * quartic_integral(c)
    return _scalar(value, as_state)


def linf_norm(state, m_points: int | None = None):
    """Max of |u| on the alias-free quadrature grid."""
    c, as_state = _unwrap(state)
    m = m_points or quadrature_size(modes_of(c))
    return _scalar(np.max(np.abs(coeffs_to_grid(c, m)), axis=-1), as_state)


# ---------------------------------------------------------------------------
# projections and coordinates

def project(state, n_cut: int, reindex: bool = False, allow_larger: bool = False):
    """Zero all modes with ``|n| > n_cut``.

    With ``reindex=True`` the result has truncation order ``n_cut``.  A cut above
    the current order is rejected unless ``allow_larger`` is set, in which case
    the state is returned unchanged.
    """
    c, as_state = _unwrap(state)
    n = modes_of(c)
    if n_cut < 0:
        raise ValueError("n_cut must be nonnegative")
    if n_cut > n:
        if not allow_larger:
            raise DimensionError(f"n_cut={n_cut} exceeds n_modes={n}")
        return state
    if reindex:
        out = c[..., n - n_cut: n + n_cut + 1].copy()
    else:
        out = c.copy()
        out[..., : n - n_cut] = 0
        out[..., n + n_cut + 1:] = 0
    return _wrap(out, as_state)


def extend(state, n_modes: int):
    """Embed into a larger truncation order by zero padding."""
    c, as_state = _unwrap(state)
    n = modes_of(c)
    if n_modes < n:
        raise DimensionError(f"cannot extend N={n} to smaller N={n_modes}")
    pad = [(0, 0)] * (c.ndim - 1) + [(n_modes - n, n_modes - n)]
    return _wrap(np.pad(c, pad), as_state)


def to_hs_coords(state, s: float) -> np.ndarray:
    """Coordinates ``u_n = <n>^s c_n`` in the H^s-orthonormal basis."""
    c, _ = _unwrap(state)
    return c * japanese_bracket(wavenumbers(modes_of(c))) ** s


def from_hs_coords(coords, s: float, as_state: bool = True):
    coords = np.asarray(coords, dtype=np.complex128)
    c = coords / japanese_bracket(wavenumbers(modes_of(coords))) ** s
    return _wrap(c, as_state)


# ---------------------------------------------------------------------------
# state files

def state_to_dict(state: SpectralState, alpha: float | None = None) -> dict:
    return {
        "alpha": alpha,
        "n_modes": state.n_modes,
        "coeffs": [[float(z.real), float(z.imag)] for z in state.coeffs],
    }


def state_from_dict(data: dict) -> tuple[SpectralState, float | None]:
    n = int(data["n_modes"])
    pairs = np.asarray(data["coeffs"], dtype=float)
    if pairs.shape != (2 * n + 1, 2):
        raise DimensionError(f"state file lists {pairs.shape[0]} pairs, expected {2 * n + 1}")
    alpha = data.get("alpha")
    return SpectralState(n, pairs[:, 0] + 1j * pairs[:, 1]), (
        None if alpha is None else float(alpha))


def dumps_state(state: SpectralState, alpha: float | None = None) -> str:
    # repr() of a float is the shortest round-tripping form (<= 17 digits)
    return json.dumps(state_to_dict(state, alpha))


def loads_state(text: str) -> tuple[SpectralState, float | None]:
    return state_from_dict(json.loads(text))


def save_state(path, state: SpectralState, alpha: float | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_state(state, alpha) + "\n")


def load_state(path) -> tuple[SpectralState, float | None]:
    with open(path) as fh:
        return loads_state(fh.read())


def power_law_state(n_modes: int, s: float, delta: float = 0.01, seed: int = 0,
                    amplitude: float = 1.0) -> SpectralState:
    """Deterministic initial data with ``|c_n| = |n|^(-s-1/2-delta)``, random phases.

    The zero mode gets unit modulus.  Phases for ``|n| <= n_modes`` are drawn
    from one seeded stream, mode by mode in the order ``0, 1, -1, 2, -2, ...``
    so that the phases of low modes do not depend on ``n_modes``.
    """
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2 * math.pi, size=2 * n_modes + 1)
    c = np.zeros(2 * n_modes + 1, dtype=np.complex128)
    order = [0] + [k * sgn for k in range(1, n_modes + 1) for sgn in (1, -1)]
    for j, n in enumerate(order):
        rho = 1.0 if n == 0 else abs(n) ** (-s - 0.5 - delta)
        c[n + n_modes] = amplitude * rho * np.exp(1j * theta[j])
    return SpectralState(n_modes, c)
