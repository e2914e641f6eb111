"""Seeded space-time white noise on a periodic grid and its mollified fields.

All randomness for the environment flows through one counter-based mapping
(seed, time_index) -> white increment slice, so any worker can regenerate any
slice without storing history and the output is independent of scheduling.
White slices are synthesized from their Fourier coefficients (an exact
representation of i.i.d. cell increments), which lets mollified fields at
every scale be produced from the same slice by multiplying the kernel
transform, realizing the coupling between the fields at different eps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

from .covariance import CovarianceSpec, ScaleParams
from .errors import ResolutionError, ValidationError

_MASK64 = (1 << 64) - 1

# direct circular convolution below this kernel width, FFT above
_DIRECT_CONV_MAX_TAPS = 64


@dataclass(frozen=True)
class NoiseGrid:
    """Periodic spatial grid [-L, L) with nx cells and noise step dt.

    Cell (k, j) carries an increment N(0, dt*dx), independent across cells and
    steps and reproducible from (seed, k, j).
    """

    L: float
    nx: int
    dt: float
    seed: int = 0
    rng_scheme: str = "philox4x64"

    def __post_init__(self):
        if self.L <= 0.0 or self.nx <= 1 or self.dt <= 0.0:
            raise ValidationError("NoiseGrid requires L > 0, nx > 1, dt > 0")
        if self.nx % 2 != 0:
            raise ValidationError("nx must be even (spectral synthesis uses rfft)")
        if self.rng_scheme != "philox4x64":
            raise ValidationError(f"unsupported rng scheme {self.rng_scheme!r}")

    @property
    def dx(self) -> float:
        return 2.0 * self.L / self.nx

    def cells(self) -> np.ndarray:
        """Cell centers x_j = -L + j dx."""
        return -self.L + self.dx * np.arange(self.nx)


@dataclass(frozen=True)
class FieldIncrement:
    """One time slice of a mollified field increment on the grid."""

    values: np.ndarray
    eps: float
    time_index: int


def _generator(grid: NoiseGrid, time_index: int, stream: int = 0) -> np.random.Generator:
    # counter word 2 carries the time index; words 0-1 leave 2^128 draws of
    # headroom per step, so draws never bleed across steps
    if time_index < 0:
        raise ValidationError("time_index must be >= 0")
    key = np.array([grid.seed & _MASK64, stream & _MASK64], dtype=np.uint64)
    counter = np.array([0, 0, time_index & _MASK64, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def white_coefficients(grid: NoiseGrid, time_index: int, rows: int = 1) -> np.ndarray:
    """rfft coefficients of `rows` independent white increment slices.

    Each row, inverse-transformed, is a vector of nx i.i.d. N(0, dt*dx)
    increments; sampling the coefficients directly skips the forward
    transform.  Row r is a pure function of (seed, time_index, r).
    """
    nx = grid.nx
    m = nx // 2
    scale = math.sqrt(grid.dt * grid.dx)
    g = _generator(grid, time_index).standard_normal((rows, nx))
    out = np.empty((rows, m + 1), dtype=np.complex128)
    out[:, 0] = g[:, 0] * (math.sqrt(nx) * scale)
    out[:, m] = g[:, 1] * (math.sqrt(nx) * scale)
    half = math.sqrt(nx / 2.0) * scale
    out[:, 1:m] = (g[:, 2:m + 1] + 1j * g[:, m + 1:]) * half
    return out


def white_block(grid: NoiseGrid, time_index: int, rows: int = 1) -> np.ndarray:
    """`rows` independent white increment slices, shape (rows, nx)."""
    return np.fft.irfft(white_coefficients(grid, time_index, rows), n=grid.nx)


def sample_white_increments(grid: NoiseGrid, time_index: int) -> np.ndarray:
    """The white increment slice at one time step, shape (nx,)."""
    return white_block(grid, time_index, rows=1)[0]


def mollifier_kernel(grid: NoiseGrid, cov: CovarianceSpec, p: ScaleParams) -> np.ndarray:
    """Taps of rho_eps sampled at grid offsets, rho_eps(y) = mu eps^{-1/2} rho(y/eps).

    Raises ResolutionError when the grid does not resolve the mollifier
    (eps < 4 dx).
    """
    dx = grid.dx
    if p.eps < 4.0 * dx:
        raise ResolutionError(
            f"mollifier under-resolved: eps = {p.eps} < 4 dx = {4.0 * dx}")
    k = int(math.floor(p.eps / dx))
    offsets = np.arange(-k, k + 1) * dx
    return (p.mu / math.sqrt(p.eps)) * cov.rho_at(offsets / p.eps)


def kernel_transform(grid: NoiseGrid, taps: np.ndarray) -> np.ndarray:
    """rfft of the kernel wrapped onto the periodic grid (real: kernel is even)."""
    nx = grid.nx
    k = (len(taps) - 1) // 2
    wrapped = np.zeros(nx)
    idx = np.arange(-k, k + 1) % nx
    np.add.at(wrapped, idx, taps)
    return np.fft.rfft(wrapped).real


def mollify(grid: NoiseGrid, xi: np.ndarray, cov: CovarianceSpec,
            p: ScaleParams, time_index: int = 0) -> FieldIncrement:
    """Circular convolution of white increments with the scaled mollifier.

    The white increments already carry the quadrature weight of the cell
    measure (they have variance dt*dx), so the plain tap sum reproduces the
    continuum convolution: the slice variance is dt*C^eps(0) and the spatial
    covariance dt*C^eps(x_j - x_j').
    """
    taps = mollifier_kernel(grid, cov, p)
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] != grid.nx:
        raise ValidationError("white increments do not match the grid")
    if len(taps) <= _DIRECT_CONV_MAX_TAPS:
        values = convolve1d(xi, taps, axis=-1, mode="wrap")
    else:
        rho_hat = kernel_transform(grid, taps)
        values = np.fft.irfft(np.fft.rfft(xi, axis=-1) * rho_hat, n=grid.nx, axis=-1)
    return FieldIncrement(values=values, eps=p.eps, time_index=time_index)


def coupled_family(grid: NoiseGrid, time_index: int, cov: CovarianceSpec,
                   params: list[ScaleParams]) -> list[FieldIncrement]:
    """Mollified increments at several scales driven by the same white slice."""
    xi = sample_white_increments(grid, time_index)
    return [mollify(grid, xi, cov, p, time_index) for p in params]


class FieldSource:
    """Per-step field increments for an ensemble of independent replicas.

    Row r of every slice is a pure function of (seed, time_index, r), so a
    single replica's history can be regenerated in isolation and results do
    not depend on how replicas are scheduled.  The mollified slices equal
    mollify(white slice) exactly: both are built from the same coefficients.
    """

    def __init__(self, grid: NoiseGrid, cov: CovarianceSpec | None = None,
                 p: ScaleParams | None = None, rows: int = 1):
        self.grid = grid
        self.rows = rows
        self.rho_hat = None
        if cov is not None and p is not None:
            self.rho_hat = kernel_transform(grid, mollifier_kernel(grid, cov, p))
            self.eps = p.eps

    def white(self, time_index: int) -> np.ndarray:
        return np.fft.irfft(white_coefficients(self.grid, time_index, self.rows),
                            n=self.grid.nx)

    def increments(self, time_index: int) -> np.ndarray:
        if self.rho_hat is None:
            raise ValidationError("FieldSource was built without a mollifier")
        coeff = white_coefficients(self.grid, time_index, self.rows)
        coeff *= self.rho_hat
        return np.fft.irfft(coeff, n=self.grid.nx)


def dump_noise_slice(grid: NoiseGrid, time_index: int, path) -> None:
    """Write one white slice as row-major little-endian float64 binary."""
    sample_white_increments(grid, time_index).astype("<f8").tofile(path)
