"""Grids, fields, spectra and the Fourier/SVD primitives shared by every module.

Arrays are 64-bit throughout. A :class:`Field` stores values with layout
``(*grid.resolution, aux_len)``; the trailing axis holds the auxiliary
coordinate ``p`` (or the channel index for physical inputs and outputs).

Transforms follow the usual FFT convention: unnormalized forward, ``1/N`` on
the inverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .exceptions import NumericError, SymmetryError, UsageError

__all__ = [
    "Grid",
    "Field",
    "Spectrum",
    "dft_axis",
    "idft_axis",
    "truncate_modes",
    "svd",
    "direct_dft",
    "retained_mode_slices",
]

REALNESS_TOL = 1e-10


@dataclass(frozen=True)
class Grid:
    """Uniform spatial grid with ``dims`` axes."""

    resolution: tuple[int, ...]
    lengths: tuple[float, ...] | None = None

    def __post_init__(self):
        res = tuple(int(n) for n in np.atleast_1d(self.resolution))
        if len(res) not in (1, 2):
            raise UsageError(f"grid must be 1D or 2D, got {len(res)} axes")
        if any(n < 2 for n in res):
            raise UsageError(f"every resolution must be >= 2, got {res}")
        lengths = self.lengths
        if lengths is None:
            lengths = (1.0,) * len(res)
        lengths = tuple(float(x) for x in np.atleast_1d(lengths))
        if len(lengths) != len(res):
            raise UsageError("lengths and resolution must have the same number of axes")
        if any(not np.isfinite(x) or x <= 0 for x in lengths):
            raise UsageError(f"lengths must be positive and finite, got {lengths}")
        object.__setattr__(self, "resolution", res)
        object.__setattr__(self, "lengths", lengths)

    @property
    def dims(self) -> int:
        return len(self.resolution)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.lengths, self.resolution))

    @property
    def total_points(self) -> int:
        return int(np.prod(self.resolution))

    def coordinates(self) -> list[np.ndarray]:
        """Node coordinates ``i * spacing`` along each axis."""
        return [np.arange(n) * h for n, h in zip(self.resolution, self.spacing)]

    def angular_frequencies(self, axis: int) -> np.ndarray:
        """Angular wavenumbers ``2*pi*k/L`` in ``np.fft.fftfreq`` order."""
        n, L = self.resolution[axis], self.lengths[axis]
        return 2.0 * np.pi * np.fft.fftfreq(n, d=L / n)


def _as_values(values, shape) -> np.ndarray:
    arr = np.asarray(values)
    if arr.shape != shape:
        try:
            arr = arr.reshape(shape)
        except ValueError as exc:
            raise UsageError(f"values of size {arr.size} do not fit layout {shape}") from exc
    return arr


@dataclass(frozen=True)
class Field:
    """Real values on ``grid`` with a trailing auxiliary axis."""

    grid: Grid
    values: np.ndarray
    aux_len: int = 1

    def __post_init__(self):
        shape = self.grid.resolution + (int(self.aux_len),)
        arr = _as_values(self.values, shape)
        if np.iscomplexobj(arr):
            raise UsageError("Field values must be real; use Spectrum for complex data")
        arr = np.array(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("Field contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "aux_len", int(self.aux_len))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def aux_axis(self) -> int:
        return self.grid.dims


@dataclass(frozen=True)
class Spectrum:
    """Complex values of a :class:`Field` with some axes in frequency space.

    ``from_real`` records whether the data originated from a real field, so the
    final inverse transform can return a :class:`Field`.
    """

    grid: Grid
    values: np.ndarray
    aux_len: int = 1
    transformed_axes: frozenset = field(default_factory=frozenset)
    from_real: bool = True

    def __post_init__(self):
        shape = self.grid.resolution + (int(self.aux_len),)
        arr = np.array(_as_values(self.values, shape), dtype=np.complex128)
        if not np.all(np.isfinite(arr)):
            raise NumericError("Spectrum contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "aux_len", int(self.aux_len))
        object.__setattr__(self, "transformed_axes", frozenset(self.transformed_axes))

    @property
    def aux_axis(self) -> int:
        return self.grid.dims


def _resolve_axis(obj: Union[Field, Spectrum], axis) -> int:
    ndim = obj.grid.dims + 1
    if axis in ("aux", "p"):
        return obj.grid.dims
    if isinstance(axis, str) and axis.startswith("x"):
        axis = int(axis[1:] or 0)
    axis = int(axis)
    if axis < 0:
        axis += ndim
    if not 0 <= axis < ndim:
        raise UsageError(f"axis {axis} out of range for {ndim}-axis data")
    return axis


def direct_dft(x: np.ndarray, axis: int = -1, inverse: bool = False) -> np.ndarray:
    """O(N^2) DFT by explicit summation; used as an independent check."""
    x = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1)
    n = x.shape[-1]
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    mat = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    out = x @ mat.T
    if inverse:
        out /= n
    return np.moveaxis(out, -1, axis)


def dft_axis(obj: Union[Field, Spectrum], axis) -> Spectrum:
    """Unnormalized forward DFT along one axis (``"p"``/``"aux"`` or an index)."""
    ax = _resolve_axis(obj, axis)
    if obj.values.shape[ax] < 2:
        raise UsageError(f"axis {ax} has length {obj.values.shape[ax]}; need >= 2")
    if isinstance(obj, Spectrum):
        if ax in obj.transformed_axes:
            raise UsageError(f"axis {ax} is already in frequency representation")
        done, from_real = obj.transformed_axes, obj.from_real
    else:
        done, from_real = frozenset(), True
    if not np.all(np.isfinite(obj.values)):
        raise NumericError("non-finite input to dft_axis")
    out = np.fft.fft(obj.values, axis=ax)
    return Spectrum(obj.grid, out, obj.aux_len, done | {ax}, from_real)


def idft_axis(spec: Spectrum, axis) -> Union[Field, Spectrum]:
    """Inverse DFT (with ``1/N``) along ``axis``.

    When no transformed axes remain and the data came from a real field, the
    imaginary residue is checked against ``1e-10`` and dropped.
    """
    ax = _resolve_axis(spec, axis)
    if ax not in spec.transformed_axes:
        raise UsageError(f"axis {ax} is not in frequency representation")
    out = np.fft.ifft(spec.values, axis=ax)
    remaining = spec.transformed_axes - {ax}
    if remaining or not spec.from_real:
        return Spectrum(spec.grid, out, spec.aux_len, remaining, spec.from_real)
    resid = float(np.max(np.abs(out.imag))) if out.size else 0.0
    if resid > REALNESS_TOL:
        raise SymmetryError(
            f"imaginary residue {resid:.3e} exceeds {REALNESS_TOL:g}; "
            "spectrum is not conjugate-symmetric"
        )
    return Field(spec.grid, out.real.copy(), spec.aux_len)


def retained_mode_slices(resolution: tuple[int, ...], k: int) -> list[np.ndarray]:
    """Indices (fft order) of the retained frequencies along each spatial axis."""
    out = []
    for n in resolution:
        pos = np.arange(k)
        neg = (n - np.arange(1, k)) % n
        out.append(np.unique(np.concatenate([pos, neg])))
    return out


def truncate_modes(spec: Spectrum, k) -> Spectrum:
    """Zero every spatial frequency with ``|m| >= k`` along each transformed axis.

    Frequencies ``0..k-1`` and their conjugate partners ``-(k-1)..-1`` are
    kept, so real inputs stay real after the inverse. ``k = N/2`` is full
    retention and also keeps the self-conjugate Nyquist mode.
    """
    dims = spec.grid.dims
    ks = np.broadcast_to(np.atleast_1d(np.asarray(k, dtype=int)), (dims,))
    vals = np.array(spec.values)
    for ax in range(dims):
        n = spec.grid.resolution[ax]
        kk = int(ks[ax])
        if not 1 <= kk <= n // 2:
            raise UsageError(f"mode count {kk} out of range [1, {n // 2}] on axis {ax}")
        if ax not in spec.transformed_axes:
            continue
        if 2 * kk == n:
            continue
        freq = np.fft.fftfreq(n, d=1.0 / n)
        drop = np.abs(freq) >= kk
        idx = [slice(None)] * vals.ndim
        idx[ax] = drop
        vals[tuple(idx)] = 0.0
    return Spectrum(spec.grid, vals, spec.aux_len, spec.transformed_axes, spec.from_real)


def svd(matrix) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD ``A = U diag(s) V^T`` with singular values descending.

    Returns ``(U, s, V)`` where ``V`` holds the right singular vectors as
    columns.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2:
        raise UsageError(f"svd expects a 2D matrix, got shape {a.shape}")
    if a.shape[0] < a.shape[1]:
        raise UsageError(f"svd expects rows >= cols, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite entries in svd input")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return u, s, vt.T
