"""Convolution weight tensors, mode unfolding and singular spectra.

Axis order is fixed as ``(kh, kw, cin, cout)``, i.e. ``(N1, N2, N3, N4)``.
A mode-``d`` unfolding puts axis ``d`` on the rows and flattens the remaining
axes, in ascending order, C-contiguously onto the columns::

    mode 4:  W4[i4, (i1, i2, i3)]   shape (N4, N1*N2*N3)
    mode 3:  W3[i3, (i1, i2, i4)]   shape (N3, N1*N2*N4)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

AXIS_ORDER = ("kh", "kw", "cin", "cout")
MODES = (3, 4)

# singular values below this fraction of the largest are reported as zero
SV_CLAMP = 1e-12


@dataclass(frozen=True, eq=False)
class ConvTensor:
    """4-way convolution weight, ``values.shape == (kh, kw, cin, cout)``."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 4:
            raise InputError(f"conv tensor must be 4-way, got shape {values.shape}")
        if min(values.shape) < 1:
            raise InputError(f"conv tensor dims must be >= 1, got {values.shape}")
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        if not np.all(np.isfinite(values)):
            raise InputError("conv tensor contains non-finite entries")
        values = values.view()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, ConvTensor):
            return NotImplemented
        return (self.values.dtype == other.values.dtype
                and self.dims == other.dims
                and np.array_equal(self.values, other.values))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class UnfoldedMatrix:
    mode: int
    values: np.ndarray
    source_dims: tuple[int, int, int, int]

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class SingularSpectrum:
    values: tuple[float, ...]
    shape: tuple[int, int]

    @property
    def count(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def _check_mode(mode):
    if mode not in MODES:
        raise InputError(f"unfolding mode must be one of {MODES}, got {mode!r}")


def _perm(mode):
    # row axis first, remaining axes ascending
    row = mode - 1
    return (row,) + tuple(a for a in range(4) if a != row)


def unfold(tensor: ConvTensor, mode: int) -> UnfoldedMatrix:
    """Flatten ``tensor`` into a matrix with axis ``mode`` on the rows."""
    _check_mode(mode)
    arr = np.transpose(tensor.values, _perm(mode))
    mat = np.ascontiguousarray(arr).reshape(arr.shape[0], -1)
    return UnfoldedMatrix(mode=mode, values=mat, source_dims=tensor.dims)


def refold(matrix: UnfoldedMatrix) -> ConvTensor:
    """Exact inverse of :func:`unfold`."""
    _check_mode(matrix.mode)
    perm = _perm(matrix.mode)
    permuted_dims = tuple(matrix.source_dims[a] for a in perm)
    arr = np.asarray(matrix.values).reshape(permuted_dims)
    return ConvTensor(np.ascontiguousarray(np.transpose(arr, np.argsort(perm))))


def svd(matrix) -> SingularSpectrum:
    """Singular values of an unfolded (or plain 2-D) matrix, non-increasing.

    Values smaller than ``SV_CLAMP * sigma_1`` are set to exactly zero.
    """
    values = matrix.values if isinstance(matrix, UnfoldedMatrix) else np.asarray(matrix)
    if values.ndim != 2:
        raise InputError(f"expected a 2-D matrix, got shape {values.shape}")
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InputError("matrix contains non-finite entries")
    if values.size == 0:
        raise InputError("matrix must have at least one row and one column")
    s = np.linalg.svd(values, compute_uv=False)
    s = np.sort(np.abs(s))[::-1]
    if s.size and s[0] > 0:
        s[s < SV_CLAMP * s[0]] = 0.0
    return SingularSpectrum(values=tuple(float(v) for v in s), shape=values.shape)
