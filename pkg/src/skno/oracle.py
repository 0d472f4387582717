"""Exact Schrödingerisation pipeline for the heat equation.

The heat equation ``u_t = c u_xx`` is lifted to the phase-space equation
``v_t = -c d_p d_xx v`` by ``v0(x, p) = exp(-|p|) u0(x)``. In the double Fourier
domain this is a diagonal unitary evolution, so the evolved state is obtained
exactly (up to the truncated, periodic p-box) and the heat solution is read back
by integrating against a recovery weight over ``p >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NumericError, UsageError
from .tensor import Field, Grid

__all__ = [
    "PhaseGrid",
    "OracleConfig",
    "warp_lift_exp",
    "warp_lift_sin",
    "evolve_phase_heat",
    "recover",
    "heat_decay",
    "oracle_verify",
]


@dataclass(frozen=True)
class PhaseGrid:
    """Periodic grid on ``[p_min, p_max)`` with ``n_p`` nodes."""

    p_min: float = -16.0
    p_max: float = 16.0
    n_p: int = 128

    def __post_init__(self):
        if not (np.isfinite(self.p_min) and np.isfinite(self.p_max)):
            raise UsageError("phase grid bounds must be finite")
        if not self.p_min < 0 < self.p_max:
            raise UsageError(f"need p_min < 0 < p_max, got [{self.p_min}, {self.p_max}]")
        n = int(self.n_p)
        if n < 4 or n & (n - 1):
            raise UsageError(f"n_p must be a power of two >= 4, got {self.n_p}")

    @property
    def spacing(self) -> float:
        return (self.p_max - self.p_min) / self.n_p

    @property
    def nodes(self) -> np.ndarray:
        return self.p_min + np.arange(self.n_p) * self.spacing

    def angular_frequencies(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_p, d=self.spacing)

    def zero_index(self) -> int:
        """Index of the node nearest ``p = 0`` from above."""
        return int(np.searchsorted(self.nodes, -1e-12 * self.spacing))


@dataclass(frozen=True)
class OracleConfig:
    c: float = 0.05
    beta: float = 1.0
    nu: float = 0.1
    t: float = 1.0

    def __post_init__(self):
        vals = (self.c, self.beta, self.nu, self.t)
        if not all(np.isfinite(v) for v in vals):
            raise UsageError("oracle parameters must be finite")
        if self.c <= 0 or self.nu <= 0:
            raise UsageError("diffusivity and viscosity must be positive")
        if self.t < 0:
            raise UsageError("evolution time must be non-negative")


def _single_channel(u0: Field) -> np.ndarray:
    if u0.aux_len != 1:
        raise UsageError(f"expected a single-channel field, got aux_len={u0.aux_len}")
    return u0.values[..., 0]


def warp_lift_exp(u0: Field, pg: PhaseGrid) -> Field:
    """``v0(x, p_j) = exp(-|p_j|) u0(x)``."""
    u = _single_channel(u0)
    v = u[..., None] * np.exp(-np.abs(pg.nodes))
    return Field(u0.grid, v, pg.n_p)


def warp_lift_sin(u0: Field, pg: PhaseGrid) -> Field:
    """``v0(x, p_j) = sin(p_j) u0(x)`` on ``p in [-pi, pi)``."""
    if abs(pg.p_min + np.pi) > 1e-12 or abs(pg.p_max - np.pi) > 1e-12:
        raise UsageError(f"sin lift needs p in [-pi, pi], got [{pg.p_min}, {pg.p_max}]")
    u = _single_channel(u0)
    # sin(pi) would be 1.2e-16 rather than 0; evaluate by symmetry-preserving form
    p = pg.nodes
    s = np.sin(p)
    s[np.isclose(np.abs(p), np.pi, atol=1e-14)] = 0.0
    return Field(u0.grid, u[..., None] * s, pg.n_p)


def evolve_phase_heat(v0: Field, pg: PhaseGrid, cfg: OracleConfig) -> Field:
    """Evolve ``v_t = -c d_p d_xx v`` for time ``cfg.t`` on the periodic (x, p) box."""
    if v0.aux_len != pg.n_p:
        raise UsageError(f"field aux_len {v0.aux_len} != n_p {pg.n_p}")
    if cfg.t == 0:
        return v0
    grid = v0.grid
    spatial = tuple(range(grid.dims))
    xi2 = np.zeros(grid.resolution)
    for ax in spatial:
        shape = [1] * grid.dims
        shape[ax] = -1
        xi2 = xi2 + grid.angular_frequencies(ax).reshape(shape) ** 2
    eta = pg.angular_frequencies()
    spec = np.fft.fftn(v0.values, axes=spatial + (grid.dims,))
    spec *= np.exp(1j * cfg.t * cfg.c * xi2[..., None] * eta)
    out = np.fft.ifftn(spec, axes=spatial + (grid.dims,))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite values in phase-space evolution")
    return Field(grid, out.real, pg.n_p)


def _step_weights(pg: PhaseGrid) -> np.ndarray:
    p = pg.nodes
    j0 = pg.zero_index()
    w = np.zeros(pg.n_p)
    w[j0:] = pg.spacing
    w[j0] *= 0.5
    w[-1] *= 0.5
    # normalise so that the lift exp(-p) integrates to exactly one
    return w / (w @ np.exp(-np.abs(p)))


def recover(v1: Field, pg: PhaseGrid, kind: str = "delta") -> Field:
    """Integrate ``v1`` against the recovery weight over ``p``.

    ``delta`` reads the slice at the node nearest ``p = 0`` from above.
    ``step`` applies a trapezoid rule over ``p >= 0`` with unit weight,
    normalised so that it inverts :func:`warp_lift_exp` at ``t = 0``.
    """
    if v1.aux_len != pg.n_p:
        raise UsageError(f"field aux_len {v1.aux_len} != n_p {pg.n_p}")
    if kind == "delta":
        u = v1.values[..., pg.zero_index()]
    elif kind == "step":
        u = v1.values @ _step_weights(pg)
    else:
        raise UsageError(f"unknown recovery kind {kind!r}; expected 'delta' or 'step'")
    return Field(v1.grid, u[..., None], 1)


def heat_decay(u0: Field, cfg: OracleConfig) -> Field:
    """Analytic periodic heat solution ``u_hat(xi, t) = exp(-c xi^2 t) u0_hat(xi)``."""
    grid = u0.grid
    spatial = tuple(range(grid.dims))
    xi2 = np.zeros(grid.resolution)
    for ax in spatial:
        shape = [1] * grid.dims
        shape[ax] = -1
        xi2 = xi2 + grid.angular_frequencies(ax).reshape(shape) ** 2
    spec = np.fft.fftn(u0.values, axes=spatial)
    spec *= np.exp(-cfg.c * cfg.t * xi2)[..., None]
    return Field(grid, np.fft.ifftn(spec, axes=spatial).real, u0.aux_len)


def _rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    nb = np.linalg.norm(b)
    if nb == 0:
        return float(np.linalg.norm(a))
    return float(np.linalg.norm(a - b) / nb)


def schrodingerised_error(u0: Field, pg: PhaseGrid, cfg: OracleConfig, kind: str) -> float:
    """Relative L2 gap between the lifted/evolved/recovered state and the analytic solution."""
    v1 = evolve_phase_heat(warp_lift_exp(u0, pg), pg, cfg)
    got = recover(v1, pg, kind).values
    return _rel_l2(got, heat_decay(u0, cfg).values)


def oracle_verify(
    n: int = 256,
    pg: PhaseGrid | None = None,
    cfg: OracleConfig | None = None,
    tol: float = 1e-3,
) -> list[dict]:
    """Run the heat-equation checks used by ``skno oracle-verify``.

    Returns one row per check with keys ``check``, ``kind``, ``error``,
    ``bound`` and ``passed``.
    """
    pg = pg or PhaseGrid()
    cfg = cfg or OracleConfig()
    grid = Grid((n,))
    x = grid.coordinates()[0]
    u0 = Field(grid, np.sin(2 * np.pi * x)[:, None])
    rows = []
    for kind in ("delta", "step"):
        err = schrodingerised_error(u0, pg, cfg, kind)
        rows.append(dict(check="analytic", kind=kind, n_p=pg.n_p, p_max=pg.p_max,
                         error=err, bound=tol, passed=err < tol))
        doubled = PhaseGrid(2 * pg.p_min, 2 * pg.p_max, 2 * pg.n_p)
        err2 = schrodingerised_error(u0, doubled, cfg, kind)
        rows.append(dict(check="doubled_box", kind=kind, n_p=doubled.n_p, p_max=doubled.p_max,
                         error=err2, bound=err, passed=err2 < err))
        err0 = schrodingerised_error(u0, pg, OracleConfig(cfg.c, cfg.beta, cfg.nu, 0.0), kind)
        rows.append(dict(check="t_zero", kind=kind, n_p=pg.n_p, p_max=pg.p_max,
                         error=err0, bound=1e-12, passed=err0 < 1e-12))
    return rows
