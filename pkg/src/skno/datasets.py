"""Desk-scale data generators for the heat, advection, Burgers and Darcy tasks.

Every generator draws sample ``i`` from ``np.random.default_rng([seed, i])`` so
datasets are reproducible, independent of generation order, and the same seed
yields the same underlying functions at any resolution.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import cg

from .exceptions import NumericError, UsageError
from .oracle import OracleConfig
from .skt import read_skt, write_skt
from .tensor import Field, Grid

BENCHMARKS = ("heat", "advection", "burgers", "darcy")


@dataclass
class Dataset:
    """Paired inputs ``a`` and targets ``u`` with layout ``(samples, *spatial, channels)``."""

    a: np.ndarray
    u: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.a.shape[:-1] != self.u.shape[:-1]:
            raise UsageError(f"input/target shapes disagree: {self.a.shape} vs {self.u.shape}")

    def __len__(self):
        return self.a.shape[0]

    @property
    def resolution(self) -> tuple[int, ...]:
        return self.a.shape[1:-1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.a[idx], self.u[idx], dict(self.meta))

    def pairs(self):
        grid = Grid(self.resolution)
        for a, u in zip(self.a, self.u):
            yield Field(grid, a, a.shape[-1]), Field(grid, u, u.shape[-1])

    def save(self, directory, name: str) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        pa = write_skt(directory / f"{name}_a.skt", self.a)
        pu = write_skt(directory / f"{name}_u.skt", self.u)
        side = directory / f"{name}.json"
        side.write_text(json.dumps(self.meta, indent=2, sort_keys=True))
        return [pa, pu, side]

    @classmethod
    def load(cls, directory, name: str) -> "Dataset":
        directory = Path(directory)
        a = read_skt(directory / f"{name}_a.skt")
        u = read_skt(directory / f"{name}_u.skt")
        side = directory / f"{name}.json"
        meta = json.loads(side.read_text()) if side.exists() else {}
        return cls(a, u, meta)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def band_limited_coefficients(rng: np.random.Generator, modes: int = 8):
    """Cosine/sine coefficients ``N(0,1)/k`` for wavenumbers ``1..modes``."""
    k = np.arange(1, modes + 1)
    return rng.standard_normal(modes) / k, rng.standard_normal(modes) / k


def eval_series(coef_cos, coef_sin, x, shift=0.0, decay=None) -> np.ndarray:
    """Evaluate ``sum_k d_k (a_k cos 2pi k (x-shift) + b_k sin 2pi k (x-shift))``."""
    k = np.arange(1, len(coef_cos) + 1)
    d = np.ones_like(k, dtype=float) if decay is None else decay(k)
    phase = 2 * np.pi * np.outer(x - shift, k)
    return np.cos(phase) @ (d * coef_cos) + np.sin(phase) @ (d * coef_sin)


def _grid_of(grid) -> Grid:
    return grid if isinstance(grid, Grid) else Grid(tuple(np.atleast_1d(grid)))


def gen_heat_dataset(n_samples: int, grid, cfg: OracleConfig | None = None, seed: int = 0,
                     modes: int = 8) -> Dataset:
    """Pairs ``(u0, u(., t))`` of the periodic heat equation on the unit interval."""
    grid = _grid_of(grid)
    cfg = cfg or OracleConfig()
    if grid.dims != 1:
        raise UsageError("heat generator is one-dimensional")
    x = grid.coordinates()[0] / grid.lengths[0]
    decay = lambda k: np.exp(-cfg.c * cfg.t * (2 * np.pi * k / grid.lengths[0]) ** 2)
    a = np.empty((n_samples, grid.resolution[0], 1))
    u = np.empty_like(a)
    for i in range(n_samples):
        ac, bc = band_limited_coefficients(sample_rng(seed, i), modes)
        a[i, :, 0] = eval_series(ac, bc, x)
        u[i, :, 0] = eval_series(ac, bc, x, decay=decay)
    meta = dict(benchmark="heat", n_samples=n_samples, resolution=list(grid.resolution),
                seed=seed, modes=modes, config=asdict(cfg))
    return Dataset(a, u, meta)


def translate(u: np.ndarray, shift: float, length: float = 1.0, axis: int = 0) -> np.ndarray:
    """Periodic translation ``u(x - shift)`` by an exact spectral phase shift."""
    n = u.shape[axis]
    xi = 2 * np.pi * np.fft.fftfreq(n, d=length / n)
    shape = [1] * u.ndim
    shape[axis] = -1
    spec = np.fft.fft(u, axis=axis) * np.exp(-1j * xi * shift).reshape(shape)
    return np.fft.ifft(spec, axis=axis).real


def gen_advection_dataset(n_samples: int, grid, cfg: OracleConfig | None = None,
                          n_steps: int = 20, seed: int = 0, dt: float = 0.05,
                          modes: int = 8) -> Dataset:
    """Trajectories of ``u_t + beta u_x = 0``; first half of the snapshots predict the second."""
    grid = _grid_of(grid)
    cfg = cfg or OracleConfig()
    if n_steps % 2:
        raise UsageError("n_steps must be even")
    x = grid.coordinates()[0]
    traj = np.empty((n_samples, grid.resolution[0], n_steps))
    for i in range(n_samples):
        ac, bc = band_limited_coefficients(sample_rng(seed, i), modes)
        for j in range(n_steps):
            traj[i, :, j] = eval_series(ac, bc, x / grid.lengths[0],
                                        shift=cfg.beta * j * dt / grid.lengths[0])
    half = n_steps // 2
    meta = dict(benchmark="advection", n_samples=n_samples, resolution=list(grid.resolution),
                seed=seed, n_steps=n_steps, dt=dt, modes=modes, config=asdict(cfg))
    return Dataset(traj[..., :half], traj[..., half:], meta)


def burgers_rhs(u_hat: np.ndarray, k: np.ndarray, nu: float, mask: np.ndarray) -> np.ndarray:
    n = (u_hat.shape[-1] - 1) * 2
    u = np.fft.irfft(u_hat * mask, n=n, axis=-1)
    nonlin = np.fft.rfft(0.5 * u * u, axis=-1) * mask
    return -1j * k * nonlin - nu * k * k * u_hat


def burgers_solve(u0: np.ndarray, nu: float = 0.1, t_end: float = 1.0, dt: float | None = None,
                  length: float = 1.0, callback=None) -> np.ndarray:
    """Periodic viscous Burgers ``u_t + u u_x = nu u_xx`` by pseudo-spectral RK4.

    ``u0`` may carry leading batch axes; the last axis is space. The 2/3 rule
    removes aliasing from the quadratic term. The default step is the smaller
    of ``1e-4`` and the explicit RK4 stability limit of the diffusive term.
    ``callback(step, u_hat)`` runs after every step if given.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    n = u0.shape[-1]
    k = 2 * np.pi * np.fft.rfftfreq(n, d=length / n)
    mask = (np.arange(k.size) < (n // 3) + 1).astype(float)
    if dt is None:
        kmax = k[mask > 0].max()
        dt = min(1e-4, 2.5 / (nu * kmax ** 2))
    n_steps = int(np.ceil(t_end / dt - 1e-9)) if t_end > 0 else 0
    if n_steps == 0:
        return u0.copy()
    h = t_end / n_steps
    u_hat = np.fft.rfft(u0, axis=-1) * mask
    for step in range(1, n_steps + 1):
        k1 = burgers_rhs(u_hat, k, nu, mask)
        k2 = burgers_rhs(u_hat + 0.5 * h * k1, k, nu, mask)
        k3 = burgers_rhs(u_hat + 0.5 * h * k2, k, nu, mask)
        k4 = burgers_rhs(u_hat + h * k3, k, nu, mask)
        u_hat = u_hat + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(u_hat)):
            raise NumericError(f"Burgers solver blew up at step {step} (dt={h:.3g})")
        if callback is not None:
            callback(step, u_hat)
    return np.fft.irfft(u_hat, n=n, axis=-1)


def gen_burgers_dataset(n_samples: int, grid, cfg: OracleConfig | None = None, seed: int = 0,
                        modes: int = 8, solve_resolution: int | None = None) -> Dataset:
    """Pairs ``(u0, u(., t))`` for viscous Burgers from band-limited initial data.

    The solve runs at ``solve_resolution`` (default: the output resolution) and
    is sampled back onto the requested grid spectrally.
    """
    grid = _grid_of(grid)
    cfg = cfg or OracleConfig()
    n = grid.resolution[0]
    ns = solve_resolution or n
    xs = np.arange(ns) / ns
    coefs = [band_limited_coefficients(sample_rng(seed, i), modes) for i in range(n_samples)]
    u0 = np.stack([eval_series(ac, bc, xs) for ac, bc in coefs]) if n_samples else np.empty((0, ns))
    u1 = burgers_solve(u0, cfg.nu, cfg.t, length=grid.lengths[0]) if n_samples else u0
    a, u = resample(u0, n), resample(u1, n)
    meta = dict(benchmark="burgers", n_samples=n_samples, resolution=[n], seed=seed,
                modes=modes, solve_resolution=ns, config=asdict(cfg))
    return Dataset(a[..., None], u[..., None], meta)


def resample(u: np.ndarray, n: int) -> np.ndarray:
    """Band-limited resampling of a periodic signal along the last axis."""
    m = u.shape[-1]
    if m == n:
        return u.copy()
    spec = np.fft.rfft(u, axis=-1)
    out = np.zeros(u.shape[:-1] + (n // 2 + 1,), dtype=complex)
    keep = min(m, n) // 2
    out[..., :keep] = spec[..., :keep]
    return np.fft.irfft(out, n=n, axis=-1) * (n / m)


def darcy_matrix(a: np.ndarray) -> sparse.csr_matrix:
    """Cell-centred 5-point operator for ``-div(a grad u)`` with zero Dirichlet faces.

    Interior faces use the harmonic mean of the adjacent cells; boundary faces
    sit half a cell from the node.
    """
    a = np.asarray(a, dtype=np.float64)
    nx, ny = a.shape
    hx, hy = 1.0 / nx, 1.0 / ny
    idx = np.arange(nx * ny).reshape(nx, ny)
    diag = np.zeros((nx, ny))
    rows, cols, vals = [], [], []

    def couple(sl_a, sl_b, coef):
        ia, ib = idx[sl_a].ravel(), idx[sl_b].ravel()
        c = coef.ravel()
        rows.extend([ia, ib])
        cols.extend([ib, ia])
        vals.extend([-c, -c])
        np.add.at(diag, np.unravel_index(ia, (nx, ny)), c)
        np.add.at(diag, np.unravel_index(ib, (nx, ny)), c)

    hm_x = 2 * a[1:, :] * a[:-1, :] / (a[1:, :] + a[:-1, :]) / hx ** 2
    hm_y = 2 * a[:, 1:] * a[:, :-1] / (a[:, 1:] + a[:, :-1]) / hy ** 2
    couple((slice(1, None), slice(None)), (slice(None, -1), slice(None)), hm_x)
    couple((slice(None), slice(1, None)), (slice(None), slice(None, -1)), hm_y)
    diag[0, :] += 2 * a[0, :] / hx ** 2
    diag[-1, :] += 2 * a[-1, :] / hx ** 2
    diag[:, 0] += 2 * a[:, 0] / hy ** 2
    diag[:, -1] += 2 * a[:, -1] / hy ** 2
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    n = nx * ny
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def darcy_solve(a, f: float = 1.0, rtol: float = 1e-10) -> np.ndarray:
    """Solve ``-div(a grad u) = f`` on the unit square, ``u = 0`` on the boundary."""
    a = np.asarray(a.values[..., 0] if isinstance(a, Field) else a, dtype=np.float64)
    if a.ndim == 3 and a.shape[-1] == 1:
        a = a[..., 0]
    if a.ndim != 2:
        raise UsageError(f"darcy_solve expects a 2D coefficient, got shape {a.shape}")
    if not np.all(a > 0):
        raise UsageError("Darcy coefficient must be strictly positive")
    mat = darcy_matrix(a)
    rhs = np.full(a.size, float(f))
    precond = sparse.diags(1.0 / mat.diagonal())
    sol, info = cg(mat, rhs, rtol=rtol, atol=0.0, maxiter=10 * a.size, M=precond)
    if info != 0:
        raise NumericError(f"CG did not converge in {10 * a.size} iterations (info={info})")
    return sol.reshape(a.shape)


def grf_2d(rng: np.random.Generator, n: int, tau: float = 3.0, alpha: float = 2.0) -> np.ndarray:
    """Periodic Gaussian random field with power spectrum ``(|2 pi k|^2 + tau^2)^-alpha``."""
    k = np.fft.fftfreq(n, d=1.0 / n)
    kx, ky = np.meshgrid(k, k, indexing="ij")
    amp = (4 * np.pi ** 2 * (kx ** 2 + ky ** 2) + tau ** 2) ** (-alpha / 2.0)
    amp[0, 0] = 0.0
    noise = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return np.fft.ifft2(amp * noise).real * n * n


def gen_darcy_dataset(n_samples: int, grid, seed: int = 0, low: float = 3.0,
                      high: float = 12.0) -> Dataset:
    """Coefficient/solution pairs with ``a`` thresholded from a GRF to ``{low, high}``."""
    grid = _grid_of(grid)
    if grid.dims != 2 or grid.resolution[0] != grid.resolution[1]:
        raise UsageError("Darcy generator needs a square 2D grid")
    n = grid.resolution[0]
    a = np.empty((n_samples, n, n, 1))
    u = np.empty_like(a)
    for i in range(n_samples):
        g = grf_2d(sample_rng(seed, i), n)
        a[i, ..., 0] = np.where(g >= 0, high, low)
        u[i, ..., 0] = darcy_solve(a[i, ..., 0])
    meta = dict(benchmark="darcy", n_samples=n_samples, resolution=[n, n], seed=seed,
                values=[low, high])
    return Dataset(a, u, meta)


def generate(benchmark: str, n_samples: int, resolution, seed: int = 0,
             cfg: OracleConfig | None = None, **kwargs) -> Dataset:
    """Dispatch to the generator named by ``benchmark``."""
    if benchmark == "heat":
        return gen_heat_dataset(n_samples, resolution, cfg, seed, **kwargs)
    if benchmark == "advection":
        return gen_advection_dataset(n_samples, resolution, cfg, seed=seed, **kwargs)
    if benchmark == "burgers":
        return gen_burgers_dataset(n_samples, resolution, cfg, seed, **kwargs)
    if benchmark == "darcy":
        res = tuple(np.atleast_1d(resolution))
        if len(res) == 1:
            res = res * 2
        return gen_darcy_dataset(n_samples, res, seed, **kwargs)
    raise UsageError(f"unknown benchmark {benchmark!r}; choose from {', '.join(BENCHMARKS)}")
