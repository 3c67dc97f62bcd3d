"""Seamless cloning: discrete Poisson reconstruction of a paste region.

Unknowns are the pixels of a region ``omega`` inside a rectangle placed on
the canvas. For every unknown p and channel::

    4 f_p - sum_{q in N4(p), q in omega} f_q
        = sum_{q in N4(p)} (g_p - g_q) + sum_{q in N4(p), q not in omega} t_q

with g the source patch and t the canvas. The left-hand operator is applied
matrix-free; it is symmetric positive definite, so plain conjugate gradient
is used.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, DimensionError, RegionError
from .rasters import as_rgb


@dataclass(frozen=True)
class SolverParams:
    rel_tol: float = 1e-6
    max_iter: int = 10_000

    def __post_init__(self):
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True)
class PasteRegion:
    """Rectangle at ``offset`` (x, y) of size width x height on the canvas.

    ``mask`` selects omega inside the rectangle; by default the rectangle
    minus its one-pixel border. Omega may not touch the rectangle border:
    every unknown needs source values at its four neighbours.
    """

    offset: tuple
    width: int
    height: int
    mask: np.ndarray | None = None

    def omega(self) -> np.ndarray:
        if self.mask is None:
            m = np.zeros((self.height, self.width), dtype=bool)
            m[1:-1, 1:-1] = True
            return m
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != (self.height, self.width):
            raise DimensionError(f"region mask shape {m.shape} != {(self.height, self.width)}")
        return m

    def validate(self, canvas_shape) -> np.ndarray:
        ch, cw = canvas_shape[:2]
        x, y = self.offset
        if x < 0 or y < 0 or x + self.width > cw or y + self.height > ch:
            raise RegionError(
                f"region {self.width}x{self.height} at ({x}, {y}) exceeds canvas {cw}x{ch}"
            )
        om = self.omega()
        if not om.any():
            raise RegionError("paste region omega is empty")
        if om[0, :].any() or om[-1, :].any() or om[:, 0].any() or om[:, -1].any():
            raise RegionError("omega touches the rectangle border; neighbours would fall outside the source")
        return om


@dataclass
class LaplacianSystem:
    region: PasteRegion
    omega: np.ndarray  # (h, w) bool, local to the rectangle
    index_map: np.ndarray  # (h, w) int64, -1 outside omega
    rhs: np.ndarray  # (n, 3) float64
    initial: np.ndarray  # (n, 3) float64, canvas values inside omega

    @property
    def n_unknowns(self) -> int:
        return self.rhs.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Matrix-free product with the restricted 5-point Laplacian; ``x`` is (n,) or (n, c)."""
        grid = np.zeros(self.omega.shape + x.shape[1:], dtype=np.float64)
        grid[self.omega] = x
        nb = np.zeros_like(grid)
        nb[1:] += grid[:-1]
        nb[:-1] += grid[1:]
        nb[:, 1:] += grid[:, :-1]
        nb[:, :-1] += grid[:, 1:]
        return 4.0 * x - nb[self.omega]


class CGResult(NamedTuple):
    solution: np.ndarray  # (n, 3)
    residual: float  # worst final relative residual over channels
    iterations: int  # most iterations used by any channel
    history: list  # per channel, relative residual after every iteration (index 0 = initial)


def _neighbour_sum(a: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    out[1:-1, 1:-1] = a[:-2, 1:-1] + a[2:, 1:-1] + a[1:-1, :-2] + a[1:-1, 2:]
    return out


def assemble_system(source, target, region: PasteRegion) -> LaplacianSystem:
    source = as_rgb(source)
    target = as_rgb(target)
    if source.shape[:2] != (region.height, region.width):
        raise DimensionError(
            f"source is {source.shape[1]}x{source.shape[0]}, region is {region.width}x{region.height}"
        )
    om = region.validate(target.shape)
    x, y = region.offset
    g = source.astype(np.float64)
    t = target[y : y + region.height, x : x + region.width].astype(np.float64)

    # guidance: sum over the 4 neighbours of (g_p - g_q)
    lap = 4.0 * g - _neighbour_sum(g)
    # known boundary values: canvas pixels adjacent to omega but outside it
    t_out = np.where(om[..., None], 0.0, t)
    rhs = lap + _neighbour_sum(t_out)

    index_map = np.full(om.shape, -1, dtype=np.int64)
    index_map[om] = np.arange(int(om.sum()))
    return LaplacianSystem(region, om, index_map, rhs[om], t[om])


def _cg_channel(system, b, x0, params):
    x = x0.copy()
    r = b - system.apply(x)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        bnorm = 1.0
    rr = r @ r
    history = [np.sqrt(rr) / bnorm]
    if history[-1] <= params.rel_tol:
        return x, history[-1], 0, history
    d = r.copy()
    for it in range(1, params.max_iter + 1):
        ad = system.apply(d)
        alpha = rr / (d @ ad)
        x += alpha * d
        r -= alpha * ad
        rr_new = r @ r
        history.append(np.sqrt(rr_new) / bnorm)
        if history[-1] <= params.rel_tol:
            return x, history[-1], it, history
        d = r + (rr_new / rr) * d
        rr = rr_new
    raise ConvergenceError(
        f"CG did not reach rel_tol={params.rel_tol:g} in {params.max_iter} iterations "
        f"(residual {history[-1]:.3e})",
        residual=history[-1],
        iterations=params.max_iter,
    )


def solve_cg(system: LaplacianSystem, params: SolverParams = SolverParams(), initial_guess=None) -> CGResult:
    """Solve each channel independently, starting from the canvas values by default."""
    x0 = system.initial if initial_guess is None else np.asarray(initial_guess, dtype=np.float64)
    if x0.shape != system.rhs.shape:
        raise DimensionError(f"initial guess shape {x0.shape} != {system.rhs.shape}")
    sol = np.empty_like(system.rhs)
    worst, most, histories = 0.0, 0, []
    for c in range(system.rhs.shape[1]):
        xc, res, its, hist = _cg_channel(system, system.rhs[:, c], x0[:, c], params)
        sol[:, c] = xc
        worst = max(worst, res)
        most = max(most, its)
        histories.append(hist)
    return CGResult(sol, worst, most, histories)


def round_half_away(values: np.ndarray) -> np.ndarray:
    return np.where(values >= 0, np.floor(values + 0.5), np.ceil(values - 0.5))


def compose(solution: np.ndarray, target, region: PasteRegion) -> np.ndarray:
    """Canvas copy with omega replaced by the rounded, clamped solution."""
    target = as_rgb(target)
    om = region.validate(target.shape)
    out = target.copy()
    x, y = region.offset
    site = out[y : y + region.height, x : x + region.width]
    site[om] = np.clip(round_half_away(np.asarray(solution, dtype=np.float64)), 0, 255).astype(np.uint8)
    return out


def seamless_clone(source, target, offset, mask=None, params: SolverParams = SolverParams()) -> np.ndarray:
    source = as_rgb(source)
    region = PasteRegion(tuple(offset), source.shape[1], source.shape[0], mask)
    system = assemble_system(source, target, region)
    result = solve_cg(system, params)
    return compose(result.solution, target, region)
