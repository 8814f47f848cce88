"""Seeded random test batteries for the sweep commands.

Every shape is a polynomial bump (1 - r^2)^4 so that it is compactly supported,
lies in H^2_0 and stays resolvable on desk-scale grids.  Draw order is fixed, so a
(battery, seed) pair always produces the same fields.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import StripGrid
from .presets import poly_bump_1d, poly_bump_values


@dataclass(frozen=True)
class BumpShape:
    """Elliptic bump placement; lengths are in units of the strip width d."""

    x_center: tuple = (-1.0, 1.0)
    x_radius: tuple = (0.8, 1.5)
    y_offset_max: float = 0.15
    y_radius_min: float = 0.25
    y_radius_max: float = 0.45


def random_bump(grid: StripGrid, rng: np.random.Generator, shape: BumpShape = BumpShape()) -> np.ndarray:
    d = grid.d
    yc = rng.uniform(-shape.y_offset_max, shape.y_offset_max) * d
    xc = rng.uniform(*shape.x_center)
    rx = rng.uniform(*shape.x_radius)
    ry = rng.uniform(shape.y_radius_min * d, shape.y_radius_max * d - abs(yc))
    X, Y = grid.mesh
    return poly_bump_values(X, Y, (xc, yc), (rx, ry))


def gamma_battery(grid: StripGrid, c_values, n: int, rng: np.random.Generator,
                  shape: BumpShape = BumpShape(), amplitude: tuple = (0.01, 0.05)) -> list:
    """n perturbations gamma = a c bump with relative size a drawn from ``amplitude``."""
    out = []
    for _ in range(n):
        bump = random_bump(grid, rng, shape)
        out.append(rng.uniform(*amplitude) * np.asarray(c_values) * bump)
    return out


def g_battery(grid: StripGrid, n: int, rng: np.random.Generator, shape: BumpShape = BumpShape()) -> list:
    """n sums of one to three bumps with standard normal coefficients."""
    out = []
    for _ in range(n):
        k = int(rng.integers(1, 4))
        out.append(sum(rng.normal() * random_bump(grid, rng, shape) for _ in range(k)))
    return out


def carleman_field_battery(grid: StripGrid, n: int, rng: np.random.Generator) -> list:
    """n space-time fields compact in x and t and vanishing on both long edges.

    x-profile: bump of random center and radius; y-profile: cos(pi y/d) or sin(2 pi y/d);
    t-profile: bump times a random phase rotation exp(i omega t).
    """
    X, Y = grid.mesh
    tt = grid.t
    d, T = grid.d, grid.T
    out = []
    for _ in range(n):
        xc = rng.uniform(-1.0, 1.0)
        rx = rng.uniform(0.8, 1.5)
        mode = int(rng.integers(1, 3))
        ymode = np.cos(np.pi * Y / d) if mode == 1 else np.sin(2 * np.pi * Y / d)
        tc = rng.uniform(-0.25, 0.25) * T
        rt = rng.uniform(0.3, 0.6) * T
        omega = rng.uniform(-2.0, 2.0)
        space = poly_bump_1d(X, xc, rx) * ymode
        time = poly_bump_1d(tt, tc, rt) * np.exp(1j * omega * tt)
        out.append(space[None] * time[:, None, None])
    return out
