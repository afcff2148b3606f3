"""Unit-sphere targets with nearest-point retraction and geodesic distance."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ProjectionOutOfRange(ValueError):
    """Raised when a point lies outside the retraction collar of the target."""

    code = "PROJECTION_OUT_OF_RANGE"


@dataclass(frozen=True)
class TargetManifold:
    """The unit sphere S^n in R^{n+1}; ``n == 1`` is the circle."""

    n: int
    delta: float = 0.5

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("sphere dimension must be at least 1")
        # delta = 1 is allowed as a limiting case; the centre stays excluded
        if not 0 < self.delta <= 1:
            raise ValueError("retraction radius must lie in (0, 1] for unit spheres")

    @property
    def nu(self) -> int:
        return self.n + 1

    @property
    def kind(self) -> str:
        return "CIRCLE" if self.n == 1 else f"SPHERE({self.n})"

    @property
    def diam(self) -> float:
        return math.pi

    def homotopy_trivial(self, j: int) -> bool:
        """Whether pi_j of the target vanishes (known cases only)."""
        if j == 0:
            return True
        if self.n == 1:
            return j >= 2
        return j < self.n

    def dist_to(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.abs(np.linalg.norm(y, axis=-1) - 1.0)

    def project(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        r = np.linalg.norm(y, axis=-1)
        bad = (np.abs(r - 1.0) > self.delta) | (r == 0.0)
        if np.any(bad):
            worst = float(np.max(np.abs(r - 1.0)))
            raise ProjectionOutOfRange(
                f"{ProjectionOutOfRange.code}: distance {worst:.6g} exceeds {self.delta}"
            )
        return y / r[..., None]

    def normalize(self, y) -> np.ndarray:
        """Radial projection with no collar check (used for constructive fills)."""
        y = np.asarray(y, dtype=float)
        r = np.linalg.norm(y, axis=-1, keepdims=True)
        return y / r

    def geodesic_distance(self, a, b) -> np.ndarray:
        a = self.normalize(a)
        b = self.normalize(b)
        dot = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
        return np.arccos(dot)

    def to_dict(self) -> dict:
        return {"n": self.n, "delta": self.delta}

    @classmethod
    def from_dict(cls, d: dict) -> "TargetManifold":
        return cls(int(d.get("n", 1)), float(d.get("delta", 0.5)))


def circle(delta: float = 0.5) -> TargetManifold:
    return TargetManifold(1, delta)


def sphere(n: int, delta: float = 0.5) -> TargetManifold:
    return TargetManifold(n, delta)


def project(M: TargetManifold, y) -> np.ndarray:
    return M.project(y)


def geodesic_distance(M: TargetManifold, a, b) -> np.ndarray:
    return M.geodesic_distance(a, b)
