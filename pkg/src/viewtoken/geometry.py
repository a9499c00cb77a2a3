"""Camera poses, pose-vector normalization, and view classification.

Two pose parameterizations are supported: a 4x4 camera-to-world matrix whose
12 free entries (top three rows, row-major) are min/max-normalized to [-1, 1]
over a training split, and spherical angles (theta, phi) at a fixed radius
mapped affinely onto [-1, 1]. A query view is an *interpolation* of a training
set when its (theta, phi) point lies inside or on the boundary of the 2-D
convex hull of the training views' angles, and an *extrapolation* otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Boundary tolerance for hull membership; scaled by the coordinate magnitude.
HULL_EPS = 1e-12

_BOTTOM_ROW = np.array([0.0, 0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraPose:
    """A camera in matrix or spherical parameterization.

    Use :meth:`from_matrix` or :meth:`from_spherical`; the constructor does not
    validate. Matrix poses are camera-to-world, row-major, world units.
    """

    kind: str  # "matrix" | "spherical"
    matrix: np.ndarray | None = None
    theta: float = 0.0
    phi: float = 0.0
    radius: float = 1.0

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "CameraPose":
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"camera-to-world matrix must be 4x4, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("camera-to-world matrix has non-finite entries")
        if not np.allclose(m[3], _BOTTOM_ROW, atol=1e-9):
            raise ValueError(
                "not a camera-to-world matrix: bottom row must be (0, 0, 0, 1), "
                f"got {m[3].tolist()}"
            )
        m = m.copy()
        m.flags.writeable = False
        return cls(kind="matrix", matrix=m)

    @classmethod
    def from_spherical(cls, theta: float, phi: float, radius: float) -> "CameraPose":
        if not 0.0 <= theta <= math.pi:
            raise ValueError(f"theta must be in [0, pi], got {theta}")
        if not 0.0 <= phi < 2.0 * math.pi:
            raise ValueError(f"phi must be in [0, 2*pi), got {phi}")
        if not radius > 0.0:
            raise ValueError(f"radius must be positive, got {radius}")
        return cls(kind="spherical", theta=float(theta), phi=float(phi), radius=float(radius))

    def free_entries(self) -> np.ndarray:
        """The 12 normalizable entries: top three matrix rows, row-major."""
        if self.kind != "matrix":
            raise ValueError("free_entries is defined for matrix poses only")
        return self.matrix[:3, :].reshape(12).copy()

    def spherical_angles(self) -> tuple[float, float]:
        """(theta, phi) of the camera center, assuming the object at the origin."""
        if self.kind == "spherical":
            return self.theta, self.phi
        center = self.matrix[:3, 3]
        r = float(np.linalg.norm(center))
        if r < 1e-12:
            raise ValueError("camera center at the origin has no spherical angles")
        theta = math.acos(min(1.0, max(-1.0, center[2] / r)))
        phi = math.atan2(center[1], center[0]) % (2.0 * math.pi)
        return theta, phi


def look_at_matrix(theta: float, phi: float, radius: float) -> np.ndarray:
    """Camera-to-world matrix for a camera on a sphere, pointed at the origin.

    OpenCV convention: camera +z looks at the origin, world +z is up.
    """
    p = radius * np.array(
        [math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)]
    )
    forward = -p / np.linalg.norm(p)
    up_world = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up_world)
    n = np.linalg.norm(right)
    if n < 1e-9:  # looking straight up/down; pick an arbitrary right axis
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / n
    down = np.cross(forward, right)
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = down
    m[:3, 2] = forward
    m[:3, 3] = p
    return m


@dataclass(frozen=True)
class NormalizationStats:
    """Per-entry min/max of the 12 free matrix entries over a training split."""

    entry_min: np.ndarray
    entry_max: np.ndarray
    source_split: str = ""

    def __post_init__(self):
        lo = np.asarray(self.entry_min, dtype=np.float64).reshape(12)
        hi = np.asarray(self.entry_max, dtype=np.float64).reshape(12)
        if np.any(lo > hi):
            raise ValueError("entry_min must be <= entry_max componentwise")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "entry_min", lo)
        object.__setattr__(self, "entry_max", hi)

    @property
    def constant_mask(self) -> np.ndarray:
        """True for entries whose min equals max (mapped to 0, not scaled)."""
        return self.entry_min == self.entry_max


@dataclass(frozen=True)
class SphericalRanges:
    """Affine angle-to-[-1,1] ranges for spherical poses; radius is excluded."""

    theta_range: tuple[float, float] = (0.0, math.pi)
    phi_range: tuple[float, float] = (0.0, 2.0 * math.pi)


@dataclass(frozen=True)
class PoseVector:
    """Flat normalized pose parameters, every component in [-1, 1].

    ``clamped`` flags that at least one out-of-range input was clipped to +-1.
    """

    values: np.ndarray
    clamped: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


def fit_normalization(poses: list[CameraPose], source_split: str = "") -> NormalizationStats:
    """Componentwise min/max of the free entries over >= 2 matrix poses."""
    if len(poses) < 2:
        raise ValueError(f"insufficient poses: need >= 2 to fit normalization, got {len(poses)}")
    kinds = {p.kind for p in poses}
    if kinds != {"matrix"}:
        raise ValueError(f"mixed parameterizations: expected all matrix poses, got kinds {sorted(kinds)}")
    entries = np.stack([p.free_entries() for p in poses])
    return NormalizationStats(
        entry_min=entries.min(axis=0), entry_max=entries.max(axis=0), source_split=source_split
    )


def _affine_to_unit(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[np.ndarray, bool]:
    span = hi - lo
    out = np.zeros_like(x)
    varying = span > 0
    out[varying] = 2.0 * (x[varying] - lo[varying]) / span[varying] - 1.0
    clamped = bool(np.any(out < -1.0) or np.any(out > 1.0))
    return np.clip(out, -1.0, 1.0), clamped


def to_pose_vector(pose: CameraPose, stats: NormalizationStats | SphericalRanges) -> PoseVector:
    """Normalize a pose to its flat [-1, 1] parameter vector.

    Matrix poses use fitted per-entry min/max stats (constant entries map to 0);
    spherical poses use fixed angle ranges. Out-of-range inputs clamp to +-1
    and set the ``clamped`` flag rather than erroring.
    """
    if pose.kind == "matrix":
        if not isinstance(stats, NormalizationStats):
            raise ValueError("matrix pose requires NormalizationStats")
        values, clamped = _affine_to_unit(pose.free_entries(), stats.entry_min, stats.entry_max)
        return PoseVector(values=values, clamped=clamped)
    if not isinstance(stats, SphericalRanges):
        raise ValueError("spherical pose requires SphericalRanges")
    x = np.array([pose.theta, pose.phi])
    lo = np.array([stats.theta_range[0], stats.phi_range[0]])
    hi = np.array([stats.theta_range[1], stats.phi_range[1]])
    values, clamped = _affine_to_unit(x, lo, hi)
    return PoseVector(values=values, clamped=clamped)


def invert_pose_vector(vec: PoseVector, stats: NormalizationStats) -> np.ndarray:
    """Map a normalized vector back to raw entries; constant entries get their min."""
    x = np.asarray(vec.values, dtype=np.float64)
    span = stats.entry_max - stats.entry_min
    return np.where(span > 0, stats.entry_min + (x + 1.0) * span / 2.0, stats.entry_min)


# ---------------------------------------------------------------------------
# Convex-hull classification in (theta, phi) space
# ---------------------------------------------------------------------------


def _cross(o: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices in CCW order."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _point_on_segment(q: np.ndarray, a: np.ndarray, b: np.ndarray, eps: float) -> bool:
    ab = b - a
    L2 = float(ab @ ab)
    if L2 < eps * eps:
        return bool(np.linalg.norm(q - a) <= eps)
    t = float((q - a) @ ab) / L2
    t = min(1.0, max(0.0, t))
    return bool(np.linalg.norm(a + t * ab - q) <= eps)


def hull_contains(points: np.ndarray, query: np.ndarray, eps: float = HULL_EPS) -> bool:
    """True iff query lies inside or on the boundary of hull(points).

    Degenerate hulls (a single point or collinear points) fall back to
    point/segment containment. ``eps`` is scaled by the coordinate magnitude.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(query, dtype=np.float64).reshape(2)
    scale = max(1.0, float(np.max(np.abs(pts))), float(np.max(np.abs(q))))
    tol = eps * scale
    hull = _convex_hull(pts)
    if len(hull) == 1:
        return bool(np.linalg.norm(q - hull[0]) <= tol)
    if len(hull) == 2:
        return _point_on_segment(q, hull[0], hull[1], tol)
    # Hull area can still collapse when inputs are collinear but not bitwise
    # duplicated; detect via the maximal triangle area.
    area = 0.0
    for i in range(1, len(hull) - 1):
        area = max(area, abs(_cross(hull[0], hull[i], hull[i + 1])))
    if area <= tol * scale:
        return any(
            _point_on_segment(q, hull[i], hull[(i + 1) % len(hull)], tol) for i in range(len(hull))
        )
    for i in range(len(hull)):
        if _cross(hull[i], hull[(i + 1) % len(hull)], q) < -tol * scale:
            return False
    return True


def classify_view(query: CameraPose, train: list[CameraPose]) -> str:
    """Classify a query pose against training poses in (theta, phi) space.

    Returns "interpolation" when the query's angles lie inside or on the
    boundary of the convex hull of the training angles, else "extrapolation".
    """
    if not train:
        raise ValueError("cannot classify a view against an empty training set")
    pts = np.array([p.spherical_angles() for p in train])
    q = np.array(query.spherical_angles())
    return "interpolation" if hull_contains(pts, q) else "extrapolation"
