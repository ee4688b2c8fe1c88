"""Cameras, rigid poses, rays, ray/box intersection and ground-plane IPM.

Conventions
-----------
* Camera frame: x right, y down, z forward (pinhole, pixel ``(u, v)`` with
  ``u`` along x and ``v`` along y).  A continuous pixel coordinate ``(u, v)``
  maps to the direction ``((u - cx) / fx, (v - cy) / fy, 1)``; the centre of
  integer pixel ``(i, j)`` is ``(i + 0.5, j + 0.5)``.
* :class:`RigidPose` is camera-to-world: ``X_world = R @ X_cam + t``.
* Object-centric worlds (view schedules, oracle scenes) are y-up.  Street
  scenes used for composition are expressed in the KITTI camera frame
  (y down), so the road is the plane ``y = cam_height``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Raised when a geometric precondition is violated."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Same field of view at ``factor`` times the resolution."""
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )

    def cropped(self, x0: int, y0: int, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics of the sub-window starting at pixel ``(x0, y0)``.

        The principal point may fall outside the window, so the usual
        invariant is bypassed here on purpose.
        """
        cam = object.__new__(CameraIntrinsics)
        for k, v in dict(fx=self.fx, fy=self.fy, cx=self.cx - x0, cy=self.cy - y0,
                         width=width, height=height).items():
            object.__setattr__(cam, k, v)
        return cam


@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise GeometryError("rotation is not a proper orthonormal matrix")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> "RigidPose":
        """Camera at ``eye`` whose optical axis passes through ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        n = np.linalg.norm(fwd)
        if n <= 0:
            raise GeometryError("eye and target coincide")
        fwd = fwd / n
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        rn = np.linalg.norm(right)
        if rn < 1e-12:
            raise GeometryError("viewing direction parallel to up vector")
        right = right / rn
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd], axis=1)
        # re-orthonormalise to keep the 1e-9 invariants tight
        u, _, vt = np.linalg.svd(R)
        return cls(u @ vt, eye)

    @classmethod
    def from_matrix(cls, m) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        """3x4 ``[R | t]``."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def inverse(self) -> "RigidPose":
        return RigidPose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "RigidPose") -> "RigidPose":
        return RigidPose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float = 0.0
    far: float = math.inf

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0:
            raise GeometryError("zero ray direction")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)
        if not (0 <= self.near < self.far):
            raise GeometryError(f"invalid ray bounds ({self.near}, {self.far})")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class BoxPose:
    """7-DoF box in the KITTI camera frame (y down).

    ``(x, y, z)`` is the bottom-face centre, exactly as in a KITTI label;
    ``theta`` is the yaw about the y axis (KITTI ``rotation_y``).  The local
    box axes are: x along the length ``l``, y along the height ``h`` and z
    along the width ``w``.
    """

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise GeometryError(f"box extents must be positive: {self}")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y - self.h / 2.0, self.z])

    @property
    def half_extents(self) -> np.ndarray:
        return np.array([self.l / 2.0, self.h / 2.0, self.w / 2.0])

    @property
    def rotation(self) -> np.ndarray:
        return yaw_matrix(self.theta)

    def pose(self) -> RigidPose:
        """Box-local (unit extents not applied) to camera frame."""
        return RigidPose(self.rotation, self.center)

    def corners(self) -> np.ndarray:
        """(8, 3) corners in the camera frame."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        return (signs * self.half_extents) @ self.rotation.T + self.center

    def as_tuple(self):
        return (self.x, self.y, self.z, self.l, self.w, self.h, self.theta)


def yaw_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


# --------------------------------------------------------------------------
# rays and projection
# --------------------------------------------------------------------------


def pixel_ray(cam: CameraIntrinsics, pose: RigidPose, px) -> Ray:
    u, v = float(px[0]), float(px[1])
    if not (0 <= u <= cam.width and 0 <= v <= cam.height):
        raise GeometryError(f"pixel {px} outside {cam.width}x{cam.height} image")
    d_cam = np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
    return Ray(pose.translation, pose.rotation @ d_cam)


def pixel_grid(cam: CameraIntrinsics) -> np.ndarray:
    """(H, W, 2) continuous coordinates of pixel centres."""
    u = np.arange(cam.width) + 0.5
    v = np.arange(cam.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def camera_rays(cam: CameraIntrinsics, pose: RigidPose, pixels=None):
    """Origins, unit directions and the cosine to the optical axis.

    ``pixels`` defaults to every pixel centre; the returned arrays then have
    shape (H, W, 3), (H, W, 3) and (H, W).
    """
    if pixels is None:
        pixels = pixel_grid(cam)
    pixels = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack(
        [(pixels[..., 0] - cam.cx) / cam.fx, (pixels[..., 1] - cam.cy) / cam.fy, np.ones(pixels.shape[:-1])],
        axis=-1,
    )
    norm = np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_cam = d_cam / norm
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs, d_cam[..., 2]


def project(cam: CameraIntrinsics, pose: RigidPose, points):
    """World points -> (pixels (..., 2), camera-frame depth (...))."""
    pc = (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.rotation
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[..., 0] / z + cam.cx
        v = cam.fy * pc[..., 1] / z + cam.cy
    return np.stack([u, v], axis=-1), z


# --------------------------------------------------------------------------
# ray / box
# --------------------------------------------------------------------------


def slab_intersect(origins, dirs, box_min=-1.0, box_max=1.0):
    """Vectorised slab test against an axis-aligned box.

    Returns ``(t_near, t_far, hit)``; ``t_near`` is clamped to ``>= 0``.
    Zero direction components are treated as parallel slabs.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    lo = np.broadcast_to(np.asarray(box_min, dtype=np.float64), (3,))
    hi = np.broadcast_to(np.asarray(box_max, dtype=np.float64), (3,))
    parallel = d == 0
    safe = np.where(parallel, 1.0, d)
    t0 = (lo - o) / safe
    t1 = (hi - o) / safe
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_near = np.maximum(tmin.max(axis=-1), 0.0)
    t_far = tmax.min(axis=-1)
    hit = t_far > t_near
    return t_near, t_far, hit


def to_box_frame(origins, dirs, box_pose: RigidPose | None = None, scale=None):
    """Express rays in the local frame of a posed, scaled box.

    The ray parameter is preserved: ``local(o + t d) = o' + t d'``.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    if box_pose is not None:
        o = (o - box_pose.translation) @ box_pose.rotation
        d = d @ box_pose.rotation
    if scale is not None:
        s = np.asarray(scale, dtype=np.float64)
        o = o / s
        d = d / s
    return o, d


def ray_aabb(ray: Ray, box_min=-1.0, box_max=1.0, box_pose: RigidPose | None = None, scale=None):
    """Entry/exit distances of ``ray`` through a posed box, or ``None`` on a miss."""
    lo = np.broadcast_to(np.asarray(box_min, dtype=np.float64), (3,))
    hi = np.broadcast_to(np.asarray(box_max, dtype=np.float64), (3,))
    if np.any(hi <= lo):
        raise GeometryError("box must have positive extents")
    o, d = to_box_frame(ray.origin, ray.direction, box_pose, scale)
    tn, tf, hit = slab_intersect(o, d, lo, hi)
    if not hit:
        return None
    return float(tn), float(tf)


def box_ray_bounds(origins, dirs, box: BoxPose):
    """Vectorised :func:`ray_aabb` for a :class:`BoxPose`."""
    o, d = to_box_frame(origins, dirs, box.pose(), box.half_extents)
    return slab_intersect(o, d)


def normalize_to_box(point, box: BoxPose, check: bool = True) -> np.ndarray:
    """Camera-frame point -> box coordinates in [-1, 1]^3 (corners to +-1)."""
    p = np.asarray(point, dtype=np.float64)
    local = ((p - box.center) @ box.rotation) / box.half_extents
    if check and np.any(np.abs(local) > 1 + 1e-12):
        raise GeometryError(f"point {p} lies outside the box")
    return local


def denormalize_from_box(local, box: BoxPose) -> np.ndarray:
    return (np.asarray(local, dtype=np.float64) * box.half_extents) @ box.rotation.T + box.center


# --------------------------------------------------------------------------
# ground plane
# --------------------------------------------------------------------------


def ipm_ground_batch(cam: CameraIntrinsics, pose: RigidPose, ground_height: float, pixels):
    """Intersect pixel rays with the plane ``y = ground_height``.

    Returns ``(points (..., 3), valid (...))``; rays parallel to the plane or
    pointing away from it are invalid.
    """
    origins, dirs, _ = camera_rays(cam, pose, pixels)
    dy = dirs[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ground_height - origins[..., 1]) / dy
    valid = (np.abs(dy) > 1e-12) & (t > 0) & np.isfinite(t)
    t = np.where(valid, t, 0.0)
    pts = origins + t[..., None] * dirs
    pts[..., 1] = np.where(valid, ground_height, pts[..., 1])
    return pts, valid


def ipm_ground(cam: CameraIntrinsics, pose: RigidPose, ground_height: float, px):
    """BEV point ``(x, z)`` where the pixel ray meets the ground, or ``None``."""
    if abs(pose.translation[1] - ground_height) < 1e-12:
        raise GeometryError("camera lies on the ground plane")
    pts, valid = ipm_ground_batch(cam, pose, ground_height, np.asarray(px, dtype=np.float64)[None])
    if not valid[0]:
        return None
    return np.array([pts[0, 0], pts[0, 2]])


# --------------------------------------------------------------------------
# view schedules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewSchedule:
    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (0.0, 20.0)
    radius: float = 4.0
    count: int = 20

    def __post_init__(self):
        if self.count < 1:
            raise GeometryError("view count must be >= 1")
        lo, hi = self.elevation_range
        if not (0 <= lo <= hi < 90):
            raise GeometryError("elevation range must lie in [0, 90)")


def orbit_pose(azimuth_deg: float, elevation_deg: float, radius: float) -> RigidPose:
    """Camera on a sphere looking at the origin; azimuth 0, elevation 0 sits on -z."""
    if radius <= 0:
        raise GeometryError("radius must be positive")
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    eye = radius * np.array([math.cos(el) * math.sin(az), math.sin(el), -math.cos(el) * math.cos(az)])
    return RigidPose.look_at(eye)


def schedule_angles(schedule: ViewSchedule, rng_seed: int):
    if schedule.radius <= 0:
        raise GeometryError("radius must be positive")
    rng = np.random.default_rng(rng_seed)
    a0, a1 = schedule.azimuth_range
    e0, e1 = schedule.elevation_range
    az = a0 + (a1 - a0) * rng.random(schedule.count)
    el = e0 + (e1 - e0) * rng.random(schedule.count)
    return az, el


def sample_view_schedule(schedule: ViewSchedule, rng_seed: int = 0) -> list[RigidPose]:
    az, el = schedule_angles(schedule, rng_seed)
    return [orbit_pose(a, e, schedule.radius) for a, e in zip(az, el)]


# --------------------------------------------------------------------------
# calibration files
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Calibration:
    cam: CameraIntrinsics
    pose: RigidPose
    cam_height_m: float = 1.65


def format_calibration(calib: Calibration) -> str:
    c = calib.cam
    lines = [
        f"fx={c.fx!r}",
        f"fy={c.fy!r}",
        f"cx={c.cx!r}",
        f"cy={c.cy!r}",
        f"width={c.width}",
        f"height={c.height}",
        f"cam_height_m={calib.cam_height_m!r}",
        "extrinsic=" + " ".join(repr(float(v)) for v in calib.pose.matrix().ravel()),
    ]
    return "\n".join(lines) + "\n"


def parse_calibration(text: str) -> Calibration:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise GeometryError(f"calibration line {lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    try:
        cam = CameraIntrinsics(
            float(values["fx"]), float(values["fy"]), float(values["cx"]), float(values["cy"]),
            int(values["width"]), int(values["height"]),
        )
    except KeyError as e:
        raise GeometryError(f"calibration missing key {e}") from None
    if "extrinsic" in values:
        m = np.array([float(v) for v in values["extrinsic"].split()])
        if m.size != 12:
            raise GeometryError("extrinsic must have 12 entries (3x4 row-major)")
        pose = RigidPose.from_matrix(m.reshape(3, 4))
    else:
        pose = RigidPose.identity()
    return Calibration(cam, pose, float(values.get("cam_height_m", 1.65)))


def read_calibration(path) -> Calibration:
    return parse_calibration(Path(path).read_text())


def write_calibration(path, calib: Calibration) -> None:
    Path(path).write_text(format_calibration(calib))
