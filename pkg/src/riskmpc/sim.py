"""Deterministic planar world: dynamics, collision checks, raycast camera.

The environment is an immutable set of circular obstacles, wall segments,
and optional rectangular arena bounds.  The camera casts one ray per image
column across the field of view and shades each column by inverse depth
measured along the facing axis (pinhole z-depth), so a flat wall facing the
vehicle renders at uniform intensity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import yaml

ENV_FORMAT_VERSION = 1


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = (a + math.pi) % (2.0 * math.pi) - math.pi
    if a == -math.pi:
        a = math.pi
    return a


@dataclass
class VehicleState:
    position: np.ndarray
    velocity: np.ndarray
    heading: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.velocity = np.asarray(self.velocity, dtype=float)
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.velocity))
                and math.isfinite(self.heading)):
            raise ValueError("state components must be finite")
        self.heading = wrap_angle(float(self.heading))

    def as_vector(self) -> np.ndarray:
        return np.array([*self.position, *self.velocity, self.heading])

    @property
    def speed(self) -> float:
        return float(np.hypot(self.velocity[0], self.velocity[1]))


@dataclass(frozen=True)
class Environment:
    """Obstacle map: circles [(center, radius)], wall segments [(a, b)],
    and optional axis-aligned bounds (xmin, ymin, xmax, ymax)."""

    circles: tuple = ()
    segments: tuple = ()
    bounds: tuple | None = None

    def __post_init__(self):
        circles = tuple((np.asarray(c, dtype=float), float(r))
                        for c, r in self.circles)
        segments = tuple((np.asarray(a, dtype=float), np.asarray(b, dtype=float))
                         for a, b in self.segments)
        object.__setattr__(self, "circles", circles)
        object.__setattr__(self, "segments", segments)
        for _, r in circles:
            if r <= 0:
                raise ValueError("obstacle radii must be positive")
        if self.bounds is not None:
            xmin, ymin, xmax, ymax = self.bounds
            if xmax <= xmin or ymax <= ymin:
                raise ValueError("bounds rectangle must be nonempty")
            object.__setattr__(self, "bounds",
                               (float(xmin), float(ymin), float(xmax), float(ymax)))

    def wall_segments(self):
        """Physical wall segments including the bounds rectangle edges."""
        segs = list(self.segments)
        if self.bounds is not None:
            xmin, ymin, xmax, ymax = self.bounds
            corners = [(xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax)]
            for i in range(4):
                a = np.array(corners[i], dtype=float)
                b = np.array(corners[(i + 1) % 4], dtype=float)
                segs.append((a, b))
        return segs


@dataclass
class Observation:
    """Row-major grayscale image, intensities in [0, 1]."""

    pixels: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).ravel()
        if self.pixels.shape[0] != self.width * self.height:
            raise ValueError("pixel count does not match width*height")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel intensities must lie in [0, 1]")

    def as_image(self) -> np.ndarray:
        return self.pixels.reshape(self.height, self.width)


@dataclass(frozen=True)
class SimProfile:
    """Vehicle and sensor constants for one experimental setup."""

    name: str                      # "quadrotor" or "car"
    dynamics: str                  # "velocity" (planar velocity command) or "unicycle"
    delta_t: float
    body_radius: float
    camera_width: int
    camera_height: int
    fov: float
    max_depth: float
    wheelbase: float = 0.25        # unicycle only

    def state_dim(self) -> int:
        return 5 if self.dynamics == "unicycle" else 4


def step(state: VehicleState, control, delta_t: float, profile: SimProfile) -> VehicleState:
    """Advance one Euler step under the profile's dynamics."""
    if delta_t <= 0:
        raise ValueError("delta_t must be positive")
    u = np.asarray(control, dtype=float)
    if profile.dynamics == "velocity":
        # Ideal velocity-command integrator: u is the commanded planar velocity.
        return VehicleState(position=state.position + u * delta_t,
                            velocity=u.copy(),
                            heading=state.heading)
    if profile.dynamics == "unicycle":
        speed, steer = float(u[0]), float(u[1])
        heading = state.heading
        direction = np.array([math.cos(heading), math.sin(heading)])
        new_pos = state.position + speed * delta_t * direction
        new_heading = wrap_angle(
            heading + (speed / profile.wheelbase) * math.tan(steer) * delta_t)
        return VehicleState(position=new_pos,
                            velocity=speed * direction,
                            heading=new_heading)
    raise ValueError(f"unknown dynamics {profile.dynamics!r}")


def _point_segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return float(np.hypot(*(p - a)))
    t = float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    closest = a + t * ab
    return float(np.hypot(*(p - closest)))


def check_collision(state: VehicleState, env: Environment,
                    body_radius: float = 0.05) -> bool:
    """True iff the vehicle disc touches an obstacle, wall, or leaves bounds.

    All boundary conditions are closed: exact tangency counts as collision.
    """
    p = state.position
    if env.bounds is not None:
        xmin, ymin, xmax, ymax = env.bounds
        if (p[0] - body_radius <= xmin or p[0] + body_radius >= xmax
                or p[1] - body_radius <= ymin or p[1] + body_radius >= ymax):
            return True
    for center, radius in env.circles:
        if np.hypot(*(p - center)) <= radius + body_radius:
            return True
    for a, b in env.segments:
        if _point_segment_distance(p, a, b) <= body_radius:
            return True
    return False


def _ray_circle_hits(origin, dirs, center, radius):
    """Smallest positive ray parameter per direction, inf when missed."""
    oc = origin - center
    b = 2.0 * (dirs @ oc)
    c = float(oc @ oc) - radius * radius
    disc = b * b - 4.0 * c
    t = np.full(dirs.shape[0], np.inf)
    hit = disc >= 0.0
    if np.any(hit):
        sq = np.sqrt(disc[hit])
        t0 = (-b[hit] - sq) / 2.0
        t1 = (-b[hit] + sq) / 2.0
        tt = np.where(t0 > 1e-12, t0, np.where(t1 > 1e-12, t1, np.inf))
        t[hit] = tt
    return t


def _ray_segment_hits(origin, dirs, a, b):
    """Ray parameter per direction for one segment, inf when missed."""
    ab = b - a
    ao = origin - a
    denom = dirs[:, 0] * ab[1] - dirs[:, 1] * ab[0]
    t = np.full(dirs.shape[0], np.inf)
    ok = np.abs(denom) > 1e-15
    if np.any(ok):
        # origin + t*dir = a + s*ab
        t_hit = (ab[0] * ao[1] - ab[1] * ao[0]) / denom[ok]
        s_hit = (dirs[ok, 0] * ao[1] - dirs[ok, 1] * ao[0]) / denom[ok]
        good = (t_hit > 1e-12) & (s_hit >= 0.0) & (s_hit <= 1.0)
        vals = np.where(good, t_hit, np.inf)
        t[ok] = vals
    return t


def render_camera(state: VehicleState, env: Environment, width: int, height: int,
                  fov: float, max_depth: float) -> Observation:
    """Raycast depth image from the vehicle pose.

    One ray per column at the pixel-center angle offset
        fov/2 - fov*(j + 0.5)/width
    from the heading (leftmost column first).  Column intensity is
    1 - min(d, max_depth)/max_depth with d the hit distance projected onto
    the facing axis; the value is replicated down all rows.
    """
    if width < 1 or height < 1:
        raise ValueError("image dimensions must be >= 1")
    if not 0.0 < fov < math.pi:
        raise ValueError("fov must lie in (0, pi)")
    offsets = fov / 2.0 - fov * (np.arange(width) + 0.5) / width
    angles = state.heading + offsets
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    t = np.full(width, np.inf)
    for center, radius in env.circles:
        t = np.minimum(t, _ray_circle_hits(state.position, dirs, center, radius))
    for a, b in env.wall_segments():
        t = np.minimum(t, _ray_segment_hits(state.position, dirs, a, b))
    depth = t * np.cos(offsets)
    column = 1.0 - np.minimum(depth, max_depth) / max_depth
    pixels = np.tile(column, (height, 1)).ravel()
    return Observation(pixels=pixels, width=width, height=height)


def save_environment(path, env: Environment):
    """YAML environment description; see README for the schema."""
    with open(path, "w") as fh:
        fh.write(environment_to_yaml(env))


def environment_to_yaml(env: Environment) -> str:
    doc = {
        "format_version": ENV_FORMAT_VERSION,
        "circles": [[float(c[0]), float(c[1]), float(r)] for c, r in env.circles],
        "segments": [[[float(a[0]), float(a[1])], [float(b[0]), float(b[1])]]
                     for a, b in env.segments],
        "bounds": list(env.bounds) if env.bounds is not None else None,
    }
    return yaml.safe_dump(doc, sort_keys=True)


def environment_from_yaml(text: str) -> Environment:
    doc = yaml.safe_load(text)
    version = int(doc.get("format_version", -1))
    if version != ENV_FORMAT_VERSION:
        raise ValueError(f"unsupported environment format version {version}")
    circles = tuple((np.array([c[0], c[1]]), c[2]) for c in doc.get("circles", []))
    segments = tuple((np.array(s[0], dtype=float), np.array(s[1], dtype=float))
                     for s in doc.get("segments", []))
    bounds = doc.get("bounds")
    return Environment(circles=circles, segments=segments,
                       bounds=tuple(bounds) if bounds is not None else None)


def load_environment(path) -> Environment:
    with open(path) as fh:
        return environment_from_yaml(fh.read())
