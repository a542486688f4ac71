"""Ready-made synthetic scenes used by the tests, scripts and CLI."""
from __future__ import annotations

import math

from .geometry import Pose, StereoCamera
from .sim import ObjectSpec, SceneSpec


def default_camera(scale: float = 1.0) -> StereoCamera:
    cam = StereoCamera(fx=500.0, fy=500.0, cx=319.5, cy=239.5, baseline=0.3,
                       image_width=640, image_height=480)
    return cam.scaled(scale) if scale != 1.0 else cam


def corridor_camera() -> StereoCamera:
    """Wide-angle, long-baseline rig: keeps 3D noise small inside the tracking range."""
    return StereoCamera(fx=450.0, fy=450.0, cx=319.5, cy=239.5, baseline=0.6,
                        image_width=640, image_height=480)


def corridor_scene(frame_count: int = 201, pixel_noise_sigma: float = 0.0, rng_seed: int = 0,
                   speed: float = 0.13, static_point_count: int = 17500, object_points: int = 450,
                   orbit_radius: float = 0.5, orbit_period: float = 15.0, spin: float = 0.03,
                   max_depth: float = 3.5, grid_scale: float = 0.5) -> SceneSpec:
    """Camera walking down a corridor; a box loops in a vertical circle ahead of it, keeping pace."""
    length = speed * (frame_count - 1)
    cam_traj = [
        Pose.from_axis_angle([0, 1, 0], 0.08 * math.sin(2 * math.pi * k / 100),
                             [0.2 * math.sin(2 * math.pi * k / 70), 0.0, speed * k])
        for k in range(frame_count)
    ]
    box_traj = []
    for k in range(frame_count):
        phase = 2 * math.pi * k / orbit_period
        box_traj.append(Pose.from_axis_angle(
            [0, 1, 0], spin * k,
            [orbit_radius * math.sin(phase), orbit_radius * math.cos(phase), 2.6 + speed * k]))
    box = ObjectSpec(label=1, point_count=object_points, extent=(0.6, 0.6, 0.6),
                     trajectory=box_traj, shape="box", color=(0.2, 0.3, 0.9))
    return SceneSpec(
        camera=corridor_camera(), camera_trajectory=cam_traj, objects=[box],
        static_point_count=static_point_count,
        static_bounds=((-1.2, -1.2, -2.0), (1.2, 0.9, length + 6.0)),
        pixel_noise_sigma=pixel_noise_sigma, rng_seed=rng_seed, max_depth=max_depth,
        grid_scale=grid_scale,
    )


def _rect_path(k: int, period: int, w: float, d: float):
    """Point on a w x d rectangle, traversed once every ``period`` frames."""
    perim = 2 * (w + d)
    s = (k % period) / period * perim
    if s < w:
        return s - w / 2, -d / 2
    s -= w
    if s < d:
        return w / 2, s - d / 2
    s -= d
    if s < w:
        return w / 2 - s, d / 2
    s -= w
    return -w / 2, d / 2 - s


def multi_object_scene(frame_count: int = 120, pixel_noise_sigma: float = 0.0, rng_seed: int = 0,
                       static_point_count: int = 5000, object_points: int = 500,
                       spin_rate: float = 0.5, loop_period: int = 11,
                       grid_scale: float = 0.5) -> SceneSpec:
    """Small room: a cylinder spins in place, a box drives a rectangular loop."""
    cam_traj = [
        Pose.from_axis_angle([0, 1, 0], 0.04 * math.sin(2 * math.pi * k / 80),
                             [0.15 * math.sin(2 * math.pi * k / 90), 0.05 * math.sin(2 * math.pi * k / 45),
                              0.1 * math.sin(2 * math.pi * k / 120)])
        for k in range(frame_count)
    ]
    spinner = ObjectSpec(
        label=1, point_count=object_points, extent=(0.8, 0.9, 0.8),
        trajectory=[Pose.from_axis_angle([0, 1, 0], spin_rate * k, [-0.75, 0.2, 2.4])
                    for k in range(frame_count)],
        shape="cylinder", color=(0.95, 0.95, 0.95),
    )
    rover = []
    for k in range(frame_count):
        x, z = _rect_path(k, loop_period, 1.2, 0.8)
        rover.append(Pose.from_axis_angle([0, 1, 0], 0.0, [0.75 + x, 0.35, 2.4 + z]))
    mover = ObjectSpec(label=2, point_count=object_points, extent=(0.5, 0.5, 0.5),
                       trajectory=rover, shape="box", color=(0.2, 0.35, 0.95))
    return SceneSpec(
        camera=corridor_camera(), camera_trajectory=cam_traj, objects=[spinner, mover],
        static_point_count=static_point_count,
        static_bounds=((-2.0, -1.3, -1.0), (2.0, 0.8, 3.6)),
        pixel_noise_sigma=pixel_noise_sigma, rng_seed=rng_seed, max_depth=4.0,
        grid_scale=grid_scale,
    )


PRESETS = {"corridor": corridor_scene, "multi_object": multi_object_scene}
