"""Pinhole camera helpers.

Conventions: intrinsics are a 3x3 matrix in pixel units with +x right and
+y down; extrinsics are camera-to-world 4x4 transforms; camera space looks
down +z. Rays go through pixel centers, i.e. pixel (row, col) maps to image
plane coordinates (col + 0.5, row + 0.5).
"""

from __future__ import annotations

import numpy as np


class CameraError(Exception):
    pass


def intrinsics_from_fov(fov_x_deg: float, width: int, height: int) -> np.ndarray:
    fx = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_x_deg))
    k = np.array(
        [
            [fx, 0.0, width / 2.0],
            [0.0, fx, height / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    return k


def validate_camera(k: np.ndarray, cam_to_world: np.ndarray) -> None:
    if k.shape != (3, 3) or abs(np.linalg.det(k)) < 1e-12:
        raise CameraError("intrinsics must be an invertible 3x3 matrix")
    if cam_to_world.shape != (4, 4):
        raise CameraError("extrinsics must be a 4x4 camera-to-world transform")


def rays_for_pixels(
    k: np.ndarray, cam_to_world: np.ndarray, cols: np.ndarray, rows: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Ray origins and unit directions through the given pixel centers."""
    validate_camera(k, cam_to_world)
    pix = np.stack(
        [np.asarray(cols, dtype=np.float64) + 0.5, np.asarray(rows, dtype=np.float64) + 0.5],
        axis=-1,
    )
    homo = np.concatenate([pix, np.ones((*pix.shape[:-1], 1))], axis=-1)
    d_cam = homo @ np.linalg.inv(k).T
    r = cam_to_world[:3, :3]
    d_world = d_cam @ r.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(cam_to_world[:3, 3], d_world.shape).copy()
    return origins, d_world


def rays_for_image(
    k: np.ndarray, cam_to_world: np.ndarray, width: int, height: int
) -> tuple[np.ndarray, np.ndarray]:
    """All H*W pixel rays in row-major order."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    o, d = rays_for_pixels(k, cam_to_world, cols.ravel(), rows.ravel())
    return o, d


def project_points(
    k: np.ndarray, cam_to_world: np.ndarray, pts: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """World points -> (pixel xy, camera-space depth). No clipping applied."""
    r = cam_to_world[:3, :3]
    t = cam_to_world[:3, 3]
    p_cam = (np.asarray(pts, dtype=np.float64) - t) @ r
    z = p_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = p_cam @ k.T
        xy = proj[..., :2] / proj[..., 2:3]
    return xy, z


def orbit_camera(
    target: np.ndarray,
    radius: float,
    azimuth_deg: float,
    elevation_deg: float,
    up: np.ndarray = np.array([0.0, 1.0, 0.0]),
) -> np.ndarray:
    """Camera on an orbit looking at `target`; azimuth 0 looks down -z axis
    toward the target from +z side, positive elevation raises the camera."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    offset = np.array(
        [np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)]
    )
    eye = np.asarray(target, dtype=np.float64) + radius * offset
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight along up
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)  # +y down in camera space
    m = np.eye(4)
    m[:3, 0] = right
    m[:3, 1] = down
    m[:3, 2] = fwd
    m[:3, 3] = eye
    return m
