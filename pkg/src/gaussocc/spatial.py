"""Guidance-informed spatial aggregation.

Per aggregation block, each Gaussian derives two families of 3D sampling
offsets from fixed proposal lattices plus a learned, embedding-conditioned
offset: one family stretched and rotated into the Gaussian's own ellipsoid
frame, one laid on a vertical plane rotated to the Gaussian's azimuth. A
sigmoid gate blends the two families per sample point; the blended offsets
are added to the Gaussian centers to form reference points, projected into
every camera, and consumed by a single-head deformable cross-attention that
updates the Gaussian embeddings from the multi-scale feature planes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    AttnParams,
    BlockParams,
    Camera,
    CameraRig,
    GateParams,
    GaussianPrimitive,
    quat_to_rotation,
)
from .nnprims import LinearLayer, linear_forward, sigmoid, softmax

Z_NEAR = 0.1  # meters; guards the perspective divide


@dataclass(frozen=True)
class ProjectedPoints:
    """Per-camera projection of reference points: pixel coordinates (K, M, 2)
    and a visibility mask (K, M). Masked points contribute nothing downstream."""

    pixels: np.ndarray
    visible: np.ndarray


def ellipsoid_proposal_grid(n_samples: int) -> np.ndarray:
    """Unit proposal lattice in the local Gaussian frame: the corners of
    [-0.5, 0.5]^3 in row-major order, cycled if more samples are requested."""
    corners = np.array(
        [[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)]
    )
    reps = -(-n_samples // 8)
    return np.tile(corners, (reps, 1))[:n_samples]


def view_proposal_grid(n_samples: int) -> np.ndarray:
    """Unit-spaced proposal grid on the local y-z plane (x components zero),
    centered, row-major, truncated to n_samples."""
    side = int(np.ceil(np.sqrt(n_samples)))
    vals = np.arange(side, dtype=np.float64) - (side - 1) / 2.0
    pts = np.array([[0.0, y, z] for z in vals for y in vals])
    return pts[:n_samples]


def context_offsets(embeddings: np.ndarray, predictor: LinearLayer, n_samples: int) -> np.ndarray:
    """Learned per-point offsets: a linear map D -> M*3 reshaped to (K, M, 3)."""
    q = np.asarray(embeddings, dtype=np.float64)
    out = linear_forward(q, predictor)
    return out.reshape(q.shape[0], n_samples, 3)


def _stack_rotations_scales(gaussians: Sequence[GaussianPrimitive]):
    rot = np.stack([quat_to_rotation(g.rotation) for g in gaussians])
    scale = np.stack([g.scale for g in gaussians])
    means = np.stack([g.mean for g in gaussians])
    return means, scale, rot


def ellipsoid_offsets(gaussians: Sequence[GaussianPrimitive], embeddings: np.ndarray,
                      block: BlockParams) -> np.ndarray:
    """Offsets aligned with each Gaussian's ellipsoid: the scaled proposal
    lattice plus learned offsets, mapped through R diag(s)."""
    n_samples = block.offset_predictor.n_out // 3
    local = block.scale_ell * ellipsoid_proposal_grid(n_samples)
    local = local[None, :, :] + context_offsets(embeddings, block.offset_predictor, n_samples)
    _, scale, rot = _stack_rotations_scales(gaussians)
    # (R S) applied per gaussian: world = local @ (R S)^T
    rs = rot * scale[:, None, :]
    return np.einsum("kij,kmj->kmi", rs, local)


def azimuth_rotation(means: np.ndarray) -> np.ndarray:
    """Rotation about z by the azimuth theta = atan2(y, x) of each center:

        [[cos, -sin, 0], [sin, cos, 0], [0, 0, 1]]

    The degenerate center x = y = 0 uses theta = 0.
    """
    m = np.asarray(means, dtype=np.float64)
    single = m.ndim == 1
    m = np.atleast_2d(m)
    theta = np.arctan2(m[:, 1], m[:, 0])
    theta[(m[:, 0] == 0.0) & (m[:, 1] == 0.0)] = 0.0
    c, s = np.cos(theta), np.sin(theta)
    out = np.zeros(m.shape[:1] + (3, 3))
    out[:, 0, 0] = c
    out[:, 0, 1] = -s
    out[:, 1, 0] = s
    out[:, 1, 1] = c
    out[:, 2, 2] = 1.0
    return out[0] if single else out


def view_offsets(gaussians: Sequence[GaussianPrimitive], embeddings: np.ndarray,
                 block: BlockParams) -> np.ndarray:
    """Offsets on the azimuth-rotated vertical plane of each Gaussian center:
    the scaled planar proposal grid plus learned offsets, rotated by the
    azimuth matrix."""
    n_samples = block.offset_predictor.n_out // 3
    local = block.scale_view * view_proposal_grid(n_samples)
    local = local[None, :, :] + context_offsets(embeddings, block.offset_predictor, n_samples)
    means, _, _ = _stack_rotations_scales(gaussians)
    rv = azimuth_rotation(means)
    return np.einsum("kij,kmj->kmi", rv, local)


def offset_gate(d_ell: np.ndarray, d_view: np.ndarray, d_ctx: np.ndarray,
                gate: GateParams) -> np.ndarray:
    """Blend gate in (0, 1) per (gaussian, sample point): each offset family is
    projected to a latent vector, the latents are concatenated along the
    feature axis and mapped to one logit, then squashed by a sigmoid."""
    f = np.concatenate(
        [
            linear_forward(d_ell, gate.proj_ell),
            linear_forward(d_view, gate.proj_view),
            linear_forward(d_ctx, gate.proj_ctx),
        ],
        axis=-1,
    )
    return sigmoid(linear_forward(f, gate.gate_out)[..., 0])


def fuse_offsets(d_ell: np.ndarray, d_view: np.ndarray, d_ctx: np.ndarray,
                 gate: GateParams) -> np.ndarray:
    """Gated blend lam * d_ell + (1 - lam) * d_view, the gate broadcast over
    the three coordinates."""
    lam = offset_gate(d_ell, d_view, d_ctx, gate)[..., None]
    return lam * d_ell + (1.0 - lam) * d_view


def reference_points(means: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Sampling locations: center plus offset, the center broadcast over M."""
    return np.asarray(means, dtype=np.float64)[:, None, :] + offsets


def project_to_camera(points: np.ndarray, cam: Camera) -> ProjectedPoints:
    """Pinhole projection of (K, M, 3) perception-frame points.

    pixel = (fx x / z + cx, fy y / z + cy) in camera coordinates; a point is
    visible when z > Z_NEAR and the pixel lies inside [0, W) x [0, H).
    """
    p = cam.extrinsics.apply(points)
    z = p[..., 2]
    safe_z = np.where(z > Z_NEAR, z, 1.0)
    u = cam.fx * p[..., 0] / safe_z + cam.cx
    v = cam.fy * p[..., 1] / safe_z + cam.cy
    visible = (z > Z_NEAR) & (u >= 0.0) & (u < cam.width) & (v >= 0.0) & (v < cam.height)
    return ProjectedPoints(pixels=np.stack([u, v], axis=-1), visible=visible)


def bilinear_sample(plane: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a (H, W, D) plane at pixel coordinates
    (..., 2), zero-padded outside; exact plane values at integer coordinates."""
    plane = np.asarray(plane, dtype=np.float64)
    uv = np.asarray(uv, dtype=np.float64)
    h, w = plane.shape[:2]
    u, v = uv[..., 0], uv[..., 1]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    fx, fy = u - x0, v - y0
    out = np.zeros(uv.shape[:-1] + (plane.shape[2],))
    for dx, dy, wgt in (
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xs, ys = x0 + dx, y0 + dy
        inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        vals = plane[np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1)]
        out += np.where(inside[..., None], wgt[..., None] * vals, 0.0)
    return out


def deformable_attention(embeddings: np.ndarray, rig: CameraRig,
                         projected: Sequence[ProjectedPoints],
                         attn: AttnParams) -> np.ndarray:
    """Single-head deformable cross-attention over (camera, level, point) slots.

    Weight logits come from a linear map of each query; invisible slots are
    masked out before a joint softmax, so the attended feature is a convex
    combination of the bilinear samples. The output projection of the
    attended feature is added back onto the query. A query whose every slot
    is masked passes through unchanged.
    """
    q = np.asarray(embeddings, dtype=np.float64)
    k, d = q.shape
    n_cams = len(rig)
    n_levels = rig.n_levels
    m = projected[0].pixels.shape[1]
    logits = linear_forward(q, attn.weights).reshape(k, n_cams, n_levels, m)
    feats = np.zeros((k, n_cams, n_levels, m, d))
    mask = np.zeros((k, n_cams, n_levels, m), dtype=bool)
    for ci, cam in enumerate(rig):
        proj = projected[ci]
        for li, level in enumerate(cam.pyramid):
            uv = proj.pixels / level.ratio
            feats[:, ci, li] = bilinear_sample(level.data, uv)
            mask[:, ci, li] = proj.visible
    flat_logits = logits.reshape(k, -1)
    flat_mask = mask.reshape(k, -1)
    flat_feats = feats.reshape(k, -1, d)
    masked = np.where(flat_mask, flat_logits, -np.inf)
    any_visible = flat_mask.any(axis=1)
    weights = np.zeros_like(flat_logits)
    if np.any(any_visible):
        weights[any_visible] = softmax(masked[any_visible], axis=-1)
    weights = np.where(flat_mask, weights, 0.0)
    attended = np.einsum("ks,ksd->kd", weights, flat_feats)
    out = q + linear_forward(attended, attn.out_proj)
    return np.where(any_visible[:, None], out, q)


def spatial_block(embeddings: np.ndarray, gaussians: Sequence[GaussianPrimitive],
                  rig: CameraRig, block: BlockParams):
    """One full aggregation step: offsets, gate, reference points, projection,
    attention. Returns the updated embeddings and the fused reference points
    (the latter feed the temporal alignment)."""
    n_samples = block.offset_predictor.n_out // 3
    d_ctx = context_offsets(embeddings, block.offset_predictor, n_samples)
    d_ell = ellipsoid_offsets(gaussians, embeddings, block)
    d_view = view_offsets(gaussians, embeddings, block)
    fused = fuse_offsets(d_ell, d_view, d_ctx, block.gate)
    means = np.stack([g.mean for g in gaussians])
    points = reference_points(means, fused)
    projected = [project_to_camera(points, cam) for cam in rig]
    updated = deformable_attention(embeddings, rig, projected, block.attn)
    return updated, points
