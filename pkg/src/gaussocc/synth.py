"""Deterministic synthetic scenes: analytic primitives with per-frame motion,
an ego trajectory, ground-truth voxelization by center containment, camera
rigs, and procedural multi-scale feature planes.

Everything derives from a single seed through spawned child streams, so a
scene directory regenerates byte-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    EMPTY_LABEL,
    Camera,
    CameraRig,
    FeaturePlane,
    GaussianPrimitive,
    GridSpec,
    Quaternion,
    RigidTransform,
    Rng,
    SceneConfig,
    VoxelGrid,
)
from . import formats
from .temporal import Frame, FrameSequence

RECIPES = ("ground", "boxes", "mixed")

EGO_SPEED = 1.0  # m per frame
EGO_YAW_RATE = 0.02  # rad per frame


@dataclass(frozen=True)
class ScenePrimitive:
    """Analytic world-frame shape with a class id and constant velocity.

    kind 'slab' occupies a z band (unbounded in x, y), 'box' an axis-aligned
    box of given half extents, 'ellipsoid' an axis-aligned ellipsoid of given
    radii.
    """

    kind: str
    label: int
    center: np.ndarray
    size: np.ndarray
    velocity: np.ndarray

    def contains(self, points: np.ndarray, t: float) -> np.ndarray:
        c = np.asarray(self.center) + t * np.asarray(self.velocity)
        d = points - c
        if self.kind == "slab":
            return np.abs(d[..., 2]) <= self.size[2]
        if self.kind == "box":
            return np.all(np.abs(d) <= self.size, axis=-1)
        if self.kind == "ellipsoid":
            return np.sum((d / self.size) ** 2, axis=-1) <= 1.0
        raise ValueError(f"unknown primitive kind {self.kind!r}")


def ego_pose(t: float, speed: float = EGO_SPEED, yaw_rate: float = EGO_YAW_RATE) -> RigidTransform:
    """Perception-to-world pose of the ego at frame t: forward motion along x
    with a slow yaw."""
    yaw = yaw_rate * t
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform(rot, np.array([speed * t, 0.0, 0.0]))


def build_recipe(name: str, seed: int, cfg: SceneConfig) -> list[ScenePrimitive]:
    """Primitive list of a named recipe, deterministic in the seed. Later
    primitives override earlier ones where shapes overlap."""
    if name not in RECIPES:
        raise ValueError(f"unknown recipe {name!r}, choose from {RECIPES}")
    lo = np.array(cfg.range_min)
    hi = np.array(cfg.range_max)
    span = hi - lo
    prims: list[ScenePrimitive] = []
    ground_label = 0
    if name in ("ground", "mixed"):
        thickness = max(cfg.voxel_size, 0.25 * span[2])
        prims.append(
            ScenePrimitive("slab", ground_label, np.array([0.0, 0.0, lo[2] + 0.5 * thickness]),
                           np.array([np.inf, np.inf, 0.5 * thickness]), np.zeros(3))
        )
    if name in ("boxes", "mixed"):
        rng = Rng(seed, stream=0)
        n_obj = 6
        for i in range(n_obj):
            center = np.array([
                rng.uniform(lo[0] + 0.15 * span[0], hi[0] - 0.15 * span[0]),
                rng.uniform(lo[1] + 0.15 * span[1], hi[1] - 0.15 * span[1]),
                rng.uniform(lo[2] + 0.35 * span[2], lo[2] + 0.7 * span[2]),
            ])
            size = rng.uniform(0.08, 0.16, 3) * span
            vel = np.append(rng.uniform(-0.3, 0.3, 2), 0.0)
            label = 1 + (i % (cfg.n_classes - 1)) if cfg.n_classes > 1 else 0
            kind = "box" if i % 2 == 0 else "ellipsoid"
            prims.append(ScenePrimitive(kind, label, center, size, vel))
    return prims


def voxelize(prims: list[ScenePrimitive], spec: GridSpec, pose: RigidTransform,
             t: float) -> VoxelGrid:
    """Ground-truth labels by voxel-center containment: each center, carried
    into the world frame, takes the class of the last primitive containing it."""
    centers = spec.center_lattice().reshape(-1, 3)
    world = pose.apply(centers)
    labels = np.full(world.shape[0], EMPTY_LABEL, dtype=np.uint8)
    for prim in prims:
        labels[prim.contains(world, t)] = prim.label
    return VoxelGrid(spec, labels.reshape(spec.dims))


# ---------------------------------------------------------------------------
# cameras and features
# ---------------------------------------------------------------------------


def build_rig(cfg: SceneConfig) -> CameraRig:
    """Cameras spread evenly in azimuth around the ego, optical axes
    horizontal, standard pinhole intrinsics."""
    cams = []
    for i in range(cfg.n_cameras):
        yaw = 2.0 * math.pi * i / cfg.n_cameras
        axis = np.array([math.cos(yaw), math.sin(yaw), 0.0])  # optical z
        down = np.array([0.0, 0.0, -1.0])                     # image y
        right = np.cross(down, axis)                          # image x
        rot = np.stack([right, down, axis])                   # world -> camera rows
        position = 0.5 * axis
        extr = RigidTransform(rot, -rot @ position)
        f = 0.8 * cfg.image_width
        cams.append(
            Camera(f, f, cfg.image_width / 2.0, cfg.image_height / 2.0, extr,
                   cfg.image_width, cfg.image_height)
        )
    return CameraRig(tuple(cams))


def level_ratios(n_levels: int) -> list[int]:
    """Downsample ratios 4x, 8x, 16x, ... per pyramid level."""
    return [4 * 2**l for l in range(n_levels)]


def synth_feature_planes(rng: Rng, cfg: SceneConfig) -> list[FeaturePlane]:
    """Smooth per-camera feature field: a sum of low-frequency sinusoids over
    normalized image coordinates, evaluated at every pyramid resolution so the
    levels view one underlying field. Smoothness keeps bilinear samples and
    their finite differences well behaved."""
    n_waves = 4
    amp = rng.uniform(0.5, 1.5, n_waves)
    freq = rng.integers(1, 4, (n_waves, 2)).astype(np.float64)
    phase = rng.uniform(0.0, 2.0 * math.pi, (n_waves, cfg.embed_dim))
    levels = []
    for ratio in level_ratios(cfg.n_levels):
        h = math.ceil(cfg.image_height / ratio)
        w = math.ceil(cfg.image_width / ratio)
        u = (np.arange(w) + 0.5) / w
        v = (np.arange(h) + 0.5) / h
        data = np.zeros((h, w, cfg.embed_dim))
        for j in range(n_waves):
            grid_phase = 2.0 * math.pi * (freq[j, 0] * u[None, :] + freq[j, 1] * v[:, None])
            data += amp[j] * np.sin(grid_phase[:, :, None] + phase[j][None, None, :])
        levels.append(FeaturePlane(ratio, data))
    return levels


def synth_frame_pyramids(cfg: SceneConfig, frame: int) -> list[list[FeaturePlane]]:
    """Per-camera pyramids of one frame, seeded by (scene seed, frame, camera)."""
    frame_rng = Rng(cfg.seed, stream=1).split(cfg.n_frames)[frame]
    cam_rngs = frame_rng.split(cfg.n_cameras)
    return [synth_feature_planes(cam_rngs[c], cfg) for c in range(cfg.n_cameras)]


# ---------------------------------------------------------------------------
# initial pipeline state
# ---------------------------------------------------------------------------


def initial_gaussians(cfg: SceneConfig, rng: Rng) -> tuple[GaussianPrimitive, ...]:
    """Seeded starting primitives: in-range means, modest scales, random
    orientations, mid opacities, standard-normal logits."""
    lo = np.array(cfg.range_min)
    hi = np.array(cfg.range_max)
    out = []
    for _ in range(cfg.n_gaussians):
        mean = rng.uniform(0.0, 1.0, 3) * (hi - lo) + lo
        scale = rng.uniform(0.2, 0.6, 3)
        q = Quaternion(*rng.normal(0.0, 1.0, 4))
        opacity = float(rng.uniform(0.3, 0.9))
        logits = rng.normal(0.0, 1.0, cfg.n_classes)
        out.append(GaussianPrimitive(mean, scale, q, opacity, logits))
    return tuple(out)


def initial_embeddings(cfg: SceneConfig, rng: Rng) -> np.ndarray:
    return rng.normal(0.0, 1.0, (cfg.n_gaussians, cfg.embed_dim))


# ---------------------------------------------------------------------------
# scene directories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneData:
    """A scene directory in memory: configuration, per-frame poses, rig
    geometry, ground-truth grids, and per-frame feature pyramids."""

    cfg: SceneConfig
    poses: tuple[RigidTransform, ...]
    rig: CameraRig
    gt: tuple[VoxelGrid, ...]
    pyramids: tuple[tuple[tuple[FeaturePlane, ...], ...], ...]


def write_scene(out_dir, cfg: SceneConfig, recipe: str) -> None:
    """Generate and write a complete scene directory, deterministic per seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prims = build_recipe(recipe, cfg.seed, cfg)
    spec = cfg.grid_spec()
    formats.write_config(out / "config.txt", cfg)
    (out / "recipe.txt").write_text(f"{recipe} {cfg.seed}\n")
    pose_entries = []
    for t in range(cfg.n_frames):
        pose = ego_pose(t)
        pose_entries.append((float(t), formats._rotation_to_quat(pose.rotation), pose.translation))
        formats.write_voxel_grid(out / f"gt_{t:03d}.occv", voxelize(prims, spec, pose, float(t)))
        formats.write_feature_pyramids(out / f"features_{t:03d}.fpyr",
                                       synth_frame_pyramids(cfg, t))
    formats.write_pose_log(out / "poses.txt", pose_entries)
    formats.write_rig(out / "rig.txt", build_rig(cfg))


def load_scene(scene_dir) -> SceneData:
    d = Path(scene_dir)
    cfg = formats.read_config(d / "config.txt")
    poses = tuple(formats.poses_as_transforms(formats.read_pose_log(d / "poses.txt")))
    rig, _ = formats.read_rig(d / "rig.txt")
    gt = tuple(formats.read_voxel_grid(d / f"gt_{t:03d}.occv") for t in range(cfg.n_frames))
    pyramids = tuple(
        tuple(tuple(levels) for levels in formats.read_feature_pyramids(d / f"features_{t:03d}.fpyr"))
        for t in range(cfg.n_frames)
    )
    return SceneData(cfg, poses, rig, gt, pyramids)


def frame_window(scene: SceneData, cfg: SceneConfig, keyframe: int) -> FrameSequence:
    """History window ending at the keyframe, padded by repeating the first
    frame when not enough history exists yet."""
    gaussians = initial_gaussians(cfg, Rng(cfg.seed, stream=2))
    frame_rngs = Rng(cfg.seed, stream=3).split(scene.cfg.n_frames)
    indices = [max(0, keyframe - (cfg.n_frames - 1) + i) for i in range(cfg.n_frames)]
    embeddings = {t: initial_embeddings(cfg, frame_rngs[t]) for t in sorted(set(indices))}
    frames = []
    for t in indices:
        rig = CameraRig(tuple(
            cam.with_pyramid(scene.pyramids[t][ci]) for ci, cam in enumerate(scene.rig)
        ))
        frames.append(
            Frame(
                pose=scene.poses[t],
                rig=rig,
                gaussians=gaussians,
                embeddings=embeddings[t],
            )
        )
    return FrameSequence(tuple(frames))
