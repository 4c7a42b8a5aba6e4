"""On-disk formats: binary voxel grids, text Gaussian sets and pose logs, a
flat key-value config file, and binary feature pyramids.

All writers are deterministic, so write(read(write(x))) is byte-identical.
Grids are binary because they are large; Gaussian sets and poses are text
because they are small and benefit from diffability. Floats in text files are
printed with repr, which round-trips exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import (
    Camera,
    CameraRig,
    FeaturePlane,
    GaussianPrimitive,
    GridSpec,
    Quaternion,
    RigidTransform,
    SceneConfig,
    VoxelGrid,
    quat_to_rotation,
)

OCC_MAGIC = b"OCCV1"
GSET_MAGIC = "GSET1"
POSE_MAGIC = "POSE1"
RIG_MAGIC = "RIG1"
FPYR_MAGIC = b"FPYR1"


class FormatError(ValueError):
    """Raised when a file does not parse; text formats carry line numbers."""


# ---------------------------------------------------------------------------
# voxel grids: magic, u32 dims XYZ, f64 voxel size, 3x f64 origin, u32 class
# count, then X*Y*Z u8 labels row-major with x fastest; 255 = empty
# ---------------------------------------------------------------------------


def write_voxel_grid(path, grid: VoxelGrid) -> None:
    if not grid.is_labels:
        raise ValueError("only label grids are serialized")
    x, y, z = grid.spec.dims
    header = OCC_MAGIC + struct.pack(
        "<IIId3dI", x, y, z, grid.spec.voxel_size, *grid.spec.origin, grid.spec.n_classes
    )
    Path(path).write_bytes(header + grid.payload.ravel(order="F").tobytes())


def read_voxel_grid(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if raw[:5] != OCC_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:5]!r}")
    x, y, z, voxel_size, ox, oy, oz, n_classes = struct.unpack_from("<IIId3dI", raw, 5)
    head = 5 + struct.calcsize("<IIId3dI")
    payload = np.frombuffer(raw, dtype=np.uint8, offset=head)
    if payload.shape[0] != x * y * z:
        raise FormatError(f"{path}: payload holds {payload.shape[0]} voxels, header says {x * y * z}")
    labels = payload.reshape((x, y, z), order="F")
    return VoxelGrid(GridSpec((x, y, z), np.array([ox, oy, oz]), voxel_size, n_classes), labels)


# ---------------------------------------------------------------------------
# gaussian sets: "GSET1 <n_classes>" then one line per primitive holding
# mean(3) scale(3) quat(4) opacity logits(n_classes)
# ---------------------------------------------------------------------------


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def write_gaussian_set(path, gaussians, n_classes: int) -> None:
    lines = [f"{GSET_MAGIC} {n_classes}"]
    for g in gaussians:
        if g.n_classes != n_classes:
            raise ValueError("gaussian class count does not match the header")
        q = g.rotation
        lines.append(_fmt([*g.mean, *g.scale, q.w, q.x, q.y, q.z, g.opacity, *g.logits]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_gaussian_set(path) -> tuple[tuple[GaussianPrimitive, ...], int]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(GSET_MAGIC):
        raise FormatError(f"{path}:1: expected '{GSET_MAGIC} <n_classes>' header")
    try:
        n_classes = int(lines[0].split()[1])
    except (IndexError, ValueError) as e:
        raise FormatError(f"{path}:1: bad header: {e}") from e
    out = []
    want = 11 + n_classes
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != want:
            raise FormatError(f"{path}:{ln}: expected {want} fields, got {len(parts)}")
        try:
            v = [float(p) for p in parts]
            g = GaussianPrimitive(v[0:3], v[3:6], Quaternion(*v[6:10]), v[10], v[11:])
        except ValueError as e:
            raise FormatError(f"{path}:{ln}: {e}") from e
        out.append(g)
    return tuple(out), n_classes


# ---------------------------------------------------------------------------
# pose logs: "POSE1" then one line per frame: timestamp qw qx qy qz tx ty tz
# ---------------------------------------------------------------------------


def write_pose_log(path, poses: list[tuple[float, Quaternion, np.ndarray]]) -> None:
    lines = [POSE_MAGIC]
    for stamp, q, t in poses:
        lines.append(_fmt([stamp, q.w, q.x, q.y, q.z, *t]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_pose_log(path) -> list[tuple[float, Quaternion, np.ndarray]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != POSE_MAGIC:
        raise FormatError(f"{path}:1: expected '{POSE_MAGIC}' header")
    out = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        try:
            v = [float(p) for p in parts]
            out.append((v[0], Quaternion(*v[1:5]), np.array(v[5:8])))
        except ValueError as e:
            raise FormatError(f"{path}:{ln}: {e}") from e
    return out


def poses_as_transforms(entries) -> list[RigidTransform]:
    return [RigidTransform(quat_to_rotation(q), t) for _, q, t in entries]


# ---------------------------------------------------------------------------
# camera rigs: "RIG1 <n_cams>" then per camera one line:
# fx fy cx cy width height r00..r22 tx ty tz ratios...
# (the rotation is stored entrywise so the file is a byte-stable fixed point)
# ---------------------------------------------------------------------------


def write_rig(path, rig: CameraRig) -> None:
    lines = [f"{RIG_MAGIC} {len(rig)}"]
    for cam in rig:
        ratios = [lvl.ratio for lvl in cam.pyramid] if cam.pyramid else []
        lines.append(
            _fmt([cam.fx, cam.fy, cam.cx, cam.cy])
            + f" {cam.width} {cam.height} "
            + _fmt([*cam.extrinsics.rotation.reshape(-1), *cam.extrinsics.translation])
            + (" " + " ".join(str(r) for r in ratios) if ratios else "")
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_rig(path) -> tuple[CameraRig, list[list[int]]]:
    """Rig without pyramid data; returns the per-camera level ratios too."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(RIG_MAGIC):
        raise FormatError(f"{path}:1: expected '{RIG_MAGIC}' header")
    cams = []
    ratios_per_cam = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 18:
            raise FormatError(f"{path}:{ln}: expected at least 18 fields")
        try:
            fx, fy, cx, cy = (float(p) for p in parts[0:4])
            width, height = int(parts[4]), int(parts[5])
            rot = np.array([float(p) for p in parts[6:15]]).reshape(3, 3)
            t = np.array([float(p) for p in parts[15:18]])
            ratios = [int(p) for p in parts[18:]]
        except ValueError as e:
            raise FormatError(f"{path}:{ln}: {e}") from e
        cams.append(Camera(fx, fy, cx, cy, RigidTransform(rot, t), width, height))
        ratios_per_cam.append(ratios)
    return CameraRig(tuple(cams)), ratios_per_cam


def _rotation_to_quat(r: np.ndarray) -> Quaternion:
    """Unit quaternion of a rotation matrix (Shepperd's stable branch pick)."""
    t = np.trace(r)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        return Quaternion(0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
                          (r[1, 0] - r[0, 1]) / s)
    i = int(np.argmax(np.diag(r)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2.0
    q = np.empty(4)
    q[0] = (r[k, j] - r[j, k]) / s
    q[i + 1] = 0.25 * s
    q[j + 1] = (r[j, i] + r[i, j]) / s
    q[k + 1] = (r[k, i] + r[i, k]) / s
    return Quaternion(*q)


# ---------------------------------------------------------------------------
# feature pyramids: magic, u32 n_cams, then per camera u32 n_levels and per
# level u32 ratio, u32 H, u32 W, u32 D followed by H*W*D little-endian f64
# ---------------------------------------------------------------------------


def write_feature_pyramids(path, pyramids: list[list[FeaturePlane]]) -> None:
    chunks = [FPYR_MAGIC, struct.pack("<I", len(pyramids))]
    for levels in pyramids:
        chunks.append(struct.pack("<I", len(levels)))
        for lvl in levels:
            h, w, d = lvl.data.shape
            chunks.append(struct.pack("<4I", lvl.ratio, h, w, d))
            chunks.append(lvl.data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_feature_pyramids(path) -> list[list[FeaturePlane]]:
    raw = Path(path).read_bytes()
    if raw[:5] != FPYR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:5]!r}")
    off = 5
    (n_cams,) = struct.unpack_from("<I", raw, off)
    off += 4
    out = []
    for _ in range(n_cams):
        (n_levels,) = struct.unpack_from("<I", raw, off)
        off += 4
        levels = []
        for _ in range(n_levels):
            ratio, h, w, d = struct.unpack_from("<4I", raw, off)
            off += 16
            data = np.frombuffer(raw, dtype="<f8", offset=off, count=h * w * d)
            off += 8 * h * w * d
            levels.append(FeaturePlane(ratio, data.reshape(h, w, d)))
        out.append(levels)
    return out


# ---------------------------------------------------------------------------
# config: flat "key = value" lines mirroring SceneConfig fields
# ---------------------------------------------------------------------------

_TUPLE_FIELDS = ("range_min", "range_max", "grid_dims")
_FLOAT_FIELDS = ("voxel_size",)
_STR_FIELDS = ("fusion_mode",)


def write_config(path, cfg: SceneConfig) -> None:
    lines = []
    for name in ("range_min", "range_max", "grid_dims", "voxel_size", "n_gaussians",
                 "embed_dim", "n_blocks", "n_samples", "n_classes", "fusion_mode",
                 "n_frames", "seed", "n_cameras", "n_levels", "image_width", "image_height"):
        v = getattr(cfg, name)
        if name in _TUPLE_FIELDS:
            lines.append(f"{name} = {' '.join(repr(float(x)) if name != 'grid_dims' else str(int(x)) for x in v)}")
        elif name in _FLOAT_FIELDS:
            lines.append(f"{name} = {repr(float(v))}")
        else:
            lines.append(f"{name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_config(path) -> SceneConfig:
    values = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{ln}: expected 'key = value'")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    try:
        return SceneConfig(
            range_min=tuple(float(x) for x in values["range_min"].split()),
            range_max=tuple(float(x) for x in values["range_max"].split()),
            grid_dims=tuple(int(x) for x in values["grid_dims"].split()),
            voxel_size=float(values["voxel_size"]),
            n_gaussians=int(values["n_gaussians"]),
            embed_dim=int(values["embed_dim"]),
            n_blocks=int(values["n_blocks"]),
            n_samples=int(values["n_samples"]),
            n_classes=int(values["n_classes"]),
            fusion_mode=values["fusion_mode"],
            n_frames=int(values["n_frames"]),
            seed=int(values["seed"]),
            n_cameras=int(values["n_cameras"]),
            n_levels=int(values["n_levels"]),
            image_width=int(values["image_width"]),
            image_height=int(values["image_height"]),
        )
    except KeyError as e:
        raise FormatError(f"{path}: missing config key {e}") from e
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from e
