"""Geometric and scene domain types shared by the whole pipeline.

Quaternions, rigid transforms, cameras, Gaussian primitives, voxel grids,
scene configuration, and deterministic parameter initialization.

Conventions, fixed package-wide:
  * perception frame: x forward, y left, z up, meters
  * quaternions: Hamilton convention, component order (w, x, y, z),
    normalized on construction
  * rotations: 3x3 orthonormal, det +1
  * all internal arithmetic in float64
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nnprims import LinearLayer, Mlp

EMPTY_LABEL = 255

_ROT_TOL = 1e-9


class DegenerateInputError(ValueError):
    """Raised when an input is geometrically meaningless (zero quaternion,
    non-positive scale, singular configuration)."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# rotations and rigid transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (w, x, y, z). Normalized on construction; a zero
    quaternion is rejected."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)
        if not math.isfinite(n) or n < 1e-300:
            raise DegenerateInputError("cannot normalize a zero quaternion")
        if abs(n - 1.0) < 1e-12:
            # already unit: dividing again would shift components by an ulp
            # and break byte-stable file round trips
            object.__setattr__(self, "w", float(self.w))
            object.__setattr__(self, "x", float(self.x))
            object.__setattr__(self, "y", float(self.y))
            object.__setattr__(self, "z", float(self.z))
            return
        object.__setattr__(self, "w", self.w / n)
        object.__setattr__(self, "x", self.x / n)
        object.__setattr__(self, "y", self.y / n)
        object.__setattr__(self, "z", self.z / n)

    @classmethod
    def identity(cls) -> "Quaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise DegenerateInputError("zero rotation axis")
        axis = axis / n
        h = 0.5 * angle
        s = math.sin(h)
        return cls(math.cos(h), s * axis[0], s * axis[1], s * axis[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def __neg__(self) -> "Quaternion":
        # exact negation; re-normalizing would perturb the components by an
        # ulp and break the exact sign-flip invariance of the covariance
        q = object.__new__(Quaternion)
        object.__setattr__(q, "w", -self.w)
        object.__setattr__(q, "x", -self.x)
        object.__setattr__(q, "y", -self.y)
        object.__setattr__(q, "z", -self.z)
        return q

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        """Hamilton product; the result rotates by self after other."""
        w1, x1, y1, z1 = self.w, self.x, self.y, self.z
        w2, x2, y2, z2 = other.w, other.x, other.y, other.z
        return Quaternion(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )


def quat_to_rotation(q: Quaternion) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion (orthonormal, det +1)."""
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def covariance(scale, q: Quaternion) -> np.ndarray:
    """Covariance R diag(s^2) R^T of an anisotropic Gaussian.

    Symmetric positive definite; eigenvalues are exactly the squared scales.
    Invariant under the sign flip q -> -q.
    """
    s = np.asarray(scale, dtype=np.float64)
    if s.shape != (3,) or not np.all(s > 0.0):
        raise DegenerateInputError(f"scale must be 3 strictly positive components, got {s!r}")
    r = quat_to_rotation(q)
    return (r * s**2) @ r.T


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion p -> R p + t with R orthonormal, det +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rigid transform needs a 3x3 rotation and a 3-vector")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ROT_TOL or abs(np.linalg.det(r) - 1.0) > _ROT_TOL:
            raise ValueError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quat(cls, q: Quaternion, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(quat_to_rotation(q), np.asarray(translation, dtype=np.float64))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self.compose(other))(p) == self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def invert(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or a batch (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation


# ---------------------------------------------------------------------------
# scene elements
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianPrimitive:
    """One anisotropic semantic ellipsoid.

    mean: center, meters. scale: per-axis standard deviations, meters,
    strictly positive. rotation: unit quaternion. opacity: in [0, 1].
    logits: per-class semantic logits, length n_classes.
    """

    mean: np.ndarray
    scale: np.ndarray
    rotation: Quaternion
    opacity: float
    logits: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        s = np.asarray(self.scale, dtype=np.float64)
        c = np.atleast_1d(np.asarray(self.logits, dtype=np.float64))
        if m.shape != (3,) or s.shape != (3,):
            raise ValueError("mean and scale must be 3-vectors")
        if not np.all(np.isfinite(m)) or not np.all(np.isfinite(c)):
            raise ValueError("gaussian parameters must be finite")
        if not np.all(s > 0.0):
            raise DegenerateInputError("gaussian scale components must be > 0")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity must lie in [0, 1], got {self.opacity}")
        object.__setattr__(self, "mean", _freeze(m))
        object.__setattr__(self, "scale", _freeze(s))
        object.__setattr__(self, "opacity", float(self.opacity))
        object.__setattr__(self, "logits", _freeze(c))

    @property
    def n_classes(self) -> int:
        return self.logits.shape[0]

    def covariance(self) -> np.ndarray:
        return covariance(self.scale, self.rotation)


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Geometry of a dense voxel lattice: counts, metric origin (min corner),
    cubic voxel edge length, and the semantic class count."""

    dims: tuple[int, int, int]
    origin: np.ndarray
    voxel_size: float
    n_classes: int

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, GridSpec)
            and self.dims == other.dims
            and np.array_equal(self.origin, other.origin)
            and self.voxel_size == other.voxel_size
            and self.n_classes == other.n_classes
        )

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"grid dims must be 3 positive counts, got {self.dims!r}")
        if self.voxel_size <= 0.0:
            raise ValueError("voxel_size must be > 0")
        if not 1 <= int(self.n_classes) <= 254:
            raise ValueError("n_classes must lie in [1, 254] (255 is the empty label)")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", _freeze(np.asarray(self.origin, dtype=np.float64)))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "n_classes", int(self.n_classes))

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def axis_centers(self, axis: int) -> np.ndarray:
        """Voxel center coordinates along one axis."""
        n = self.dims[axis]
        return self.origin[axis] + (np.arange(n, dtype=np.float64) + 0.5) * self.voxel_size

    def center_lattice(self) -> np.ndarray:
        """All voxel centers as an (X, Y, Z, 3) array."""
        xs, ys, zs = (self.axis_centers(a) for a in range(3))
        return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)


def voxel_center(grid, index) -> np.ndarray:
    """Metric center of voxel (i, j, k): origin + (index + 0.5) * voxel_size."""
    spec = grid.spec if isinstance(grid, VoxelGrid) else grid
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != (3,) or np.any(idx < 0) or np.any(idx >= np.array(spec.dims)):
        raise IndexError(f"voxel index {index!r} outside grid dims {spec.dims}")
    return spec.origin + (idx + 0.5) * spec.voxel_size


def point_to_index(grid, points) -> np.ndarray:
    """Voxel indices floor((p - origin) / voxel_size); may fall out of range."""
    spec = grid.spec if isinstance(grid, VoxelGrid) else grid
    p = np.asarray(points, dtype=np.float64)
    return np.floor((p - spec.origin) / spec.voxel_size).astype(np.int64)


@dataclass(frozen=True)
class VoxelGrid:
    """Dense voxel volume: either a label payload (X, Y, Z) with values in
    [0, n_classes) or EMPTY_LABEL, or a vector payload (X, Y, Z, n_classes)."""

    spec: GridSpec
    payload: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.payload)
        x, y, z = self.spec.dims
        if p.ndim == 3:
            if p.shape != (x, y, z):
                raise ValueError(f"label payload shape {p.shape} does not match dims {self.spec.dims}")
            p = np.ascontiguousarray(p, dtype=np.uint8)
            bad = (p >= self.spec.n_classes) & (p != EMPTY_LABEL)
            if np.any(bad):
                raise ValueError("label payload contains values outside the class set")
        elif p.ndim == 4:
            if p.shape != (x, y, z, self.spec.n_classes):
                raise ValueError(f"vector payload shape {p.shape} does not match {(x, y, z, self.spec.n_classes)}")
            p = np.ascontiguousarray(p, dtype=np.float64)
        else:
            raise ValueError("payload must be (X,Y,Z) labels or (X,Y,Z,C) vectors")
        p.setflags(write=False)
        object.__setattr__(self, "payload", p)

    @property
    def is_labels(self) -> bool:
        return self.payload.ndim == 3

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.spec.dims


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeaturePlane:
    """One pyramid level: (H_l, W_l, D) features at a given downsample ratio."""

    ratio: int
    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim != 3:
            raise ValueError("feature plane must be (H, W, D)")
        object.__setattr__(self, "ratio", int(self.ratio))
        object.__setattr__(self, "data", _freeze(d))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with perception-to-camera extrinsics and an optional
    multi-scale feature pyramid.

    Camera frame: +z optical axis, +x image right, +y image down.
    Level l has spatial dims ceil(H / ratio_l) x ceil(W / ratio_l).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    extrinsics: RigidTransform
    width: int
    height: int
    pyramid: tuple[FeaturePlane, ...] | None = None

    def __post_init__(self):
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be > 0")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.pyramid is not None:
            pyr = tuple(self.pyramid)
            for lvl in pyr:
                want = (math.ceil(self.height / lvl.ratio), math.ceil(self.width / lvl.ratio))
                if lvl.data.shape[:2] != want:
                    raise ValueError(
                        f"pyramid level ratio {lvl.ratio} has dims {lvl.data.shape[:2]}, expected {want}"
                    )
            object.__setattr__(self, "pyramid", pyr)

    def with_pyramid(self, pyramid) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.extrinsics,
                      self.width, self.height, tuple(pyramid))


@dataclass(frozen=True)
class CameraRig:
    """N cameras rigidly attached to the ego vehicle."""

    cameras: tuple[Camera, ...]

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise ValueError("a rig needs at least one camera")

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    @property
    def n_levels(self) -> int:
        cam = self.cameras[0]
        return 0 if cam.pyramid is None else len(cam.pyramid)


# ---------------------------------------------------------------------------
# configuration and rng
# ---------------------------------------------------------------------------

FUSION_MODES = ("loose", "tight", "coupled")


@dataclass(frozen=True)
class SceneConfig:
    """Pipeline-wide sizes and ranges. Grid dims times voxel size must equal
    the perception-range extent on every axis."""

    range_min: tuple[float, float, float]
    range_max: tuple[float, float, float]
    grid_dims: tuple[int, int, int]
    voxel_size: float
    n_gaussians: int
    embed_dim: int
    n_blocks: int
    n_samples: int
    n_classes: int
    fusion_mode: str
    n_frames: int
    seed: int
    n_cameras: int = 2
    n_levels: int = 2
    image_width: int = 32
    image_height: int = 24

    def __post_init__(self):
        object.__setattr__(self, "range_min", tuple(float(v) for v in self.range_min))
        object.__setattr__(self, "range_max", tuple(float(v) for v in self.range_max))
        object.__setattr__(self, "grid_dims", tuple(int(v) for v in self.grid_dims))
        for a in range(3):
            extent = self.range_max[a] - self.range_min[a]
            if abs(self.grid_dims[a] * self.voxel_size - extent) > 1e-9:
                raise ValueError(
                    f"axis {a}: grid_dims * voxel_size = {self.grid_dims[a] * self.voxel_size}"
                    f" does not match range extent {extent}"
                )
        for name in ("n_gaussians", "embed_dim", "n_blocks", "n_samples", "n_frames",
                     "n_classes", "n_cameras", "n_levels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")

    @classmethod
    def desk(cls, **overrides) -> "SceneConfig":
        """Small defaults sized for tests and demos on one machine."""
        base = dict(
            range_min=(-8.0, -8.0, -2.0),
            range_max=(8.0, 8.0, 2.0),
            grid_dims=(32, 32, 8),
            voxel_size=0.5,
            n_gaussians=64,
            embed_dim=32,
            n_blocks=2,
            n_samples=8,
            n_classes=4,
            fusion_mode="coupled",
            n_frames=3,
            seed=0,
            n_cameras=2,
            n_levels=2,
            image_width=32,
            image_height=24,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def production_scale(cls, **overrides) -> "SceneConfig":
        """Full production sizes: 200x200x16 grid at 0.5 m over
        [-50, 50]^2 x [-5, 3], 25600 Gaussians, width 128, 4 blocks."""
        base = dict(
            range_min=(-50.0, -50.0, -5.0),
            range_max=(50.0, 50.0, 3.0),
            grid_dims=(200, 200, 16),
            voxel_size=0.5,
            n_gaussians=25600,
            embed_dim=128,
            n_blocks=4,
            n_samples=8,
            n_classes=16,
            fusion_mode="coupled",
            n_frames=3,
            seed=0,
            n_cameras=6,
            n_levels=4,
            image_width=1600,
            image_height=900,
        )
        base.update(overrides)
        return cls(**base)

    def grid_spec(self) -> GridSpec:
        return GridSpec(self.grid_dims, np.array(self.range_min), self.voxel_size, self.n_classes)


class Rng:
    """Deterministic random stream. Identical seeds yield identical draw
    sequences regardless of platform or thread count; independent child
    streams are derived by spawning, never by sharing."""

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None,
                 stream: int | None = None):
        self.seed = int(seed)
        if _seq is None:
            key = () if stream is None else (int(stream),)
            _seq = np.random.SeedSequence(self.seed, spawn_key=key)
        self._seq = _seq
        self._gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, n: int) -> list["Rng"]:
        return [Rng(self.seed, s) for s in self._seq.spawn(n)]

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ---------------------------------------------------------------------------
# learnable parameters
# ---------------------------------------------------------------------------


@dataclass
class GateParams:
    """Offset-fusion gate: three per-point projections into a shared latent
    space plus the map from the concatenated latents to one logit."""

    proj_ell: LinearLayer
    proj_view: LinearLayer
    proj_ctx: LinearLayer
    gate_out: LinearLayer


@dataclass
class AttnParams:
    """Deformable cross-attention: per-slot weight logits predicted from the
    query plus the output projection of the attended feature."""

    weights: LinearLayer
    out_proj: LinearLayer


@dataclass
class TemporalFusionParams:
    """History fusion: gate MLP over the concatenated frame stack, residual
    refinement MLP, and the layer-norm affine."""

    gate: Mlp
    refine: Mlp
    ln_gamma: np.ndarray
    ln_beta: np.ndarray


@dataclass
class BlockParams:
    """Everything one aggregation block learns."""

    offset_predictor: LinearLayer
    scale_ell: float
    scale_view: float
    gate: GateParams
    attn: AttnParams
    temporal: TemporalFusionParams
    head: Mlp


@dataclass
class PipelineParams:
    blocks: list[BlockParams]
    final_temporal: TemporalFusionParams


GATE_LATENT = 16  # per-branch latent width of the offset-fusion gate


def _init_linear(rng: Rng, n_out: int, n_in: int) -> LinearLayer:
    a = 1.0 / math.sqrt(n_in)
    return LinearLayer(
        weight=rng.uniform(-a, a, (n_out, n_in)),
        bias=rng.uniform(-a, a, n_out),
    )


def _init_temporal(rng: Rng, d: int, tau: int) -> TemporalFusionParams:
    return TemporalFusionParams(
        gate=Mlp([_init_linear(rng, d, tau * d), _init_linear(rng, d, d)]),
        refine=Mlp([_init_linear(rng, d, d), _init_linear(rng, d, d)]),
        ln_gamma=np.ones(d),
        ln_beta=np.zeros(d),
    )


def init_parameters(cfg: SceneConfig, rng: Rng) -> PipelineParams:
    """Allocate every learnable tensor, filled deterministically from the rng.

    Weights and biases draw from uniform(-a, a) with a = 1 / sqrt(fan_in);
    the offset scaling scalars start at 1.0 and layer-norm affines at (1, 0).
    Draw order is fixed: blocks in order, then the final temporal fusion.
    """
    d, m = cfg.embed_dim, cfg.n_samples
    n_slots = cfg.n_cameras * cfg.n_levels * m
    blocks = []
    for _ in range(cfg.n_blocks):
        blocks.append(
            BlockParams(
                offset_predictor=_init_linear(rng, m * 3, d),
                scale_ell=1.0,
                scale_view=1.0,
                gate=GateParams(
                    proj_ell=_init_linear(rng, GATE_LATENT, 3),
                    proj_view=_init_linear(rng, GATE_LATENT, 3),
                    proj_ctx=_init_linear(rng, GATE_LATENT, 3),
                    gate_out=_init_linear(rng, 1, 3 * GATE_LATENT),
                ),
                attn=AttnParams(
                    weights=_init_linear(rng, n_slots, d),
                    out_proj=_init_linear(rng, d, d),
                ),
                temporal=_init_temporal(rng, d, cfg.n_frames),
                head=Mlp([_init_linear(rng, d, d), _init_linear(rng, 11 + cfg.n_classes, d)]),
            )
        )
    return PipelineParams(blocks=blocks, final_temporal=_init_temporal(rng, d, cfg.n_frames))
