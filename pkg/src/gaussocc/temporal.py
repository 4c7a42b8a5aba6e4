"""Geometry-aware temporal fusion and the end-to-end forward pipeline.

Reference points of the keyframe are carried into each historical frame
through the ego-motion transform T = pose_hist^-1 o pose_key, so every frame
samples its own image features at geometrically corresponding locations. A
gated fusion module then folds the frame stack back into the keyframe
embedding: a sigmoid gate predicted from the concatenated stack re-weights
the keyframe embedding, and a residual MLP plus layer norm produce the fused
result. The keyframe is always the last frame of a stack.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    CameraRig,
    GaussianPrimitive,
    PipelineParams,
    Quaternion,
    RigidTransform,
    SceneConfig,
    TemporalFusionParams,
)
from .nnprims import layer_norm, linear_forward, mlp_forward, relu, sigmoid
from .spatial import deformable_attention, project_to_camera, spatial_block
from .splat import splat_bounded

SCALE_FLOOR = 0.01  # meters; smallest scale the refinement head can emit


@dataclass(frozen=True)
class Frame:
    """One observation: ego pose (perception to world), camera rig with
    feature pyramids, the Gaussian set, and its embeddings (K, D)."""

    pose: RigidTransform
    rig: CameraRig
    gaussians: tuple[GaussianPrimitive, ...]
    embeddings: np.ndarray


@dataclass(frozen=True)
class FrameSequence:
    """Consecutive frames, oldest first; the last frame is the keyframe."""

    frames: tuple[Frame, ...]

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise ValueError("a sequence needs at least one frame")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def keyframe(self) -> Frame:
        return self.frames[-1]


def align_points(points: np.ndarray, pose_src: RigidTransform,
                 pose_dst: RigidTransform) -> np.ndarray:
    """Carry points from the src ego frame into the dst ego frame through the
    shared world: applies pose_dst^-1 o pose_src to every point."""
    return pose_dst.invert().compose(pose_src).apply(points)


def temporal_gate(stack: np.ndarray, params: TemporalFusionParams) -> np.ndarray:
    """Fusion gate in (0, 1)^(K, D) from the frame stack (tau, K, D).

    The tau frame vectors of each Gaussian are concatenated and passed through
    the two-layer gate MLP, then a sigmoid. The first layer is accumulated
    frame block by frame block in stack order, which keeps the result exactly
    invariant under a matched permutation of historical frames and weight
    blocks.
    """
    stack = np.asarray(stack, dtype=np.float64)
    tau, k, d = stack.shape
    l1, l2 = params.gate.layers
    if l1.n_in != tau * d:
        raise ValueError(f"gate expects a stack of {l1.n_in // d} frames, got {tau}")
    pre = np.broadcast_to(l1.bias, (k, l1.n_out)).copy()
    for t in range(tau):
        pre += stack[t] @ l1.weight[:, t * d:(t + 1) * d].T
    return sigmoid(linear_forward(relu(pre), l2))


def apply_temporal_gate(keyframe_emb: np.ndarray, gate: np.ndarray) -> np.ndarray:
    """Gated embedding: the keyframe embedding plus its gate-weighted copy."""
    return keyframe_emb + gate * keyframe_emb


def fuse_history(stack: np.ndarray, params: TemporalFusionParams) -> np.ndarray:
    """Fold a frame stack into the keyframe embedding: gate, gated embedding,
    residual refinement MLP, layer norm over the embedding width."""
    stack = np.asarray(stack, dtype=np.float64)
    key = stack[-1]
    gate = temporal_gate(stack, params)
    gated = apply_temporal_gate(key, gate)
    return layer_norm(key + mlp_forward(gated, params.refine), params.ln_gamma, params.ln_beta)


# ---------------------------------------------------------------------------
# refinement head
# ---------------------------------------------------------------------------


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def decode_gaussians(embeddings: np.ndarray, gaussians: Sequence[GaussianPrimitive],
                     head, cfg: SceneConfig) -> tuple[GaussianPrimitive, ...]:
    """Decode embeddings into refreshed primitives whose invariants hold by
    construction: means clamped to the perception range, scales floored
    through a softplus, rotation deltas composed as normalized quaternions,
    opacity squashed by a sigmoid, logits taken raw."""
    raw = mlp_forward(np.asarray(embeddings, dtype=np.float64), head)
    lo = np.array(cfg.range_min)
    hi = np.array(cfg.range_max)
    out = []
    for i, g in enumerate(gaussians):
        row = raw[i]
        mean = np.clip(g.mean + row[0:3], lo, hi)
        scale = SCALE_FLOOR + _softplus(row[3:6])
        dq = Quaternion(1.0 + row[6], row[7], row[8], row[9])
        rotation = dq * g.rotation
        opacity = float(sigmoid(row[10:11])[0])
        logits = row[11:]
        out.append(GaussianPrimitive(mean, scale, rotation, opacity, logits))
    return tuple(out)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


def run_pipeline(seq: FrameSequence, cfg: SceneConfig, params: PipelineParams, *,
                 cutoff_sigma: float = 3.0, threads: int | None = None,
                 return_embeddings: bool = False):
    """Forward pass over a frame sequence.

    Per block: the keyframe runs the full spatial aggregation; historical
    frames re-run the attention at the keyframe's reference points aligned
    into their own ego frames; in tight and coupled modes the block ends with
    a history fusion; the refinement head then refreshes the keyframe
    Gaussians. In loose and coupled modes one extra history fusion runs after
    the last block's aggregation, ahead of its decode, so every mode reaches
    the emitted Gaussians. The final Gaussians are rendered with the bounded
    splatter.

    Returns (gaussians, occupancy) or, with return_embeddings, a third item
    holding the final keyframe embeddings.
    """
    if len(seq) != cfg.n_frames:
        raise ValueError(f"sequence has {len(seq)} frames, config expects {cfg.n_frames}")
    if len(params.blocks) != cfg.n_blocks:
        raise ValueError("parameter store does not match config block count")
    mode = cfg.fusion_mode
    key = seq.keyframe
    gaussians = tuple(key.gaussians)
    embeddings = [np.asarray(f.embeddings, dtype=np.float64) for f in seq.frames]
    key_emb = embeddings[-1]

    for bi, block in enumerate(params.blocks):
        key_emb, points = spatial_block(key_emb, gaussians, key.rig, block)
        for t in range(len(seq) - 1):
            hist = seq.frames[t]
            aligned = align_points(points, key.pose, hist.pose)
            projected = [project_to_camera(aligned, cam) for cam in hist.rig]
            embeddings[t] = deformable_attention(embeddings[t], hist.rig, projected, block.attn)
        if mode in ("tight", "coupled"):
            key_emb = fuse_history(np.stack(embeddings[:-1] + [key_emb]), block.temporal)
        if bi == len(params.blocks) - 1 and mode in ("loose", "coupled"):
            key_emb = fuse_history(np.stack(embeddings[:-1] + [key_emb]), params.final_temporal)
        gaussians = decode_gaussians(key_emb, gaussians, block.head, cfg)

    occupancy = splat_bounded(gaussians, cfg.grid_spec(), cutoff_sigma, threads=threads)
    if return_embeddings:
        return gaussians, occupancy, key_emb
    return gaussians, occupancy
