"""Shared helper for the demo scripts: an in-memory frame sequence with
synthetic feature pyramids and seeded initial state."""

from gaussocc import CameraRig, Frame, FrameSequence, Rng
from gaussocc.synth import (
    build_rig,
    ego_pose,
    initial_embeddings,
    initial_gaussians,
    synth_frame_pyramids,
)


def make_sequence(cfg) -> FrameSequence:
    gaussians = initial_gaussians(cfg, Rng(cfg.seed, stream=2))
    frame_rngs = Rng(cfg.seed, stream=3).split(cfg.n_frames)
    rig = build_rig(cfg)
    frames = []
    for t in range(cfg.n_frames):
        pyramids = synth_frame_pyramids(cfg, t)
        frames.append(
            Frame(
                pose=ego_pose(t),
                rig=CameraRig(tuple(c.with_pyramid(pyramids[i]) for i, c in enumerate(rig))),
                gaussians=gaussians,
                embeddings=initial_embeddings(cfg, frame_rngs[t]),
            )
        )
    return FrameSequence(tuple(frames))
