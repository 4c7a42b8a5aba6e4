import hashlib
from pathlib import Path

import numpy as np
import pytest

from gaussocc import cli, formats, synth
from gaussocc.core import (
    EMPTY_LABEL,
    GaussianPrimitive,
    GridSpec,
    Quaternion,
    SceneConfig,
    VoxelGrid,
    voxel_center,
)


def dir_digest(path) -> dict[str, str]:
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(Path(path).iterdir())
        if p.is_file()
    }


def random_grid(gen, dims=(6, 5, 3), n_classes=4) -> VoxelGrid:
    spec = GridSpec(dims, np.array([-1.0, 0.0, -0.5]), 0.25, n_classes)
    labels = gen.integers(0, n_classes, dims).astype(np.uint8)
    labels[gen.uniform(size=dims) < 0.4] = EMPTY_LABEL
    return VoxelGrid(spec, labels)


def random_gaussians(gen, n, n_classes=3):
    return tuple(
        GaussianPrimitive(gen.normal(size=3), gen.uniform(0.1, 2.0, 3),
                          Quaternion(*gen.normal(size=4)), float(gen.uniform(0, 1)),
                          gen.normal(size=n_classes))
        for _ in range(n)
    )


# ---------------------------------------------------------------------------
# formats
# ---------------------------------------------------------------------------


def test_voxel_grid_round_trip(tmp_path):
    gen = np.random.default_rng(0)
    grid = random_grid(gen)
    p1, p2 = tmp_path / "a.occv", tmp_path / "b.occv"
    formats.write_voxel_grid(p1, grid)
    back = formats.read_voxel_grid(p1)
    np.testing.assert_array_equal(back.payload, grid.payload)
    assert back.spec == grid.spec
    formats.write_voxel_grid(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_voxel_grid_payload_is_x_fastest(tmp_path):
    spec = GridSpec((2, 2, 1), np.zeros(3), 1.0, 4)
    labels = np.array([[[0], [1]], [[2], [3]]], dtype=np.uint8)  # labels[x][y][z]
    p = tmp_path / "g.occv"
    formats.write_voxel_grid(p, VoxelGrid(spec, labels))
    payload = p.read_bytes()[-4:]
    assert list(payload) == [0, 2, 1, 3]  # x varies fastest


def test_voxel_grid_rejects_garbage(tmp_path):
    p = tmp_path / "bad.occv"
    p.write_bytes(b"NOPE!123")
    with pytest.raises(formats.FormatError):
        formats.read_voxel_grid(p)


def test_gaussian_set_round_trip(tmp_path):
    gen = np.random.default_rng(1)
    gaussians = random_gaussians(gen, 7)
    p1, p2 = tmp_path / "a.gset", tmp_path / "b.gset"
    formats.write_gaussian_set(p1, gaussians, 3)
    back, n_classes = formats.read_gaussian_set(p1)
    assert n_classes == 3
    for g, h in zip(gaussians, back):
        np.testing.assert_array_equal(g.mean, h.mean)
        np.testing.assert_array_equal(g.scale, h.scale)
        np.testing.assert_array_equal(g.logits, h.logits)
        assert g.opacity == h.opacity
        assert g.rotation.as_array().tolist() == h.rotation.as_array().tolist()
    formats.write_gaussian_set(p2, back, 3)
    assert p1.read_bytes() == p2.read_bytes()


def test_gaussian_parse_error_carries_line_number(tmp_path):
    p = tmp_path / "bad.gset"
    p.write_text("GSET1 2\n0 0 0 1 1 1 1 0 0 0 0.5 1.0 2.0\n0 0 nope\n")
    with pytest.raises(formats.FormatError, match=":3:"):
        formats.read_gaussian_set(p)


def test_pose_log_round_trip_and_normalization(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("POSE1\n0.0 2.0 0.0 0.0 0.0 1.0 2.0 3.0\n")
    entries = formats.read_pose_log(p)
    assert entries[0][1].w == 1.0  # normalized on load
    transforms = formats.poses_as_transforms(entries)
    np.testing.assert_array_equal(transforms[0].translation, [1.0, 2.0, 3.0])


def test_rig_round_trip(tmp_path):
    cfg = SceneConfig.desk()
    rig = synth.build_rig(cfg)
    p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
    formats.write_rig(p1, rig)
    back, ratios = formats.read_rig(p1)
    assert len(back) == len(rig)
    for a, b in zip(rig, back):
        np.testing.assert_allclose(a.extrinsics.rotation, b.extrinsics.rotation, atol=1e-12)
        np.testing.assert_array_equal(a.extrinsics.translation, b.extrinsics.translation)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)
    formats.write_rig(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_feature_pyramid_round_trip(tmp_path):
    cfg = SceneConfig.desk(embed_dim=8)
    pyramids = synth.synth_frame_pyramids(cfg, 0)
    p1, p2 = tmp_path / "a.fpyr", tmp_path / "b.fpyr"
    formats.write_feature_pyramids(p1, pyramids)
    back = formats.read_feature_pyramids(p1)
    assert len(back) == len(pyramids)
    for cam_a, cam_b in zip(pyramids, back):
        for lvl_a, lvl_b in zip(cam_a, cam_b):
            assert lvl_a.ratio == lvl_b.ratio
            np.testing.assert_array_equal(lvl_a.data, lvl_b.data)
    formats.write_feature_pyramids(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_config_round_trip(tmp_path):
    cfg = SceneConfig.desk(n_gaussians=99, fusion_mode="tight", seed=5)
    p = tmp_path / "config.txt"
    formats.write_config(p, cfg)
    assert formats.read_config(p) == cfg


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def test_synth_byte_identical_per_seed(tmp_path):
    cfg = SceneConfig.desk(seed=1)
    synth.write_scene(tmp_path / "a", cfg, "mixed")
    synth.write_scene(tmp_path / "b", cfg, "mixed")
    assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")
    synth.write_scene(tmp_path / "c", SceneConfig.desk(seed=2), "mixed")
    assert dir_digest(tmp_path / "a") != dir_digest(tmp_path / "c")


def test_ground_recipe_fills_exactly_the_bottom_slab():
    cfg = SceneConfig.desk(seed=3)
    prims = synth.build_recipe("ground", cfg.seed, cfg)
    spec = cfg.grid_spec()
    gt = synth.voxelize(prims, spec, synth.ego_pose(0), 0.0)
    slab = prims[0]
    for k in range(spec.dims[2]):
        z = voxel_center(spec, (0, 0, k))[2]
        inside = abs(z - slab.center[2]) <= slab.size[2]
        column = gt.payload[:, :, k]
        if inside:
            assert np.all(column == slab.label)
        else:
            assert np.all(column == EMPTY_LABEL)


def test_every_occupied_voxel_center_is_contained():
    cfg = SceneConfig.desk(seed=11)
    prims = synth.build_recipe("mixed", cfg.seed, cfg)
    spec = cfg.grid_spec()
    for t in range(2):
        pose = synth.ego_pose(t)
        gt = synth.voxelize(prims, spec, pose, float(t))
        occupied = np.argwhere(gt.payload != EMPTY_LABEL)
        assert len(occupied) > 0
        for idx in occupied[:: max(1, len(occupied) // 200)]:
            center = pose.apply(voxel_center(spec, idx))
            assert any(p.contains(center, float(t)) for p in prims)


def test_unknown_recipe_rejected():
    cfg = SceneConfig.desk()
    with pytest.raises(ValueError):
        synth.build_recipe("volcano", 0, cfg)


def test_scene_loads_back(tmp_path):
    cfg = SceneConfig.desk(seed=4, n_frames=2)
    synth.write_scene(tmp_path / "s", cfg, "mixed")
    scene = synth.load_scene(tmp_path / "s")
    assert scene.cfg == cfg
    assert len(scene.poses) == 2
    assert len(scene.gt) == 2
    assert len(scene.pyramids[0]) == cfg.n_cameras
    seq = synth.frame_window(scene, cfg, 1)
    assert len(seq) == cfg.n_frames
    np.testing.assert_array_equal(seq.frames[0].rig.cameras[0].pyramid[0].data,
                                  scene.pyramids[0][0][0].data)


# ---------------------------------------------------------------------------
# cli
# ---------------------------------------------------------------------------


def run_cli(*args) -> int:
    return cli.main([str(a) for a in args])


def test_cli_splat_empty_set_gives_empty_grid(tmp_path):
    gset = tmp_path / "empty.gset"
    gset.write_text("GSET1 3\n")
    out = tmp_path / "out.occv"
    assert run_cli("splat", gset, out, "--grid", 8, 8, 4) == 0
    grid = formats.read_voxel_grid(out)
    assert np.all(grid.payload == EMPTY_LABEL)


def test_cli_splat_output_round_trips(tmp_path):
    gen = np.random.default_rng(5)
    gset = tmp_path / "g.gset"
    formats.write_gaussian_set(gset, random_gaussians(gen, 10), 3)
    out1, out2 = tmp_path / "a.occv", tmp_path / "b.occv"
    assert run_cli("splat", gset, out1, "--grid", 16, 16, 4) == 0
    formats.write_voxel_grid(out2, formats.read_voxel_grid(out1))
    assert out1.read_bytes() == out2.read_bytes()


def test_cli_splat_dense_vs_bounded_labels_nearly_agree(tmp_path):
    # wide dominant primitives plus low-opacity detail: the default 3-sigma
    # cutoff actively clips the details yet flips almost no labels
    gen = np.random.default_rng(8)
    gaussians = [
        GaussianPrimitive(np.append(gen.uniform(-2, 2, 2), gen.uniform(-1, 1)),
                          gen.uniform(5.0, 7.0, 3), Quaternion(*gen.normal(size=4)),
                          float(gen.uniform(0.5, 1.0)), np.eye(3)[gen.integers(0, 3)] * 2.0)
        for _ in range(5)
    ] + [
        GaussianPrimitive(gen.uniform([-8, -8, -2], [8, 8, 2]), gen.uniform(0.08, 0.3, 3),
                          Quaternion(*gen.normal(size=4)), float(gen.uniform(2e-4, 2e-3)),
                          np.eye(3)[gen.integers(0, 3)])
        for _ in range(120)
    ]
    gset = tmp_path / "scene.gset"
    formats.write_gaussian_set(gset, gaussians, 3)
    fast, exact = tmp_path / "fast.occv", tmp_path / "exact.occv"
    assert run_cli("splat", gset, fast, "--grid", 32, 32, 8) == 0
    assert run_cli("splat", gset, exact, "--grid", 32, 32, 8, "--dense") == 0
    a = formats.read_voxel_grid(fast).payload
    b = formats.read_voxel_grid(exact).payload
    assert np.count_nonzero(a != b) < 0.001 * a.size


def test_cli_splat_parse_failure_reports_line(tmp_path, capsys):
    gset = tmp_path / "bad.gset"
    gset.write_text("GSET1 1\nbroken line\n")
    assert run_cli("splat", gset, tmp_path / "o.occv") == 2
    assert ":2:" in capsys.readouterr().err


def test_cli_pipeline_deterministic_and_mode_sensitive(tmp_path):
    scene = tmp_path / "scene"
    assert run_cli("synth", scene, "--seed", 3, "--tau", 3, "--grid", 16, 16, 4,
                   "--gaussians", 12) == 0
    outs = {}
    for name, flags in {
        "a": ["--mode", "coupled"],
        "b": ["--mode", "coupled"],
        "loose": ["--mode", "loose"],
        "tight": ["--mode", "tight"],
        "tau1": ["--mode", "coupled", "--tau", 1],
    }.items():
        out = tmp_path / name
        assert run_cli("pipeline", scene, "--out", out, *flags) == 0
        outs[name] = dir_digest(out)
    assert outs["a"] == outs["b"]  # same seed, bit-identical outputs
    assert outs["a"] != outs["loose"]
    assert outs["a"] != outs["tight"]
    assert outs["loose"] != outs["tight"]
    assert outs["a"] != outs["tau1"]  # temporal path active


@pytest.mark.parametrize("recipe", synth.RECIPES)
def test_cli_eval_perfect_on_gt_itself(tmp_path, capsys, recipe):
    scene = tmp_path / "scene"
    assert run_cli("synth", scene, "--seed", 6, "--tau", 2, "--grid", 16, 16, 4,
                   "--recipe", recipe) == 0
    pred = tmp_path / "pred"
    pred.mkdir()
    for t in range(2):
        grid = formats.read_voxel_grid(scene / f"gt_{t:03d}.occv")
        formats.write_voxel_grid(pred / f"pred_{t:03d}.occv", grid)
    assert run_cli("eval", pred, scene) == 0
    out = capsys.readouterr().out
    assert "sc_iou 1.0" in out
    assert "miou 1.0" in out
    if recipe == "ground":
        # static content: the sequence itself has zero temporal variability
        assert "stcv 0.0" in out


def test_cli_eval_reports_dim_mismatch_with_names(tmp_path, capsys):
    scene = tmp_path / "scene"
    assert run_cli("synth", scene, "--seed", 6, "--tau", 1, "--grid", 16, 16, 4) == 0
    pred = tmp_path / "pred"
    pred.mkdir()
    gen = np.random.default_rng(0)
    formats.write_voxel_grid(pred / "pred_000.occv", random_grid(gen, dims=(4, 4, 2)))
    assert run_cli("eval", pred, scene) == 1
    err = capsys.readouterr().err
    assert "pred_000.occv" in err and "gt_000.occv" in err


def test_cli_eval_report_byte_stable(tmp_path):
    scene = tmp_path / "scene"
    out = tmp_path / "out"
    assert run_cli("synth", scene, "--seed", 9, "--tau", 2, "--grid", 16, 16, 4,
                   "--gaussians", 8) == 0
    assert run_cli("pipeline", scene, "--out", out) == 0
    r1, r2 = tmp_path / "r1.txt", tmp_path / "r2.txt"
    assert run_cli("eval", out, scene, "--out", r1) == 0
    assert run_cli("eval", out, scene, "--out", r2) == 0
    assert r1.read_bytes() == r2.read_bytes()


def test_cli_stcv_runs_aligned_and_not(tmp_path, capsys):
    scene = tmp_path / "scene"
    out = tmp_path / "out"
    assert run_cli("synth", scene, "--seed", 10, "--tau", 3, "--grid", 16, 16, 4,
                   "--gaussians", 8) == 0
    assert run_cli("pipeline", scene, "--out", out) == 0
    assert run_cli("stcv", out) == 0
    plain = capsys.readouterr().out
    assert "stcv" in plain and "mstcv" in plain
    assert run_cli("stcv", out, "--align") == 0
    aligned = capsys.readouterr().out
    assert "aligned True" in aligned


def test_cli_stcv_hand_counted_fixture(tmp_path, capsys):
    # 10 shared non-empty voxels, 2 label changes: STCV must print 0.2
    spec = GridSpec((4, 4, 2), np.zeros(3), 0.5, 4)
    a = np.full(32, EMPTY_LABEL, dtype=np.uint8)
    a[:10] = 1
    b = a.copy()
    b[0] = 2
    b[1] = 0
    pred = tmp_path / "pred"
    pred.mkdir()
    formats.write_voxel_grid(pred / "pred_000.occv", VoxelGrid(spec, a.reshape(4, 4, 2)))
    formats.write_voxel_grid(pred / "pred_001.occv", VoxelGrid(spec, b.reshape(4, 4, 2)))
    assert run_cli("stcv", pred) == 0
    assert "stcv 0.2" in capsys.readouterr().out


def test_cli_gradcheck_exit_codes():
    assert run_cli("gradcheck", "--seed", 0) == 0
    assert run_cli("gradcheck", "--seed", 0, "--inject-fault") == 1


def test_cli_gradcheck_lists_each_primitive_once(capsys):
    run_cli("gradcheck")
    out = capsys.readouterr().out
    for name in ("linear", "mlp", "layer_norm", "sigmoid", "softmax",
                 "cross_entropy", "lovasz_softmax"):
        assert sum(line.split()[0] == name for line in out.splitlines() if line.strip()) == 1


def test_cli_bench_small_case():
    assert run_cli("bench", "--gaussians", 200, "--grid", 32, 32, 8, "--threads", 2) == 0
