"""End-to-end tests of the command-line driver."""

import numpy as np
import pytest

from stereorecon import cli, geom
from stereorecon import io as srio
from stereorecon import synth
from stereorecon.cloud import DepthMap


def run(argv):
    return cli.main([str(a) for a in argv])


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exit_info:
        run(["--help"])
    assert exit_info.value.code == 0
    assert "stereorecon" in capsys.readouterr().out


class TestSynthCommand:
    def test_default_room_outputs(self, tmp_path):
        out = tmp_path / "views"
        assert run(["synth", "--out-dir", out, "--views", 3]) == 0
        assert sorted(p.name for p in out.glob("depth_*.png")) == [
            "depth_000.png", "depth_001.png", "depth_002.png",
        ]
        assert (out / "trajectory_gt.txt").exists()
        assert (out / "odometry.txt").exists()
        assert len(srio.read_trajectory(out / "trajectory_gt.txt")) == 3

    def test_seed_repetition_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run(["synth", "--out-dir", out, "--views", 2, "--seed", 5,
                        "--emit", "depth,cloud,stereo"]) == 0
        for name in sorted(p.name for p in a.iterdir()):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_bad_scene_grammar_exits_nonzero(self, tmp_path, capsys):
        scene = tmp_path / "bad.scene"
        scene.write_text("primitive = torus radius=1\n")
        assert run(["synth", "--scene", scene, "--out-dir", tmp_path / "o"]) == 1
        assert "ParseError" in capsys.readouterr().err


class TestDisparityCommand:
    @pytest.fixture()
    def stereo_pair(self, tmp_path):
        texture = synth.random_texture(160, 120, seed=2)
        left, right = synth.make_stereo_pair(texture, 6)
        left_path, right_path = tmp_path / "left.png", tmp_path / "right.png"
        srio.write_gray(left, left_path)
        srio.write_gray(right, right_path)
        return left_path, right_path

    def test_depth_equals_formula(self, stereo_pair, tmp_path):
        left, right = stereo_pair
        depth_path = tmp_path / "depth.png"
        assert run([
            "disparity", left, right, "--out-depth", depth_path,
            "--max-disparity", 16, "--focal-px", 400, "--baseline-m", 0.12,
        ]) == 0
        depth = srio.read_depth(depth_path)
        expected = 400 * 0.12 / 6.0
        # restrict to pixels whose true match is inside the right image
        # (block radius 3, shift 6); quantization is 16-bit millimeters
        r, k = 3, 6
        interior = depth.data[r:-r, r + k : 160 - r]
        assert np.isfinite(interior).mean() > 0.95
        values = interior[np.isfinite(interior)]
        assert np.abs(values - expected).max() < 5e-4 + 1e-12

    def test_mismatched_sizes_exit_nonzero(self, tmp_path, capsys):
        srio.write_gray(synth.random_texture(64, 48, 0), tmp_path / "l.png")
        srio.write_gray(synth.random_texture(66, 48, 0), tmp_path / "r.png")
        code = run(["disparity", tmp_path / "l.png", tmp_path / "r.png",
                    "--out-depth", tmp_path / "d.png"])
        assert code == 1
        assert "DimensionMismatch" in capsys.readouterr().err

    def test_threads_byte_identical(self, stereo_pair, tmp_path):
        left, right = stereo_pair
        outs = []
        for threads in (1, 4):
            path = tmp_path / f"d{threads}.png"
            assert run(["disparity", left, right, "--out-depth", path,
                        "--max-disparity", 16, "--threads", threads]) == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]


class TestBackprojectCommand:
    def test_single_pixel_depth(self, tmp_path):
        depth = np.full((48, 64), np.nan)
        depth[24, 32] = 2.0
        srio.write_depth(DepthMap(depth), tmp_path / "d.png")
        assert run(["backproject", tmp_path / "d.png", "--out", tmp_path / "c.ply",
                    "--focal-px", 100]) == 0
        cloud = srio.read_ply(tmp_path / "c.ply")
        assert len(cloud) == 1
        np.testing.assert_allclose(cloud.positions[0], [0.01, 0.01, 2.0], atol=1e-9)

    def test_all_invalid_gives_empty_ply(self, tmp_path):
        srio.write_depth(DepthMap(np.full((10, 12), np.nan)), tmp_path / "d.png")
        assert run(["backproject", tmp_path / "d.png", "--out", tmp_path / "c.ply"]) == 0
        assert len(srio.read_ply(tmp_path / "c.ply")) == 0


class TestIcpCommand:
    def test_identical_clouds_print_identity(self, tmp_path, capsys):
        cloud = synth.sample_scene(synth.default_room_scene(density=60))
        srio.write_ply(cloud, tmp_path / "c.ply")
        assert run(["icp", tmp_path / "c.ply", tmp_path / "c.ply",
                    "--max-corr", 0.5]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        matrix = np.array([[float(v) for v in line.split()] for line in lines[:4]])
        np.testing.assert_allclose(matrix, np.eye(4), atol=1e-9)
        assert "fitness 1.000000" in lines[4]

    def test_oracle_pair_recovered(self, tmp_path, capsys):
        cloud = synth.sample_scene(synth.default_room_scene(density=120))
        applied = geom.exp(
            geom.Twist(np.array([0.05, -0.08, 0.1]), np.array([0.05, 0.02, -0.04]))
        )
        from stereorecon.cloud import transform_cloud

        srio.write_ply(transform_cloud(cloud, applied), tmp_path / "src.ply")
        srio.write_ply(cloud, tmp_path / "tgt.ply")
        assert run(["icp", tmp_path / "src.ply", tmp_path / "tgt.ply",
                    "--max-corr", 0.3]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        matrix = np.array([[float(v) for v in line.split()] for line in lines[:4]])
        recovered = geom.RigidTransform.from_matrix(matrix, tol=1e-5)
        residual = geom.compose(recovered, applied)
        assert geom.rotation_angle(residual) < 1e-3
        assert np.linalg.norm(residual.translation) < 1e-3

    def test_disjoint_clouds_exit_nonzero(self, tmp_path, capsys):
        cloud = synth.sample_scene(synth.default_room_scene(density=40))
        srio.write_ply(cloud, tmp_path / "a.ply")
        far = cloud.positions + 100.0
        srio.write_ply(type(cloud)(far), tmp_path / "b.ply")
        assert run(["icp", tmp_path / "a.ply", tmp_path / "b.ply",
                    "--max-corr", 0.5]) == 1
        assert "TooFewCorrespondences" in capsys.readouterr().err


class TestMultiwayCommand:
    def test_single_fragment_copy_through(self, tmp_path):
        frag_dir = tmp_path / "frags"
        frag_dir.mkdir()
        cloud = synth.sample_scene(synth.default_room_scene(density=60))
        srio.write_ply(cloud, frag_dir / "cloud_000.ply")
        srio.write_trajectory(
            srio.TrajectoryFile(((0, geom.RigidTransform.identity()),)),
            tmp_path / "odom.txt",
        )
        assert run(["multiway", frag_dir, tmp_path / "odom.txt",
                    "--out-dir", tmp_path / "out"]) == 0
        assert (tmp_path / "out" / "merged.ply").exists()
        traj = srio.read_trajectory(tmp_path / "out" / "trajectory_optimized.txt")
        assert len(traj) == 1

    def test_disconnected_fragments_exit_nonzero(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        frag_dir = tmp_path / "frags"
        frag_dir.mkdir()
        from stereorecon.cloud import PointCloud

        srio.write_ply(PointCloud(rng.uniform(0, 1, (400, 3))), frag_dir / "a.ply")
        srio.write_ply(PointCloud(rng.uniform(0, 1, (400, 3)) + 500), frag_dir / "b.ply")
        identity = geom.RigidTransform.identity()
        srio.write_trajectory(
            srio.TrajectoryFile(((0, identity), (1, identity))), tmp_path / "odom.txt"
        )
        assert run(["multiway", frag_dir, tmp_path / "odom.txt",
                    "--out-dir", tmp_path / "out"]) == 1
        assert "RegistrationFailed" in capsys.readouterr().err


class TestPipelineCommand:
    def test_depth_dir_pipeline(self, tmp_path):
        views = tmp_path / "views"
        assert run(["synth", "--out-dir", views, "--views", 3,
                    "--emit", "depth", "--odom-noise-rot", 1.0,
                    "--odom-noise-trans", 0.02, "--seed", 3]) == 0
        config = tmp_path / "pipeline.cfg"
        config.write_text(
            f"depth_dir = {views}\n"
            f"odometry = {views / 'odometry.txt'}\n"
            f"output_dir = {tmp_path / 'out'}\n"
            "focal_px = 120\n"
            "voxel_coarse = 0.3\n"
            "voxel_fine = 0.06\n"
            "loop_window = 2\n"
        )
        assert run(["pipeline", config]) == 0
        out = tmp_path / "out"
        merged = srio.read_ply(out / "merged.ply")
        assert len(merged) > 100
        assert (out / "pose_graph.txt").exists()
        traj = srio.read_trajectory(out / "trajectory_optimized.txt")
        assert len(traj) == 3
        # merged cloud (node-0 frame) must lie on the scene surfaces
        from stereorecon.cloud import transform_cloud

        gt0 = srio.read_trajectory(views / "trajectory_gt.txt").poses()[0]
        world = transform_cloud(merged, gt0)
        distances = synth.surface_distance(
            synth.default_room_scene(), world.positions
        )
        assert (distances <= 2 * 0.06).mean() >= 0.9

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("depth_dir = x\nodometry = y\noutput_dir = z\nwobble = 3\n")
        assert run(["pipeline", config]) == 1
        assert "InvalidParameter" in capsys.readouterr().err


def test_config_file_flag_precedence(tmp_path):
    config = tmp_path / "c.cfg"
    config.write_text("focal_px = 500\nmax_disparity = 32\n")
    args = cli.build_parser().parse_args(
        ["disparity", "l", "r", "--config", str(config), "--max-disparity", "16"]
    )
    resolved = cli.resolve_config(args)
    assert resolved.focal_px == 500.0  # from file
    assert resolved.max_disparity == 16  # flag wins
    assert resolved.baseline_m == 0.1  # default
