import numpy as np
import pytest

from cosect.cli import main, thread_count
from cosect.mesh import load_mesh
from cosect.scene import attach_points, load_sequence
from cosect.solver import optimize_scene
from cosect.voxgrid import load_volume

SCENE = """
frame_count = 30

[intrinsics]
fx = 75.0
fy = 75.0
cx = 39.5
cy = 29.5
width = 80
height = 60

[background]
lo = [-2.0, -2.0, -1.0]
side = 4.0
resolution = 32

[[camera.keys]]
t = 0
position = [0.31, -1.16, 1.8]
look_at = [0.0, 0.0, 0.05]

[[camera.keys]]
t = 29
position = [-0.31, -1.16, 1.8]
look_at = [0.0, 0.0, 0.05]

[[objects]]
id = 0
shape = { kind = "plane", normal = [0.0, 0.0, 1.0], offset = 0.0 }

[[objects]]
id = 1
shape = { kind = "box", half = [0.15, 0.1, 0.1] }

[[objects.keys]]
t = 0
translation = [-0.3, 0.0, 0.1]

[[objects.keys]]
t = 29
translation = [0.3, 0.0, 0.1]
"""


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.toml").write_text(SCENE)
    assert main(["synth", "--scene", str(root / "scene.toml"), "--out", str(root / "seq")]) == 0
    return root


def test_synth_layout(synth):
    seq = synth / "seq"
    assert (seq / "gt" / "obj1.ply").exists() and (seq / "intrinsics.txt").exists()
    kfs, models = load_sequence(seq, keyframe_stride=10)
    assert len(kfs) == 3 and [m.id for m in models] == [0, 1]


def test_synth_noise_option(synth, tmp_path):
    args = ["synth", "--scene", str(synth / "scene.toml"), "--out", str(tmp_path / "n"), "--noise-std", "0.01"]
    assert main(args) == 0
    clean, _ = load_sequence(synth / "seq", keyframe_stride=10)
    noisy, _ = load_sequence(tmp_path / "n", keyframe_stride=10)
    diff = noisy[1].depth - clean[1].depth
    valid = clean[1].depth > 0
    assert 0.005 < diff[valid].std() < 0.02


def test_optimize_matches_in_process(synth, tmp_path, capsys):
    out = tmp_path / "opt"
    args = ["optimize", "--sequence", str(synth / "seq"), "--out", str(out), "--object-resolution", "32"]
    assert main(args) == 0
    report = (out / "report.txt").read_text().splitlines()
    assert [line.split()[0] for line in report] == ["obj0", "obj1"]
    assert "converged" in report[1]
    kfs, models = load_sequence(synth / "seq", keyframe_stride=10, object_resolution=32)
    attach_points(models, kfs)
    ref = optimize_scene(models, kfs)
    for m in ref:
        saved = load_volume(out / f"obj{m.id}.csvf")
        assert np.array_equal(saved.values, m.sdf.values)
        assert np.array_equal(load_volume(out / f"obj{m.id}.hull.csvb").bits, m.hull.bits)


def test_extract_and_evaluate(synth, tmp_path, capsys):
    opt = tmp_path / "opt"
    assert main(["optimize", "--sequence", str(synth / "seq"), "--out", str(opt),
                 "--object-resolution", "32", "--no-hull", "--no-inter"]) == 0
    mesh = tmp_path / "obj1.ply"
    assert main(["extract", "--volume", str(opt / "obj1.csvf"), "--out", str(mesh)]) == 0
    assert not load_mesh(mesh).is_empty
    capsys.readouterr()
    colored = tmp_path / "colored.ply"
    assert main(["evaluate", "--recon", str(mesh), "--gt", str(synth / "seq" / "gt" / "obj1.ply"),
                 "--samples", "500", "--color-out", str(colored)]) == 0
    words = capsys.readouterr().out.split()
    assert words[0] == "accuracy" and words[2] == "completeness"
    assert float(words[1]) >= 0 and float(words[3]) >= 0
    q = load_mesh(colored).quality
    assert q is not None and len(q) == len(load_mesh(mesh).vertices)


def test_pipeline_subset(synth, tmp_path):
    out = tmp_path / "p"
    args = ["pipeline", "--sequence", str(synth / "seq"), "--out", str(out), "--variants", "tsdf,full",
            "--object-resolution", "32", "--samples", "500"]
    assert main(args) == 0
    lines = (out / "ablation.txt").read_text().splitlines()
    assert [line.split("\t")[1] for line in lines[1:]] == ["tsdf", "full"]


def test_pipeline_renders_scene_when_no_sequence(synth, tmp_path):
    out = tmp_path / "q"
    args = ["pipeline", "--scene", str(synth / "scene.toml"), "--out", str(out), "--variants", "baseline",
            "--object-resolution", "32", "--samples", "200"]
    assert main(args) == 0
    assert (out / "sequence" / "gt" / "obj1.ply").exists() and (out / "ablation.txt").exists()


def test_failures_exit_nonzero(tmp_path, capsys):
    assert main(["optimize", "--sequence", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
    assert "cosect optimize" in capsys.readouterr().err
    (tmp_path / "bad.csvf").write_bytes(b"garbage")
    assert main(["extract", "--volume", str(tmp_path / "bad.csvf"), "--out", str(tmp_path / "m.ply")]) == 1
    assert main(["evaluate", "--recon", str(tmp_path / "x.ply"), "--gt", str(tmp_path / "y.ply")]) == 1
    with pytest.raises(SystemExit):
        main(["pipeline", "--out", str(tmp_path), "--variants", "bogus", "--samples", "x"])


def test_unknown_variant_is_an_error(tmp_path, synth):
    assert main(["pipeline", "--sequence", str(synth / "seq"), "--out", str(tmp_path), "--variants", "magic"]) == 1


def test_thread_count(monkeypatch):
    monkeypatch.setenv("COSECT_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("COSECT_THREADS", "zero")
    assert thread_count() >= 1
