import io
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from skimage.metrics import structural_similarity

from active_recon.cli import build_parser, main
from active_recon.geometry import look_at
from active_recon.meshing import (cull_unobserved, export_mesh, read_ply_mesh, read_ppm,
                                  write_ply_mesh, write_ppm)
from active_recon.metrics import PSNR_CAP, eval_geometry, eval_mad, psnr, ssim
from active_recon.pipeline import Explorer, RunConfig, run_exploration, write_metrics_csv
from active_recon.scene import gt_sdf, render_rgbd, sample_gt_surface, unit_sphere_scene

SPHERE = unit_sphere_scene()


def short_cfg(**kw):
    base = dict(scene="sphere_room", steps=12, eval_every=4, n_eval_samples=2000, n_holdout=1,
                bootstrap_spin=4)
    base.update(kw)
    return RunConfig(**base)


# ----------------------------------------------------------------------------
# geometry metrics


def test_offset_surface_has_known_accuracy():
    gt = sample_gt_surface(SPHERE, 4000, seed=0)
    pts = 1.05 * sample_gt_surface(SPHERE, 4000, seed=1)
    m = eval_geometry(pts, SPHERE, 0.2, gt_points=gt)
    assert m["Acc"] == pytest.approx(0.05, abs=1e-9)
    assert m["CR"] == 100.0
    assert 0.05 <= m["Com"] < 0.1


def test_hemisphere_covers_about_half():
    gt = sample_gt_surface(SPHERE, 8000, seed=0)
    pts = sample_gt_surface(SPHERE, 8000, seed=1)
    pts = pts[pts[:, 2] > 0]
    m = eval_geometry(pts, SPHERE, 0.05, gt_points=gt)
    assert m["CR"] == pytest.approx(50.0, abs=3.0)
    assert m["Acc"] < 1e-4


def test_empty_reconstruction():
    m = eval_geometry(np.zeros((0, 3)), SPHERE, 0.2, n=100)
    assert m["CR"] == 0.0 and math.isinf(m["Com"]) and math.isnan(m["Acc"])
    assert not m["acc_defined"]


@given(st.floats(0.001, 0.5), st.floats(0.001, 0.5))
def test_coverage_is_monotone_in_threshold(a, b):
    gt = sample_gt_surface(SPHERE, 500, seed=0)
    pts = np.random.default_rng(0).normal(size=(200, 3))
    lo, hi = sorted((a, b))
    assert (eval_geometry(pts, SPHERE, lo, gt_points=gt)["CR"]
            <= eval_geometry(pts, SPHERE, hi, gt_points=gt)["CR"])


def test_mad_examples():
    assert eval_mad(lambda p: gt_sdf(SPHERE, p), SPHERE, n=2000) == pytest.approx(0.0, abs=1e-12)
    assert eval_mad(lambda p: gt_sdf(SPHERE, p) + 0.1, SPHERE, n=2000) == pytest.approx(0.1)


# ----------------------------------------------------------------------------
# image metrics


def test_psnr_of_uniform_quarter_error():
    a = np.zeros((8, 8, 3))
    assert psnr(a, a + 0.25) == pytest.approx(12.0412, abs=1e-4)
    assert psnr(a, a) == PSNR_CAP


def test_ssim_matches_reference_implementation(rng):
    a = rng.uniform(size=(40, 50, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=2, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=False)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)
    assert ssim(a, a) == pytest.approx(1.0)


# ----------------------------------------------------------------------------
# meshing


def sphere_sdf(p):
    return np.linalg.norm(p, axis=1) - 1.0


def test_sphere_mesh_vertices_on_the_surface_and_genus_zero():
    mesh = export_mesh(sphere_sdf, [[-1.5] * 3, [1.5] * 3], 48)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.max(np.abs(r - 1.0)) < 0.5 * mesh.cell_size
    assert mesh.euler_characteristic() == 2


def test_cube_mesh_is_closed():
    def cube(p):
        q = np.abs(p) - 0.6
        return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)

    assert export_mesh(cube, [[-1] * 3, [1] * 3], 32).euler_characteristic() == 2


def test_no_zero_crossing_gives_empty_mesh():
    mesh = export_mesh(lambda p: np.ones(len(p)), [[-1] * 3, [1] * 3], 16)
    assert mesh.empty and len(mesh.faces) == 0
    with pytest.raises(ValueError):
        export_mesh(sphere_sdf, [[-1] * 3, [1] * 3], 4)


def test_mesh_ply_round_trip(tmp_path):
    mesh = export_mesh(sphere_sdf, [[-1.5] * 3, [1.5] * 3], 16)
    write_ply_mesh(tmp_path / "m.ply", mesh)
    back = read_ply_mesh(tmp_path / "m.ply")
    assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
    assert (back.faces == mesh.faces).all()


def test_culling_keeps_only_the_observed_side(intr):
    mesh = export_mesh(sphere_sdf, [[-1.5] * 3, [1.5] * 3], 32)
    fr = render_rgbd(SPHERE, look_at([3.0, 0, 0], [0, 0, 0]), intr)
    kept = cull_unobserved(mesh, [fr], band=0.05)
    assert 0 < len(kept.faces) < len(mesh.faces)
    assert kept.vertices[:, 0].min() > -0.2
    views = [render_rgbd(SPHERE, look_at(3 * np.array(d, float), [0, 0, 0],
                                         up=(0, 1, 0) if abs(d[2]) else (0, 0, 1)), intr)
             for d in ([1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1])]
    assert len(cull_unobserved(mesh, views, band=0.05).faces) == len(mesh.faces)


def test_ppm_round_trip(tmp_path, rng):
    img = rng.uniform(size=(6, 7, 3))
    write_ppm(tmp_path / "a.ppm", img)
    assert_allclose(read_ppm(tmp_path / "a.ppm"), img, atol=0.5 / 255 + 1e-12)


# ----------------------------------------------------------------------------
# configuration


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(steps=0)
    with pytest.raises(ValueError):
        RunConfig(policy="greedy")
    with pytest.raises(ValueError):
        RunConfig(ablations=("no_such_flag",))
    with pytest.raises(ValueError):
        RunConfig(scene="atlantis")


def test_config_round_trip(tmp_path):
    cfg = RunConfig(seed=3, ablations=("no_mlp_uncert",), steps=7)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = RunConfig.load(path)
    assert back == cfg


# ----------------------------------------------------------------------------
# runs


@pytest.fixture(scope="module")
def short_runs():
    out = {}
    for key, kw in {"a": {}, "b": {}, "rand_a": {"policy": "random"},
                    "rand_b": {"policy": "random"}}.items():
        ex = Explorer(short_cfg(**kw))
        ex.run()
        out[key] = ex
    return out


def test_runs_are_deterministic(short_runs, tmp_path):
    for a, b in (("a", "b"), ("rand_a", "rand_b")):
        pa, pb = tmp_path / f"{a}.csv", tmp_path / f"{b}.csv"
        write_metrics_csv(pa, short_runs[a].curves)
        write_metrics_csv(pb, short_runs[b].curves)
        assert pa.read_bytes() == pb.read_bytes()
        ta = np.array([p.translation for p in short_runs[a].trajectory])
        tb = np.array([p.translation for p in short_runs[b].trajectory])
        assert ta.tobytes() == tb.tobytes()


def test_run_is_safe_and_records_curves(short_runs):
    ex = short_runs["a"]
    assert ex.t == 12 and len(ex.trajectory) == 12
    assert [r["step"] for r in ex.curves] == [3, 7, 11]
    assert ex.collisions == 0 and ex.min_clearance >= ex.planner.agent_radius
    assert 0.0 <= ex.curves[-1]["CR"] <= 100.0


def test_single_step_budget():
    ex = Explorer(short_cfg(steps=1))
    rep = ex.run()
    assert ex.t == 1 and len(rep.curves) == 1 and len(ex.trajectory) == 1


@pytest.mark.parametrize("flags,layer", [(("no_mlp_uncert",), "u_imp"),
                                          (("no_depth_uncert", "no_rgb_uncert"), "u_exp"),
                                          (("no_sdf_temp",), "u_time")])
def test_ablation_zeroes_exactly_its_layer(flags, layer):
    ex = Explorer(short_cfg(steps=10, ablations=flags))
    ex.run()
    assert np.all(ex.volume.layer(layer) == 0.0)
    others = {"u_imp", "u_exp"} - {layer}
    for name in others:
        assert ex.volume.layer(name).max() > 0.0


def test_ablations_keep_only_the_live_layers_in_the_high_set():
    assert Explorer(short_cfg(ablations=("no_mlp_uncert",))).high_layers == ("u_exp",)
    assert Explorer(short_cfg(ablations=("no_depth_uncert", "no_rgb_uncert"))).high_layers == \
        ("u_imp",)
    assert Explorer(short_cfg(ablations=("no_depth_uncert",))).high_layers == ("u_exp", "u_imp")


# ----------------------------------------------------------------------------
# command line


def test_cli_run_writes_delimited_report_and_figures(tmp_path, monkeypatch):
    monkeypatch.delenv("ACTIVE_RECON_OUT", raising=False)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(short_cfg(steps=4).to_dict()))
    out = tmp_path / "run"
    args = build_parser().parse_args(["run", "--config", str(cfg), "--out", str(out)])
    buf = io.StringIO()
    assert args.func(args, stream=buf) == 0
    text = buf.getvalue()
    for sec in ("run", "metrics", "render", "safety", "files"):
        assert f"=== {sec} ===" in text
    for name in ("metrics.csv", "trajectory.csv", "planner.json", "keyframes.json", "field.bin",
                 "splats.ply", "mesh.ply", "summary.json", "figures/coverage.png",
                 "figures/trajectory.png", "figures/uncertainty_slice.png"):
        assert (out / name).exists(), name

    buf = io.StringIO()
    args = build_parser().parse_args(["eval", "--checkpoint", str(out)])
    assert args.func(args, stream=buf) == 0
    assert "=== eval ===" in buf.getvalue() and (out / "eval.json").exists()
    args = build_parser().parse_args(["mesh", "--checkpoint", str(out), "--res", "24"])
    assert args.func(args, stream=io.StringIO()) == 0
    assert (out / "mesh_24.ply").exists()


def test_cli_reports_bad_input(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"policy": "greedy"}))
    assert main(["run", "--config", str(bad)]) == 2
    assert "error" in capsys.readouterr().err


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ACTIVE_RECON_OUT", str(tmp_path / "env"))
    rep, _ = run_exploration(short_cfg(steps=1), out_dir=str(tmp_path / "arg"))
    assert (tmp_path / "env" / "metrics.csv").exists()
    assert not (tmp_path / "arg").exists()
