import os
import subprocess
import sys

import numpy as np
import pytest

from bevis.checkpoint import load_arrays
from bevis.config import PipelineConfig, read_kv_file
from bevis.pipeline import (
    generate_dataset,
    load_prediction,
    load_split,
    read_manifest,
    run_eval,
    run_infer,
    save_prediction,
    scene_spec_for,
    split_of,
    train_stage_2d,
    train_stage_3d,
)
from bevis.scene import Labeling

TINY = dict(
    n_scenes=6, steps_2d=8, steps_3d=8, eval_every=100, density=50.0,
    room_min=2.6, room_max=3.2, objects_min=1, objects_max=3,
)


def test_config_file_roundtrip(tmp_path):
    cfg = PipelineConfig(seed=7, cell_size=0.03, unet_widths=(4, 8, 12, 16))
    path = tmp_path / "a.cfg"
    path.write_text(cfg.to_text())
    loaded = PipelineConfig.from_file(path)
    assert loaded == cfg


def test_config_include_and_comments(tmp_path):
    (tmp_path / "base.cfg").write_text("seed = 3\ncell_size = 0.03\n")
    (tmp_path / "main.cfg").write_text(
        "# main config\ninclude base.cfg\nbandwidth = 0.8  # override\n"
    )
    cfg = PipelineConfig.from_file(tmp_path / "main.cfg")
    assert cfg.seed == 3 and cfg.cell_size == 0.03 and cfg.bandwidth == 0.8


def test_config_rejects_unknown_key(tmp_path):
    (tmp_path / "bad.cfg").write_text("not_a_key = 1\n")
    with pytest.raises(KeyError, match="not_a_key"):
        PipelineConfig.from_file(tmp_path / "bad.cfg")


def test_manifest_split_811():
    splits = [split_of(i, 10) for i in range(10)]
    assert splits.count("train") == 8
    assert splits.count("val") == 1
    assert splits.count("test") == 1
    splits40 = [split_of(i, 40) for i in range(40)]
    assert splits40.count("train") == 32
    assert splits40.count("val") == 4
    assert splits40.count("test") == 4


def test_generate_dataset_manifest_and_determinism(tmp_path):
    cfg = PipelineConfig(**TINY)
    generate_dataset(cfg, tmp_path / "a")
    generate_dataset(cfg, tmp_path / "b")
    entries = read_manifest(tmp_path / "a")
    assert len(entries) == 6
    for name, _ in entries:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_dataset_empty(tmp_path):
    cfg = PipelineConfig(**{**TINY, "n_scenes": 0})
    manifest = generate_dataset(cfg, tmp_path)
    assert manifest.read_text() == ""


def test_generate_dataset_parallel_matches_serial(tmp_path):
    cfg = PipelineConfig(**TINY)
    generate_dataset(cfg, tmp_path / "serial")
    env_before = os.environ.get("BEVIS_NUM_WORKERS")
    os.environ["BEVIS_NUM_WORKERS"] = "3"
    try:
        generate_dataset(cfg, tmp_path / "par")
    finally:
        if env_before is None:
            os.environ.pop("BEVIS_NUM_WORKERS", None)
        else:
            os.environ["BEVIS_NUM_WORKERS"] = env_before
    for name, _ in read_manifest(tmp_path / "serial"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "par" / name).read_bytes()


def test_scene_spec_for_objects_in_range():
    cfg = PipelineConfig(**TINY)
    for i in range(20):
        spec = scene_spec_for(cfg, i)
        assert cfg.objects_min <= spec.n_objects <= cfg.objects_max
        assert cfg.room_min <= spec.width <= cfg.room_max


def test_prediction_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    lab = Labeling(rng.integers(0, 5, 30), rng.integers(0, 7, 30))
    path = tmp_path / "p.pred.txt"
    save_prediction(path, lab)
    back = load_prediction(path, 30)
    assert np.array_equal(back.semantic, lab.semantic)
    assert np.array_equal(back.instance, lab.instance)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_run")
    cfg = PipelineConfig(**TINY)
    generate_dataset(cfg, root / "data")
    r2 = train_stage_2d(cfg, root / "data", root / "out")
    r3 = train_stage_3d(cfg, root / "data", root / "out", r2.checkpoint)
    return cfg, root, r2, r3


def test_train_3d_requires_2d_checkpoint(tmp_path):
    cfg = PipelineConfig(**TINY)
    generate_dataset(cfg, tmp_path / "data")
    with pytest.raises(FileNotFoundError, match="2d checkpoint"):
        train_stage_3d(cfg, tmp_path / "data", tmp_path / "out", tmp_path / "none.bevis")


def test_training_curves_written(tiny_run):
    cfg, root, r2, r3 = tiny_run
    header = r2.curve.read_text().splitlines()[0]
    assert header == "step,l_var,l_dist,l_sem"
    assert len(r2.curve.read_text().splitlines()) == 1 + r2.steps_run
    assert r3.curve.read_text().splitlines()[0] == "step,l_inst,l_sem"


def test_resume_reproduces_next_step(tiny_run, tmp_path):
    cfg, root, r2, _ = tiny_run
    short = PipelineConfig(**{**TINY, "steps_2d": 4})
    a_dir = tmp_path / "short"
    train_stage_2d(short, root / "data", a_dir)
    longer = PipelineConfig(**{**TINY, "steps_2d": 6})
    resumed = train_stage_2d(longer, root / "data", tmp_path / "resumed", resume_from=a_dir / "ckpt_2d.bevis")
    fresh = train_stage_2d(longer, root / "data", tmp_path / "fresh")
    a = load_arrays(resumed.checkpoint)
    b = load_arrays(fresh.checkpoint)
    assert set(a) == set(b)
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k


def test_infer_eval_and_missing_prediction(tiny_run, tmp_path):
    cfg, root, r2, r3 = tiny_run
    pred_dir = tmp_path / "pred"
    written = run_infer(cfg, root / "data", pred_dir, r2.checkpoint, r3.checkpoint, split="test")
    assert written
    result = run_eval(cfg, pred_dir, root / "data", tmp_path / "eval")
    assert result.csv_path.exists()
    assert 0.0 <= result.ap_report.strict_mean <= 1.0
    # features container exists alongside predictions
    stem = written[0].name.replace(".pred.txt", "")
    assert (pred_dir / f"{stem}.features.bevpc").exists()
    # remove one prediction: the error names the scene
    written[0].unlink()
    with pytest.raises(FileNotFoundError, match=stem):
        run_eval(cfg, pred_dir, root / "data", tmp_path / "eval2")


def test_eval_gt_vs_gt_is_perfect(tiny_run, tmp_path):
    cfg, root, _, _ = tiny_run
    pred_dir = tmp_path / "gtpred"
    pred_dir.mkdir()
    for name, cloud in load_split(root / "data", "test"):
        stem = name.replace(".bevpc", "")
        save_prediction(pred_dir / f"{stem}.pred.txt", Labeling(cloud.gt_semantic, cloud.gt_instance))
    result = run_eval(cfg, pred_dir, root / "data", tmp_path / "eval_gt")
    assert result.ap_report.strict_mean == 1.0
    assert result.ap_report.ap50 == 1.0 and result.ap_report.ap25 == 1.0
    assert result.semantic.miou == 1.0 and result.semantic.oacc == 1.0 and result.semantic.macc == 1.0
    assert result.exit_code == 0


def test_eval_threshold_gate(tiny_run, tmp_path):
    cfg, root, r2, r3 = tiny_run
    pred_dir = tmp_path / "pred_gate"
    run_infer(cfg, root / "data", pred_dir, r2.checkpoint, r3.checkpoint, split="test")
    gated = PipelineConfig(**{**TINY, "min_ap50": 0.999, "min_miou": 0.999})
    result = run_eval(gated, pred_dir, root / "data", tmp_path / "eval_gate")
    assert result.exit_code == 1  # 8 training steps cannot reach these gates


def test_cli_end_to_end(tmp_path):
    env = dict(os.environ)
    env["PYTHONPATH"] = str((os.path.dirname(__file__) or ".") + "/../src") + os.pathsep + env.get("PYTHONPATH", "")
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text(
        "n_scenes = 5\nsteps_2d = 4\nsteps_3d = 4\neval_every = 100\ndensity = 45\n"
        "room_min = 2.6\nroom_max = 3.0\nobjects_min = 1\nobjects_max = 2\n"
    )

    def cli(*args):
        return subprocess.run(
            [sys.executable, "-m", "bevis", *args],
            capture_output=True, text=True, env=env,
        )

    data = tmp_path / "data"
    out = tmp_path / "out"
    r = cli("gen", "--config", str(cfg_path), "--out", str(data))
    assert r.returncode == 0, r.stderr
    r = cli("train", "--stage", "2d", "--config", str(cfg_path), "--data", str(data), "--out", str(out))
    assert r.returncode == 0, r.stderr
    r = cli("train", "--stage", "3d", "--config", str(cfg_path), "--data", str(data), "--out", str(out))
    assert r.returncode == 0, r.stderr
    pred = tmp_path / "pred"
    r = cli(
        "infer", "--config", str(cfg_path), "--data", str(data), "--out", str(pred),
        "--ckpt2d", str(out / "ckpt_2d.bevis"), "--ckpt3d", str(out / "ckpt_3d.bevis"),
        "--render",
    )
    assert r.returncode == 0, r.stderr
    assert list(pred.glob("*_bev.ppm")), "render flag must emit PPMs"
    r = cli("eval", "--config", str(cfg_path), "--pred", str(pred), "--gt", str(data), "--out", str(tmp_path / "ev"))
    assert r.returncode == 0, r.stderr
    assert "mIoU" in r.stdout
    scene0 = next(data.glob("scene_000.bevpc"))
    r = cli("render", "--config", str(cfg_path), "--scene", str(scene0), "--out", str(tmp_path / "rr"))
    assert r.returncode == 0, r.stderr
    assert list((tmp_path / "rr").glob("*.ppm"))
