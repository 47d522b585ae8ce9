import json
import zipfile
from dataclasses import replace

import numpy as np
import pytest

from hdflow import flow as fl
from hdflow import neural as nn
from hdflow import planner as P
from hdflow import records as rc
from hdflow.core import RngStream
from hdflow.diffusion import GuidanceConfig
from hdflow.maze import MazeSpec, generate_dataset

SPEC = MazeSpec()
TINY = P.PlannerConfig(iterations=20, hidden=(8,), ebm_hidden=(4,), proj_every=5, proj_batch=1,
                       proj_sample_steps=3, log_every=10)


@pytest.fixture(scope="module")
def demos():
    return generate_dataset(SPEC, 3, 2, RngStream(0))


def test_demo_round_trip_bit_exact(tmp_path, demos):
    path = tmp_path / "d.jsonl"
    rc.save_demos(demos, SPEC, path)
    back, maze = rc.load_demos(path)
    assert maze == SPEC and len(back) == len(demos)
    for a, b in zip(demos, back):
        assert a.observations.tobytes() == b.observations.tobytes()
        assert a.actions.tobytes() == b.actions.tobytes() and a.success == b.success and a.seed == b.seed
    rc.save_demos(back, maze, tmp_path / "again.jsonl")
    assert (tmp_path / "again.jsonl").read_bytes() == path.read_bytes()


def test_demo_format_errors(tmp_path, demos):
    path = tmp_path / "d.jsonl"
    rc.save_demos(demos, SPEC, path)
    lines = path.read_text().splitlines()
    (tmp_path / "bad.jsonl").write_text("\n".join(lines[:2] + ["{not json"] + lines[3:]) + "\n")
    with pytest.raises(rc.DataFormatError, match="line 3"):
        rc.load_demos(tmp_path / "bad.jsonl")
    header = json.loads(lines[0])
    header["version"] = 99
    (tmp_path / "v.jsonl").write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
    with pytest.raises(rc.DataFormatError):
        rc.load_demos(tmp_path / "v.jsonl")
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(rc.DataFormatError):
        rc.load_demos(tmp_path / "empty.jsonl")


def test_latent_round_trip_and_checksum_guard(tmp_path, stage1):
    path = tmp_path / "z.jsonl"
    rc.save_latents(stage1.records, stage1.wm.checksum(), path)
    back, checksum = rc.load_latents(path, stage1.wm.checksum())
    assert checksum == stage1.wm.checksum()
    for a, b in zip(stage1.records, back):
        assert a.z.tobytes() == b.z.tobytes() and a.h.tobytes() == b.h.tobytes()
        assert a.z_goal.tobytes() == b.z_goal.tobytes() and a.success == b.success
    with pytest.raises(P.IncompatibleComponentsError):
        rc.load_latents(path, "f" * 64)


def test_world_model_round_trip(tmp_path, stage1):
    path = tmp_path / "wm.zip"
    rc.save_world_model(stage1.wm, stage1.wm_cfg, path)
    wm, cfg = rc.load_world_model(path)
    assert cfg == stage1.wm_cfg and wm.checksum() == stage1.wm.checksum()
    assert np.array_equal(wm.obs_center, stage1.wm.obs_center) and wm.obs_scale == stage1.wm.obs_scale
    rc.save_world_model(wm, cfg, tmp_path / "again.zip")
    assert (tmp_path / "again.zip").read_bytes() == path.read_bytes()


@pytest.mark.parametrize("variant", P.VARIANTS)
def test_planner_round_trip(tmp_path, stage1, variant):
    p, _ = P.train_planner(stage1.records, stage1.wm.checksum(), replace(TINY, variant=variant),
                           GuidanceConfig(sample_steps=10), fl.FlowConfig(), RngStream(0))
    path = tmp_path / "p.zip"
    rc.save_planner(p, path)
    q = rc.load_planner(path, stage1.wm.checksum())
    assert q.variant == variant and q.pcfg == p.pcfg and q.gcfg == p.gcfg and q.fcfg == p.fcfg
    assert q.hl.params.values.tobytes() == p.hl.params.values.tobytes() and q.hl.emb == p.hl.emb
    rec = stage1.records[0]
    a = p.plan(rec.z[0], rec.z_goal, RngStream(1))
    b = q.plan(rec.z[0], rec.z_goal, RngStream(1))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    rc.save_planner(q, tmp_path / "again.zip")
    assert (tmp_path / "again.zip").read_bytes() == path.read_bytes()
    with pytest.raises(P.IncompatibleComponentsError):
        rc.load_planner(path, "0" * 64)


def test_bundle_errors(tmp_path):
    path = tmp_path / "b.zip"
    rc.write_bundle(path, "thing", {"a": 1}, {"x.bin": b"hello"})
    assert rc.read_bundle(path, "thing") == ({"a": 1}, {"x.bin": b"hello"})
    with pytest.raises(nn.CheckpointCorruptError):
        rc.read_bundle(path, "other")
    raw = path.read_bytes()
    (tmp_path / "flip.zip").write_bytes(raw.replace(b"hello", b"jello"))
    with pytest.raises(nn.CheckpointChecksumError):
        rc.read_bundle(tmp_path / "flip.zip", "thing")
    (tmp_path / "cut.zip").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(nn.CheckpointCorruptError):
        rc.read_bundle(tmp_path / "cut.zip", "thing")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
    manifest["version"] = 7
    rc.write_atomic(tmp_path / "v.zip", b"")
    with zipfile.ZipFile(tmp_path / "v.zip", "w") as zf:
        zf.writestr("manifest.json", json.dumps(manifest))
        zf.writestr("x.bin", b"hello")
    with pytest.raises(nn.CheckpointVersionError):
        rc.read_bundle(tmp_path / "v.zip", "thing")


def test_csv_round_trip_and_errors(tmp_path):
    rows = [{"name": "a", "x": 0.1, "n": 3}, {"name": "b", "x": 1 / 3, "n": 4}]
    rc.write_csv(tmp_path / "r.csv", rows)
    back = rc.read_csv(tmp_path / "r.csv", required=("name", "x"))
    assert [float(r["x"]) for r in back] == [0.1, 1 / 3]
    with pytest.raises(rc.DataFormatError, match="missing"):
        rc.read_csv(tmp_path / "r.csv", required=("y",))
    (tmp_path / "ragged.csv").write_text("a,b\n1,2\n3\n")
    with pytest.raises(rc.DataFormatError, match="row 3"):
        rc.read_csv(tmp_path / "ragged.csv")
    for text in ("", "a,b\n"):
        (tmp_path / "e.csv").write_text(text)
        with pytest.raises(rc.DataFormatError):
            rc.read_csv(tmp_path / "e.csv")


def test_eval_rows_schema(stage1):
    rep = P.evaluate(stage1.maze, stage1.wm, P.RandomPolicy(), P.PlannerConfig(max_env_steps=5), 2, RngStream(0))
    rows = rc.eval_rows(rep, "maze8", "low", 3)
    assert [list(r) for r in rows] == [list(rc.EVAL_COLUMNS)] * 2
    assert [r["episode"] for r in rows] == [0, 1] and all(r["seed"] == 3 for r in rows)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    rc.write_atomic(tmp_path / "f.bin", b"abc")
    rc.write_atomic(tmp_path / "f.bin", b"xyz")
    assert (tmp_path / "f.bin").read_bytes() == b"xyz" and len(list(tmp_path.iterdir())) == 1
