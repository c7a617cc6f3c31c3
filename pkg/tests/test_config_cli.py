import hashlib
import json
import re
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ocreloc.cli import main
from ocreloc.config import RunConfig, config_from_dict, dump_config, load_config
from ocreloc.errors import ConfigError
from ocreloc.geometry import Pose
from ocreloc.io import read_poses, write_features
from ocreloc.mapping import ImageRecord

DATA = Path(__file__).parent / "data"
SMALL = ["--scene-n-queries", "8", "--scene-seed", "3"]


def _digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene") / "s"
    assert main(["gen", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def built_map(gen_dir):
    out = gen_dir.parent / "map.ocmap"
    assert main(["build-map", str(gen_dir), str(out)]) == 0
    return out


def test_config_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.refine.mc_fractions = (20.0, 40.0)
    cfg.scene.seed = 7
    p = tmp_path / "c.toml"
    p.write_text(dump_config(cfg))
    back = load_config(p)
    assert back == cfg


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown config key: refine.bogus"):
        config_from_dict({"refine": {"bogus": 1}})
    with pytest.raises(ConfigError, match="unknown config key: nosuch"):
        config_from_dict({"nosuch": {}})
    with pytest.raises(ConfigError):
        config_from_dict({"pnp": {"max_iters": "many"}})
    with pytest.raises(ConfigError):
        config_from_dict({"refine": {"max_rounds": 0}})


def test_flag_overrides_file(tmp_path, capsys):
    p = tmp_path / "c.toml"
    p.write_text("[scene]\nseed = 5\nn_queries = 2\n")
    out = tmp_path / "o"
    assert main(["gen", str(out), "--config", str(p), "--scene-seed", "6"]) == 0
    cfg = load_config(out / "config.toml")
    assert cfg.scene.seed == 6 and cfg.scene.n_queries == 2


def test_help_lists_flags_with_defaults():
    r = subprocess.run([sys.executable, "-m", "ocreloc.cli", "localize", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for flag, default in [("--refine-reproj-threshold-px", "10.0"), ("--pnp-inlier-px", "8.0"),
                          ("--retrieval-k", "20"), ("--refine-mc-fractions", "30.0,50.0,70.0")]:
        assert re.search(rf"\n\s+{flag} [A-Z]+\s+\(default: {re.escape(default)}\)", r.stdout), flag


def test_gen_outputs_and_determinism(gen_dir, tmp_path):
    for rel in ("sfm/cameras.txt", "sfm/images.txt", "sfm/points3D.txt", "queries/list.txt", "gt_poses.txt",
                "gt_map.ocmap", "config.toml", "features/db/00000.png.ocfeat", "queries/query/00000.png.ocfeat"):
        assert (gen_dir / rel).is_file(), rel
    again = tmp_path / "again"
    assert main(["gen", str(again), *SMALL]) == 0
    assert _digest(again) == _digest(gen_dir)
    other = tmp_path / "other"
    assert main(["gen", str(other), "--scene-n-queries", "8", "--scene-seed", "4"]) == 0
    assert _digest(other) != _digest(gen_dir)


def test_gen_unknown_key_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[scene]\nn_landmark = 3\n")
    assert main(["gen", str(tmp_path / "x"), "--config", str(p)]) == 2
    assert "scene.n_landmark" in capsys.readouterr().err


def test_bad_flag_exit_2(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["gen", str(tmp_path), "--scene-bogus", "1"])
    assert e.value.code == 2


def test_build_map_counts(built_map, capsys):
    from ocreloc.io import load_map

    assert len(load_map(built_map)) == 200


def test_build_map_fixture(tmp_path, capsys):
    assert main(["build-map", str(DATA / "sfm_small"), str(tmp_path / "m.ocmap")]) == 0
    assert "kept 5 landmarks, dropped 0" in capsys.readouterr().out


def test_build_map_missing_points_exit_3(tmp_path):
    d = tmp_path / "sfm"
    shutil.copytree(DATA / "sfm_small", d)
    (d / "points3D.txt").unlink()
    assert main(["build-map", str(d), str(tmp_path / "m.ocmap")]) == 3
    assert main(["build-map", str(DATA / "sfm_radial"), str(tmp_path / "m.ocmap")]) == 3


def test_localize_and_evaluate(gen_dir, built_map, tmp_path, capsys):
    out = tmp_path / "poses.txt"
    assert main(["localize", str(built_map), str(gen_dir / "queries"), str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 8 and not any("FAILED" in ln for ln in lines)
    assert [ln.split()[0] for ln in lines] == sorted(ln.split()[0] for ln in lines)
    recs = [json.loads(ln) for ln in (tmp_path / "poses.txt.jsonl").read_text().splitlines()]
    assert len(recs) == 8 and all(r["ok"] and r["rounds"] >= 1 for r in recs)
    capsys.readouterr()
    rep = tmp_path / "report"
    assert main(["evaluate", str(out), str(gen_dir / "gt_poses.txt"), "--report-dir", str(rep)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "100.0 / 100.0 / 100.0"
    for f in ("errors.tsv", "summary.json", "error_cdf.png"):
        assert (rep / f).stat().st_size > 0
    assert (rep / "error_cdf.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert main(["evaluate", str(out), str(gen_dir / "gt_poses.txt"), "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["accuracy"] == [100.0, 100.0, 100.0]
    # same seed, same bytes
    again = tmp_path / "again.txt"
    assert main(["localize", str(built_map), str(gen_dir / "queries"), str(again)]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_localize_failure_line(gen_dir, built_map, tmp_path):
    qdir = tmp_path / "q"
    shutil.copytree(gen_dir / "queries", qdir)
    rng = np.random.default_rng(0)
    n = 60
    desc = rng.normal(size=(n, 32))
    junk = ImageRecord(0, "junk.png", None, None, rng.uniform(10, 400, (n, 2)), desc / np.linalg.norm(desc, axis=1, keepdims=True),
                       rng.integers(1, 9, n), np.ones(n), np.ones(64))
    write_features(qdir / "junk.png.ocfeat", junk)
    with open(qdir / "list.txt", "a") as f:
        f.write("junk.png PINHOLE 640 480 500.0 500.0 320.0 240.0\n")
    out = tmp_path / "poses.txt"
    assert main(["localize", str(built_map), str(qdir), str(out)]) == 0
    assert "junk.png FAILED no_hypothesis" in out.read_text().splitlines()
    poses = read_poses(out)
    assert poses["junk.png"] is None and sum(p is not None for p in poses.values()) == 8


def test_localize_dimension_mismatch_exit_4(gen_dir, built_map, tmp_path):
    qdir = tmp_path / "q"
    qdir.mkdir()
    n = 40
    im = ImageRecord(0, "odd.png", None, None, np.full((n, 2), 50.0), np.ones((n, 16)), np.zeros(n), np.ones(n), np.ones(64))
    write_features(qdir / "odd.png.ocfeat", im)
    (qdir / "list.txt").write_text("odd.png PINHOLE 640 480 500 500 320 240\n")
    assert main(["localize", str(built_map), str(qdir), str(tmp_path / "p.txt")]) == 4


def test_localize_bad_map_exit_3(gen_dir, tmp_path):
    bad = tmp_path / "bad.ocmap"
    bad.write_bytes(b"not a map")
    assert main(["localize", str(bad), str(gen_dir / "queries"), str(tmp_path / "p.txt")]) == 3


def test_evaluate_known_errors_and_bad_line(tmp_path, capsys):
    gt = tmp_path / "gt.txt"
    gt.write_text("a 1 0 0 0 0 0 0\nb 1 0 0 0 0 0 0\nc 1 0 0 0 0 0 0\n")
    est = tmp_path / "est.txt"
    # camera centers 0.1 m, 0.4 m and 10 m away; rotations 1, 3 and 20 degrees about z
    rows = []
    for name, dt, deg in [("a", 0.1, 1), ("b", 0.4, 3), ("c", 10.0, 20)]:
        h = np.radians(deg) / 2
        q = (np.cos(h), 0.0, 0.0, np.sin(h))
        p = Pose.from_center(Pose(q, [0, 0, 0]).R, [dt, 0, 0])
        rows.append(f"{name} " + " ".join(repr(float(v)) for v in (*p.q, *p.t)))
    est.write_text("\n".join(rows) + "\n")
    assert main(["evaluate", str(est), str(gt)]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "33.3 / 66.7 / 66.7"
    est.write_text("a 1 0 0 0 0 0 0\nb 0.5 0 0 0 0 0 0\n")
    assert main(["evaluate", str(est), str(gt)]) == 5
    assert "est.txt:2:" in capsys.readouterr().err
    est.write_text("zzz 1 0 0 0 0 0 0\n")
    assert main(["evaluate", str(est), str(gt)]) == 5


def test_workers_byte_identical(gen_dir, built_map, tmp_path):
    one, three = tmp_path / "one.txt", tmp_path / "three.txt"
    assert main(["localize", str(built_map), str(gen_dir / "queries"), str(one)]) == 0
    assert main(["localize", str(built_map), str(gen_dir / "queries"), str(three), "--workers", "3"]) == 0
    assert one.read_bytes() == three.read_bytes()
    assert (tmp_path / "one.txt.jsonl").read_bytes() == (tmp_path / "three.txt.jsonl").read_bytes()
