import csv
import json
import time

import numpy as np
import pytest

from ppdepth import checkpoint as ckpt
from ppdepth import config as config_mod
from ppdepth.cli import UsageError, main, thread_limit
from ppdepth.config import RunConfig
from ppdepth.depth import DepthMap
from ppdepth.dit import ConfigError, ModelConfig
from ppdepth.io import ManifestRow, read_manifest, read_pfm, read_ply, write_manifest, write_pfm
from ppdepth.metrics import CameraIntrinsics, unproject
from ppdepth.model import CascadeDiT
from ppdepth.pipeline import load_checkpoint, predict
from ppdepth.semantic import load_encoder

TINY = ["model.n_blocks=2", "model.hidden_dim=16", "model.n_heads=2", "model.time_freq_dim=16"]


def _sets(items):
    out = []
    for s in items:
        out += ["--set", s]
    return out


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["generate", "--out", str(d), "--count", "12"]) == 0
    return d


def train_args(data_dir, out, steps=3, extra=()):
    return (["train", "--data", str(data_dir), "--out", str(out), "--steps", str(steps), "--ablation", "vanilla"]
            + _sets(TINY + list(extra)))


# -- config ------------------------------------------------------------------------

def test_defaults():
    cfg = RunConfig()
    assert cfg.train.batch_size == 4 and cfg.sampler.steps == 4 and cfg.data.count == 640
    assert cfg.optim.lambda_g == 0.5 and cfg.data.ratios == [0.8, 0.1, 0.1]


def test_roundtrip_through_toml(tmp_path):
    cfg = config_mod.load(None, ["seed=7", "model.hidden_dim=64", "data.dir=somewhere"])
    cfg.save(tmp_path / "c.toml")
    back = config_mod.load(tmp_path / "c.toml")
    assert back.to_dict() == cfg.to_dict()
    assert back.seed == 7 and back.model.hidden_dim == 64 and back.data.dir == "somewhere"


def test_override_beats_file(tmp_path):
    (tmp_path / "c.toml").write_text("seed = 3\n[train]\nsteps = 10\n")
    cfg = config_mod.load(tmp_path / "c.toml", ["train.steps=20"])
    assert cfg.seed == 3 and cfg.train.steps == 20


@pytest.mark.parametrize("text", ["bogus = 1\n", "[model]\nwidth = 3\n", "[train]\nsteps = 'many'\n",
                                  "[data]\nratios = [0.5, 0.6, 0.1]\n", "[model]\nhidden_dim = 30\n",
                                  "model = 3\n", "not toml [\n"])
def test_bad_config_rejected(tmp_path, text):
    (tmp_path / "c.toml").write_text(text)
    with pytest.raises(ConfigError):
        config_mod.load(tmp_path / "c.toml")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="nope.toml"):
        config_mod.load(tmp_path / "nope.toml")


def test_thread_limit(monkeypatch):
    monkeypatch.delenv("PPD_THREADS", raising=False)
    assert thread_limit() is None and thread_limit(3) == 3 and thread_limit(3, strict=True) == 1
    monkeypatch.setenv("PPD_THREADS", "2")
    assert thread_limit() == 2 and thread_limit(3) == 2 and thread_limit(1) == 1
    for bad in ("zero", "0"):
        monkeypatch.setenv("PPD_THREADS", bad)
        with pytest.raises(UsageError):
            thread_limit()


# -- exit codes --------------------------------------------------------------------

def test_usage_errors_exit_2(tmp_path, monkeypatch):
    assert main([]) == 2
    assert main(["generate", "--bogus"]) == 2
    assert main(["generate", "--out", str(tmp_path / "d"), "--set", "data.ratios=[0.5,0.6,0.1]"]) == 2
    assert main(["generate", "--out", str(tmp_path / "d"), "--set", "nosuch.key=1"]) == 2
    assert main(["generate", "-c", str(tmp_path / "missing.toml")]) == 2
    (tmp_path / "c.toml").write_text("[scene]\ncolour = 2\n")
    assert main(["generate", "-c", str(tmp_path / "c.toml")]) == 2
    assert main(["eval"]) == 2
    monkeypatch.setenv("PPD_THREADS", "-1")
    assert main(["eval", "--compare", "a=b.json"]) == 2
    assert not (tmp_path / "d").exists()


def test_runtime_errors_exit_1(tmp_path):
    assert main(["export-ply", str(tmp_path / "none.pfm"), "--out", str(tmp_path / "x.ply")]) == 1
    (tmp_path / "junk.ppdt").write_bytes(b"junk")
    assert main(["infer", "--checkpoint", str(tmp_path / "junk.ppdt"), "--out", str(tmp_path / "o"), "a.pgm"]) == 1


# -- generate ----------------------------------------------------------------------

def test_generate_layout_and_archive(data_dir):
    sizes = {name: len(read_manifest(data_dir / name / "manifest.csv")) for name in ("train", "val", "test")}
    assert sum(sizes.values()) == 12 and sizes["train"] >= 8
    archived = config_mod.load(data_dir / "config.toml")
    assert archived.data.count == 12 and archived.data.dir == str(data_dir)


def test_generate_creates_nested_dir_and_is_deterministic(tmp_path, data_dir):
    out = tmp_path / "a" / "b" / "c"
    assert main(["generate", "--out", str(out), "--count", "12"]) == 0
    for name in ("train", "val", "test"):
        a = (data_dir / name / "manifest.csv").read_text()
        assert a == (out / name / "manifest.csv").read_text()
    sid = read_manifest(out / "train" / "manifest.csv")[0].id
    assert (out / "train" / "depths" / f"{sid}.pfm").read_bytes() == \
        (data_dir / "train" / "depths" / f"{sid}.pfm").read_bytes()


def test_generate_default_count_under_a_minute(tmp_path):
    t = time.perf_counter()
    assert main(["generate", "--out", str(tmp_path / "d")]) == 0
    elapsed = time.perf_counter() - t
    n = sum(len(read_manifest(tmp_path / "d" / s / "manifest.csv")) for s in ("train", "val", "test"))
    assert n == 640
    assert elapsed < 60, elapsed


# -- pretrain-encoder --------------------------------------------------------------

TINY_ENC = ["encoder.dim=16", "encoder.n_blocks=1", "encoder.n_heads=2", "pretrain.batch_size=2"]


def _set(args):
    return [a for kv in args for a in ("--set", kv)]


def test_pretrain_encoder_fresh_corpus(tmp_path):
    out = tmp_path / "enc" / "e.ppdt"
    assert main(["pretrain-encoder", "--out", str(out), "--steps", "3"] + _set(TINY_ENC + ["pretrain.scenes=6"])) == 0
    enc = load_encoder(out)
    assert enc.cfg.dim == 16 and all(not p.requires_grad for p in enc.parameters())
    assert len(_log(out.with_suffix(".loss.csv"))) == 3
    assert config_mod.load(out.with_suffix(".config.toml")).pretrain.scenes == 6


def test_pretrain_encoder_on_training_split(tmp_path, data_dir):
    out = tmp_path / "e.ppdt"
    assert main(["pretrain-encoder", "--data", str(data_dir), "--out", str(out), "--steps", "2"]
                + _set(TINY_ENC + ["pretrain.scenes=0"])) == 0
    assert len(_log(out.with_suffix(".loss.csv"))) == 2


def test_pretrain_encoder_rejects_shared_seed(tmp_path):
    code = main(["pretrain-encoder", "--out", str(tmp_path / "e.ppdt"), "--steps", "1"]
                + _set(TINY_ENC + ["pretrain.scenes=2", "pretrain.scene_seed=0"]))
    assert code == 2


# -- train -------------------------------------------------------------------------

def _log(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_train_writes_run_dir(tmp_path, data_dir):
    out = tmp_path / "run"
    assert main(train_args(data_dir, out, steps=3)) == 0
    assert (out / "last.ppdt").exists() and (out / "ckpt_000003.ppdt").exists()
    rows = _log(out / "loss.csv")
    assert [int(r["step"]) for r in rows] == [0, 1, 2]
    assert all(np.isfinite(float(r["loss"])) for r in rows)
    archived = config_mod.load(out / "config.toml")
    assert archived.train.steps == 3 and archived.model.hidden_dim == 16 and not archived.model.semantic
    lc = load_checkpoint(out / "last.ppdt")
    assert lc.step == 3 and lc.opt.step == 3 and lc.config == archived.to_dict()


def test_train_semantic_without_encoder_exits_2(tmp_path, data_dir):
    args = train_args(data_dir, tmp_path / "r")
    args[args.index("vanilla")] = "sp"
    assert main(args) == 2


def test_resume_reproduces_uninterrupted_run(tmp_path, data_dir):
    full, part = tmp_path / "full", tmp_path / "part"
    assert main(train_args(data_dir, full, 4, ["train.checkpoint_every=2"])) == 0
    assert main(train_args(data_dir, part, 2)) == 0
    assert main(train_args(data_dir, part, 4, [f"train.resume='{part / 'last.ppdt'}'"])) == 0
    a, b = _log(full / "loss.csv"), _log(part / "loss.csv")
    assert a == b  # includes the first loss after the resume point, compared as exact repr strings
    ea, eb = ckpt.load(full / "last.ppdt"), ckpt.load(part / "last.ppdt")
    for k in ea:
        if k.startswith(("model/", "opt/")):
            assert ea[k].tobytes() == eb[k].tobytes(), k


def test_resume_with_other_model_rejected(tmp_path, data_dir):
    out = tmp_path / "r"
    assert main(train_args(data_dir, out, 1)) == 0
    args = train_args(data_dir, tmp_path / "r2", 2, [f"train.resume='{out / 'last.ppdt'}'", "model.hidden_dim=32"])
    assert main(args) == 2


def test_strict_runs_bitwise_identical(tmp_path, data_dir):
    out = tmp_path / "run"
    assert main(train_args(data_dir, out, 3) + ["--strict", "--seed", "5"]) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    out.rename(tmp_path / "first")
    assert main(train_args(data_dir, out, 3) + ["--strict", "--seed", "5"]) == 0
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second


# -- infer / eval / export ---------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("trained") / "run"
    assert main(train_args(data_dir, out, 3)) == 0
    return out / "last.ppdt"


def test_infer_deterministic_given_seed(tmp_path, data_dir, trained):
    rows = read_manifest(data_dir / "test" / "manifest.csv")
    imgs = [r.paths[0] for r in rows]
    for name, seed in (("a", 1), ("b", 1), ("c", 2)):
        assert main(["infer", "--checkpoint", str(trained), "--out", str(tmp_path / name),
                     "--seed", str(seed), "--vis"] + imgs) == 0
    stem = rows[0].id
    a, b, c = (read_pfm(tmp_path / n / f"{stem}.pfm") for n in "abc")
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()
    assert a.shape == (64, 64) and np.all(np.isfinite(a))
    assert (tmp_path / "a" / f"{stem}.vis.pgm").exists()


def test_infer_missing_image_exits_1_keeps_others(tmp_path, data_dir, trained):
    good = read_manifest(data_dir / "test" / "manifest.csv")[0]
    code = main(["infer", "--checkpoint", str(trained), "--out", str(tmp_path / "o"),
                 str(tmp_path / "absent.pgm"), good.paths[0]])
    assert code == 1
    assert (tmp_path / "o" / f"{good.id}.pfm").exists()


def test_infer_manifest_then_eval(tmp_path, data_dir, trained):
    out = tmp_path / "pred"
    assert main(["infer", "--checkpoint", str(trained), "--out", str(out),
                 "--manifest", str(data_dir / "test" / "manifest.csv")]) == 0
    assert main(["eval", str(out / "eval_manifest.csv"), "--out", str(tmp_path / "rep")]) == 0
    doc = json.loads((tmp_path / "rep.json").read_text())
    n_test = len(read_manifest(data_dir / "test" / "manifest.csv"))
    assert doc["aggregate"]["n_images"] == n_test and doc["missing"] == []


def test_infer_time_64(rng):
    """Default-size model, 4 sampler steps, one 64x64 image."""
    model = CascadeDiT(ModelConfig(semantic=False))
    img = rng.uniform(size=(64, 64, 1))
    predict(model, None, img, 4, np.random.default_rng(0))  # warm up
    t = time.perf_counter()
    predict(model, None, img, 4, np.random.default_rng(0))
    assert time.perf_counter() - t < 1.0


def _gt_manifest(data_dir, path):
    rows = read_manifest(data_dir / "test" / "manifest.csv")
    write_manifest(path, [ManifestRow(r.id, (r.paths[1], r.paths[1]), r.fx, r.fy, r.cx, r.cy) for r in rows],
                   kind="eval")
    return len(rows)


@pytest.mark.parametrize("align", ["log", "metric", "none"])
def test_eval_gt_as_prediction(tmp_path, data_dir, align):
    n = _gt_manifest(data_dir, tmp_path / "m.csv")
    assert main(["eval", str(tmp_path / "m.csv"), "--out", str(tmp_path / "rep"), "--align", align]) == 0
    agg = json.loads((tmp_path / "rep.json").read_text())["aggregate"]
    assert agg["n_images"] == n
    assert agg["absrel"] < 1e-9 and agg["delta1"] == 1.0 and agg["chamfer_edge"] < 1e-9


def test_eval_missing_prediction_exits_1(tmp_path, data_dir):
    rows = read_manifest(data_dir / "test" / "manifest.csv")
    r = rows[0]
    write_manifest(tmp_path / "m.csv", [ManifestRow(r.id, (r.paths[1], r.paths[1]), r.fx, r.fy, r.cx, r.cy),
                                        ManifestRow("x", ("gone.pfm", r.paths[1]), r.fx, r.fy, r.cx, r.cy)],
                   kind="eval")
    assert main(["eval", str(tmp_path / "m.csv"), "--out", str(tmp_path / "rep")]) == 1
    doc = json.loads((tmp_path / "rep.json").read_text())
    assert doc["missing"] == ["x"] and doc["aggregate"]["n_images"] == 1


def test_eval_compare_table(tmp_path, data_dir, capsys):
    _gt_manifest(data_dir, tmp_path / "m.csv")
    main(["eval", str(tmp_path / "m.csv"), "--out", str(tmp_path / "a")])
    main(["eval", str(tmp_path / "m.csv"), "--out", str(tmp_path / "b"), "--align", "metric"])
    capsys.readouterr()
    assert main(["eval", "--compare", f"log={tmp_path / 'a.json'}", f"metric={tmp_path / 'b.json'}",
                 "--out", str(tmp_path / "table")]) == 0
    text = capsys.readouterr().out
    lines = text.splitlines()
    assert lines[0] == "| run | AbsRel | delta1 | chamfer_edge | images |"
    assert lines[2].startswith("| log | 0.0000 | 1.0000 | 0.0000 |") and lines[3].startswith("| metric |")
    assert (tmp_path / "table.md").read_text() == text
    assert (tmp_path / "table.csv").exists()
    assert main(["eval", "--compare", "no-equals-sign"]) == 2


def test_export_ply_matches_unproject(tmp_path, rng):
    d = rng.uniform(1, 20, size=(12, 16)).astype(np.float32)
    d[rng.random(d.shape) < 0.25] = 0.0
    write_pfm(tmp_path / "d.pfm", d)
    K = CameraIntrinsics(20.0, 21.0, 7.5, 5.5)
    assert main(["export-ply", str(tmp_path / "d.pfm"), "--out", str(tmp_path / "c.ply"),
                 "--intrinsics", "20", "21", "7.5", "5.5"]) == 0
    pts, inten = read_ply(tmp_path / "c.ply")
    ref = unproject(DepthMap.from_metric(d.astype(np.float64)), K).points
    assert len(pts) == int((d > 0).sum()) and inten is None
    assert pts.tobytes() == ref.tobytes()
    text = (tmp_path / "c.ply").read_text()
    assert text.startswith(f"ply\nformat ascii 1.0\ncomment ppdepth point cloud\nelement vertex {len(pts)}\n"
                           "property double x\nproperty double y\nproperty double z\nend_header\n")


def test_export_ply_with_image(tmp_path, data_dir):
    r = read_manifest(data_dir / "test" / "manifest.csv")[0]
    assert main(["export-ply", r.paths[1], "--out", str(tmp_path / "c.ply"), "--image", r.paths[0]]) == 0
    pts, inten = read_ply(tmp_path / "c.ply")
    assert len(pts) == 64 * 64 and inten is not None and len(inten) == len(pts)
