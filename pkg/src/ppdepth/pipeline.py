"""Run-level operations behind the command line: dataset generation, encoder
pretraining, the training loop with checkpoints and resume, inference,
evaluation and point-cloud export."""
from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .checkpoint import pack_json, unpack_json
from .config import RunConfig
from .depth import DepthMap, relative_depth
from .dit import ConfigError, ModelConfig
from .flow import Batch, SamplerSchedule, TrainConfig, sample, train_step
from .io import FormatError, ManifestRow, read_manifest, read_pfm, read_pgm, write_manifest, write_pfm, write_pgm, \
    write_ply
from .metrics import CameraIntrinsics, MetricsReport, evaluate_pair, evaluate_run, unproject, write_report
from .model import CascadeDiT
from .optim import AdamWState
from .semantic import ToyEncoder, encoder_entries, encoder_from_entries, load_encoder, pretrain_encoder, save_encoder
from .synth import Dataset, generate, load_dataset, save_dataset, split

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
LOG_FIELDS = ("step", "loss", "velocity_loss", "grad_loss", "val_absrel", "val_delta1")


class TrainingAborted(RuntimeError):
    pass


# -- generate --------------------------------------------------------------------

def run_generate(cfg: RunConfig) -> dict[str, Path]:
    """Generate ``data.count`` scenes, split them and write one dataset dir per split."""
    ds = generate(cfg.scene, cfg.data.count)
    parts = split(ds, cfg.data.ratios, cfg.data.split_seed)
    root = Path(cfg.data.dir)
    root.mkdir(parents=True, exist_ok=True)
    out = {}
    for name, part in zip(SPLITS, parts):
        out[name] = save_dataset(part, root / name)
    cfg.save(root / "config.toml")
    log.info("wrote %s", ", ".join(f"{k}={len(p)}" for k, p in zip(SPLITS, parts)))
    return out


def _split_dir(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.data.dir) / name


def load_split(cfg: RunConfig, name: str) -> Dataset:
    return load_dataset(_split_dir(cfg, name))


# -- encoder pretraining -----------------------------------------------------------

def run_pretrain(cfg: RunConfig) -> tuple[ToyEncoder, list[float]]:
    if cfg.pretrain.scenes:
        spec = replace(cfg.scene, seed=cfg.pretrain.scene_seed)
        log.info("generating %d pretraining scenes (seed %d)", cfg.pretrain.scenes, spec.seed)
        train = generate(spec, cfg.pretrain.scenes)
    else:
        train = load_split(cfg, "train")
    enc, hist = pretrain_encoder(train.images(), train.normalized_depths(), cfg.encoder,
                                 steps=cfg.pretrain.steps, batch_size=cfg.pretrain.batch_size,
                                 lr=cfg.pretrain.lr, seed=cfg.seed)
    out = Path(cfg.pretrain.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_encoder(out, enc)
    with open(out.with_suffix(".loss.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("step", "loss"))
        w.writerows((i, repr(v)) for i, v in enumerate(hist))
    cfg.save(out.with_suffix(".config.toml"))
    return enc, hist


# -- checkpoints -----------------------------------------------------------------

def checkpoint_entries(model: CascadeDiT, opt: AdamWState, step: int, cfg: RunConfig,
                       encoder: Optional[ToyEncoder]) -> dict[str, np.ndarray]:
    e: dict[str, np.ndarray] = {}
    for k, v in model.state_dict().items():
        e["model/" + k] = v
    for k in sorted(opt.m):
        e["opt/m/" + k] = opt.m[k]
        e["opt/v/" + k] = opt.v[k]
    e["opt/step"] = np.asarray(opt.step, dtype=np.int64)
    e["meta/step"] = np.asarray(step, dtype=np.int64)
    e["meta/config"] = pack_json(cfg.to_dict())
    if encoder is not None:
        e.update(encoder_entries(encoder))
    return e


@dataclass
class LoadedCheckpoint:
    model: CascadeDiT
    encoder: Optional[ToyEncoder]
    opt: AdamWState
    step: int
    config: dict


def load_checkpoint(path: Union[str, Path]) -> LoadedCheckpoint:
    e = ckpt.load(path)
    if "meta/config" not in e:
        raise ckpt.CheckpointFormatError(f"{path}: not a training checkpoint (no meta/config)")
    conf = unpack_json(e["meta/config"])
    model = CascadeDiT(ModelConfig.from_dict(conf["model"]))
    model.load_state_dict({k[6:]: v for k, v in e.items() if k.startswith("model/")})
    opt = AdamWState(step=int(e["opt/step"]))
    for k, v in e.items():
        if k.startswith("opt/m/"):
            opt.m[k[6:]] = v
        elif k.startswith("opt/v/"):
            opt.v[k[6:]] = v
    return LoadedCheckpoint(model, encoder_from_entries(e), opt, int(e["meta/step"]), conf)


# -- training --------------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    history: list[dict] = field(default_factory=list)


def _read_log(path: Path, before: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return [r for r in csv.DictReader(f) if int(r["step"]) < before]


def _write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS)
        w.writeheader()
        w.writerows(rows)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def validate_model(model, encoder, images: np.ndarray, depths: np.ndarray, intrinsics: Sequence[CameraIntrinsics],
                   steps: int, seed: int, align: str = "log") -> tuple[float, float]:
    """Mean (AbsRel, delta1) of sampled predictions against metric GT."""
    sched = SamplerSchedule.uniform(steps)
    ab, d1 = [], []
    for i in range(len(images)):
        pred = sample(images[i], model, encoder, sched, np.random.default_rng([seed, 2, i]))
        r = evaluate_pair(relative_depth(pred[..., 0]), depths[i], intrinsics[i], align=align)
        ab.append(r.absrel)
        d1.append(r.delta1)
    return float(np.mean(ab)), float(np.mean(d1))


def build_encoder(cfg: RunConfig) -> Optional[ToyEncoder]:
    if not cfg.model.semantic:
        return None
    if not cfg.train.encoder:
        raise ConfigError("model.semantic is on but train.encoder names no pretrained encoder "
                          "(run pretrain-encoder first)")
    enc = load_encoder(cfg.train.encoder)
    if enc.cfg.dim != cfg.model.semantic_dim:
        raise ConfigError(f"encoder dim {enc.cfg.dim} != model.semantic_dim {cfg.model.semantic_dim}")
    return enc


def run_train(cfg: RunConfig, train: Optional[Dataset] = None, val: Optional[Dataset] = None) -> TrainResult:
    out = Path(cfg.train.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = load_split(cfg, "train") if train is None else train
    if cfg.train.val_every and val is None:
        val = load_split(cfg, "val")
    images = train.images()
    depths = train.normalized_depths()
    ids = train.ids
    n = len(train)
    if n < cfg.train.batch_size:
        raise ConfigError(f"batch_size {cfg.train.batch_size} exceeds training set size {n}")

    start = 0
    if cfg.train.resume:
        lc = load_checkpoint(cfg.train.resume)
        if lc.config.get("model") != cfg.model.to_dict():
            raise ConfigError("resume checkpoint was trained with a different model config")
        model, encoder, opt, start = lc.model, lc.encoder, lc.opt, lc.step
        if cfg.model.semantic and encoder is None:
            encoder = build_encoder(cfg)
    else:
        model = CascadeDiT(cfg.model)
        encoder = build_encoder(cfg)
        opt = AdamWState()
    cfg.save(out / "config.toml")
    params = dict(model.named_parameters())
    log_path = out / "loss.csv"
    rows = _read_log(log_path, start)
    tcfg: TrainConfig = cfg.optim
    last = out / "last.ppdt"

    def save(step: int) -> Path:
        p = out / f"ckpt_{step:06d}.ppdt"
        ckpt.save(p, checkpoint_entries(model, opt, step, cfg, encoder))
        shutil.copyfile(p, last)
        _write_log(log_path, rows)
        return p

    with ad.checked(cfg.train.checked):
        for step in range(start, cfg.train.steps):
            rng = np.random.default_rng([cfg.seed, 0, step])
            idx = np.sort(rng.choice(n, size=cfg.train.batch_size, replace=False))
            batch = Batch(images[idx], depths[idx], [ids[i] for i in idx])
            try:
                res = train_step(batch, model, encoder, opt, tcfg, rng, params)
                bad = not np.isfinite(res.loss)
                err = "non-finite loss" if bad else None
            except ad.NonFiniteError as e:
                bad, err, res = True, str(e), None
            if bad:
                dump = {"step": step, "batch_ids": list(batch.ids), "error": err,
                        "loss": None if res is None else repr(res.loss)}
                (out / "nan_dump.json").write_text(json.dumps(dump, indent=2) + "\n")
                _write_log(log_path, rows)
                raise TrainingAborted(f"step {step}: {err} on batch {list(batch.ids)} "
                                      f"(details in {out / 'nan_dump.json'})")
            row = {"step": step, "loss": _fmt(res.loss), "velocity_loss": _fmt(res.velocity_loss),
                   "grad_loss": _fmt(res.grad_loss), "val_absrel": "", "val_delta1": ""}
            done = step + 1
            if cfg.train.val_every and done % cfg.train.val_every == 0:
                k = min(cfg.train.val_count, len(val))
                ab, d1 = validate_model(model, encoder, val.images()[:k], val.depths()[:k],
                                        [s.intrinsics for s in val.samples[:k]], cfg.sampler.steps, cfg.seed,
                                        cfg.eval.align)
                row["val_absrel"], row["val_delta1"] = _fmt(ab), _fmt(d1)
            rows.append(row)
            if done % cfg.train.log_every == 0:
                log.info("step %d loss %.5f (v %.5f, g %.5f)", done, res.loss, res.velocity_loss, res.grad_loss)
            if done % cfg.train.checkpoint_every == 0:
                save(done)
    final = save(max(cfg.train.steps, start))
    return TrainResult(out, final, rows)


# -- inference -------------------------------------------------------------------

@dataclass
class InferResult:
    outputs: list[Path] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)


def _depth_vis(rel: np.ndarray) -> np.ndarray:
    inv = 1.0 / np.maximum(rel, 1e-6)
    lo, hi = inv.min(), inv.max()
    return (inv - lo) / (hi - lo) if hi > lo else np.zeros_like(inv)


def predict(model, encoder, image: np.ndarray, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Normalised depth [H, W] for one [H, W] or [H, W, 1] image."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    cp = model.cfg.input_patch
    h, w = img.shape[:2]
    if h % cp or w % cp:
        raise ValueError(f"image {h}x{w} not divisible by patch size {cp}")
    return sample(img, model, encoder, SamplerSchedule.uniform(steps), rng)[..., 0]


def run_infer(checkpoint: Union[str, Path], inputs: Sequence[Union[str, Path]], out_dir: Union[str, Path],
              seed: int = 0, steps: int = 4, vis: bool = False, raw: bool = False,
              names: Optional[Sequence[str]] = None) -> InferResult:
    """One PFM per input image: positive relative depth (or raw normalised output with ``raw``)."""
    lc = load_checkpoint(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = InferResult()
    for i, path in enumerate(inputs):
        name = names[i] if names else Path(path).stem
        try:
            img = read_pgm(path)
            pred = predict(lc.model, lc.encoder, img, steps, np.random.default_rng([seed, i]))
        except (FormatError, ValueError) as e:
            log.error("%s: %s", path, e)
            res.errors.append((str(path), str(e)))
            continue
        depth = pred if raw else relative_depth(pred)
        p = out / f"{name}.pfm"
        write_pfm(p, depth)
        if vis:
            write_pgm(out / f"{name}.vis.pgm", _depth_vis(relative_depth(pred)), maxval=255)
        res.outputs.append(p)
    return res


def run_infer_manifest(checkpoint, manifest, out_dir, seed: int = 0, steps: int = 4,
                       vis: bool = False) -> tuple[InferResult, Path]:
    """Predict every image of a dataset manifest; also write an eval manifest."""
    rows = read_manifest(manifest, kind="dataset")
    res = run_infer(checkpoint, [r.paths[0] for r in rows], out_dir, seed, steps, vis,
                    names=[r.id for r in rows])
    out = Path(out_dir)
    done = {p.stem for p in res.outputs}
    eval_rows = [ManifestRow(r.id, (f"{r.id}.pfm", str(Path(r.paths[1]).resolve())), r.fx, r.fy, r.cx, r.cy)
                 for r in rows if r.id in done]
    em = out / "eval_manifest.csv"
    write_manifest(em, eval_rows, kind="eval")
    return res, em


# -- evaluation ------------------------------------------------------------------

def run_eval(manifest, out_prefix, pred_dir=None, gt_dir=None, align: str = "log") -> MetricsReport:
    report = evaluate_run(pred_dir, gt_dir, manifest, align=align)
    write_report(report, out_prefix)
    return report


def ablation_table(reports: dict[str, Union[str, Path]], out: Union[str, Path]) -> str:
    """Side-by-side table of aggregate metrics from several report JSON files."""
    lines = ["| run | AbsRel | delta1 | chamfer_edge | images |", "|---|---|---|---|---|"]
    rows = []
    for label, path in reports.items():
        agg = json.loads(Path(path).read_text())["aggregate"]
        rows.append((label, agg))
        lines.append(f"| {label} | {agg['absrel']:.4f} | {agg['delta1']:.4f} | "
                     f"{agg['chamfer_edge']:.4f} | {agg['n_images']} |")
    text = "\n".join(lines) + "\n"
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    with open(out.with_suffix(".csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("run", "absrel", "delta1", "chamfer_edge", "n_images"))
        for label, agg in rows:
            w.writerow((label, repr(agg["absrel"]), repr(agg["delta1"]), repr(agg["chamfer_edge"]), agg["n_images"]))
    return text


# -- point clouds ----------------------------------------------------------------

def run_export_ply(depth_path, out_path, K: Optional[CameraIntrinsics] = None, image_path=None) -> int:
    depth = read_pfm(depth_path)
    d = DepthMap.from_metric(depth.astype(np.float64))
    K = CameraIntrinsics.default(*depth.shape) if K is None else K
    pc = unproject(d, K)
    intensity = None
    if image_path is not None:
        img = read_pgm(image_path)
        if img.shape != depth.shape:
            raise ValueError(f"image {img.shape} and depth {depth.shape} differ in size")
        intensity = img[d.valid]
    write_ply(out_path, pc.points, intensity)
    return len(pc)
