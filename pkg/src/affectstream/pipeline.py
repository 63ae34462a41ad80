"""Pipeline stages operating on one run directory.

Layout under ``out``::

    manifest.json            run manifest (config, artifacts, timings, version)
    split.json               train/test clip ids
    data/                    dataset (unless ``data.root`` points elsewhere)
    cache/<clip_id>/         face/eyes/mouth crops, keyframes.json, heatmaps/, *_flow/
    selector/                selector.pt, loss.csv, batches.jsonl
    model/                   best.pt, state.pt, loss.csv, epochs.csv, batches.jsonl
    eval/                    report.json, report.txt, plots/

Every stage is idempotent: re-running it without ``force`` when its inputs and
settings are unchanged writes nothing.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
import subprocess
import time
from dataclasses import asdict
from pathlib import Path

import cv2
import numpy as np
import torch
from matplotlib.figure import Figure

from . import __version__
from .config import RunConfig
from .dataset import DatasetIndex, SplitSpec, load_dataset, make_split, normalize_label
from .flow import has_flow, load_flow, write_flow_cache
from .keyframes import (
    classes_of,
    load_selector,
    read_manifest,
    render_heatmap,
    save_selector,
    select_keyframes,
    train_selector,
    write_manifest,
)
from .metrics import MetricReport, build_report, ccc_loss
from .model import (
    AffectNet,
    init_params,
    load_checkpoint,
    predict_clip,
    save_checkpoint,
    to_input,
    training_step,
)
from .preprocess import ClaheConfig, clip_cache_dir, is_preprocessed, load_region, preprocess_clip
from .synthetic import generate_synthetic_dataset
from .temporal import sampling_rows_csv

log = logging.getLogger(__name__)

SYNTH_MARKER = "synth.json"
KEYFRAME_FILE = "keyframes.json"
HEATMAP_DIR = "heatmaps"


class StageError(RuntimeError):
    pass


class HygieneError(RuntimeError):
    pass


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def version_string() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.TimeoutExpired):
        pass
    return __version__


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None


class Run:
    def __init__(self, cfg: RunConfig, out, force: bool = False):
        self.cfg = cfg
        self.out = Path(out)
        self.force = force
        self.data_root = self._resolve(cfg.data.root)
        self.cache = self._resolve(cfg.data.cache)
        self.split_path = self.out / "split.json"
        self.selector_dir = self.out / "selector"
        self.model_dir = self.out / "model"
        self.eval_dir = self.out / "eval"
        self.manifest_path = self.out / "manifest.json"
        self._index: DatasetIndex | None = None

    def _resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.out / path

    def rel(self, path: Path) -> str:
        try:
            return str(Path(path).relative_to(self.out))
        except ValueError:
            return str(path)

    # --- manifest -------------------------------------------------------

    def record(self, stage: str, seconds: float, artifacts) -> None:
        manifest = _read_json(self.manifest_path) or {"artifacts": {}, "timings": {}}
        manifest["version"] = version_string()
        manifest["config"] = self.cfg.to_dict()
        manifest["artifacts"][stage] = sorted(self.rel(a) for a in artifacts)
        manifest["timings"][stage] = round(seconds, 3)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))

    # --- shared inputs --------------------------------------------------

    def index(self) -> DatasetIndex:
        if self._index is None:
            self._index = load_dataset(self.data_root)
        return self._index

    def split(self) -> SplitSpec:
        if not self.split_path.is_file():
            raise StageError(f"missing {self.split_path}; run preprocess first")
        return SplitSpec.from_json(self.split_path.read_text())

    def keyframes(self, clip_id: str) -> list[int]:
        path = clip_cache_dir(self.cache, clip_id) / KEYFRAME_FILE
        if not path.is_file():
            raise StageError(f"{clip_id}: missing key-frame manifest {path}; run keyframes first")
        return read_manifest(path)["selected"]

    def clip_arrays(self, clip_id: str):
        """Face crops, eye flow, mouth flow (``K x 96 x 96 x 3`` uint8) and ``K x 2`` normalized labels."""
        selected = self.keyframes(clip_id)
        if not has_flow(self.cache, clip_id, selected, self.cfg.flow):
            raise StageError(f"{clip_id}: missing or stale flow cache; run flow first")
        k = len(selected)
        face = load_region(self.cache, clip_id, "face", selected)
        eyes = load_flow(self.cache, clip_id, "eyes", k)
        mouth = load_flow(self.cache, clip_id, "mouth", k)
        labels = normalize_label(self.index()[clip_id].labels()[selected]).astype(np.float32)
        return face, eyes, mouth, labels


# --- stages -----------------------------------------------------------------


def cmd_synth(run: Run) -> dict:
    d = run.cfg.data
    params = {"n_clips": d.n_clips, "frames_range": list(d.frames_range), "fps": d.fps, "seed": run.cfg.seed}
    marker = run.data_root / SYNTH_MARKER
    t0 = time.perf_counter()
    if not run.force and _read_json(marker) == params:
        log.info("dataset at %s is up to date", run.data_root)
        written = False
    else:
        if marker.is_file():
            shutil.rmtree(run.data_root)
        generate_synthetic_dataset(d.n_clips, d.frames_range, run.cfg.seed, run.data_root, fps=d.fps)
        marker.write_text(json.dumps(params))
        written = True
    index = run.index()
    summary = {"clips": len(index), "frames": sum(len(c) for c in index.clips), "written": written}
    print(f"synth: {summary['clips']} clips, {summary['frames']} frames at {run.data_root}"
          + ("" if written else " (unchanged)"))
    if written:
        run.record("synth", time.perf_counter() - t0, [marker] + [run.data_root / c for c in index.clip_ids])
    return summary


def _write_if_changed(path: Path, text: str) -> bool:
    if path.is_file() and path.read_text() == text:
        return False
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return True


def cmd_preprocess(run: Run) -> dict:
    t0 = time.perf_counter()
    index = run.index()
    p = run.cfg.preprocess
    clahe = ClaheConfig(p.clip_limit, p.tile_grid)
    written, failures = [], {}
    for clip in index.clips:
        try:
            if preprocess_clip(clip, run.cache, clahe, p.face_margin, force=run.force):
                written.append(clip.clip_id)
        except Exception as e:  # reported per clip below
            failures[clip.clip_id] = f"{type(e).__name__}: {e}"
    split = make_split(index, run.cfg.split.test_fraction, run.cfg.seed, run.cfg.split.max_passes)
    split_written = _write_if_changed(run.split_path, split.to_json())
    print(f"preprocess: {len(written)} clips written, {len(index) - len(written) - len(failures)} up to date, "
          f"{len(failures)} failed; split {len(split.train_ids)} train / {len(split.test_ids)} test "
          f"(chi-square {split.histogram_distance:.4f})")
    if written or split_written:
        arts = [clip_cache_dir(run.cache, c) for c in written] + [run.split_path]
        run.record("preprocess", time.perf_counter() - t0, arts)
    if failures:
        raise StageError("preprocessing failed:\n  " + "\n  ".join(f"{k}: {v}" for k, v in failures.items()))
    return {"written": written, "split_written": split_written}


def _selector_stamp(run: Run, split: SplitSpec) -> str:
    return digest({"selector": asdict(run.cfg.selector), "seed": run.cfg.seed, "train": split.train_ids,
                   "preprocess": asdict(run.cfg.preprocess)})


def _full_faces(run: Run, clip) -> np.ndarray:
    return load_region(run.cache, clip.clip_id, "face", range(len(clip)))


def audit_batches(log_path: Path, forbidden) -> int:
    """Raise :class:`HygieneError` if any logged batch holds a forbidden clip id; returns batches checked."""
    forbidden = set(forbidden)
    n = 0
    if not log_path.is_file():
        return 0
    for line in log_path.read_text().splitlines():
        ids = json.loads(line)["ids"]
        leaked = forbidden.intersection(ids)
        if leaked:
            raise HygieneError(f"{log_path}: held-out clips {sorted(leaked)} appear in a training batch")
        n += 1
    return n


def cmd_keyframes(run: Run) -> dict:
    t0 = time.perf_counter()
    split = run.split()
    index = run.index()
    missing = [c for c in index.clip_ids if not is_preprocessed(run.cache, c)]
    if missing:
        raise StageError(f"missing preprocessing cache for {len(missing)} clip(s), e.g. {missing[0]}; "
                         "run preprocess first")
    run.selector_dir.mkdir(parents=True, exist_ok=True)
    ckpt = run.selector_dir / "selector.pt"
    info_path = run.selector_dir / "selector.json"
    batch_log = run.selector_dir / "batches.jsonl"
    stamp = _selector_stamp(run, split)
    manifests = {c: clip_cache_dir(run.cache, c) / KEYFRAME_FILE for c in index.clip_ids}
    info = _read_json(info_path) or {}
    if (not run.force and info.get("stamp") == stamp and ckpt.is_file()
            and all(p.is_file() for p in manifests.values())):
        audit_batches(batch_log, split.test_ids)
        print(f"keyframes: selector and {len(manifests)} manifests up to date")
        return {"trained": False}

    by_id = {c.clip_id: c for c in index.clips}
    train = [(cid, _full_faces(run, by_id[cid]), classes_of(by_id[cid].labels())) for cid in split.train_ids]
    with batch_log.open("w") as fh:
        def on_batch(step, ids):
            fh.write(json.dumps({"step": step, "ids": ids}) + "\n")
        net, trace = train_selector(train, run.cfg.selector, seed=run.cfg.seed, on_batch=on_batch)
    audit_batches(batch_log, split.test_ids)
    with (run.selector_dir / "loss.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows([i, f"{v:.8g}"] for i, v in enumerate(trace))
    save_selector(net, ckpt, run.cfg.seed)

    arts = [ckpt, info_path, batch_log, run.selector_dir / "loss.csv"]
    for clip in index.clips:
        faces = _full_faces(run, clip)
        imp, weights = select_keyframes(faces, net, run.cfg.selector.k)
        write_manifest(manifests[clip.clip_id], clip.clip_id, imp)
        heat_dir = clip_cache_dir(run.cache, clip.clip_id) / HEATMAP_DIR
        if heat_dir.exists():
            shutil.rmtree(heat_dir)
        heat_dir.mkdir()
        for i in sorted(set(imp.selected)):
            overlay = render_heatmap(faces[i], weights[i])
            cv2.imwrite(str(heat_dir / f"frame_{i:05d}.png"), cv2.cvtColor(overlay, cv2.COLOR_RGB2BGR))
        arts += [manifests[clip.clip_id], heat_dir]
    info_path.write_text(json.dumps({"stamp": stamp, "steps": len(trace), "final_loss": trace[-1]}))
    print(f"keyframes: selector trained for {len(trace)} steps (final loss {trace[-1]:.4f}); "
          f"{len(manifests)} manifests written")
    run.record("keyframes", time.perf_counter() - t0, arts)
    return {"trained": True, "trace": trace}


def cmd_flow(run: Run) -> dict:
    t0 = time.perf_counter()
    index = run.index()
    written = []
    for cid in index.clip_ids:
        selected = run.keyframes(cid)
        if not run.force and has_flow(run.cache, cid, selected, run.cfg.flow):
            continue
        crops = {r: load_region(run.cache, cid, r, selected) for r in ("eyes", "mouth")}
        write_flow_cache(run.cache, cid, selected, crops, run.cfg.flow)
        written.append(cid)
    print(f"flow: {len(written)} clips written, {len(index) - len(written)} up to date")
    if written:
        arts = []
        for cid in written:
            base = clip_cache_dir(run.cache, cid)
            arts += [base / "flow.json", base / "eyes_flow", base / "mouth_flow"]
        run.record("flow", time.perf_counter() - t0, arts)
    return {"written": written}


# --- training ---------------------------------------------------------------


def validation_split(train_ids, fraction: float, seed: int) -> tuple[list[str], list[str]]:
    ids = sorted(train_ids)
    n_val = int(round(fraction * len(ids)))
    if fraction > 0 and len(ids) >= 2:
        n_val = min(max(n_val, 1), len(ids) - 1)
    perm = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in perm[:n_val])
    fit = sorted(ids[i] for i in perm[n_val:])
    return fit, val


def _batch(arrays, ids) -> dict:
    face, eyes, mouth, labels = zip(*(arrays[c] for c in ids))
    return {"face": to_input(np.stack(face)), "eyes": to_input(np.stack(eyes)),
            "mouth": to_input(np.stack(mouth)), "labels": torch.as_tensor(np.stack(labels))}


@torch.no_grad()
def _predict(model: AffectNet, arrays, ids, chunk: int = 16) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(ids), chunk):
        b = _batch(arrays, ids[i:i + chunk])
        out.append(model(b["face"], b["eyes"], b["mouth"]).double().numpy())
    return np.concatenate(out)


def make_scheduler(opt: torch.optim.Optimizer, o) -> torch.optim.lr_scheduler.ReduceLROnPlateau:
    return torch.optim.lr_scheduler.ReduceLROnPlateau(opt, mode="min", factor=o.scheduler_factor,
                                                      patience=o.scheduler_patience)


def _truncate_lines(path: Path, keep: int) -> None:
    if path.is_file():
        lines = path.read_text().splitlines(keepends=True)
        path.write_text("".join(lines[:keep]))


def _train_stamp(run: Run, split: SplitSpec) -> str:
    sel = {c: run.keyframes(c) for c in split.train_ids}
    return digest({"model": asdict(run.cfg.model), "optim": asdict(run.cfg.optim), "seed": run.cfg.seed,
                   "train": split.train_ids, "keyframes": sel, "flow": asdict(run.cfg.flow),
                   "selector": _selector_stamp(run, split)})


def cmd_train(run: Run, stop_after: int | None = None) -> dict:
    """Train on the train split, checkpointing the best epoch by validation loss.

    ``stop_after`` ends the run after that many epochs in this invocation; a
    later call resumes from ``model/state.pt`` and continues exactly as an
    uninterrupted run would.
    """
    t0 = time.perf_counter()
    cfg, o = run.cfg, run.cfg.optim
    split = run.split()
    md = run.model_dir
    info_path, state_path, best_path = md / "train.json", md / "state.pt", md / "best.pt"
    loss_csv, epoch_csv, batch_log = md / "loss.csv", md / "epochs.csv", md / "batches.jsonl"
    stamp = _train_stamp(run, split)
    info = _read_json(info_path) or {}
    if not run.force and info.get("stamp") == stamp and info.get("complete") and best_path.is_file():
        audit_batches(batch_log, split.test_ids)
        print(f"train: checkpoint up to date (best epoch {info['best_epoch']}, val loss {info['best_val']:.4f})")
        return {"trained": False, **info}

    state = None
    if not run.force and state_path.is_file():
        state = torch.load(state_path, map_location="cpu", weights_only=False)
        if state.get("stamp") != stamp:
            state = None
    if state is None and md.exists():
        shutil.rmtree(md)
    md.mkdir(parents=True, exist_ok=True)

    fit_ids, val_ids = validation_split(split.train_ids, o.val_fraction, cfg.seed)
    arrays = {c: run.clip_arrays(c) for c in fit_ids + val_ids}
    model = init_params(cfg.seed, cfg.model)
    opt = torch.optim.Adam(model.parameters(), lr=o.lr)
    sched = make_scheduler(opt, o)
    if state is None:
        epoch, step, best_val, best_epoch = 0, 0, float("inf"), -1
        with loss_csv.open("w") as fh:
            fh.write("step,epoch,loss,lr\n")
        with epoch_csv.open("w") as fh:
            fh.write("epoch,train_loss,val_loss,lr\n")
        batch_log.write_text("")
    else:
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        sched.load_state_dict(state["scheduler"])
        torch.set_rng_state(state["torch_rng"])
        epoch, step, best_val, best_epoch = state["epoch"], state["step"], state["best_val"], state["best_epoch"]
        _truncate_lines(loss_csv, step + 1)
        _truncate_lines(epoch_csv, epoch + 1)
        _truncate_lines(batch_log, step)
        log.info("resuming training at epoch %d", epoch)

    end = o.epochs if stop_after is None else min(o.epochs, epoch + stop_after)
    while epoch < end:
        order = [fit_ids[i] for i in np.random.default_rng([cfg.seed, epoch]).permutation(len(fit_ids))]
        losses, rows, logs = [], [], []
        for b in range(0, len(order), o.batch_size):
            ids = order[b:b + o.batch_size]
            lr = opt.param_groups[0]["lr"]
            logs.append(json.dumps({"epoch": epoch, "step": step, "ids": ids}))
            loss = training_step(model, opt, _batch(arrays, ids))
            rows.append(f"{step},{epoch},{'' if loss is None else f'{loss:.8g}'},{lr:.8g}")
            if loss is not None:
                losses.append(loss)
            step += 1
        train_loss = float(np.mean(losses)) if losses else float("nan")
        if val_ids:
            pred = _predict(model, arrays, val_ids).reshape(-1, 2)
            true = np.concatenate([arrays[c][3] for c in val_ids])
            val_loss = ccc_loss(pred, true)
        else:
            val_loss = train_loss
        sched.step(val_loss)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            save_checkpoint(best_path, model, cfg.seed, stamp=stamp, epoch=epoch, val_loss=val_loss,
                            filter_bank=[asdict(f) for f in model.filters.to_bank().filters])
        with loss_csv.open("a") as fh:
            fh.write("".join(r + "\n" for r in rows))
        with batch_log.open("a") as fh:
            fh.write("".join(line + "\n" for line in logs))
        with epoch_csv.open("a") as fh:
            fh.write(f"{epoch},{train_loss:.8g},{val_loss:.8g},{opt.param_groups[0]['lr']:.8g}\n")
        epoch += 1
        torch.save({"stamp": stamp, "model": model.state_dict(), "optimizer": opt.state_dict(),
                    "scheduler": sched.state_dict(), "torch_rng": torch.get_rng_state(), "epoch": epoch,
                    "step": step, "best_val": best_val, "best_epoch": best_epoch}, state_path)
        log.info("epoch %d: train %.4f val %.4f lr %.2g", epoch - 1, train_loss, val_loss,
                 opt.param_groups[0]["lr"])

    audit_batches(batch_log, set(split.test_ids) | set(val_ids))
    info = {"stamp": stamp, "complete": epoch >= o.epochs, "epochs_run": epoch, "steps": step,
            "best_epoch": best_epoch, "best_val": best_val, "val_ids": val_ids}
    info_path.write_text(json.dumps(info, indent=1))
    print(f"train: {epoch}/{o.epochs} epochs, {step} steps, best val loss {best_val:.4f} at epoch {best_epoch}")
    run.record("train", time.perf_counter() - t0, [best_path, state_path, loss_csv, epoch_csv, batch_log, info_path])
    return {"trained": True, **info}


# --- evaluation -------------------------------------------------------------


def _plot_clip(path: Path, clip_id: str, dim: str, truth: np.ndarray, frames, pred: np.ndarray) -> None:
    fig = Figure(figsize=(6, 2.6))
    ax = fig.subplots()
    ax.plot(np.arange(len(truth)), truth, color="0.3", lw=1.5, label="annotation")
    ax.plot(frames, pred, "o-", color="tab:red", ms=4, lw=1, label="prediction")
    ax.set_ylim(-10.5, 10.5)
    ax.set_xlabel("frame")
    ax.set_ylabel(dim)
    ax.set_title(clip_id, fontsize=9)
    ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=80)


def cmd_eval(run: Run, checkpoint=None) -> MetricReport:
    t0 = time.perf_counter()
    ckpt = Path(checkpoint) if checkpoint else run.model_dir / "best.pt"
    if not ckpt.is_file():
        raise StageError(f"missing checkpoint {ckpt}; run train first")
    split = run.split()
    report_path, table_path, info_path = (run.eval_dir / "report.json", run.eval_dir / "report.txt",
                                          run.eval_dir / "eval.json")
    plot_dir = run.eval_dir / "plots"
    stamp = digest({"checkpoint": file_digest(ckpt), "test": split.test_ids,
                    "keyframes": {c: run.keyframes(c) for c in split.test_ids}})
    if not run.force and (_read_json(info_path) or {}).get("stamp") == stamp and report_path.is_file():
        report = MetricReport.from_json(report_path.read_text())
        print(report.table())
        return report

    model, _ = load_checkpoint(ckpt)
    preds, targets = [], []
    if plot_dir.exists():
        shutil.rmtree(plot_dir)
    plot_dir.mkdir(parents=True)
    for cid in split.test_ids:
        face, eyes, mouth, labels = run.clip_arrays(cid)
        selected = run.keyframes(cid)
        p = predict_clip(model, cid, selected, face, eyes, mouth)
        preds.append(p.levels)
        truth = run.index()[cid].labels()
        targets.append(truth[selected].astype(np.float64))
        for j, dim in enumerate(("valence", "arousal")):
            _plot_clip(plot_dir / f"{cid}_{dim}.png", cid, dim, truth[:, j], selected, p.levels[:, j])
    report = build_report(split.test_ids, preds, targets)
    report_path.write_text(report.to_json())
    table_path.write_text(report.table() + "\n")
    info_path.write_text(json.dumps({"stamp": stamp, "checkpoint": str(ckpt)}))
    print(report.table())
    run.record("eval", time.perf_counter() - t0, [report_path, table_path, info_path]
               + sorted(plot_dir.glob("*.png")))
    return report


def cmd_report(run: Run) -> str:
    report_path = run.eval_dir / "report.json"
    if not report_path.is_file():
        raise StageError(f"missing {report_path}; run eval first")
    report = MetricReport.from_json(report_path.read_text())
    lines = [report.table()]
    manifest = _read_json(run.manifest_path)
    if manifest:
        lines.append("")
        lines.append(f"version {manifest.get('version')}")
        for stage, secs in manifest.get("timings", {}).items():
            lines.append(f"{stage:<12s}{secs:10.1f} s  {len(manifest['artifacts'].get(stage, []))} artifacts")
    text = "\n".join(lines)
    print(text)
    return text


def dump_filters(run: Run, checkpoint=None) -> str:
    ckpt = Path(checkpoint) if checkpoint else run.model_dir / "best.pt"
    if not ckpt.is_file():
        raise StageError(f"missing checkpoint {ckpt}")
    model, _ = load_checkpoint(ckpt)
    text = sampling_rows_csv(model.filters.to_bank(), model.cfg.k)
    print(text, end="" if text.endswith("\n") else "\n")
    return text


STAGES = ("synth", "preprocess", "keyframes", "flow", "train", "eval")


def run_all(run: Run) -> MetricReport:
    cmd_synth(run)
    cmd_preprocess(run)
    cmd_keyframes(run)
    cmd_flow(run)
    cmd_train(run)
    return cmd_eval(run)


def selector_for(run: Run):
    return load_selector(run.selector_dir / "selector.pt")
