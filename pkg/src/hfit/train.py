"""Training, evaluation, prediction and ablation drivers.

Training iterates sample -> augment -> forward -> loss -> AdamW step over
the trainable (non-frozen) parameters only, with a linear learning-rate
warmup. Both the model seed and the data seed are explicit, so two runs
with identical seeds produce identical loss logs and checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import metrics as metrics_mod
from .config import ConfigError, RunConfig
from .data import RGBDSample, augment, load_sample, synth_scene
from .model import (
    HFIT,
    ForwardTrace,
    build_model,
    config_fingerprint,
    load_checkpoint,
    save_checkpoint,
)
from .rhff import recalibrate

ABLATION_MODES = (
    "rgb",
    "depth",
    "rgbdepth",
    "no-rgb-weight",
    "no-depth-weight",
    "no-hgfi-vit",
    "no-hgfi-adapter",
)

EVAL_SEED_OFFSET = 100003  # keeps synthetic eval scenes disjoint from training scenes


@dataclass
class TrainResult:
    checkpoint_path: Path
    loss_log_path: Path
    final_loss: float
    iterations: int


class SampleSource:
    """Deterministic training stream plus a fixed evaluation set."""

    def __init__(self, run: RunConfig):
        self.run = run
        data_cfg = run.data
        if data_cfg.source == "synthetic":
            spec = data_cfg.synthetic
            self._train_pool = [
                synth_scene(
                    data_cfg.seed + j, spec.height, spec.width, spec.classes,
                    region_range=(spec.min_regions, spec.max_regions),
                )
                for j in range(spec.count)
            ]
            self._eval_pool = [
                synth_scene(
                    data_cfg.seed + EVAL_SEED_OFFSET + j, spec.height, spec.width,
                    spec.classes,
                    region_range=(spec.min_regions, spec.max_regions),
                )
                for j in range(spec.eval_count)
            ]
        else:
            manifest = data_mod.build_manifest(data_cfg.root, data_cfg.train_split)
            self._train_pool = [load_sample(t) for t in manifest.triples]
            eval_manifest = data_mod.build_manifest(data_cfg.root, data_cfg.eval_split)
            self._eval_pool = [load_sample(t) for t in eval_manifest.triples]
        if not self._train_pool:
            raise ConfigError("training split contains no samples")

    def training_sample(self, iteration: int) -> RGBDSample:
        base = self._train_pool[(iteration - 1) % len(self._train_pool)]
        rng = np.random.default_rng([self.run.data.seed, iteration])
        return augment(base, rng, self.run.data.augment)

    def eval_samples(self) -> list[RGBDSample]:
        return list(self._eval_pool)


def _warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


def train(run: RunConfig, out_dir: str | Path | None = None) -> TrainResult:
    out = Path(out_dir) if out_dir is not None else Path(run.train.out_dir)
    source = SampleSource(run)  # validates data before any side effect
    out.mkdir(parents=True, exist_ok=True)

    model = build_model(run.model)
    model.train()
    optimizer = torch.optim.AdamW(
        [p for _, p in model.trainable_parameters()],
        lr=run.train.lr,
        weight_decay=run.train.weight_decay,
    )

    rows: list[tuple[int, float]] = []
    for iteration in range(1, run.train.iterations + 1):
        sample = source.training_sample(iteration)
        logits = model(sample)
        loss = model.loss(logits, sample.labels)
        optimizer.zero_grad()
        loss.backward()
        lr = _warmup_lr(run.train.lr, iteration, run.train.warmup_steps)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.step()
        rows.append((iteration, float(loss.item())))
        if run.train.checkpoint_every > 0 and iteration % run.train.checkpoint_every == 0:
            save_checkpoint(model, out / f"checkpoint_{iteration:06d}.pt", iteration)

    final_path = out / "checkpoint_final.pt"
    save_checkpoint(model, final_path, run.train.iterations)
    log_path = out / "loss_log.csv"
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        for iteration, value in rows:
            writer.writerow([iteration, f"{value:.8f}"])
    return TrainResult(
        checkpoint_path=final_path,
        loss_log_path=log_path,
        final_loss=rows[-1][1],
        iterations=run.train.iterations,
    )


def _load_compatible(run: RunConfig, checkpoint_path) -> HFIT:
    model, payload = load_checkpoint(checkpoint_path)
    expected = config_fingerprint(run.model)
    if payload["fingerprint"] != expected:
        raise ConfigError(
            f"checkpoint {checkpoint_path} was produced by a different model config "
            f"(fingerprint {payload['fingerprint']} vs {expected})"
        )
    return model


def predict_labels(model: HFIT, sample: RGBDSample) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        logits = model(sample)
    return logits.argmax(dim=0).cpu().numpy().astype(np.int64)


def evaluate(run: RunConfig, checkpoint_path, out_dir: str | Path | None = None
             ) -> tuple[metrics_mod.MetricsReport, Path, Path]:
    model = _load_compatible(run, checkpoint_path)
    samples = SampleSource(run).eval_samples()
    if not samples:
        raise ConfigError("no samples in the evaluation split")
    out = Path(out_dir) if out_dir is not None else Path(run.train.out_dir) / "eval"
    cm = metrics_mod.new_confusion(run.model.num_classes)
    for sample in samples:
        pred = predict_labels(model, sample)
        metrics_mod.accumulate(cm, pred, sample.labels, run.model.ignore_index)
    report = metrics_mod.compute(cm)
    out.mkdir(parents=True, exist_ok=True)
    text_path = out / "report.txt"
    kv_path = out / "report.kv"
    text_path.write_text(metrics_mod.report_to_text(report), encoding="utf-8")
    kv_path.write_text(metrics_mod.report_to_kv(report), encoding="utf-8")
    return report, text_path, kv_path


def predict(run: RunConfig, checkpoint_path, rgb_path, depth_path, out_dir,
            allow_pad: bool = False) -> list[Path]:
    """Write an argmax label raster plus one 8-bit probability raster per class."""
    model = _load_compatible(run, checkpoint_path)
    rgb = data_mod._read_rgb(Path(rgb_path))
    depth3 = data_mod._read_depth16(Path(depth_path))
    if rgb.shape[:2] != depth3.shape[:2]:
        raise ValueError(
            f"rgb {rgb.shape[:2]} and depth {depth3.shape[:2]} sizes differ"
        )
    h, w = rgb.shape[:2]
    pad_h = (-h) % 32
    pad_w = (-w) % 32
    if (pad_h or pad_w) and not allow_pad:
        raise ValueError(
            f"input size {h}x{w} is not divisible by 32; pass --pad to pad and crop"
        )
    if pad_h or pad_w:
        rgb = np.pad(rgb, ((0, pad_h), (0, pad_w), (0, 0)))
        depth3 = np.pad(depth3, ((0, pad_h), (0, pad_w), (0, 0)))
    labels = np.zeros(rgb.shape[:2], dtype=np.int64)
    sample = RGBDSample(rgb=rgb, depth3=depth3, labels=labels)
    model.eval()
    with torch.no_grad():
        logits = model(sample)
        probs = torch.softmax(logits, dim=0).cpu().numpy()
    probs = probs[:, :h, :w]
    label_map = probs.argmax(axis=0).astype(np.uint8)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    written = []
    label_path = out / "labels.png"
    Image.fromarray(label_map).save(label_path)
    written.append(label_path)
    for c in range(probs.shape[0]):
        raster = np.round(probs[c] * 255.0).astype(np.uint8)
        path = out / f"prob_class_{c}.png"
        Image.fromarray(raster).save(path)
        written.append(path)
    return written


def apply_ablation_mode(run: RunConfig, mode: str) -> RunConfig:
    if mode not in ABLATION_MODES:
        raise ConfigError(f"unknown ablation mode {mode!r}; choose from {ABLATION_MODES}")
    flags = replace(run.model.ablation)
    if mode == "rgb":
        flags = replace(flags, zero_depth_input=True)
    elif mode == "depth":
        flags = replace(flags, zero_rgb_input=True)
    elif mode == "no-rgb-weight":
        flags = replace(flags, use_vit_weight=False)
    elif mode == "no-depth-weight":
        flags = replace(flags, use_prior_weight=False)
    elif mode == "no-hgfi-vit":
        flags = replace(flags, vit_integration=False)
    elif mode == "no-hgfi-adapter":
        flags = replace(flags, prior_integration=False)
    model_cfg = replace(run.model, ablation=flags)
    return replace(run, model=model_cfg)


def _probe_sample(run: RunConfig, seed: int = 7) -> RGBDSample:
    return synth_scene(seed, run.model.crop_size, run.model.crop_size,
                       run.model.num_classes)


def run_ablation_probe(run: RunConfig, mode: str) -> None:
    """Unit bypass check for one mode; raises AssertionError on failure."""
    moded = apply_ablation_mode(run, mode)
    model = build_model(moded.model)
    model.eval()
    sample = _probe_sample(moded)
    flags = moded.model.ablation

    if mode in ("rgb", "depth", "rgbdepth"):
        other = synth_scene(99, moded.model.crop_size, moded.model.crop_size,
                            moded.model.num_classes)
        with torch.no_grad():
            t_base, t_swap_depth, t_swap_rgb = ForwardTrace(), ForwardTrace(), ForwardTrace()
            model(sample, trace=t_base)
            model(RGBDSample(sample.rgb, other.depth3, sample.labels), trace=t_swap_depth)
            model(RGBDSample(other.rgb, sample.depth3, sample.labels), trace=t_swap_rgb)
        base = t_base.priors_pre_recalibration[0]
        depth_changed = not torch.equal(base, t_swap_depth.priors_pre_recalibration[0])
        rgb_changed = not torch.equal(base, t_swap_rgb.priors_pre_recalibration[0])
        if mode == "rgb" and depth_changed:
            raise AssertionError("rgb mode: prior still depends on the depth input")
        if mode == "depth" and rgb_changed:
            raise AssertionError("depth mode: prior still depends on the rgb input")
        if mode == "rgbdepth" and not (depth_changed and rgb_changed):
            raise AssertionError("rgbdepth mode: prior must depend on both inputs")
        return

    if mode in ("no-rgb-weight", "no-depth-weight"):
        gen = torch.Generator().manual_seed(3)
        tokens = torch.randn(
            21, moded.model.backbone.embed_dim, generator=gen, dtype=torch.float64
        )
        from .core import LevelSpec, TokenPyramid

        pyramid = TokenPyramid(tokens, (
            LevelSpec(8, 4, 4, 0), LevelSpec(16, 2, 2, 16), LevelSpec(32, 1, 1, 20),
        ))
        c_v = torch.rand(21, generator=gen, dtype=torch.float64)
        c_s = torch.rand(21, generator=gen, dtype=torch.float64)
        out = recalibrate(pyramid, c_v, c_s,
                          use_vit_weight=flags.use_vit_weight,
                          use_prior_weight=flags.use_prior_weight)
        if mode == "no-rgb-weight":
            expected = c_s.unsqueeze(1) * tokens
        else:
            expected = (1.0 - c_v).unsqueeze(1) * tokens
        if not torch.equal(out.tokens, expected):
            raise AssertionError(f"{mode}: recalibration factor not bypassed")
        both_off = recalibrate(pyramid, c_v, c_s,
                               use_vit_weight=False, use_prior_weight=False)
        if not torch.equal(both_off.tokens, tokens):
            raise AssertionError("disabling both weights must make recalibration the identity")
        return

    # pass-through gated-integration modes
    with torch.no_grad():
        trace = ForwardTrace()
        model(sample, trace=trace)
    if mode == "no-hgfi-vit":
        for merged, raw in zip(trace.vit_integrated, trace.vit_stage_outputs):
            if not torch.equal(merged, raw):
                raise AssertionError("no-hgfi-vit: merge must pass the stage output through")
    else:
        for merged, rec in zip(trace.priors_integrated, trace.priors_post_recalibration):
            if not torch.equal(merged, rec):
                raise AssertionError(
                    "no-hgfi-adapter: merge must pass the recalibrated prior through"
                )


@dataclass
class AblationRow:
    mode: str
    m_fsc: float
    m_iou: float
    a_acc: float


def ablation_table(rows: list[AblationRow]) -> str:
    lines = [f"{'mode':>16} {'mFsc%':>8} {'mIoU%':>8} {'aAcc%':>8}"]
    for row in rows:
        lines.append(
            f"{row.mode:>16} {100 * row.m_fsc:>8.2f} {100 * row.m_iou:>8.2f} "
            f"{100 * row.a_acc:>8.2f}"
        )
    return "\n".join(lines) + "\n"


def ablate(run: RunConfig, modes: list[str], out_dir: str | Path | None = None
           ) -> tuple[list[AblationRow], Path]:
    for mode in modes:
        if mode not in ABLATION_MODES:
            raise ConfigError(
                f"unknown ablation mode {mode!r}; choose from {ABLATION_MODES}"
            )
    out = Path(out_dir) if out_dir is not None else Path(run.train.out_dir) / "ablation"
    rows = []
    for mode in modes:
        run_ablation_probe(run, mode)  # abort before training on a broken bypass
        moded = apply_ablation_mode(run, mode)
        mode_dir = out / mode.replace("-", "_")
        result = train(moded, mode_dir)
        report, _, _ = evaluate(moded, result.checkpoint_path, mode_dir / "eval")
        rows.append(AblationRow(mode=mode, m_fsc=report.m_fsc, m_iou=report.m_iou,
                                a_acc=report.a_acc))
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "ablation_report.txt"
    table_path.write_text(ablation_table(rows), encoding="utf-8")
    return rows, table_path


def inspect_checkpoint(checkpoint_path) -> str:
    """Parameter-count report grouped by top-level module."""
    from .model import read_checkpoint

    payload = read_checkpoint(checkpoint_path)
    frozen = set(payload["frozen_param_names"])
    state = payload["state"]
    groups: dict[str, dict[str, int]] = {}
    total = {"total": 0, "frozen": 0, "trainable": 0}
    for name in payload["param_names"]:
        prefix = name.split(".", 1)[0]
        numel = int(np.prod(state[name].shape)) if state[name].shape else 1
        bucket = groups.setdefault(prefix, {"total": 0, "frozen": 0, "trainable": 0})
        bucket["total"] += numel
        key = "frozen" if name in frozen else "trainable"
        bucket[key] += numel
        total["total"] += numel
        total[key] += numel

    lines = [
        f"checkpoint: {checkpoint_path} (iteration {payload['iteration']})",
        f"{'module':>12} {'total':>12} {'frozen':>12} {'trainable':>12} {'total(M)':>10}",
    ]
    for prefix in sorted(groups):
        g = groups[prefix]
        lines.append(
            f"{prefix:>12} {g['total']:>12} {g['frozen']:>12} {g['trainable']:>12} "
            f"{g['total'] / 1e6:>10.2f}"
        )
    lines.append(
        f"{'ALL':>12} {total['total']:>12} {total['frozen']:>12} {total['trainable']:>12} "
        f"{total['total'] / 1e6:>10.2f}"
    )
    return "\n".join(lines) + "\n"
