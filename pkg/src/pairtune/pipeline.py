"""End-to-end orchestration: IO, the two stages, artifacts, and reports.

A run owns its output directory and leaves behind: resized inputs, the
warped image (PNG plus lossless float dump), per-hypothesis images, the
selected final image, a four-panel comparison grid, a line-oriented
metrics log, a manifest that lets the run be reconstructed, and a report
with wall-clock totals. The metrics log and manifest contain no
timestamps, so identical runs produce identical bytes.
"""
from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import fid as fid_mod
from .config import RunConfig, config_to_dict
from .encoder import build_backbone, frozen_copy
from .errors import IOFailure, PairtuneError
from .finetune import CftResult, fine_tune
from .inversion import MgiResult, run_mgi
from .synthetic import colored_shapes_pair
from .tensors import DTYPE, as_image, content_digest, resize_image

GRID_LABEL_HEIGHT = 16
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class RunReport:
    manifest: dict
    cft_summary: dict
    mgi_ranking: list[dict]
    selected_path: str
    wall_clock: dict
    artifacts: dict


def load_image(path) -> torch.Tensor:
    """Read an image as H x W x 3 floats in [0, 1].

    Paths of the form "synthetic:<seed>:source" / "synthetic:<seed>:target"
    produce the bundled seeded pair instead of touching the filesystem.
    """
    text = str(path)
    if text.startswith("synthetic:"):
        parts = text.split(":")
        if len(parts) != 3 or parts[2] not in ("source", "target"):
            raise IOFailure(
                f"synthetic path must be synthetic:<seed>:source|target, got {text!r}"
            )
        try:
            seed = int(parts[1])
        except ValueError:
            raise IOFailure(f"synthetic path needs an integer seed, got {text!r}")
        pair = colored_shapes_pair(seed)
        return pair[0] if parts[2] == "source" else pair[1]
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise IOFailure(f"cannot read image {path}: {exc}") from exc
    return torch.as_tensor(arr, dtype=DTYPE)


def save_image(image: torch.Tensor, path) -> None:
    arr = (as_image(image).clamp(0.0, 1.0).numpy() * 255.0).round().astype(np.uint8)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr).save(path)
    except OSError as exc:
        raise IOFailure(f"cannot write image {path}: {exc}") from exc


def save_float_image(image: torch.Tensor, path) -> None:
    """Lossless dump: int64 height/width/channels, then row-major float64."""
    image = as_image(image)
    try:
        with open(path, "wb") as fh:
            np.array(image.shape, dtype=np.int64).tofile(fh)
            image.detach().numpy().astype(np.float64).tofile(fh)
    except OSError as exc:
        raise IOFailure(f"cannot write float dump {path}: {exc}") from exc


def load_float_image(path) -> torch.Tensor:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read float dump {path}: {exc}") from exc
    if len(raw) < 24:
        raise IOFailure(f"float dump {path} is truncated")
    shape = np.frombuffer(raw, dtype=np.int64, count=3)
    h, w, c = (int(v) for v in shape)
    if h < 1 or w < 1 or c < 1:
        raise IOFailure(f"float dump {path} has invalid shape {h}x{w}x{c}")
    body = np.frombuffer(raw, dtype=np.float64, offset=24)
    if body.size != h * w * c:
        raise IOFailure(f"float dump {path} has {body.size} values, expected {h * w * c}")
    return torch.as_tensor(body.reshape(h, w, c).copy(), dtype=DTYPE)


class MetricsLog:
    """Append-only JSONL sink; every record gets a kind tag."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def write(self, kind: str, record: dict) -> None:
        line = json.dumps({"kind": kind, **record}, sort_keys=True)
        self._fh.write(line + "\n")

    def close(self):
        self._fh.close()


def _tag_stage(exc: Exception, stage: str) -> Exception:
    exc.args = (f"[stage:{stage}] {exc}",)
    return exc


def _render_grid(panels: list[tuple[str, Image.Image]], path) -> list[dict]:
    """Compose labeled panels side by side; returns panel geometry records."""
    margin = 8
    width = margin + sum(p.width + margin for _, p in panels)
    height = GRID_LABEL_HEIGHT + max(p.height for _, p in panels) + 2 * margin
    canvas = Image.new("RGB", (width, height), (24, 24, 24))
    draw = ImageDraw.Draw(canvas)
    records = []
    x = margin
    for name, panel in panels:
        y = margin + GRID_LABEL_HEIGHT
        draw.text((x, margin), name, fill=(230, 230, 230))
        canvas.paste(panel, (x, y))
        records.append({"name": name, "x": x, "y": y, "width": panel.width, "height": panel.height})
        x += panel.width + margin
    canvas.save(path)
    return records


def _to_pil(image: torch.Tensor) -> Image.Image:
    arr = (as_image(image).clamp(0.0, 1.0).numpy() * 255.0).round().astype(np.uint8)
    return Image.fromarray(arr)


def build_fid_reference(image_dir, embed_spec, crop_policy: str = "expand", out_path=None):
    """Build reference statistics from a directory of images.

    Unreadable files are skipped with a warning; fewer than 2 usable
    images is an error. With ``crop_policy="expand"`` every image
    contributes its crop grid, matching how hypothesis images are scored.
    """
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise IOFailure(f"{image_dir} is not a directory")
    paths = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images = []
    for p in paths:
        try:
            images.append(load_image(p))
        except IOFailure as exc:
            print(f"warning: skipping {p}: {exc}", file=sys.stderr)
    if len(images) < 2:
        raise IOFailure(f"{image_dir} has {len(images)} usable images, need at least 2")
    if crop_policy not in ("expand", "whole"):
        raise IOFailure(f"crop-policy must be expand or whole, got {crop_policy!r}")
    if crop_policy == "expand":
        images = [crop for img in images for crop in fid_mod.expand_crops(img)]
    stats = fid_mod.gaussian_stats(fid_mod.embed_images(images, embed_spec))
    if float(np.abs(stats.covariance).max()) < 1e-12:
        print(
            "warning: reference covariance is near zero; scores against it will be "
            "dominated by mean shifts",
            file=sys.stderr,
        )
    if out_path is not None:
        fid_mod.save_stats(stats, out_path)
    return stats


def _pair_reference(source, target, embed_spec):
    crops = fid_mod.expand_crops(source) + fid_mod.expand_crops(target)
    return fid_mod.gaussian_stats(fid_mod.embed_images(crops, embed_spec))


def run(cfg: RunConfig) -> RunReport:
    """Execute both stages end to end and write all artifacts."""
    t_start = time.perf_counter()
    out = Path(cfg.resolved_output_dir())
    out.mkdir(parents=True, exist_ok=True)

    source = resize_image(load_image(cfg.source_path), cfg.working_resolution, cfg.working_resolution)
    target = resize_image(load_image(cfg.target_path), cfg.working_resolution, cfg.working_resolution)
    save_image(source, out / "source.png")
    save_image(target, out / "target.png")

    log = MetricsLog(out / "metrics.jsonl")
    try:
        t_cft = time.perf_counter()
        try:
            cft_result = fine_tune(
                source,
                target,
                cfg.backbone,
                cfg.cft,
                working_resolution=cfg.working_resolution,
                log_sink=lambda rec: log.write("cft-iteration", rec),
            )
        except Exception as exc:
            raise _tag_stage(exc, "cft")
        cft_elapsed = time.perf_counter() - t_cft

        warped_up = resize_image(cft_result.warped.data, cfg.working_resolution, cfg.working_resolution)
        save_image(warped_up, out / "warped.png")
        save_float_image(warped_up, out / "warped.f64")
        save_float_image(cft_result.warped.data, out / "warped-raw.f64")
        if cft_result.checkpoints:
            strip = [
                (f"iter {i}", _to_pil(resize_image(img, cfg.working_resolution, cfg.working_resolution)))
                for i, img in cft_result.checkpoints
            ]
            _render_grid(strip, out / "checkpoints.png")

        try:
            if cfg.fid_reference:
                reference = fid_mod.load_stats(cfg.fid_reference)
            else:
                reference = _pair_reference(source, target, cfg.embed)
        except Exception as exc:
            raise _tag_stage(exc, "fid-ref")

        t_mgi = time.perf_counter()
        try:
            perceptual = frozen_copy(build_backbone(cfg.backbone))
            mgi_result = run_mgi(
                warped_up,
                cfg.generator,
                list(cfg.mgi_grid),
                reference,
                cfg.mgi_opt,
                embed=cfg.embed,
                perceptual=perceptual,
                log_sink=lambda rec: log.write("mgi-hypothesis", rec),
            )
        except Exception as exc:
            raise _tag_stage(exc, "mgi")
        mgi_elapsed = time.perf_counter() - t_mgi
    finally:
        log.close()

    for hyp in mgi_result.all_hypotheses:
        if not hyp.failed:
            save_image(hyp.image, out / f"hyp-{hyp.label()}.png")
    final = mgi_result.selected.image
    save_image(final, out / "final.png")
    save_float_image(final, out / "final.f64")

    panels = [
        ("source", _to_pil(source)),
        ("target", _to_pil(target)),
        ("warped", _to_pil(warped_up)),
        ("final", _to_pil(final)),
    ]
    grid_records = _render_grid(panels, out / "grid.png")
    (out / "grid.json").write_text(json.dumps(grid_records, indent=2, sort_keys=True))

    manifest = {
        "config": config_to_dict(cfg),
        "resolved-output-dir": str(out),
        "digests": {
            "source": content_digest([source]),
            "target": content_digest([target]),
            "cft-params": cft_result.final_params_digest,
            "generator": mgi_result.generator_digest,
            "warped": content_digest([cft_result.warped.data]),
            "final": content_digest([final]),
        },
        "selected-hypothesis": mgi_result.selected.label(),
        "selection-rule": mgi_result.selection_rule,
        "fid-reference": cfg.fid_reference or "pair-crops",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    ranking = sorted(
        (
            {
                "hypothesis": h.label(),
                "composing_layer": h.composing_layer,
                "num_latents": h.num_latents,
                "distance": h.distance,
                "fid": h.fid,
                "failed": h.failed,
                "selected": h is mgi_result.selected,
            }
            for h in mgi_result.all_hypotheses
        ),
        key=lambda rec: (rec["failed"], rec["fid"] if not rec["failed"] else 0.0),
    )
    last = cft_result.loss_trace[-1]
    report = RunReport(
        manifest=manifest,
        cft_summary={
            "iterations": len(cft_result.loss_trace),
            "final-contrastive": last.contrastive,
            "final-perceptual": last.perceptual,
            "final-contextual": last.contextual,
            "final-total": last.total,
            "elapsed-seconds": cft_elapsed,
        },
        mgi_ranking=ranking,
        selected_path=str(out / "final.png"),
        wall_clock={
            "cft-seconds": cft_elapsed,
            "mgi-seconds": mgi_elapsed,
            "total-seconds": time.perf_counter() - t_start,
        },
        artifacts={
            "source": str(out / "source.png"),
            "target": str(out / "target.png"),
            "warped": str(out / "warped.png"),
            "warped-float": str(out / "warped.f64"),
            "final": str(out / "final.png"),
            "final-float": str(out / "final.f64"),
            "grid": str(out / "grid.png"),
            "grid-layout": str(out / "grid.json"),
            "metrics": str(out / "metrics.jsonl"),
            "manifest": str(out / "manifest.json"),
        },
    )
    (out / "report.json").write_text(
        json.dumps(
            {
                "cft": report.cft_summary,
                "mgi-ranking": report.mgi_ranking,
                "selected": report.selected_path,
                "wall-clock": report.wall_clock,
                "artifacts": report.artifacts,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return report


def stage_cft(cfg: RunConfig) -> dict:
    """Stage 1 alone: fine-tune and write the warped-image artifacts."""
    out = Path(cfg.resolved_output_dir())
    out.mkdir(parents=True, exist_ok=True)
    source = resize_image(load_image(cfg.source_path), cfg.working_resolution, cfg.working_resolution)
    target = resize_image(load_image(cfg.target_path), cfg.working_resolution, cfg.working_resolution)
    save_image(source, out / "source.png")
    save_image(target, out / "target.png")
    log = MetricsLog(out / "metrics.jsonl")
    try:
        try:
            result = fine_tune(
                source,
                target,
                cfg.backbone,
                cfg.cft,
                working_resolution=cfg.working_resolution,
                log_sink=lambda rec: log.write("cft-iteration", rec),
            )
        except Exception as exc:
            raise _tag_stage(exc, "cft")
    finally:
        log.close()
    warped_up = resize_image(result.warped.data, cfg.working_resolution, cfg.working_resolution)
    save_image(warped_up, out / "warped.png")
    save_float_image(warped_up, out / "warped.f64")
    save_float_image(result.warped.data, out / "warped-raw.f64")
    last = result.loss_trace[-1]
    return {
        "warped": str(out / "warped.png"),
        "warped-float": str(out / "warped.f64"),
        "metrics": str(out / "metrics.jsonl"),
        "final-total": last.total,
        "elapsed-seconds": result.elapsed,
    }


def stage_mgi(cfg: RunConfig, warped_path) -> dict:
    """Stage 2 alone: invert against an existing warped image."""
    out = Path(cfg.resolved_output_dir())
    out.mkdir(parents=True, exist_ok=True)
    warped_path = Path(warped_path)
    if warped_path.suffix == ".f64":
        guidance = load_float_image(warped_path)
    else:
        guidance = load_image(warped_path)
    guidance = resize_image(guidance, cfg.working_resolution, cfg.working_resolution)

    try:
        if cfg.fid_reference:
            reference = fid_mod.load_stats(cfg.fid_reference)
        else:
            source = resize_image(load_image(cfg.source_path), cfg.working_resolution, cfg.working_resolution)
            target = resize_image(load_image(cfg.target_path), cfg.working_resolution, cfg.working_resolution)
            reference = _pair_reference(source, target, cfg.embed)
    except Exception as exc:
        raise _tag_stage(exc, "fid-ref")

    log = MetricsLog(out / "mgi-metrics.jsonl")
    try:
        try:
            perceptual = frozen_copy(build_backbone(cfg.backbone))
            result = run_mgi(
                guidance,
                cfg.generator,
                list(cfg.mgi_grid),
                reference,
                cfg.mgi_opt,
                embed=cfg.embed,
                perceptual=perceptual,
                log_sink=lambda rec: log.write("mgi-hypothesis", rec),
            )
        except Exception as exc:
            raise _tag_stage(exc, "mgi")
    finally:
        log.close()
    for hyp in result.all_hypotheses:
        if not hyp.failed:
            save_image(hyp.image, out / f"hyp-{hyp.label()}.png")
    save_image(result.selected.image, out / "final.png")
    save_float_image(result.selected.image, out / "final.f64")
    return {
        "selected": result.selected.label(),
        "selection-rule": result.selection_rule,
        "final": str(out / "final.png"),
        "metrics": str(out / "mgi-metrics.jsonl"),
    }


def render_report(run_dir) -> str:
    """Re-render the four-panel grid from a finished run directory."""
    run_dir = Path(run_dir)
    names = ["source", "target", "warped", "final"]
    panels = []
    for name in names:
        path = run_dir / f"{name}.png"
        if not path.exists():
            raise IOFailure(f"{path} is missing; was this directory produced by a run?")
        panels.append((name, Image.open(path).convert("RGB")))
    records = _render_grid(panels, run_dir / "grid.png")
    (run_dir / "grid.json").write_text(json.dumps(records, indent=2, sort_keys=True))
    return str(run_dir / "grid.png")
