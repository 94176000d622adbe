"""Evaluation: accuracy matrix across preprocessing conditions, histogram
distances between style sets, the paired-pixel oracle, the task-weight
sweep, and report/figure emission.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .errors import EmptyDatasetError, EmptyReportError, EmptySetError, PairingError
from .imagecore import bhattacharyya, channel_histogram, rgb_to_gray
from .nets import TaskNet, to_nchw
from .stainremoval import gm_batch
from .synthcells import PatchSet
from .trainer import (
    MetricRow,
    StageConfig,
    TrainState,
    checkpoint_load,
    train_stage,
)

Preprocessor = Callable[[np.ndarray], np.ndarray]


def identity(images: np.ndarray) -> np.ndarray:
    return images


def grayscale(images: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) -> (N, H, W, 1) luma stack."""
    return rgb_to_gray(images).astype(np.float32)[..., None]


def make_stain_normalizer(generator: torch.nn.Module, batch_size: int = 64) -> Preprocessor:
    """Preprocessor that maps images through GM extraction and the
    reconstruction generator."""

    def normalize(images: np.ndarray) -> np.ndarray:
        generator.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                gm = torch.from_numpy(gm_batch(images[i : i + batch_size]))
                recon = generator(gm)
                out.append(recon.permute(0, 2, 3, 1).numpy())
        return np.concatenate(out, axis=0)

    return normalize


def evaluate_accuracy(
    task_net: TaskNet,
    patches: PatchSet,
    preprocessor: Preprocessor | None = None,
    batch_size: int = 256,
) -> float:
    """Fraction of correct predictions at threshold 0.5."""
    if len(patches) == 0:
        raise EmptyDatasetError("cannot evaluate an empty dataset")
    images = (preprocessor or identity)(patches.images)
    task_net.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            probs = task_net(to_nchw(images[i : i + batch_size]))
            pred = (probs > 0.5).long().numpy()
            correct += int((pred == patches.labels[i : i + batch_size]).sum())
    return correct / len(patches)


def accuracy_stats(values: Sequence[float]) -> tuple[float, float, float]:
    """(mean, variance, standard deviation); population variance."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.var()), float(arr.std())


def evaluate_style_distance(
    set_a: np.ndarray | Sequence[np.ndarray],
    set_b: np.ndarray | Sequence[np.ndarray],
    bins: int = 64,
) -> float:
    """Bhattacharyya distance between the pooled RGB histograms of two
    image sets."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise EmptySetError("style distance needs two non-empty image sets")
    return bhattacharyya(
        channel_histogram(set_a, bins=bins), channel_histogram(set_b, bins=bins)
    )


def paired_pixel_error(normalized: PatchSet, ground_truth: PatchSet) -> float:
    """Mean absolute per-pixel per-channel error between scene-aligned sets."""
    if not np.array_equal(normalized.scene_ids, ground_truth.scene_ids):
        raise PairingError("scene ids differ between normalized and ground truth")
    if normalized.images.shape != ground_truth.images.shape:
        raise PairingError("image shapes differ between normalized and ground truth")
    return float(
        np.abs(
            normalized.images.astype(np.float64)
            - ground_truth.images.astype(np.float64)
        ).mean()
    )


def lambda_task_sweep(
    stage2_ckpt: str | Path,
    stage3_cfg: StageConfig,
    source: PatchSet,
    target: PatchSet,
    task_net: TaskNet,
    eval_set: PatchSet,
    magnitudes: Sequence[float] = (1.0, 10.0, 100.0),
) -> dict[float, float]:
    """Re-run stage 3 from the same stage-2 checkpoint once per task-loss
    weight; report target accuracy per magnitude."""
    results: dict[float, float] = {}
    for magnitude in magnitudes:
        state = checkpoint_load(stage2_ckpt)
        cfg = replace(
            stage3_cfg, weights=replace(stage3_cfg.weights, task=float(magnitude))
        )
        train_stage(cfg, state, source, target, task_net=task_net)
        results[float(magnitude)] = evaluate_accuracy(
            task_net, eval_set, make_stain_normalizer(state.generator)
        )
    return results


def config_hash(config_dict: dict) -> str:
    blob = json.dumps(config_dict, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class EvalReport:
    """Every metric is a per-seed list aligned with `seeds`."""

    seeds: list[int] = field(default_factory=list)
    config_hash: str = ""
    accuracies: dict[str, list[float]] = field(default_factory=dict)
    distances: dict[str, list[float]] = field(default_factory=dict)
    maes: dict[str, list[float]] = field(default_factory=dict)

    def validate(self) -> None:
        for table, lo, hi in (
            (self.accuracies, 0.0, 1.0),
            (self.distances, 0.0, 1.0),
        ):
            for name, values in table.items():
                for v in values:
                    if not (lo <= v <= hi):
                        raise ValueError(f"{name}={v} outside [{lo}, {hi}]")


def _metric_rows(kind: str, table: dict[str, list[float]]) -> list[str]:
    rows = []
    for name in sorted(table):
        values = table[name]
        mean, var, std = accuracy_stats(values)
        joined = ";".join(f"{v:.10g}" for v in values)
        rows.append(
            f"{kind},{name},{mean:.10g},{var:.10g},{std:.10g},{len(values)},{joined}"
        )
    return rows


def emit_report(report: EvalReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write report.csv (accuracies + paired errors) and distances.csv."""
    if not (report.accuracies or report.distances or report.maes):
        raise EmptyReportError("refusing to emit an empty report")
    report.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = [
        f"# seeds={';'.join(str(s) for s in report.seeds)}",
        f"# config={report.config_hash}",
    ]
    header = "kind,name,mean,variance,std,n,values"

    report_path = out_dir / "report.csv"
    lines = meta + [header]
    lines += _metric_rows("accuracy", report.accuracies)
    lines += _metric_rows("mae", report.maes)
    report_path.write_text("\n".join(lines) + "\n")

    distances_path = out_dir / "distances.csv"
    lines = meta + [header] + _metric_rows("distance", report.distances)
    distances_path.write_text("\n".join(lines) + "\n")
    return report_path, distances_path


def render_accuracy_curve(
    metrics_rows: list[MetricRow], out_path: str | Path
) -> Path:
    """Accuracy-vs-step line plot with one curve per training stage and
    stage boundary markers."""
    acc_rows = [r for r in metrics_rows if r[2] == "target_acc"]
    if not acc_rows:
        raise EmptyReportError("no target_acc rows in metrics; nothing to plot")
    stages = sorted({r[1] for r in acc_rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    for stage in stages:
        pts = [(r[0], r[3]) for r in acc_rows if r[1] == stage]
        pts.sort()
        ax.plot(
            [p[0] for p in pts],
            [p[1] for p in pts],
            marker="o",
            markersize=3,
            label=f"stage {stage}",
        )
        ax.axvline(pts[0][0], color="gray", linestyle=":", linewidth=0.8)
    ax.set_xlabel("generator training step")
    ax.set_ylabel("target test accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return out_path
