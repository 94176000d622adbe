"""End-to-end plumbing shared by the CLI and the test suite: dataset
generation, task/style training with hooks and checkpoints, evaluation,
and figure rendering. Each function is deterministic given (config, seed,
data).
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import GlobalConfig
from .errors import DataError, TrainingError
from .evalreport import (
    EvalReport,
    config_hash,
    emit_report,
    evaluate_accuracy,
    evaluate_style_distance,
    grayscale,
    identity,
    make_stain_normalizer,
    paired_pixel_error,
    render_accuracy_curve,
)
from .imagecore import read_png, write_png
from .losses import l1_loss
from .nets import read_checkpoint, to_nchw
from .stainremoval import gm_batch, make_gm
from .synthcells import (
    DatasetManifest,
    PatchSet,
    fit_pca_basis,
    generate_dataset,
    load_patches,
)
from .trainer import (
    TaskTrainConfig,
    TrainState,
    checkpoint_load,
    checkpoint_save,
    init_train_state,
    load_task_checkpoint,
    make_task_preprocessor,
    read_metrics_csv,
    save_task_checkpoint,
    task_param_bytes,
    train_stage,
    train_task_network,
    write_metrics_csv,
)

TASK_VARIANTS = ("color", "gray", "hsv", "pca")


def gen_data(cfg: GlobalConfig, out_dir: str | Path) -> DatasetManifest:
    return generate_dataset(
        out_dir,
        seed=cfg.seed,
        train_scenes=cfg.data.train_scenes,
        test_scenes=cfg.data.test_scenes,
        size=cfg.data.size,
        styles=cfg.data.domain_styles(),
        hard_negative_rate=cfg.data.hard_negative_rate,
    )


def task_ckpt_path(out_dir: Path, variant: str) -> Path:
    return Path(out_dir) / f"task_{variant}.ckpt"


def train_task(
    cfg: GlobalConfig, data_dir: str | Path, out_dir: str | Path, variant: str = "color"
) -> Path:
    """Train one task-network variant on source training data and save the
    best held-out checkpoint plus its accuracy curve."""
    if variant not in TASK_VARIANTS:
        raise DataError(f"unknown task variant {variant!r}")
    out_dir = Path(out_dir)
    train = load_patches(data_dir, "S", "train")
    heldout = load_patches(data_dir, "S", "test")

    basis = None
    if variant == "pca":
        basis = fit_pca_basis(train.images)
    preprocess = make_task_preprocessor(
        variant,
        hsv_ranges=cfg.augment.hsv,
        pca_basis=basis,
        pca_magnitude=cfg.augment.pca_magnitude,
    )
    arch = cfg.arch.task
    if variant == "gray":
        arch = replace(arch, in_channels=1)
    task_cfg = TaskTrainConfig(
        steps=cfg.task_train.steps,
        batch_size=cfg.task_train.batch_size,
        optimizer=cfg.task_train.optimizer,
        eval_every=cfg.task_train.eval_every,
        arch=arch,
    )
    net, curve = train_task_network(
        train, heldout, task_cfg, seed=cfg.seed, preprocess=preprocess
    )
    ckpt = task_ckpt_path(out_dir, variant)
    save_task_checkpoint(net, ckpt, seed=cfg.seed)
    write_metrics_csv(
        out_dir / f"task_{variant}_curve.csv",
        [(step, 0, "heldout_acc", acc) for step, acc in curve],
    )
    return ckpt


def stage_ckpt_path(out_dir: Path, stage: int) -> Path:
    return Path(out_dir) / f"stage{stage}.ckpt"


def _make_eval_hook(cfg: GlobalConfig, data_dir: Path, task_ckpt: Path | None):
    """Periodic held-out metrics: source reconstruction L1, plus target
    accuracy when a task checkpoint is supplied."""
    source_test = load_patches(data_dir, "S", "test")
    subset = cfg.eval.curve_subset
    src_imgs = source_test.images[:subset]
    src_x = to_nchw(src_imgs)
    src_gm = torch.from_numpy(gm_batch(src_imgs))

    task_net = load_task_checkpoint(task_ckpt) if task_ckpt else None
    target_test = None
    if task_net is not None:
        full = load_patches(data_dir, "T", "test")
        target_test = PatchSet(
            images=full.images[:subset],
            labels=full.labels[:subset],
            scene_ids=full.scene_ids[:subset],
            domain=full.domain,
        )

    def hook(state: TrainState) -> dict[str, float]:
        g = state.generator
        out: dict[str, float] = {}
        with torch.no_grad():
            recon = []
            for i in range(0, len(src_gm), 64):
                recon.append(g(src_gm[i : i + 64]))
            out["heldout_l1"] = float(l1_loss(torch.cat(recon), src_x))
        if task_net is not None:
            out["target_acc"] = evaluate_accuracy(
                task_net, target_test, make_stain_normalizer(g)
            )
        return out

    return hook


def train_style(
    cfg: GlobalConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    stage: int,
    init_ckpt: str | Path | None = None,
    resume_ckpt: str | Path | None = None,
    task_ckpt: str | Path | None = None,
) -> Path:
    """Run one style-training stage and save its final checkpoint.

    Stage 1 starts fresh (or resumes); stages 2-3 must be initialized from
    the previous stage's checkpoint. Stage 3 additionally requires the
    frozen task checkpoint.
    """
    if stage not in (1, 2, 3):
        raise TrainingError(f"stage must be 1, 2, or 3, got {stage}")
    out_dir = Path(out_dir)
    data_dir = Path(data_dir)

    if resume_ckpt is not None:
        state = checkpoint_load(resume_ckpt)
        if state.stage != stage:
            raise TrainingError(
                f"--resume checkpoint is for stage {state.stage}, not {stage}"
            )
    elif stage == 1:
        state = init_train_state(
            cfg.seed,
            gen_cfg=cfg.arch.generator,
            disc_cfg=cfg.arch.discriminator,
            optimizer=cfg.stages.stage_config(1).optimizer,
        )
    else:
        if init_ckpt is None:
            raise TrainingError(
                f"stage {stage} requires the stage-{stage - 1} checkpoint (--init)"
            )
        state = checkpoint_load(init_ckpt)
        if state.stage != stage - 1:
            raise TrainingError(
                f"stage {stage} requires a stage-{stage - 1} checkpoint, "
                f"got stage {state.stage}"
            )

    source = load_patches(data_dir, "S", "train")
    target = load_patches(data_dir, "T", "train") if stage >= 2 else None

    task_net = None
    frozen_before = None
    if stage == 3:
        if task_ckpt is None:
            raise TrainingError("stage 3 requires a task checkpoint (--task-ckpt)")
        task_net = load_task_checkpoint(task_ckpt)
        frozen_before = task_param_bytes(task_net)

    stage_cfg = cfg.stages.stage_config(stage)
    hook = _make_eval_hook(cfg, data_dir, task_ckpt)

    def checkpoint_cb(s: TrainState) -> None:
        checkpoint_save(s, out_dir / f"stage{stage}_step{s.stage_step:06d}.ckpt")

    rows = train_stage(
        stage_cfg,
        state,
        source,
        target,
        task_net=task_net,
        eval_hook=hook,
        checkpoint_cb=checkpoint_cb,
    )
    if frozen_before is not None and task_param_bytes(task_net) != frozen_before:
        raise TrainingError("frozen task parameters changed during stage 3")

    write_metrics_csv(out_dir / "metrics.csv", rows, append=True)
    final = stage_ckpt_path(out_dir, stage)
    checkpoint_save(state, final)
    return final


def _as_patchset(images: np.ndarray, like: PatchSet) -> PatchSet:
    return PatchSet(
        images=images, labels=like.labels, scene_ids=like.scene_ids, domain=like.domain
    )


def run_eval(
    cfg: GlobalConfig,
    run_dirs: list[str | Path],
    data_dir: str | Path,
    out_dir: str | Path,
) -> EvalReport:
    """Assemble the accuracy/distance/error report from one or more run
    directories (one per seed) over the same dataset."""
    data_dir = Path(data_dir)
    source_test = load_patches(data_dir, "S", "test")
    target_test = load_patches(data_dir, "T", "test")
    bins = cfg.eval.bins

    report = EvalReport(config_hash=config_hash(cfg.to_dict()))

    def add(table: dict, name: str, value: float) -> None:
        table.setdefault(name, []).append(float(value))

    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        color_ckpt = task_ckpt_path(run_dir, "color")
        if not color_ckpt.exists():
            raise DataError(f"{run_dir} has no task_color.ckpt")
        header, _ = read_checkpoint(color_ckpt)
        report.seeds.append(int(header.get("seed", -1)))
        task_color = load_task_checkpoint(color_ckpt)

        add(report.accuracies, "color", evaluate_accuracy(task_color, target_test))
        add(
            report.accuracies,
            "color_source",
            evaluate_accuracy(task_color, source_test),
        )
        for variant in ("gray", "hsv", "pca"):
            ckpt = task_ckpt_path(run_dir, variant)
            if not ckpt.exists():
                continue
            net = load_task_checkpoint(ckpt)
            pre = grayscale if variant == "gray" else identity
            add(
                report.accuracies,
                variant if variant != "gray" else "gray",
                evaluate_accuracy(net, target_test, pre),
            )
            if variant == "gray":
                add(
                    report.accuracies,
                    "gray_source",
                    evaluate_accuracy(net, source_test, pre),
                )

        add(
            report.distances,
            "raw_t_vs_s",
            evaluate_style_distance(target_test.images, source_test.images, bins),
        )
        add(
            report.maes,
            "raw_t_vs_gt",
            paired_pixel_error(target_test, source_test),
        )

        for stage in (1, 2, 3):
            ckpt = stage_ckpt_path(run_dir, stage)
            if not ckpt.exists():
                continue
            state = checkpoint_load(ckpt)
            normalize = make_stain_normalizer(state.generator)
            add(
                report.accuracies,
                f"stage{stage}",
                evaluate_accuracy(task_color, target_test, normalize),
            )
            recon_s = normalize(source_test.images)
            recon_t = normalize(target_test.images)
            add(
                report.distances,
                f"stage{stage}_recon_s_vs_s",
                evaluate_style_distance(recon_s, source_test.images, bins),
            )
            add(
                report.distances,
                f"stage{stage}_recon_t_vs_s",
                evaluate_style_distance(recon_t, source_test.images, bins),
            )
            add(
                report.maes,
                f"stage{stage}_t_vs_gt",
                paired_pixel_error(_as_patchset(recon_t, target_test), source_test),
            )

    emit_report(report, out_dir)
    return report


def run_report(metrics_csv: str | Path, out_dir: str | Path) -> Path:
    rows = read_metrics_csv(metrics_csv)
    return render_accuracy_curve(rows, Path(out_dir) / "fig5_analog.png")


def normalize_dir(
    in_dir: str | Path,
    out_dir: str | Path,
    generator_ckpt: str | Path | None = None,
    dump_gm: bool = False,
) -> list[Path]:
    """Stain-normalize a directory of PNGs; optionally dump the GM planes."""
    in_dir = Path(in_dir)
    out_dir = Path(out_dir)
    paths = sorted(in_dir.glob("*.png"))
    if not paths:
        raise DataError(f"no PNG files in {in_dir}")
    generator = None
    if generator_ckpt is not None:
        generator = checkpoint_load(generator_ckpt).generator
        generator.eval()
    written: list[Path] = []
    for path in paths:
        img = read_png(path)
        gm = make_gm(img)
        if dump_gm:
            gray_path = out_dir / f"{path.stem}_gray.png"
            mask_path = out_dir / f"{path.stem}_mask.png"
            write_png(gray_path, gm.gray)
            write_png(mask_path, gm.mask)
            written += [gray_path, mask_path]
        if generator is not None:
            with torch.no_grad():
                recon = generator(
                    torch.from_numpy(gm.stacked().transpose(2, 0, 1)[None])
                )
            out_path = out_dir / f"{path.stem}_norm.png"
            write_png(out_path, recon[0].permute(1, 2, 0).numpy())
            written.append(out_path)
    return written


def planned_outputs(command: str, args) -> list[Path]:
    """Primary outputs used for overwrite refusal and --dry-run reporting."""
    out = Path(args.out) if getattr(args, "out", None) else None
    if command == "gen-data":
        return [out / "manifest.jsonl"]
    if command == "train-task":
        return [task_ckpt_path(out, args.variant)]
    if command == "train-style":
        return [stage_ckpt_path(out, args.stage)]
    if command == "eval":
        return [out / "report.csv", out / "distances.csv"]
    if command == "report":
        return [out / "fig5_analog.png"]
    if command == "normalize":
        return []  # per-file outputs, checked against input listing
    return []
