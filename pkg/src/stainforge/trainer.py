"""Staged training: task-network pretraining, then the three style stages.

One logical update thread owns all mutable state. Every stochastic draw
comes from the numpy generator carried inside TrainState, so a checkpoint
(parameters, optimizer moments, rng state, step counters) resumes a run
bit-exactly.

Stage data contract: stage 1 touches only the source domain; stages 2-3
additionally read target images. Target labels are never read anywhere.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    DataError,
    DivergenceError,
    NonFiniteGradientError,
    NonFiniteUpdateError,
    TrainingError,
)
from .losses import (
    LossWeights,
    gan1_d_loss,
    gan2_d_loss,
    gan_g_loss,
    l1_loss,
    task_loss,
    total_objective,
)
from .nets import (
    ArchConfig,
    Discriminator,
    GeneratorUNet,
    TaskNet,
    build_discriminator,
    build_generator,
    build_task_net,
    default_discriminator_config,
    default_generator_config,
    default_task_config,
    float_blocks,
    load_blocks_into,
    read_checkpoint,
    to_nchw,
    write_checkpoint,
)
from .stainremoval import gm_batch
from .synthcells import (
    HsvJitterRanges,
    PatchSet,
    PcaBasis,
    fit_pca_basis,
    hsv_jitter_augment,
    pca_color_augment,
)


@dataclass(frozen=True)
class OptimSettings:
    """Adam settings; image-to-image convention (2e-4, 0.5, 0.999)."""

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Plain Adam over a module's named parameters with explicit moments,
    so the full optimizer state serializes into checkpoint blocks."""

    def __init__(self, module: nn.Module, settings: OptimSettings):
        self.settings = settings
        self.params = dict(module.named_parameters())
        self.m = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.v = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.t = 0

    def step(self, grads: dict[str, torch.Tensor]) -> None:
        s = self.settings
        self.t += 1
        bc1 = 1.0 - s.beta1**self.t
        bc2 = 1.0 - s.beta2**self.t
        with torch.no_grad():
            for name, p in self.params.items():
                g = grads[name]
                m = self.m[name].mul_(s.beta1).add_(g, alpha=1.0 - s.beta1)
                v = self.v[name].mul_(s.beta2).addcmul_(g, g, value=1.0 - s.beta2)
                update = s.lr * (m / bc1) / ((v / bc2).sqrt() + s.eps)
                if not torch.isfinite(update).all():
                    raise NonFiniteUpdateError(f"non-finite update for {name}")
                p.sub_(update)


def _grads(module: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    named = list(module.named_parameters())
    gs = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = {}
    for (name, p), g in zip(named, gs):
        if g is None:
            g = torch.zeros_like(p)
        elif not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in block {name}")
        out[name] = g
    return out


@dataclass(frozen=True)
class StageConfig:
    stage: int
    steps: int
    batch_size: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimSettings = field(default_factory=OptimSettings)
    checkpoint_every: int = 500
    eval_every: int = 200
    divergence_patience: int = 10


def default_stage_config(stage: int) -> StageConfig:
    steps = {1: 2000, 2: 1000, 3: 1000}
    if stage not in steps:
        raise TrainingError(f"unknown stage {stage}")
    return StageConfig(stage=stage, steps=steps[stage])


@dataclass
class TrainState:
    generator: GeneratorUNet
    d1: Discriminator
    d2: Discriminator
    opt_g: Adam
    opt_d1: Adam
    opt_d2: Adam
    rng: np.random.Generator
    seed: int
    step: int = 0  # global generator steps across all stages
    stage: int = 0  # active or last completed stage; 0 = fresh
    stage_step: int = 0  # steps completed within the active stage


def init_train_state(
    seed: int,
    gen_cfg: ArchConfig | None = None,
    disc_cfg: ArchConfig | None = None,
    optimizer: OptimSettings | None = None,
) -> TrainState:
    gen_cfg = gen_cfg or default_generator_config()
    disc_cfg = disc_cfg or default_discriminator_config(gen_cfg.size)
    optimizer = optimizer or OptimSettings()
    g = build_generator(gen_cfg, seed + 11)
    d1 = build_discriminator(disc_cfg, seed + 12)
    d2 = build_discriminator(disc_cfg, seed + 13)
    return TrainState(
        generator=g,
        d1=d1,
        d2=d2,
        opt_g=Adam(g, optimizer),
        opt_d1=Adam(d1, optimizer),
        opt_d2=Adam(d2, optimizer),
        rng=np.random.default_rng([seed, 101]),
        seed=seed,
    )


MetricRow = tuple[int, int, str, float]


def write_metrics_csv(path: str | Path, rows: Iterable[MetricRow], append: bool = False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new_file = not (append and path.exists())
    with open(path, "a" if append else "w") as fh:
        if new_file:
            fh.write("step,stage,term,value\n")
        for step, stage, term, value in rows:
            fh.write(f"{step},{stage},{term},{value:.10g}\n")


def read_metrics_csv(path: str | Path) -> list[MetricRow]:
    rows = []
    with open(path) as fh:
        header = fh.readline()
        if header.strip() != "step,stage,term,value":
            raise DataError(f"{path}: unexpected metrics header {header!r}")
        for line in fh:
            step, stage, term, value = line.rstrip("\n").split(",")
            rows.append((int(step), int(stage), term, float(value)))
    return rows


def _batch(
    patches: PatchSet, rng: np.random.Generator, batch_size: int
) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.integers(0, len(patches), size=batch_size)
    return patches.images[idx], patches.labels[idx]


def train_stage(
    cfg: StageConfig,
    state: TrainState,
    source: PatchSet,
    target: PatchSet | None = None,
    task_net: TaskNet | None = None,
    eval_hook: Callable[[TrainState], dict[str, float]] | None = None,
    checkpoint_cb: Callable[[TrainState], None] | None = None,
) -> list[MetricRow]:
    """Run one training stage to its configured step count.

    Per step: sample a source minibatch (plus a target minibatch from stage
    2 on), compute every active loss on the current parameters, then update
    D1 (and D2 from stage 2) on their discriminator losses and G on the
    weighted generator objective. The task network is never updated.
    """
    if cfg.stage not in (1, 2, 3):
        raise TrainingError(f"stage must be 1, 2, or 3, got {cfg.stage}")
    if state.stage not in (cfg.stage - 1, cfg.stage):
        raise TrainingError(
            f"stage {cfg.stage} requires a stage-{cfg.stage - 1} state, "
            f"got stage {state.stage}"
        )
    if cfg.stage >= 2 and target is None:
        raise TrainingError(f"stage {cfg.stage} requires target-domain data")
    if cfg.stage == 3 and task_net is None:
        raise TrainingError("stage 3 requires a frozen task network")
    if state.stage == cfg.stage - 1:
        state.stage = cfg.stage
        state.stage_step = 0

    g, d1, d2 = state.generator, state.d1, state.d2
    g.train()
    d1.train()
    d2.train()
    if task_net is not None:
        task_net.eval()
        for p in task_net.parameters():
            p.requires_grad_(False)

    rows: list[MetricRow] = []

    def run_hook():
        if eval_hook is None:
            return
        was_training = g.training
        g.eval()
        extra = eval_hook(state)
        if was_training:
            g.train()
        for term, value in extra.items():
            rows.append((state.step, cfg.stage, term, float(value)))

    if state.stage_step == 0:
        run_hook()

    nonfinite_streak = 0
    while state.stage_step < cfg.steps:
        x_s_np, y_s_np = _batch(source, state.rng, cfg.batch_size)
        x_s = to_nchw(x_s_np)
        gm_s = torch.from_numpy(gm_batch(x_s_np))
        y_s = torch.from_numpy(y_s_np)

        fake_s = g(gm_s)
        loss_d1 = gan1_d_loss(d1(x_s), d1(fake_s.detach()))

        terms: dict[str, torch.Tensor] = {
            "gan1": gan_g_loss(d1(fake_s)),
            "l1": l1_loss(fake_s, x_s),
        }
        loss_d2 = None
        if cfg.stage >= 2:
            x_t_np, _ = _batch(target, state.rng, cfg.batch_size)
            gm_t = torch.from_numpy(gm_batch(x_t_np))
            fake_t = g(gm_t)
            loss_d2 = gan2_d_loss(d2(x_s), d2(fake_t.detach()))
            terms["gan2"] = gan_g_loss(d2(fake_t))
        if cfg.stage == 3:
            terms["task"] = task_loss(task_net(fake_s), y_s)

        bundle = total_objective(terms, cfg.weights, cfg.stage)

        state.step += 1
        state.stage_step += 1

        if not bool(torch.isfinite(bundle.total)):
            nonfinite_streak += 1
            if nonfinite_streak >= cfg.divergence_patience:
                raise DivergenceError(
                    f"total loss non-finite for {nonfinite_streak} consecutive steps"
                )
            continue
        nonfinite_streak = 0

        # all gradients are taken on the step's starting parameters, then
        # the three updates apply together
        g_grads = _grads(g, bundle.total)
        d1_grads = _grads(d1, loss_d1)
        d2_grads = _grads(d2, loss_d2) if loss_d2 is not None else None
        state.opt_d1.step(d1_grads)
        if d2_grads is not None:
            state.opt_d2.step(d2_grads)
        state.opt_g.step(g_grads)

        rows.append((state.step, cfg.stage, "d1", float(loss_d1.detach())))
        if loss_d2 is not None:
            rows.append((state.step, cfg.stage, "d2", float(loss_d2.detach())))
        for name, value in bundle.terms.items():
            rows.append((state.step, cfg.stage, name, float(value.detach())))
        rows.append((state.step, cfg.stage, "total", float(bundle.total.detach())))

        if state.stage_step % cfg.eval_every == 0:
            run_hook()
        if checkpoint_cb is not None and state.stage_step % cfg.checkpoint_every == 0:
            checkpoint_cb(state)

    return rows


# ---------------------------------------------------------------------------
# Task network pretraining
# ---------------------------------------------------------------------------

Preprocessor = Callable[[np.ndarray, np.random.Generator | None], np.ndarray]


def make_task_preprocessor(
    variant: str,
    hsv_ranges: HsvJitterRanges | None = None,
    pca_basis: PcaBasis | None = None,
    pca_magnitude: float = 0.1,
) -> Preprocessor:
    """Training-time batch transform for one task-network variant.

    `color` is identity; `gray` collapses to a single luma channel;
    `hsv`/`pca` are stochastic augmentations and need the rng argument.
    """

    def gray(batch: np.ndarray, rng=None) -> np.ndarray:
        luma = (
            0.299 * batch[..., 0] + 0.587 * batch[..., 1] + 0.114 * batch[..., 2]
        )
        return np.clip(luma, 0.0, 1.0).astype(np.float32)[..., None]

    def hsv(batch: np.ndarray, rng=None) -> np.ndarray:
        if rng is None:
            return batch
        ranges = hsv_ranges or HsvJitterRanges()
        return np.stack([hsv_jitter_augment(img, rng, ranges) for img in batch])

    def pca(batch: np.ndarray, rng=None) -> np.ndarray:
        if rng is None:
            return batch
        return np.stack(
            [pca_color_augment(img, rng, pca_magnitude, pca_basis) for img in batch]
        )

    def color(batch: np.ndarray, rng=None) -> np.ndarray:
        return batch

    table = {"color": color, "gray": gray, "hsv": hsv, "pca": pca}
    if variant not in table:
        raise DataError(f"unknown task variant {variant!r}")
    return table[variant]


@dataclass(frozen=True)
class TaskTrainConfig:
    steps: int = 800
    batch_size: int = 16
    optimizer: OptimSettings = field(default_factory=OptimSettings)
    eval_every: int = 100
    arch: ArchConfig = field(default_factory=default_task_config)


def _accuracy(net: nn.Module, images: np.ndarray, labels: np.ndarray) -> float:
    net.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(images), 256):
            probs = net(to_nchw(images[i : i + 256]))
            pred = (probs > 0.5).long().numpy()
            correct += int((pred == labels[i : i + 256]).sum())
    return correct / len(images)


def train_task_network(
    train: PatchSet,
    heldout: PatchSet,
    cfg: TaskTrainConfig,
    seed: int,
    preprocess: Preprocessor | None = None,
) -> tuple[TaskNet, list[tuple[int, float]]]:
    """Supervised pretraining on source labels; returns the best-held-out
    snapshot and the accuracy curve."""
    if len(train) == 0 or len(heldout) == 0:
        raise DataError("task training needs non-empty train and heldout sets")
    n_pos = int(train.labels.sum())
    if n_pos * 2 != len(train):
        raise DataError(
            f"task training requires 1:1 class balance, got {n_pos} positives "
            f"of {len(train)}"
        )
    preprocess = preprocess or (lambda batch, rng=None: batch)
    rng = np.random.default_rng([seed, 202])
    net = build_task_net(cfg.arch, seed + 17)
    opt = Adam(net, cfg.optimizer)

    heldout_images = preprocess(heldout.images, None)
    curve: list[tuple[int, float]] = []
    best_acc = -1.0
    best_blocks: dict[str, torch.Tensor] | None = None

    for step in range(1, cfg.steps + 1):
        batch_np, y_np = _batch(train, rng, cfg.batch_size)
        batch_np = preprocess(batch_np, rng)
        net.train()
        probs = net(to_nchw(batch_np))
        loss = task_loss(probs, torch.from_numpy(y_np))
        opt.step(_grads(net, loss))
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = _accuracy(net, heldout_images, heldout.labels)
            curve.append((step, acc))
            if acc > best_acc:
                best_acc = acc
                best_blocks = {
                    n: t.detach().clone() for n, t in float_blocks(net)
                }

    if best_blocks is not None:
        with torch.no_grad():
            for name, tensor in float_blocks(net):
                tensor.copy_(best_blocks[name])
    return net, curve


# ---------------------------------------------------------------------------
# Train-state checkpointing
# ---------------------------------------------------------------------------

_NETS = ("generator", "d1", "d2")
_OPTS = {"generator": "opt_g", "d1": "opt_d1", "d2": "opt_d2"}


def checkpoint_save(state: TrainState, path: str | Path) -> None:
    header = {
        "kind": "train_state",
        "seed": state.seed,
        "stage": state.stage,
        "step": state.step,
        "stage_step": state.stage_step,
        "arch": {
            "generator": asdict(state.generator.cfg),
            "discriminator": asdict(state.d1.cfg),
        },
        "optimizer": asdict(state.opt_g.settings),
        "adam_t": {name: getattr(state, _OPTS[name]).t for name in _NETS},
        "rng_state": state.rng.bit_generator.state,
    }
    blocks: list[tuple[str, torch.Tensor]] = []
    for name in _NETS:
        net = getattr(state, name)
        blocks += [(f"{name}.{n}", t) for n, t in float_blocks(net)]
        opt = getattr(state, _OPTS[name])
        blocks += [(f"{name}.adam.m.{n}", t) for n, t in opt.m.items()]
        blocks += [(f"{name}.adam.v.{n}", t) for n, t in opt.v.items()]
    write_checkpoint(path, header, blocks)


def checkpoint_load(path: str | Path) -> TrainState:
    header, blocks = read_checkpoint(path)
    if header.get("kind") != "train_state":
        raise TrainingError(f"{path} is not a training checkpoint")
    gen_cfg = ArchConfig(**header["arch"]["generator"])
    disc_cfg = ArchConfig(**header["arch"]["discriminator"])
    optimizer = OptimSettings(**header["optimizer"])
    state = TrainState(
        generator=GeneratorUNet(gen_cfg),
        d1=Discriminator(disc_cfg),
        d2=Discriminator(disc_cfg),
        opt_g=None,  # type: ignore[arg-type]
        opt_d1=None,  # type: ignore[arg-type]
        opt_d2=None,  # type: ignore[arg-type]
        rng=np.random.default_rng(),
        seed=header["seed"],
        step=header["step"],
        stage=header["stage"],
        stage_step=header["stage_step"],
    )
    for name in _NETS:
        net = getattr(state, name)
        prefix = f"{name}."
        net_blocks = {
            n[len(prefix) :]: arr
            for n, arr in blocks.items()
            if n.startswith(prefix) and not n.startswith(f"{name}.adam.")
        }
        load_blocks_into(net, net_blocks)
        opt = Adam(net, optimizer)
        opt.t = header["adam_t"][name]
        with torch.no_grad():
            for pname in opt.params:
                opt.m[pname].copy_(torch.from_numpy(blocks[f"{name}.adam.m.{pname}"]))
                opt.v[pname].copy_(torch.from_numpy(blocks[f"{name}.adam.v.{pname}"]))
        setattr(state, _OPTS[name], opt)
    state.rng.bit_generator.state = header["rng_state"]
    return state


def save_task_checkpoint(net: TaskNet, path: str | Path, seed: int) -> None:
    write_checkpoint(
        path,
        {"kind": "task", "arch": asdict(net.cfg), "seed": seed, "stage": None},
        float_blocks(net),
    )


def load_task_checkpoint(path: str | Path) -> TaskNet:
    header, blocks = read_checkpoint(path)
    if header.get("kind") != "task":
        raise TrainingError(f"{path} is not a task checkpoint")
    net = TaskNet(ArchConfig(**header["arch"]))
    load_blocks_into(net, blocks)
    return net


def task_param_bytes(net: TaskNet) -> bytes:
    """Canonical byte serialization of the task parameters, for freeze checks."""
    return b"".join(
        t.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
        for _, t in float_blocks(net)
    )
