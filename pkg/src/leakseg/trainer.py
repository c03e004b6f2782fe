"""Training orchestration: batch assembly, alternating discriminator and
generator updates, EMA maintenance, diagnostics, checkpoints and curves.

All randomness flows through per-role generators spawned from the master
seed (labelled crops, unlabelled crops, target crops, latent noise, teacher
noise), so ablations that skip a component leave the remaining streams
untouched and runs are reproducible and resumable bit-for-bit.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import evaluation
from .config import ExperimentConfig
from .data import (
    DatasetIndex,
    LabelMaskBatch,
    PatchBatch,
    SemiSplit,
    _load_image_u8,
    _load_mask_bool,
    extract_patches,
    load_dataset,
    split_semi,
)
from .discriminator import (
    LeakConfig,
    SegLogits,
    UNetDiscriminator,
    class_probabilities,
    realness_score,
)
from .errors import ConfigError, NumericError
from .generator import GeneratorActivations, NoiseBatch, PatchGenerator, Z_LENGTH
from .losses import (
    LossBundle,
    LossWeights,
    feature_matching_loss,
    focal_consistency,
    generator_adversarial_loss,
    mse_consistency,
    supervised_loss,
    total_discriminator_loss,
    unsupervised_loss,
)
from .teacher import TeacherState, ema_update, init_teacher, teacher_predict

CHECKPOINT_FORMAT_VERSION = 1

CURVE_COLUMNS = (
    "step",
    "sup",
    "unsup",
    "cons",
    "gen_adv",
    "total",
    "lambda3_eff",
    "mean_p_fake_on_unlabelled",
    "mean_maxclass_p_on_fake",
    "mean_d_real",
    "mean_d_fake",
)


@dataclass
class TrainingDiagnostics:
    """Observable proxies for the probability-perturbation quantities."""

    mean_p_fake_on_unlabelled: float = float("nan")
    mean_maxclass_p_on_fake: float = float("nan")
    mean_d_real: float = float("nan")
    mean_d_fake: float = float("nan")

    @classmethod
    def from_logits(cls, s_ul: Optional[SegLogits], s_fake: Optional[SegLogits]) -> "TrainingDiagnostics":
        diag = cls()
        with torch.no_grad():
            if s_ul is not None:
                p_ul = class_probabilities(s_ul)
                diag.mean_p_fake_on_unlabelled = float(p_ul[:, -1].mean())
                diag.mean_d_real = float(realness_score(s_ul).mean())
            if s_fake is not None:
                p_f = class_probabilities(s_fake)
                diag.mean_maxclass_p_on_fake = float(p_f[:, :-1].max(dim=1).values.mean())
                diag.mean_d_fake = float(realness_score(s_fake).mean())
        return diag

    def as_dict(self) -> dict[str, float]:
        return {
            "mean_p_fake_on_unlabelled": self.mean_p_fake_on_unlabelled,
            "mean_maxclass_p_on_fake": self.mean_maxclass_p_on_fake,
            "mean_d_real": self.mean_d_real,
            "mean_d_fake": self.mean_d_fake,
        }


@dataclass
class StepBatch:
    """Everything one outer iteration consumes."""

    labelled: PatchBatch
    labels: LabelMaskBatch
    unlabelled: Optional[PatchBatch] = None
    z: Optional[NoiseBatch] = None
    teacher_seed: Optional[int] = None


@dataclass
class TrainState:
    """Mutable training state: models, optimizers, RNG streams, counters."""

    discriminator: UNetDiscriminator
    generator: Optional[PatchGenerator]
    teacher: Optional[TeacherState]
    opt_d: torch.optim.Optimizer
    opt_g: Optional[torch.optim.Optimizer]
    source_index: DatasetIndex
    split: SemiSplit
    target_index: Optional[DatasetIndex]
    dtype: torch.dtype
    rng_labelled: np.random.Generator
    rng_unlabelled: np.random.Generator
    rng_target: np.random.Generator
    rng_teacher: np.random.Generator
    z_generator: torch.Generator
    step: int = 0
    components: frozenset[str] = frozenset()
    d_substeps: int = field(default=0)


def _torch_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF)


def effective_weights(cfg: ExperimentConfig, step: int) -> LossWeights:
    """Loss weights at a step; lambda3 ramps linearly over the first
    ``cons_ramp_fraction`` of training so an early noisy teacher cannot
    dominate."""
    lc = cfg.loss
    ramp_steps = lc.cons_ramp_fraction * cfg.optim.iterations
    factor = 1.0 if ramp_steps <= 0 else min(1.0, step / ramp_steps)
    return LossWeights(
        lambda1=lc.lambda1,
        lambda2=lc.lambda2,
        lambda3=lc.lambda3 * factor,
        focal_alpha_t=lc.focal_alpha_t,
        focal_rho=lc.focal_rho,
    )


def build_state(cfg: ExperimentConfig) -> TrainState:
    """Construct models, optimizers and RNG streams for one run.

    Components follow the ablation mode: unet_only never constructs the
    generator, teacher or unsupervised losses; each level adds exactly one
    component on top of the previous level's set.
    """
    if cfg.torch_threads is not None:
        torch.set_num_threads(cfg.torch_threads)
    dtype = torch.float64 if cfg.precision == "float64" else torch.float32

    source_index = load_dataset(cfg.data.root, cfg.data.layout)
    split = split_semi(source_index, cfg.data.n_labelled, cfg.seed)
    target_index = None
    if cfg.cross_domain is not None:
        # masks withheld so no training code path can read target labels
        target_index = load_dataset(cfg.cross_domain.root, cfg.cross_domain.layout).without_masks()

    channels = cfg.channels()
    probe = _load_image_u8(source_index.image_paths[0])
    if probe.shape[2] != channels:
        raise ConfigError(
            f"config expects {channels} channel(s) but {source_index.image_paths[0]} "
            f"has {probe.shape[2]}"
        )

    if cfg.uses_gan() and not split.unlabelled:
        raise ConfigError(
            "GAN ablations need unlabelled images, but the split left none"
        )

    ss = np.random.SeedSequence(cfg.seed)
    (ss_init_d, ss_init_g, ss_lab, ss_ul, ss_tgt, ss_z, ss_teacher) = ss.spawn(7)

    components = {"unet"}
    generator = None
    gen_ladder = None
    if cfg.uses_gan():
        components.add("gan")
        generator = PatchGenerator(out_channels=channels, base_width=cfg.model.gen_base_width)
        gen_init = torch.Generator().manual_seed(_torch_seed(ss_init_g))
        generator.init_weights(gen_init)
        generator.to(dtype)
        gen_ladder = generator.ladder_channels

    leak_cfg = LeakConfig(
        enabled=cfg.leak_enabled(),
        layers=tuple(cfg.ablation.leak.layers),
        alpha=tuple(cfg.ablation.leak.alpha),
        beta=tuple(cfg.ablation.leak.beta),
    )
    discriminator = UNetDiscriminator(
        in_channels=channels,
        num_classes=2,
        base_width=cfg.model.disc_base_width,
        leak=leak_cfg,
        gen_ladder_channels=gen_ladder if cfg.leak_enabled() else None,
    )
    disc_init = torch.Generator().manual_seed(_torch_seed(ss_init_d))
    discriminator.init_weights(disc_init)
    discriminator.to(dtype)
    if cfg.leak_enabled():
        components.add("leak")

    teacher = None
    if cfg.uses_teacher():
        components.add("mean_teacher")
        teacher = init_teacher(discriminator, cfg.ema.alpha, cfg.ema.noise_lambda)

    opt_d = torch.optim.Adam(
        discriminator.parameters(), lr=cfg.optim.lr, betas=(cfg.optim.beta1, cfg.optim.beta2)
    )
    opt_g = None
    if generator is not None:
        opt_g = torch.optim.Adam(
            generator.parameters(), lr=cfg.optim.lr, betas=(cfg.optim.beta1, cfg.optim.beta2)
        )

    return TrainState(
        discriminator=discriminator,
        generator=generator,
        teacher=teacher,
        opt_d=opt_d,
        opt_g=opt_g,
        source_index=source_index,
        split=split,
        target_index=target_index,
        dtype=dtype,
        rng_labelled=np.random.default_rng(ss_lab),
        rng_unlabelled=np.random.default_rng(ss_ul),
        rng_target=np.random.default_rng(ss_tgt),
        rng_teacher=np.random.default_rng(ss_teacher),
        z_generator=torch.Generator().manual_seed(_torch_seed(ss_z)),
        components=frozenset(components),
    )


def _concat_batches(parts: list[PatchBatch]) -> PatchBatch:
    if len(parts) == 1:
        return parts[0]
    return PatchBatch(
        pixels=torch.cat([p.pixels for p in parts], dim=0),
        source_ids=np.concatenate([p.source_ids for p in parts]),
        crop_origins=np.concatenate([p.crop_origins for p in parts]),
    )


def sample_step_batches(state: TrainState, cfg: ExperimentConfig) -> StepBatch:
    """Draw one outer iteration's labelled/unlabelled/latent samples."""
    lab_seed = int(state.rng_labelled.integers(2**63))
    labelled, labels = extract_patches(
        state.source_index, list(state.split.labelled), cfg.optim.batch_labelled, lab_seed
    )
    if labels is None:
        raise ConfigError("labelled images must all carry masks")
    labelled.pixels = labelled.pixels.to(state.dtype)

    batch = StepBatch(labelled=labelled, labels=labels)
    if state.generator is None:
        return batch

    n_ul = cfg.optim.batch_unlabelled
    n_target = 0
    if state.target_index is not None:
        n_target = int(round(cfg.cross_domain.mix_ratio * n_ul))
    parts = []
    if n_ul - n_target > 0:
        seed = int(state.rng_unlabelled.integers(2**63))
        parts.append(
            extract_patches(state.source_index, list(state.split.unlabelled), n_ul - n_target, seed)[0]
        )
    if n_target > 0:
        seed = int(state.rng_target.integers(2**63))
        parts.append(
            extract_patches(state.target_index, list(range(len(state.target_index))), n_target, seed)[0]
        )
    unlabelled = _concat_batches(parts)
    unlabelled.pixels = unlabelled.pixels.to(state.dtype)
    batch.unlabelled = unlabelled

    batch.z = NoiseBatch(
        z=torch.randn(cfg.optim.batch_fake, Z_LENGTH, generator=state.z_generator, dtype=state.dtype)
    )
    if state.teacher is not None:
        batch.teacher_seed = int(state.rng_teacher.integers(2**63))
    return batch


def _detached(acts: GeneratorActivations) -> GeneratorActivations:
    return GeneratorActivations(
        intermediates=[t.detach() for t in acts.intermediates],
        fake_image=PatchBatch.synthetic(acts.fake_image.pixels.detach()),
    )


def discriminator_losses(
    state: TrainState,
    batch: StepBatch,
    cfg: ExperimentConfig,
    weights: LossWeights,
    acts: Optional[GeneratorActivations] = None,
) -> LossBundle:
    """All discriminator-side loss terms for one (sub-)step.

    The supervised forward runs on clean features; when leaking is enabled
    the unsupervised forwards (unlabelled and fake) are the polluted ones.
    ``acts`` must already be detached from the generator graph.
    """
    d = state.discriminator
    use_leak = d.leak.enabled
    s_lab, _ = d(batch.labelled.pixels, use_leak=False)
    sup = supervised_loss(s_lab, batch.labels, weights, focal=cfg.loss.supervised_focal)

    zero = torch.zeros((), dtype=state.dtype)
    unsup, cons, gen_adv = zero, zero, None
    s_ul = s_fake = None
    if acts is not None and batch.unlabelled is not None:
        leak_arg = acts if use_leak else None
        s_ul, _ = d(batch.unlabelled.pixels, leak=leak_arg, use_leak=use_leak)
        s_fake, _ = d(acts.fake_image.pixels, leak=leak_arg, use_leak=use_leak)
        unsup = unsupervised_loss(s_ul, s_fake)
        with torch.no_grad():
            gen_adv = generator_adversarial_loss(s_fake)
        if state.teacher is not None:
            p_student = class_probabilities(s_ul)
            p_teacher = teacher_predict(state.teacher, batch.unlabelled, batch.teacher_seed)
            if cfg.loss.consistency == "mse":
                cons = mse_consistency(p_student, p_teacher)
            else:
                cons = focal_consistency(p_student, p_teacher, weights)

    diag = TrainingDiagnostics.from_logits(s_ul, s_fake)
    diagnostics = diag.as_dict()
    diagnostics["lambda3_effective"] = weights.lambda3
    return total_discriminator_loss(sup, unsup, cons, weights, gen_adv=gen_adv, diagnostics=diagnostics)


def _generator_objective(
    state: TrainState, batch: StepBatch, cfg: ExperimentConfig
) -> torch.Tensor:
    d = state.discriminator
    use_leak = d.leak.enabled
    acts = state.generator(batch.z)
    if cfg.loss.gen_loss == "feature-matching":
        # the bottleneck comes from the encoder, which the leak never touches
        _, feat_fake = d(acts.fake_image.pixels, use_leak=False)
        with torch.no_grad():
            _, feat_real = d(batch.unlabelled.pixels, use_leak=False)
        return feature_matching_loss(feat_real, feat_fake)
    s_fake, _ = d(acts.fake_image.pixels, leak=acts if use_leak else None, use_leak=use_leak)
    return generator_adversarial_loss(s_fake)


def train_step(
    state: TrainState, batch: StepBatch, cfg: ExperimentConfig
) -> tuple[LossBundle, TrainingDiagnostics]:
    """One outer iteration: D sub-steps on the joint objective (each followed
    by an EMA update), then G sub-steps on the adversarial objective."""
    weights = effective_weights(cfg, state.step + 1)

    acts_detached = None
    if state.generator is not None:
        state.generator.train()
        with torch.no_grad():
            acts_detached = _detached(state.generator(batch.z))

    state.discriminator.train()
    bundle = None
    for _ in range(cfg.optim.d_steps):
        bundle = discriminator_losses(state, batch, cfg, weights, acts_detached)
        state.opt_d.zero_grad()
        bundle.total.backward()
        state.opt_d.step()
        state.d_substeps += 1
        if state.teacher is not None:
            ema_update(state.teacher, state.discriminator)

    if state.generator is not None:
        for _ in range(cfg.optim.g_steps):
            gen_loss = _generator_objective(state, batch, cfg)
            if not bool(torch.isfinite(gen_loss)):
                raise NumericError(f"non-finite generator loss: {float(gen_loss)}")
            state.opt_g.zero_grad()
            gen_loss.backward()
            state.opt_g.step()

    state.step += 1
    diag = TrainingDiagnostics(**{k: bundle.diagnostics[k] for k in TrainingDiagnostics().as_dict()})
    return bundle, diag


def probe_diagnostics(
    state: TrainState,
    x_ul: PatchBatch,
    fake: GeneratorActivations | PatchBatch,
) -> TrainingDiagnostics:
    """Fresh no-grad probe of the pollution observables on given batches.

    When ``fake`` carries generator activations and the leak is enabled,
    the forwards run polluted, exactly as during training.
    """
    d = state.discriminator
    if isinstance(fake, GeneratorActivations):
        leak_arg = fake if d.leak.enabled else None
        use_leak = d.leak.enabled
        fake_pixels = fake.fake_image.pixels
    else:
        leak_arg, use_leak = None, False
        fake_pixels = fake.pixels
    with torch.no_grad():
        s_ul, _ = d(x_ul.pixels, leak=leak_arg, use_leak=use_leak)
        s_fake, _ = d(fake_pixels, leak=leak_arg, use_leak=use_leak)
    return TrainingDiagnostics.from_logits(s_ul, s_fake)


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(state: TrainState, cfg: ExperimentConfig, path: str | Path) -> Path:
    """Atomic write (temp file then rename) of the full resumable state."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "step": state.step,
        "d_substeps": state.d_substeps,
        "config": cfg.to_dict(),
        "components": sorted(state.components),
        "models": {"discriminator": state.discriminator.state_dict()},
        "optimizers": {"discriminator": state.opt_d.state_dict()},
        "rng": {
            "labelled": state.rng_labelled.bit_generator.state,
            "unlabelled": state.rng_unlabelled.bit_generator.state,
            "target": state.rng_target.bit_generator.state,
            "teacher": state.rng_teacher.bit_generator.state,
            "z": state.z_generator.get_state(),
        },
    }
    if state.generator is not None:
        payload["models"]["generator"] = state.generator.state_dict()
        payload["optimizers"]["generator"] = state.opt_g.state_dict()
    if state.teacher is not None:
        payload["models"]["teacher"] = state.teacher.net.state_dict()
        payload["teacher_step"] = state.teacher.step
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(state: TrainState, path: str | Path) -> TrainState:
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format in {path}")
    state.discriminator.load_state_dict(payload["models"]["discriminator"])
    if state.generator is not None:
        state.generator.load_state_dict(payload["models"]["generator"])
        state.opt_g.load_state_dict(payload["optimizers"]["generator"])
    if state.teacher is not None:
        state.teacher.net.load_state_dict(payload["models"]["teacher"])
        state.teacher.step = payload["teacher_step"]
    state.opt_d.load_state_dict(payload["optimizers"]["discriminator"])
    rng = payload["rng"]
    state.rng_labelled.bit_generator.state = rng["labelled"]
    state.rng_unlabelled.bit_generator.state = rng["unlabelled"]
    state.rng_target.bit_generator.state = rng["target"]
    state.rng_teacher.bit_generator.state = rng["teacher"]
    state.z_generator.set_state(rng["z"])
    state.step = payload["step"]
    state.d_substeps = payload["d_substeps"]
    return state


# ---------------------------------------------------------------------------
# full runs


def _format_cell(value: float) -> str:
    return f"{value:.17g}"


def _curve_row(step: int, bundle: LossBundle) -> str:
    d = bundle.diagnostics
    gen_adv = float(bundle.gen_adv) if bundle.gen_adv is not None else float("nan")
    cells = [
        str(step),
        _format_cell(float(bundle.sup)),
        _format_cell(float(bundle.unsup)),
        _format_cell(float(bundle.cons)),
        _format_cell(gen_adv),
        _format_cell(float(bundle.total)),
        _format_cell(d.get("lambda3_effective", float("nan"))),
        _format_cell(d.get("mean_p_fake_on_unlabelled", float("nan"))),
        _format_cell(d.get("mean_maxclass_p_on_fake", float("nan"))),
        _format_cell(d.get("mean_d_real", float("nan"))),
        _format_cell(d.get("mean_d_fake", float("nan"))),
    ]
    return ",".join(cells)


def _truncate_curves(path: Path, step: int) -> None:
    """Drop any curve rows newer than the checkpoint being resumed."""
    if not path.is_file():
        path.write_text(",".join(CURVE_COLUMNS) + "\n")
        return
    lines = path.read_text().splitlines()
    kept = [lines[0]]
    for line in lines[1:]:
        if int(line.split(",", 1)[0]) <= step:
            kept.append(line)
    path.write_text("\n".join(kept) + "\n")


def evaluate_on_index(
    state: TrainState, cfg: ExperimentConfig, index: DatasetIndex
) -> list[dict]:
    """Stitched whole-image evaluation over every masked image of an index."""
    net = state.discriminator
    if cfg.evaluation.eval_net == "teacher" and state.teacher is not None:
        net = state.teacher.net
    entries = []
    for i, image_path in enumerate(index.image_paths):
        if not index.has_mask(i):
            continue
        image = _load_image_u8(image_path)
        _, pred = evaluation.predict_full_image(
            net, image, stride=cfg.evaluation.stride, threshold=cfg.evaluation.threshold
        )
        gt = _load_mask_bool(index.mask_paths[i])
        fov = None
        if cfg.evaluation.fov != "off" and index.fov_paths is not None:
            fov = _load_mask_bool(index.fov_paths[i])
        counts = evaluation.confusion_counts(pred, gt, fov)
        entries.append(
            {"name": Path(image_path).name, "counts": counts, "fov_used": fov is not None}
        )
    return entries


def _eval_index(cfg: ExperimentConfig) -> Optional[DatasetIndex]:
    if cfg.cross_domain is not None:
        root = cfg.cross_domain.eval_root or cfg.cross_domain.root
        return load_dataset(root, cfg.cross_domain.layout)
    root = cfg.data.eval_root or cfg.data.root
    return load_dataset(root, cfg.data.layout)


def train(cfg: ExperimentConfig, resume_from: Optional[str | Path] = None) -> dict:
    """Run one experiment; returns paths of the produced artifacts.

    Deterministic for a fixed config and seed (single-threaded numerics);
    resumable from any checkpoint with bit-identical continuation.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    curves_path = out_dir / "curves.csv"

    state = build_state(cfg)
    patches_per_step = cfg.optim.batch_labelled + (
        cfg.optim.batch_unlabelled if cfg.uses_gan() else 0
    )
    ckpt_every = cfg.optim.checkpoint_every or max(
        1, math.ceil(cfg.data.patches_per_epoch / patches_per_step)
    )

    if resume_from is not None:
        load_checkpoint(state, resume_from)
        _truncate_curves(curves_path, state.step)
        last_ckpt = Path(resume_from)
        curves = curves_path.open("a")
    else:
        curves = curves_path.open("w")
        curves.write(",".join(CURVE_COLUMNS) + "\n")
        last_ckpt = save_checkpoint(state, cfg, ckpt_dir / "ckpt_000000.pt")

    try:
        while state.step < cfg.optim.iterations:
            batch = sample_step_batches(state, cfg)
            try:
                bundle, _ = train_step(state, batch, cfg)
            except NumericError as exc:
                raise NumericError(f"{exc}; last good checkpoint: {last_ckpt}") from exc
            curves.write(_curve_row(state.step, bundle) + "\n")
            if state.step % ckpt_every == 0 or state.step == cfg.optim.iterations:
                last_ckpt = save_checkpoint(state, cfg, ckpt_dir / f"ckpt_{state.step:06d}.pt")
    finally:
        curves.close()

    if state.step > 0 and last_ckpt.name != f"ckpt_{state.step:06d}.pt":
        last_ckpt = save_checkpoint(state, cfg, ckpt_dir / f"ckpt_{state.step:06d}.pt")

    report_path = None
    eval_index = _eval_index(cfg)
    entries = evaluate_on_index(state, cfg, eval_index)
    if entries:
        setting = {
            "dataset": cfg.data.layout,
            "eval_dataset": eval_index.name,
            "n_labelled": cfg.data.n_labelled,
            "ablation": cfg.ablation.mode,
            "seed": cfg.seed,
            "steps": state.step,
            "threshold": cfg.evaluation.threshold,
            "stride": cfg.evaluation.stride,
            "eval_net": cfg.evaluation.eval_net,
            "cross_domain": cfg.cross_domain is not None,
        }
        report_path = evaluation.emit_report(entries, setting, out_dir)

    return {
        "out_dir": str(out_dir),
        "curves": str(curves_path),
        "checkpoint": str(last_ckpt),
        "report": str(report_path) if report_path else None,
        "state": state,
    }


def train_cross_domain(cfg: ExperimentConfig, resume_from: Optional[str | Path] = None) -> dict:
    """Alg-2-style run: identical to :func:`train` but mini-batches mix in
    target-domain unlabelled patches and evaluation targets the new domain."""
    if cfg.cross_domain is None:
        raise ConfigError("train_cross_domain requires cfg.cross_domain")
    return train(cfg, resume_from=resume_from)
