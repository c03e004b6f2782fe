"""Loss functions: supervised (plain/focal) cross-entropy, K+1 GAN terms,
mean-teacher consistency (MSE and focal variants), generator objectives,
and the weighted total.

All functions are pure and operate on torch tensors, so they are safe to
evaluate concurrently and differentiate end-to-end. Probabilities are
clamped by ``PROB_EPS`` before any logarithm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .data import LabelMaskBatch
from .discriminator import EncoderFeatures, SegLogits
from .errors import NumericError

PROB_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights of the joint objective plus focal parameters."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    focal_alpha_t: float = 2.0
    focal_rho: float = 0.25

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "focal_rho"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.focal_alpha_t <= 0:
            raise ValueError("focal_alpha_t must be positive")


@dataclass
class LossBundle:
    """One step's loss terms; ``total`` keeps the autograd graph."""

    sup: torch.Tensor
    unsup: torch.Tensor
    cons: torch.Tensor
    total: torch.Tensor
    gen_adv: Optional[torch.Tensor] = None
    diagnostics: dict[str, float] = field(default_factory=dict)


def supervised_loss(
    s: SegLogits, y: LabelMaskBatch, w: LossWeights, focal: bool = False
) -> torch.Tensor:
    """Mean pixel cross-entropy of the renormalized real-class posterior.

    Conditioning on "not fake" reduces to a softmax over the K stored
    logits. With ``focal`` each pixel term is scaled by
    alpha_t * (1 - p_true)^rho, down-weighting well-classified pixels.
    """
    labels = y.classes
    k = s.num_classes
    if int(labels.max()) >= k:
        raise ValueError(f"label {int(labels.max())} out of range for {k} classes")
    log_post = F.log_softmax(s.logits, dim=1)
    log_p_true = log_post.gather(1, labels.unsqueeze(1)).squeeze(1)
    ce = -log_p_true
    if not focal:
        return ce.mean()
    p_true = log_p_true.exp()
    modulator = (1.0 - p_true).clamp_min(PROB_EPS) ** w.focal_rho
    return (w.focal_alpha_t * modulator * ce).mean()


def _log_realness(logits: torch.Tensor) -> torch.Tensor:
    """log D and log(1-D) per pixel, via the stable logit identity.

    With a = logsumexp over the K real logits, D = sigmoid(a), hence
    log D = -softplus(-a) and log(1-D) = -softplus(a).
    """
    a = torch.logsumexp(logits, dim=1)
    return -F.softplus(-a), -F.softplus(a)


def unsupervised_loss(s_real: SegLogits, s_fake: SegLogits) -> torch.Tensor:
    """-E[log D(x_unlabelled)] - E[log(1 - D(x_fake))], pixel-averaged."""
    if s_real.logits.numel() == 0 or s_fake.logits.numel() == 0:
        raise ValueError("unsupervised loss needs nonempty real and fake logits")
    log_d_real, _ = _log_realness(s_real.logits)
    _, log_one_minus_d_fake = _log_realness(s_fake.logits)
    return -log_d_real.mean() - log_one_minus_d_fake.mean()


def mse_consistency(p_student: torch.Tensor, p_teacher: torch.Tensor) -> torch.Tensor:
    """Mean squared gap between the two K+1 posterior fields."""
    if p_student.shape != p_teacher.shape:
        raise ValueError(
            f"posterior shapes differ: {tuple(p_student.shape)} vs {tuple(p_teacher.shape)}"
        )
    return ((p_student - p_teacher) ** 2).mean()


def focal_consistency(
    p_student: torch.Tensor, p_teacher: torch.Tensor, w: LossWeights
) -> torch.Tensor:
    """Probability-gap-modulated log-distance between student and teacher.

    Per pixel and channel: alpha_t * |p - p'|^rho * |log p - log p'|, summed
    over the K+1 channels and averaged over pixels. Absolute values make
    the penalty symmetric and nonnegative; it is zero exactly when the two
    posteriors coincide.
    """
    if p_student.shape != p_teacher.shape:
        raise ValueError(
            f"posterior shapes differ: {tuple(p_student.shape)} vs {tuple(p_teacher.shape)}"
        )
    ps = p_student.clamp(PROB_EPS, 1.0)
    pt = p_teacher.clamp(PROB_EPS, 1.0)
    # clamping the gap keeps the rho-power's gradient finite at ps == pt
    gap = (ps - pt).abs().clamp_min(PROB_EPS)
    term = w.focal_alpha_t * gap**w.focal_rho * (ps.log() - pt.log()).abs()
    return term.sum(dim=1).mean()


def generator_adversarial_loss(s_fake: SegLogits) -> torch.Tensor:
    """E[log(1 - D(G(z)))]; gradient descent on it raises D on fakes."""
    if s_fake.logits.numel() == 0:
        raise ValueError("generator loss needs nonempty fake logits")
    _, log_one_minus_d = _log_realness(s_fake.logits)
    return log_one_minus_d.mean()


def feature_matching_loss(f_real: EncoderFeatures, f_fake: EncoderFeatures) -> torch.Tensor:
    """Squared L2 distance between batch-mean bottleneck features."""
    if f_real.bottleneck.shape[1:] != f_fake.bottleneck.shape[1:]:
        raise ValueError(
            f"bottleneck shapes differ: {tuple(f_real.bottleneck.shape)} vs "
            f"{tuple(f_fake.bottleneck.shape)}"
        )
    gap = f_real.bottleneck.mean(dim=0) - f_fake.bottleneck.mean(dim=0)
    return (gap**2).sum()


def total_discriminator_loss(
    sup: torch.Tensor,
    unsup: torch.Tensor,
    cons: torch.Tensor,
    w: LossWeights,
    gen_adv: Optional[torch.Tensor] = None,
    diagnostics: Optional[dict[str, float]] = None,
) -> LossBundle:
    """Weighted sum lambda1*sup + lambda2*unsup + lambda3*cons.

    Raises :class:`NumericError` naming the first non-finite part.
    """
    for name, value in (("sup", sup), ("unsup", unsup), ("cons", cons), ("gen_adv", gen_adv)):
        if value is not None and not bool(torch.isfinite(value)):
            raise NumericError(f"non-finite loss term '{name}': {float(value)}")
    total = w.lambda1 * sup + w.lambda2 * unsup + w.lambda3 * cons
    return LossBundle(
        sup=sup,
        unsup=unsup,
        cons=cons,
        total=total,
        gen_adv=gen_adv,
        diagnostics=dict(diagnostics or {}),
    )
