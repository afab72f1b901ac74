"""Asymmetric loss, prompt gradients, SGD with cosine annealing, gradcheck."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import prompt_context as pc
from .prompt_context import NEG, POS, PromptSet, TextEncoderParams
from .spatial_head import (
    DUAL, HEAD_MODES, NEG_ONLY, POS_ONLY, TRIPLE,
    ClassScores, HeadConfig, ProjectionParams, _sigmoid,
    head_backward, head_backward_deltas, head_forward,
)


@dataclass(frozen=True)
class AslConfig:
    gamma_pos: float = 1.0
    gamma_neg: float = 2.0
    margin: float = 0.05

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("ASL focusing exponents must be >= 0")
        if self.gamma_neg < self.gamma_pos:
            raise ValueError(f"gamma_neg ({self.gamma_neg}) must be >= gamma_pos ({self.gamma_pos})")
        if not 0 <= self.margin < 1:
            raise ValueError(f"margin must lie in [0, 1), got {self.margin}")


def asl_loss(p: float, y: int, cfg: AslConfig = AslConfig()) -> float:
    """ASL for one (image, label) pair with a known label y in {+1, -1}."""
    if not 0 < p < 1:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    if y == 1:
        return -((1 - p) ** cfg.gamma_pos) * math.log(p)
    if y == -1:
        pc_ = max(p - cfg.margin, 0.0)
        if pc_ == 0.0:
            return 0.0
        return -(pc_ ** cfg.gamma_neg) * math.log(1 - pc_)
    raise ValueError(f"asl_loss takes known labels only (+1 / -1), got {y}")


def _softplus(x):
    return np.logaddexp(0.0, x)


def asl_from_logit(z: np.ndarray, y: np.ndarray, cfg: AslConfig) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise ASL and its derivative w.r.t. the logit z.

    Entries with y == 0 get zero loss and zero gradient. Working from z keeps
    log terms finite when p saturates in floating point.
    """
    z = np.asarray(z, dtype=np.float64)
    p = _sigmoid(z)
    q1 = _sigmoid(-z)  # 1 - p
    loss = np.zeros_like(z)
    grad = np.zeros_like(z)

    pos = y == 1
    if np.any(pos):
        zp, pp, qp = z[pos], p[pos], q1[pos]
        log_p = -_softplus(-zp)
        u = qp ** cfg.gamma_pos
        loss[pos] = -u * log_p
        grad[pos] = cfg.gamma_pos * pp * u * log_p - u * qp

    neg = y == -1
    if np.any(neg):
        zn, pn, qn = z[neg], p[neg], q1[neg]
        shifted = pn - cfg.margin
        active = shifted > 0
        s = np.where(active, shifted, 1.0)
        log_1ms = np.log(qn + cfg.margin) if cfg.margin > 0 else -_softplus(zn)
        sg = s ** cfg.gamma_neg
        ln = np.where(active, -sg * log_1ms, 0.0)
        if cfg.gamma_neg > 0:
            d_dp = -cfg.gamma_neg * s ** (cfg.gamma_neg - 1) * log_1ms + sg / (qn + cfg.margin)
        else:
            d_dp = 1.0 / (qn + cfg.margin)
        loss[neg] = ln
        grad[neg] = np.where(active, d_dp * pn * qn, 0.0)
    return loss, grad


def batch_loss(scores: Iterable[ClassScores] | np.ndarray, labels: np.ndarray, cfg: AslConfig) -> float:
    """Mean ASL over known pairs.

    ``scores`` is either a sequence of ClassScores or an (images, classes)
    array of logits.
    """
    if isinstance(scores, np.ndarray):
        z = scores
    else:
        z = np.stack([s.logit for s in scores])
    labels = np.asarray(labels)
    if z.shape != labels.shape:
        raise ValueError(f"scores {z.shape} and labels {labels.shape} disagree")
    known = labels != 0
    n = int(known.sum())
    if n == 0:
        raise ValueError("batch has no known (image, class) pairs")
    loss, _ = asl_from_logit(z, labels, cfg)
    return float(loss[known].sum() / n)


@dataclass(frozen=True)
class FrozenWorld:
    """Frozen surrogate encoders and class vocabulary."""

    text: TextEncoderParams
    proj: ProjectionParams
    class_tokens: np.ndarray  # (M, D_tok)

    def __post_init__(self):
        self.class_tokens.setflags(write=False)

    @property
    def num_classes(self) -> int:
        return self.class_tokens.shape[0]


def build_world(num_classes: int, n_tokens: int, feature_dim: int, token_dim: int = 16,
                text_dim: int = 16, seed: int = 0, vocab_seed: int | None = None,
                bias_scale: float = 0.0, modality_gap: float = 0.0) -> FrozenWorld:
    """Seeded frozen world.

    The projection is ``mix_matrix @ align``: a region holding feature x
    lands near the textual direction of a prompt whose pooled token is x.
    ``align`` is ``cos(g) * base + sin(g) * R`` with R a seeded orthogonal
    map and g = ``modality_gap`` in radians; g = 0 gives exact alignment.
    """
    if not 0 <= modality_gap <= math.pi / 2:
        raise ValueError(f"modality_gap must lie in [0, pi/2], got {modality_gap}")
    text = pc.make_text_encoder(n_tokens, token_dim, text_dim, seed)
    rng = np.random.default_rng([int(seed), 0x9801])
    if feature_dim == token_dim:
        base = np.eye(token_dim)
    else:
        base = pc.orthonormal_matrix(token_dim, feature_dim, rng)
    rot = pc.orthonormal_matrix(token_dim, feature_dim, rng)
    align = math.cos(modality_gap) * base + math.sin(modality_gap) * rot
    bias_dir = rng.standard_normal(text_dim)
    bias = bias_scale * bias_dir / np.linalg.norm(bias_dir)
    proj = ProjectionParams(text.mix_matrix @ align, bias, seed)
    vocab = seed if vocab_seed is None else vocab_seed
    return FrozenWorld(text, proj, pc.class_token_matrix(num_classes, vocab, token_dim))


def loss_and_grad(features: np.ndarray, labels: np.ndarray, prompts: PromptSet, world: FrozenWorld,
                  head: HeadConfig, asl: AslConfig) -> tuple[float, np.ndarray]:
    """Batch loss and its exact gradient w.r.t. ``prompts.ctx``."""
    emb = pc.encode_all(prompts, world.class_tokens, world.text)
    cache = head_forward(features, emb, world.proj, head)
    known = labels != 0
    n = int(known.sum())
    if n == 0:
        raise ValueError("batch has no known (image, class) pairs")
    loss, g_z = asl_from_logit(cache.logit, labels, asl)
    g_emb = head_backward(cache, g_z / n)
    return float(loss[known].sum() / n), pc.encode_all_vjp(g_emb, prompts, world.text)


def prompt_loss(features: np.ndarray, labels: np.ndarray, prompts: PromptSet, world: FrozenWorld,
                head: HeadConfig, asl: AslConfig) -> float:
    """Forward-only batch loss."""
    emb = pc.encode_all(prompts, world.class_tokens, world.text)
    cache = head_forward(features, emb, world.proj, head)
    return batch_loss(cache.logit, labels, asl)


def grad_prompts(features, labels, prompts, world, head, asl) -> np.ndarray:
    return loss_and_grad(features, labels, prompts, world, head, asl)[1]


def delta_grads(features: np.ndarray, prompts: PromptSet, world: FrozenWorld, head: HeadConfig,
                wrt: str) -> np.ndarray:
    """Gradient of the summed delta_pos (``wrt='pos'``) or delta_neg over all
    images and classes, with respect to the prompt context."""
    emb = pc.encode_all(prompts, world.class_tokens, world.text)
    cache = head_forward(features, emb, world.proj, head)
    ones = np.ones_like(cache.delta_pos)
    zeros = np.zeros_like(ones)
    g_pos, g_neg = (ones, zeros) if wrt == "pos" else (zeros, ones)
    return pc.encode_all_vjp(head_backward_deltas(cache, g_pos, g_neg), prompts, world.text)


def cosine_lr(lr0: float, step: int, total_steps: int) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(prompts: PromptSet, grads: np.ndarray, lr: float) -> PromptSet:
    if grads.shape != prompts.ctx.shape:
        raise ValueError(f"gradient shape {grads.shape} does not match prompts {prompts.ctx.shape}")
    return PromptSet(prompts.ctx - lr * grads, prompts.layout)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.002
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    asl: AslConfig = field(default_factory=AslConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    lr_schedule: str = "step"  # anneal per "step" or per "epoch"

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr_schedule not in ("step", "epoch"):
            raise ValueError(f"lr_schedule must be 'step' or 'epoch', got {self.lr_schedule!r}")


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss: float

    def csv(self) -> str:
        return f"{self.epoch},{self.step},{self.lr!r},{self.loss!r}"


@dataclass
class TrainResult:
    prompts: PromptSet
    steps: list[StepRecord]
    epoch_losses: list[float]
    epochs_done: int


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch), 0x5F]).permutation(n)


def train(features: np.ndarray, labels: np.ndarray, prompts: PromptSet, world: FrozenWorld,
          cfg: TrainConfig, start_epoch: int = 0, stop_epoch: int | None = None,
          on_step: Callable[[StepRecord], None] | None = None) -> TrainResult:
    """Mini-batch SGD on the prompt context.

    ``start_epoch``/``stop_epoch`` allow splitting one run across several
    calls; the schedule and shuffles depend only on the global step, so a
    resumed run reproduces the uninterrupted one.
    """
    n = features.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    if not np.any(labels != 0):
        raise ValueError("dataset has no known labels")
    stop = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
    spe = steps_per_epoch(n, cfg.batch_size)
    total = cfg.epochs * spe
    records: list[StepRecord] = []
    epoch_losses = []
    for epoch in range(start_epoch, stop):
        order = epoch_order(n, cfg.seed, epoch)
        losses = []
        for i in range(spe):
            step = epoch * spe + i
            if cfg.lr_schedule == "step":
                lr = cosine_lr(cfg.lr0, step, total)
            else:
                lr = cosine_lr(cfg.lr0, epoch, cfg.epochs)
            idx = order[i * cfg.batch_size:(i + 1) * cfg.batch_size]
            y = labels[idx]
            if not np.any(y != 0):
                rec = StepRecord(epoch, step, lr, float("nan"))
            else:
                loss, g = loss_and_grad(features[idx], y, prompts, world, cfg.head, cfg.asl)
                prompts = sgd_step(prompts, g, lr)
                rec = StepRecord(epoch, step, lr, loss)
                losses.append(loss)
            records.append(rec)
            if on_step is not None:
                on_step(rec)
        epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
    return TrainResult(prompts, records, epoch_losses, max(stop, start_epoch))


# ---------------------------------------------------------------------------
# finite-difference verification


def finite_difference_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn`` at every entry of ``x``."""
    x = x.copy()
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max entrywise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@dataclass
class GradcheckInstance:
    features: np.ndarray
    labels: np.ndarray
    prompts: PromptSet
    world: FrozenWorld
    head: HeadConfig
    asl: AslConfig

    def loss(self, ctx: np.ndarray) -> float:
        p = PromptSet(ctx, self.prompts.layout)
        return prompt_loss(self.features, self.labels, p, self.world, self.head, self.asl)


def random_instance(seed: int, mode: str, wta: bool, height: int = 3, width: int = 3, dim: int = 8,
                    num_classes: int = 4, n_tokens: int = 2, batch: int = 3,
                    layout: str = pc.CLASS_SPECIFIC) -> GradcheckInstance:
    rng = np.random.default_rng([int(seed), HEAD_MODES.index(mode), int(wta)])
    world = build_world(num_classes, n_tokens, dim, dim, dim, seed=int(rng.integers(1 << 30)),
                        bias_scale=float(rng.uniform(0.0, 0.5)))
    prompts = pc.init_prompts(num_classes, n_tokens, layout, init_scale=0.5,
                              seed=int(rng.integers(1 << 30)), token_dim=dim)
    feats = rng.standard_normal((batch, height * width, dim))
    labels = rng.choice([-1, 0, 1], size=(batch, num_classes))
    labels[0, 0] = 1
    head = HeadConfig(mode=mode, wta=wta, gamma=float(rng.uniform(1.0, 5.0)),
                      tau=float(rng.uniform(0.2, 1.0)), sharpness=float(rng.uniform(0.5, 2.0)))
    asl = AslConfig(gamma_pos=float(rng.uniform(0.0, 2.0)), gamma_neg=float(rng.uniform(2.0, 4.0)),
                    margin=float(rng.uniform(0.0, 0.1)))
    return GradcheckInstance(feats, labels, prompts, world, head, asl)


def near_kink(inst: GradcheckInstance, tol: float = 1e-6) -> bool:
    """True if a negative pair sits at the margin or a WTA max is tied."""
    emb = pc.encode_all(inst.prompts, inst.world.class_tokens, inst.world.text)
    cache = head_forward(inst.features, emb, inst.world.proj, inst.head)
    p = _sigmoid(cache.logit)
    if np.any((inst.labels == -1) & (np.abs(p - inst.asl.margin) < tol)):
        return True
    if cache.raw_pos is not None:
        top2 = np.sort(cache.raw_pos, axis=1)[:, -2:, :]
        if np.any(top2[:, 1] - top2[:, 0] < tol):
            return True
    return False


@dataclass
class GradcheckResult:
    mode: str
    wta: bool
    instances: int
    max_rel_err: float
    cross_zero: int  # instances whose cross derivatives are exactly zero (triple: both directions)
    cross_nonzero: int


def gradcheck_mode(mode: str, wta: bool, n_instances: int = 20, seed: int = 0,
                   step: float = 1e-5) -> GradcheckResult:
    worst = 0.0
    checked = zero = nonzero = 0
    s = seed
    while checked < n_instances:
        inst = random_instance(s, mode, wta)
        s += 1
        if near_kink(inst):
            continue
        _, g = loss_and_grad(inst.features, inst.labels, inst.prompts, inst.world, inst.head, inst.asl)
        g_fd = finite_difference_grad(inst.loss, inst.prompts.ctx, step)
        worst = max(worst, relative_error(g, g_fd))
        if mode in (TRIPLE, DUAL):
            neg_on_pos = delta_grads(inst.features, inst.prompts, inst.world, inst.head, "neg")[:, POS]
            pos_on_neg = delta_grads(inst.features, inst.prompts, inst.world, inst.head, "pos")[:, NEG]
            # dual: only the first derivative is of interest; the second is zero by construction
            if np.all(neg_on_pos == 0.0) and (mode == DUAL or np.all(pos_on_neg == 0.0)):
                zero += 1
            else:
                nonzero += 1
        checked += 1
    return GradcheckResult(mode, wta, checked, worst, zero, nonzero)


def gradcheck_suite(n_instances: int = 20, seed: int = 0,
                    modes: tuple[str, ...] = (POS_ONLY, NEG_ONLY, DUAL, TRIPLE)) -> list[GradcheckResult]:
    return [gradcheck_mode(m, w, n_instances, seed) for m in modes for w in (False, True)]

