"""Learnable prompt contexts and the frozen text-encoder surrogate.

A prompt is ``[V_1 ... V_N, CLS]``: N learnable token vectors followed by the
class-name token. The surrogate encoder maps it to textual space with a
frozen position-weighted linear map, so gradients reach only the context
tokens.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

BRANCHES = ("evidential", "positive", "negative")
EVI, POS, NEG = 0, 1, 2

CLASS_SPECIFIC = "class_specific"
SHARED = "shared"


def keyed_unit_vector(seed: int, key: int, dim: int) -> np.ndarray:
    """Unit vector drawn from a generator keyed by ``(seed, key)``.

    Class tokens and synthetic class prototypes both come from here; using
    the same seed for both is what gives the surrogate its vision-text
    alignment.
    """
    rng = np.random.default_rng([int(seed), int(key)])
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class ClassToken:
    class_id: int
    embedding: np.ndarray


def class_token(class_id: int, vocab_seed: int, dim: int = 16) -> ClassToken:
    if class_id < 0:
        raise ValueError(f"class_id must be >= 0, got {class_id}")
    emb = keyed_unit_vector(vocab_seed, class_id, dim)
    emb.setflags(write=False)
    return ClassToken(class_id, emb)


def class_token_matrix(num_classes: int, vocab_seed: int, dim: int) -> np.ndarray:
    """Stack of class-token embeddings, shape (num_classes, dim)."""
    return np.stack([class_token(m, vocab_seed, dim).embedding for m in range(num_classes)])


@dataclass(frozen=True)
class PromptTriplet:
    """Evidential / positive / negative context for one class, or shared."""

    evidential: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    class_binding: int | str

    def __post_init__(self):
        shapes = {self.evidential.shape, self.positive.shape, self.negative.shape}
        if len(shapes) != 1:
            raise ValueError(f"triplet branches differ in shape: {sorted(shapes)}")
        if self.evidential.ndim != 2 or self.evidential.shape[0] < 1:
            raise ValueError("each branch must be an (N >= 1, D_tok) array")


@dataclass
class PromptSet:
    """All learnable context tokens, stacked as ``ctx[k, branch, j, :]``.

    ``k`` indexes classes in class-specific layout; in shared layout there is
    a single slot used by every class.
    """

    ctx: np.ndarray
    layout: str = CLASS_SPECIFIC

    def __post_init__(self):
        if self.ctx.ndim != 4 or self.ctx.shape[1] != 3:
            raise ValueError(f"ctx must have shape (K, 3, N, D_tok), got {self.ctx.shape}")
        if self.layout not in (CLASS_SPECIFIC, SHARED):
            raise ValueError(f"unknown prompt layout {self.layout!r}")
        if self.layout == SHARED and self.ctx.shape[0] != 1:
            raise ValueError("shared layout holds exactly one triplet")

    @property
    def n_tokens(self) -> int:
        return self.ctx.shape[2]

    @property
    def token_dim(self) -> int:
        return self.ctx.shape[3]

    def slot(self, class_id: int) -> int:
        return 0 if self.layout == SHARED else class_id

    def triplet(self, k: int) -> PromptTriplet:
        binding = SHARED if self.layout == SHARED else k
        e, p, n = self.ctx[k]
        return PromptTriplet(e, p, n, binding)

    def __iter__(self) -> Iterator[PromptTriplet]:
        return (self.triplet(k) for k in range(len(self)))

    def __len__(self) -> int:
        return self.ctx.shape[0]

    def copy(self) -> "PromptSet":
        return PromptSet(self.ctx.copy(), self.layout)


def init_prompts(
    num_classes: int,
    n_tokens: int,
    mode: str = CLASS_SPECIFIC,
    init_scale: float = 0.02,
    seed: int = 0,
    token_dim: int = 16,
) -> PromptSet:
    if num_classes < 1:
        raise ValueError("need at least one class")
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")
    if not init_scale > 0:
        raise ValueError(f"init_scale must be > 0, got {init_scale}")
    if mode not in (CLASS_SPECIFIC, SHARED):
        raise ValueError(f"unknown prompt mode {mode!r}")
    k = num_classes if mode == CLASS_SPECIFIC else 1
    rng = np.random.default_rng(seed)
    ctx = init_scale * rng.standard_normal((k, 3, n_tokens, token_dim))
    return PromptSet(ctx, mode)


@dataclass(frozen=True)
class TextEncoderParams:
    position_weights: np.ndarray  # (N + 1,), last entry weights CLS
    mix_matrix: np.ndarray  # (D_t, D_tok)
    seed: int = field(default=0)

    def __post_init__(self):
        for a in (self.position_weights, self.mix_matrix):
            a.setflags(write=False)
        if self.position_weights.ndim != 1 or self.position_weights.size < 2:
            raise ValueError("position_weights must hold N + 1 >= 2 entries")
        if not np.all(np.any(self.mix_matrix != 0, axis=1)):
            raise ValueError("mix_matrix has a zero row")

    @property
    def n_tokens(self) -> int:
        return self.position_weights.size - 1


def orthonormal_matrix(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Random matrix with orthonormal rows (rows <= cols) or columns."""
    g = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


def make_text_encoder(n_tokens: int, token_dim: int = 16, text_dim: int = 16, seed: int = 0) -> TextEncoderParams:
    """Seeded frozen encoder.

    Context weights are scaled by 1/sqrt(N) so the effective step size on the
    encoded context does not depend on the prompt length.
    """
    if n_tokens < 1:
        raise ValueError(f"n_tokens must be >= 1, got {n_tokens}")
    rng = np.random.default_rng([int(seed), 0x7E47])
    w = rng.uniform(0.5, 1.5, size=n_tokens + 1)
    w[:n_tokens] /= np.sqrt(n_tokens)
    mix = orthonormal_matrix(text_dim, token_dim, rng)
    return TextEncoderParams(w, mix, seed)


def encode_prompt(tokens: np.ndarray, cls: ClassToken | np.ndarray, params: TextEncoderParams) -> np.ndarray:
    """E_t = mix_matrix @ (sum_j w_j t_j + w_N cls)."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] != params.n_tokens:
        raise ValueError(
            f"expected {params.n_tokens} context tokens, got array of shape {tokens.shape}"
        )
    emb = cls.embedding if isinstance(cls, ClassToken) else np.asarray(cls, dtype=np.float64)
    w = params.position_weights
    pooled = w[:-1] @ tokens + w[-1] * emb
    return params.mix_matrix @ pooled


def encode_prompt_vjp(grad_out: np.ndarray, params: TextEncoderParams) -> np.ndarray:
    """Pull a gradient on E_t back to the context tokens, shape (N, D_tok)."""
    g = params.mix_matrix.T @ grad_out
    return np.outer(params.position_weights[:-1], g)


def encode_all(prompts: PromptSet, cls_tokens: np.ndarray, params: TextEncoderParams) -> np.ndarray:
    """Textual embeddings for every branch and class, shape (3, M, D_t)."""
    if prompts.n_tokens != params.n_tokens:
        raise ValueError(
            f"prompt length {prompts.n_tokens} does not match encoder length {params.n_tokens}"
        )
    w = params.position_weights
    pooled_ctx = np.einsum("j,kbjd->bkd", w[:-1], prompts.ctx)  # (3, K, D_tok)
    if prompts.layout == SHARED:
        pooled = pooled_ctx[:, :1, :] + w[-1] * cls_tokens[None, :, :]
    else:
        if len(prompts) != cls_tokens.shape[0]:
            raise ValueError("class-specific prompts must match the class count")
        pooled = pooled_ctx + w[-1] * cls_tokens[None, :, :]
    return pooled @ params.mix_matrix.T


def encode_all_vjp(grad_emb: np.ndarray, prompts: PromptSet, params: TextEncoderParams) -> np.ndarray:
    """Gradient w.r.t. ``prompts.ctx`` given a gradient on ``encode_all`` output."""
    g_pooled = grad_emb @ params.mix_matrix  # (3, M, D_tok)
    if prompts.layout == SHARED:
        g_pooled = g_pooled.sum(axis=1, keepdims=True)
    return np.einsum("j,bkd->kbjd", params.position_weights[:-1], g_pooled)
