"""Regional logit maps, Winner-Take-All reweighting and spatial aggregation.

Single-image functions mirror the math one step at a time. ``head_forward`` /
``head_backward`` are the batched versions used for training; the backward
pass is derived by hand and checked against finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .prompt_context import EVI, NEG, POS

EPS_NORM = 1e-12

TRIPLE = "triple"
DUAL = "dual"
POS_ONLY = "pos_only"
NEG_ONLY = "neg_only"
HEAD_MODES = (TRIPLE, DUAL, POS_ONLY, NEG_ONLY)

# Branches each head mode reads.
MODE_BRANCHES = {
    TRIPLE: (EVI, POS, NEG),
    DUAL: (POS, NEG),
    POS_ONLY: (POS,),
    NEG_ONLY: (NEG,),
}


class DegenerateNormError(ValueError):
    """A feature or text embedding has (near) zero norm."""


@dataclass(frozen=True)
class RegionFeatureMap:
    features: np.ndarray  # (H, W, D_v)
    image_id: int = 0

    def __post_init__(self):
        f = self.features
        if f.ndim != 3 or f.shape[0] < 1 or f.shape[1] < 1:
            raise ValueError(f"features must be (H, W, D_v), got {f.shape}")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")


@dataclass(frozen=True)
class ProjectionParams:
    proj_matrix: np.ndarray  # (D_t, D_v)
    proj_bias: np.ndarray  # (D_t,)
    seed: int = 0

    def __post_init__(self):
        self.proj_matrix.setflags(write=False)
        self.proj_bias.setflags(write=False)
        if self.proj_bias.shape != (self.proj_matrix.shape[0],):
            raise ValueError("bias length must equal the projection output dimension")


@dataclass(frozen=True)
class LogitMaps:
    evidential: np.ndarray  # (M, H, W)
    positive: np.ndarray
    negative: np.ndarray


@dataclass(frozen=True)
class ClassScores:
    delta_pos: np.ndarray  # (M,)
    delta_neg: np.ndarray
    prob: np.ndarray
    logit: np.ndarray  # (delta_pos - delta_neg) / tau, monotone in prob


@dataclass(frozen=True)
class HeadConfig:
    mode: str = TRIPLE
    wta: bool = False
    gamma: float = 5.0
    tau: float = 0.01
    sharpness: float = 1.0

    def __post_init__(self):
        if self.mode not in HEAD_MODES:
            raise ValueError(f"unknown head mode {self.mode!r}; expected one of {HEAD_MODES}")
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not self.gamma > 0:
            raise ValueError(f"WTA gamma must be > 0, got {self.gamma}")
        if not self.sharpness > 0:
            raise ValueError(f"aggregation sharpness must be > 0, got {self.sharpness}")


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def project_regions(fmap: RegionFeatureMap | np.ndarray, params: ProjectionParams) -> np.ndarray:
    f = fmap.features if isinstance(fmap, RegionFeatureMap) else np.asarray(fmap, dtype=np.float64)
    if f.shape[-1] != params.proj_matrix.shape[1]:
        raise ValueError(
            f"feature dim {f.shape[-1]} does not match projection input dim {params.proj_matrix.shape[1]}"
        )
    return f @ params.proj_matrix.T + params.proj_bias


def _unit(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n < EPS_NORM):
        raise DegenerateNormError(f"{what} has norm below {EPS_NORM:g}")
    return x / n, n


def cosine_logits(projected: np.ndarray, text_emb: np.ndarray) -> np.ndarray:
    """Cosine map of every region against one embedding (D_t,) or a stack (M, D_t).

    A stack adds a trailing class axis to the output.
    """
    fh, _ = _unit(np.asarray(projected, dtype=np.float64), "projected region feature")
    eh, _ = _unit(np.asarray(text_emb, dtype=np.float64), "text embedding")
    return fh @ eh.T


def wta_reweight(pos_maps: np.ndarray, gamma: float) -> np.ndarray:
    """Cross-class softmax reweighting of positive maps, classes on axis 0."""
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    s = np.asarray(pos_maps, dtype=np.float64)
    if s.shape[0] < 1:
        raise ValueError("need at least one class")
    w = _softmax(gamma * s * s.max(axis=0, keepdims=True), axis=0)
    return w * s


def wta_weights(pos_maps: np.ndarray, gamma: float) -> np.ndarray:
    s = np.asarray(pos_maps, dtype=np.float64)
    return _softmax(gamma * s * s.max(axis=0, keepdims=True), axis=0)


def _check_same_shape(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def aggregate_evidence_guided(evi_map, value_map, sharpness: float = 1.0) -> float:
    evi_map = np.asarray(evi_map, dtype=np.float64)
    value_map = np.asarray(value_map, dtype=np.float64)
    _check_same_shape(evi_map, value_map)
    a = _softmax(sharpness * evi_map.ravel())
    return float(a @ value_map.ravel())


def aggregate_self_guided(pos_map, value_map, sharpness: float = 1.0) -> float:
    # Same convex combination; the positive map supplies its own weights.
    return aggregate_evidence_guided(pos_map, value_map, sharpness)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


_P_LO = np.nextafter(0.0, 1.0)
_P_HI = np.nextafter(1.0, 0.0)


def prob_from_logit(z):
    """sigmoid(z) kept inside the open interval (0, 1)."""
    return np.clip(_sigmoid(z), _P_LO, _P_HI)


def predict_prob(delta_pos, delta_neg, tau: float):
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    p = prob_from_logit((np.asarray(delta_pos) - np.asarray(delta_neg)) / tau)
    return float(p) if p.ndim == 0 else p


def logit_maps(fmap: RegionFeatureMap, text_emb: np.ndarray, params: ProjectionParams) -> LogitMaps:
    """Cosine maps for all three branches; ``text_emb`` is (3, M, D_t)."""
    proj = project_regions(fmap, params)
    maps = [np.moveaxis(cosine_logits(proj, text_emb[b]), -1, 0) for b in (EVI, POS, NEG)]
    return LogitMaps(*maps)


def forward_image(fmap: RegionFeatureMap, text_emb: np.ndarray, params: ProjectionParams,
                  cfg: HeadConfig = HeadConfig()) -> ClassScores:
    x = fmap.features if isinstance(fmap, RegionFeatureMap) else np.asarray(fmap)
    cache = head_forward(x.reshape(1, -1, x.shape[-1]), text_emb, params, cfg)
    return ClassScores(cache.delta_pos[0], cache.delta_neg[0], cache.prob[0], cache.logit[0])


@dataclass
class HeadCache:
    cfg: HeadConfig
    f_unit: np.ndarray  # (B, R, D_t)
    e_unit: dict  # branch -> (M, D_t)
    e_norm: dict  # branch -> (M, 1)
    maps: dict  # branch -> (B, M, R), positive map after WTA if enabled
    raw_pos: np.ndarray | None
    wta_w: np.ndarray | None  # (B, M, R)
    agg: np.ndarray  # (B, M, R) aggregation weights
    delta_pos: np.ndarray  # (B, M)
    delta_neg: np.ndarray
    logit: np.ndarray
    prob: np.ndarray


def head_forward(features: np.ndarray, text_emb: np.ndarray, params: ProjectionParams,
                 cfg: HeadConfig) -> HeadCache:
    """Batched forward. ``features`` is (B, R, D_v), ``text_emb`` (3, M, D_t)."""
    f_unit, _ = _unit(project_regions(features, params), "projected region feature")
    branches = MODE_BRANCHES[cfg.mode]
    e_unit, e_norm, maps = {}, {}, {}
    for b in branches:
        e_unit[b], e_norm[b] = _unit(text_emb[b], "text embedding")
        maps[b] = np.einsum("brd,md->bmr", f_unit, e_unit[b])

    raw_pos = wta_w = None
    if cfg.wta and POS in maps:
        raw_pos = maps[POS]
        wta_w = _softmax(cfg.gamma * raw_pos * raw_pos.max(axis=1, keepdims=True), axis=1)
        maps[POS] = wta_w * raw_pos

    k = cfg.sharpness
    B, M = f_unit.shape[0], text_emb.shape[1]
    zeros = np.zeros((B, M))
    if cfg.mode == TRIPLE:
        agg = _softmax(k * maps[EVI], axis=-1)
    elif cfg.mode == NEG_ONLY:
        agg = _softmax(k * maps[NEG], axis=-1)
    else:
        agg = _softmax(k * maps[POS], axis=-1)
    d_pos = (agg * maps[POS]).sum(-1) if POS in maps else zeros
    d_neg = (agg * maps[NEG]).sum(-1) if NEG in maps else zeros
    z = (d_pos - d_neg) / cfg.tau
    return HeadCache(cfg, f_unit, e_unit, e_norm, maps, raw_pos, wta_w, agg,
                     d_pos, d_neg, z, prob_from_logit(z))


def _softmax_vjp(a: np.ndarray, g: np.ndarray, scale: float) -> np.ndarray:
    return scale * a * (g - (a * g).sum(-1, keepdims=True))


def head_backward_deltas(cache: HeadCache, g_pos: np.ndarray, g_neg: np.ndarray) -> np.ndarray:
    """Gradient on the text embeddings (3, M, D_t) from gradients on the deltas."""
    cfg, a, maps = cache.cfg, cache.agg, cache.maps
    k = cfg.sharpness
    g_maps = {b: np.zeros_like(m) for b, m in maps.items()}
    g_pos = g_pos[..., None]
    g_neg = g_neg[..., None]

    # gradient on the aggregation weights
    g_agg = 0.0
    if POS in maps:
        g_maps[POS] += a * g_pos
        g_agg = g_agg + g_pos * maps[POS]
    if NEG in maps:
        g_maps[NEG] += a * g_neg
        g_agg = g_agg + g_neg * maps[NEG]
    g_src = _softmax_vjp(a, g_agg, k)
    src = {TRIPLE: EVI, NEG_ONLY: NEG}.get(cfg.mode, POS)
    g_maps[src] += g_src

    if cache.wta_w is not None:
        g_maps[POS] = _wta_vjp(cache.raw_pos, cache.wta_w, g_maps[POS], cfg.gamma)

    g_emb = np.zeros((3, cache.delta_pos.shape[1], cache.f_unit.shape[-1]))
    for b, gm in g_maps.items():
        g_unit = np.einsum("bmr,brd->md", gm, cache.f_unit)
        eu = cache.e_unit[b]
        g_emb[b] = (g_unit - eu * (eu * g_unit).sum(-1, keepdims=True)) / cache.e_norm[b]
    return g_emb


def head_backward(cache: HeadCache, g_logit: np.ndarray) -> np.ndarray:
    g = g_logit / cache.cfg.tau
    return head_backward_deltas(cache, g, -g)


def _wta_vjp(s: np.ndarray, w: np.ndarray, g_out: np.ndarray, gamma: float) -> np.ndarray:
    """Backward of s' = softmax_m(gamma * s * max_m s) * s, classes on axis 1.

    The max uses the first argmax as its subgradient.
    """
    mx = s.max(axis=1, keepdims=True)
    g_s = w * g_out
    g_z = w * ((s * g_out) - (w * s * g_out).sum(axis=1, keepdims=True))
    g_s += gamma * mx * g_z
    g_mx = gamma * (g_z * s).sum(axis=1)  # (B, R)
    idx = s.argmax(axis=1)  # (B, R)
    np.add.at(g_s, (np.arange(s.shape[0])[:, None], idx, np.arange(s.shape[2])[None, :]), g_mx)
    return g_s
