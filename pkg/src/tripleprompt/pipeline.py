"""End-to-end steps shared by the CLI and the tests."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data_protocol as dp
from . import prompt_context as pc
from .config import CONTEXTLESS, PARTIAL, ZERO_SHOT, ConfigError, RunConfig
from .eval_metrics import MetricsReport, build_report
from .loss_opt import FrozenWorld, StepRecord, build_world, gradcheck_mode, train
from .spatial_head import DUAL, POS_ONLY, TRIPLE, head_forward

LOG_HEADER = "epoch,step,lr,loss"
TRAIN_DIR, TEST_DIR = "train", "test"


def world_from_config(cfg: RunConfig) -> FrozenWorld:
    m = cfg.model
    return build_world(cfg.data.num_classes, m.n_tokens, cfg.data.feature_dim, m.token_dim,
                       m.text_dim, seed=m.world_seed, bias_scale=m.proj_bias_scale,
                       modality_gap=m.modality_gap)


def initial_prompts(cfg: RunConfig) -> pc.PromptSet:
    m = cfg.model
    return pc.init_prompts(cfg.data.num_classes, m.n_tokens, m.prompt_layout, m.init_scale,
                           cfg.train.seed, m.token_dim)


def zero_shot_split(cfg: RunConfig) -> dp.SplitSpec | None:
    p = cfg.protocol
    if p.kind != ZERO_SHOT:
        return None
    return dp.split_zero_shot(cfg.data.num_classes, p.unseen_fraction, p.split_seed)


def training_labels(cfg: RunConfig, full: np.ndarray) -> np.ndarray:
    if cfg.protocol.kind == PARTIAL:
        return dp.mask_labels(full, cfg.protocol.keep_proportion, cfg.protocol.mask_seed)
    return dp.hide_unseen(full, zero_shot_split(cfg))


# ---------------------------------------------------------------------------
# data


def generate_datasets(cfg: RunConfig) -> tuple[dp.Dataset, dp.Dataset]:
    ds = dp.generate_synthetic(cfg.synthetic_spec())
    n = cfg.data.num_train
    train_ds = ds.subset(slice(0, n))
    test_ds = ds.subset(slice(n, None))
    train_ds.meta["subset"], test_ds.meta["subset"] = TRAIN_DIR, TEST_DIR
    return train_ds, test_ds


def write_datasets(cfg: RunConfig, out: str | Path) -> dict:
    train_ds, test_ds = generate_datasets(cfg)
    out = Path(out)
    return {
        TRAIN_DIR: dp.save_dataset(out / TRAIN_DIR, train_ds),
        TEST_DIR: dp.save_dataset(out / TEST_DIR, test_ds),
    }


def load_subset(data_dir: str | Path, subset: str) -> dp.Dataset:
    return dp.load_dataset(Path(data_dir) / subset)


def check_dataset(cfg: RunConfig, ds: dp.Dataset):
    n, h, w, d = ds.features.shape
    want = (cfg.data.height, cfg.data.width, cfg.data.feature_dim, cfg.data.num_classes)
    got = (h, w, d, ds.num_classes)
    if want != got:
        raise ConfigError(f"dataset (H, W, D_v, M) = {got} does not match config {want}")


# ---------------------------------------------------------------------------
# training


@dataclass
class RunState:
    config: RunConfig
    prompts: pc.PromptSet
    world: FrozenWorld
    epoch: int
    log_lines: list[str] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)

    def checkpoint(self, meta: dict | None = None) -> ckpt.Checkpoint:
        return ckpt.Checkpoint(self.config, self.prompts, self.world, self.epoch, dict(meta or {}))

    def log_text(self) -> str:
        return "\n".join([LOG_HEADER] + self.log_lines) + "\n"


def run_training(cfg: RunConfig, train_ds: dp.Dataset, resume: ckpt.Checkpoint | None = None,
                 stop_epoch: int | None = None, prior_log: list[str] = ()) -> RunState:
    check_dataset(cfg, train_ds)
    if resume is not None:
        if resume.config_hash != cfg.hash():
            raise ConfigError("checkpoint was produced by a different config")
        prompts, world, start = resume.prompts, resume.world, resume.epoch
    else:
        prompts, world, start = initial_prompts(cfg), world_from_config(cfg), 0
    lines = list(prior_log)
    if cfg.model.mode == CONTEXTLESS:
        return RunState(cfg, prompts, world, start, lines)

    labels = training_labels(cfg, train_ds.labels)
    result = train(train_ds.flat_features(), labels, prompts, world, cfg.train_config(),
                   start_epoch=start, stop_epoch=stop_epoch,
                   on_step=lambda r: lines.append(r.csv()))
    return RunState(cfg, result.prompts, world, result.epochs_done, lines, result.epoch_losses)


# ---------------------------------------------------------------------------
# evaluation

SPLITS = ("all", "seen", "unseen")


def score_matrix(cfg: RunConfig, prompts: pc.PromptSet, world: FrozenWorld, ds: dp.Dataset):
    """Head output on a dataset: returns (logits, probabilities)."""
    emb = pc.encode_all(prompts, world.class_tokens, world.text)
    cache = head_forward(ds.flat_features(), emb, world.proj, cfg.head_config(training=False))
    return cache.logit, cache.prob


def evaluate(ck: ckpt.Checkpoint, ds: dp.Dataset, split: str = "all") -> MetricsReport:
    cfg = ck.config
    check_dataset(cfg, ds)
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}")
    zs = zero_shot_split(cfg)
    if split != "all" and zs is None:
        raise ConfigError(f"split {split!r} needs a zero-shot run; this checkpoint is {cfg.protocol.kind}")
    classes = {"all": None, "seen": zs and zs.seen_classes, "unseen": zs and zs.unseen_classes}[split]
    logits, _ = score_matrix(cfg, ck.prompts, ck.world, ds)
    meta = {
        "config_hash": ck.config_hash,
        "seed": cfg.train.seed,
        "split": split,
        "mode": cfg.model.mode,
        "wta_eval": cfg.model.wta_eval,
        "epoch": ck.epoch,
        "dataset_checksum": ds.checksum(),
        "ranking_score": "logit",
    }
    if zs is not None:
        meta["seen_classes"] = list(zs.seen_classes)
        meta["unseen_classes"] = list(zs.unseen_classes)
    # p > threshold  <=>  logit > log(t / (1 - t)); thresholding the logit avoids
    # float saturation of p at 1.0
    t = cfg.eval.threshold
    return build_report(logits, ds.labels, classes, cfg.eval.topk,
                        threshold=float(np.log(t / (1 - t))), metadata=meta)


# ---------------------------------------------------------------------------
# gradcheck

GRADCHECK_TOL = 1e-5
CROSS_NONZERO_FRACTION = 0.9


@dataclass
class GradcheckReport:
    rows: list
    passed: bool

    def text(self) -> str:
        out = io.StringIO()
        out.write(f"{'mode':<9} {'wta':<4} {'n':>3} {'max_rel_err':>12}  cross derivatives\n")
        for r in self.rows:
            cross = ""
            if r.mode == TRIPLE:
                cross = f"zero on {r.cross_zero}/{r.instances}"
            elif r.mode == DUAL:
                cross = f"nonzero on {r.cross_nonzero}/{r.instances}"
            out.write(f"{r.mode:<9} {'on' if r.wta else 'off':<4} {r.instances:>3} {r.max_rel_err:>12.3e}  {cross}\n")
        out.write("PASS\n" if self.passed else "FAIL\n")
        return out.getvalue()


def run_gradcheck(n_instances: int = 20, seed: int = 0,
                  modes=(POS_ONLY, "neg_only", DUAL, TRIPLE)) -> GradcheckReport:
    rows, ok = [], True
    for mode in modes:
        for wta in (False, True):
            r = gradcheck_mode(mode, wta, n_instances, seed)
            rows.append(r)
            ok &= r.max_rel_err < GRADCHECK_TOL
            if mode == TRIPLE:
                ok &= r.cross_zero == r.instances
            if mode == DUAL:
                ok &= r.cross_nonzero >= CROSS_NONZERO_FRACTION * r.instances
    return GradcheckReport(rows, bool(ok))


# ---------------------------------------------------------------------------
# ablation comparison

COMPARE_ROWS = (
    ("contextless", CONTEXTLESS, False),
    ("pos_only", POS_ONLY, False),
    ("pos_only+wta", POS_ONLY, True),
    ("dual", DUAL, False),
    ("dual+wta", DUAL, True),
    ("triple", TRIPLE, False),
    ("triple+wta", TRIPLE, True),
)
# (better, worse): mAP(better) must not trail mAP(worse) by more than the tolerance
COMPARE_ORDERINGS = (("triple", "dual"), ("triple+wta", "triple"), ("dual", "pos_only"))


@dataclass
class CompareReport:
    rows: dict  # name -> {"mAP", "C_F", "O_F", "steps", "per_seed_mAP"}
    dataset_checksum: str
    seeds: list
    violations: list

    def table(self) -> str:
        lines = [f"{'row':<14} {'mAP':>7} {'C_F':>7} {'O_F':>7} {'steps':>6}"]
        for name, r in self.rows.items():
            lines.append(f"{name:<14} {100 * r['mAP']:7.2f} {100 * r['C_F']:7.2f} "
                         f"{100 * r['O_F']:7.2f} {r['steps']:>6}")
        lines.append(f"dataset {self.dataset_checksum[:16]}  seeds {self.seeds}")
        lines.append("hand-crafted prompts have no surrogate analog; contextless stands in for them")
        for better, worse in COMPARE_ORDERINGS:
            flag = "VIOLATED" if (better, worse) in self.violations else "ok"
            lines.append(f"mAP({better}) >= mAP({worse}): {flag}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"rows": self.rows, "dataset_checksum": self.dataset_checksum, "seeds": self.seeds,
                "violations": [list(v) for v in self.violations]}


def run_compare(cfg: RunConfig, train_ds: dp.Dataset, test_ds: dp.Dataset) -> CompareReport:
    checksum = train_ds.checksum()
    rows = {}
    for name, mode, wta in COMPARE_ROWS:
        maps, cfs, ofs, steps = [], [], [], 0
        for s in cfg.compare.seeds:
            cell = cfg.replace({"model.mode": mode, "model.wta_train": wta,
                                "train.seed": s, "protocol.mask_seed": s})
            state = run_training(cell, train_ds)
            steps += len(state.log_lines)
            rep = evaluate(state.checkpoint(), test_ds, "all")
            maps.append(rep.mAP)
            cfs.append(rep.C_F)
            ofs.append(rep.O_F)
        rows[name] = {"mAP": float(np.mean(maps)), "C_F": float(np.mean(cfs)),
                      "O_F": float(np.mean(ofs)), "steps": steps, "per_seed_mAP": maps,
                      "dataset_checksum": checksum}
    tol = cfg.compare.tolerance
    violations = [(b, w) for b, w in COMPARE_ORDERINGS if rows[b]["mAP"] < rows[w]["mAP"] - tol]
    return CompareReport(rows, checksum, list(cfg.compare.seeds), violations)
