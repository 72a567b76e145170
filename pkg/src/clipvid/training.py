"""Two-stage training: clip loss assembly, decoupled-weight-decay adaptive
moments optimizer, and the seeded training loop.

Stage 1 trains everything except the aggregation machinery with aggregation
disabled; stage 2 fine-tunes the whole model with it enabled. The loss sums
the per-layer, per-frame set losses normalized by the clip's object count,
plus the pair-normalized contrastive identity loss of each layer feeding an
aggregation layer.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import ica as ica_mod
from . import matching as mt
from . import model as M
from .autodiff import Tensor
from .synthvid import ClipSample

CONTRASTIVE_WEIGHT = 1.0


@dataclass
class LossParts:
    total: float = 0.0
    cls: float = 0.0
    giou: float = 0.0
    l1: float = 0.0
    con: float = 0.0


def clip_loss(result: M.ClipForwardResult, gts: list[list[tuple]],
              cfg: M.ModelConfig, cost_cfg: mt.MatchCostConfig,
              train_identity: bool, frozen_assignments=None
              ) -> tuple[Tensor, LossParts, list[list[mt.Assignment]]]:
    """Deep-supervised set loss over all layers and frames of one clip.

    frozen_assignments (as returned by a previous call) bypasses the
    matching so finite differencing sees a fixed assignment.
    """
    n_objects = max(1, sum(len(g) for g in gts))
    scale = 1.0 / n_objects
    parts = LossParts()
    terms = []
    assignments: list[list[mt.Assignment]] = []
    for li, layer in enumerate(result.layers):
        matched_tracks: list[dict[int, int]] = []
        layer_assign: list[mt.Assignment] = []
        for fi, states in enumerate(layer.states):
            fixed = frozen_assignments[li][fi] if frozen_assignments else None
            res = mt.set_loss(states, [(c, b) for c, b, _t in gts[fi]],
                              cost_cfg, cfg.num_classes, assignment=fixed)
            terms.append(res.total * scale)
            parts.cls += cost_cfg.lambda_cls * res.cls_term * scale
            parts.giou += cost_cfg.lambda_giou * res.giou_term * scale
            parts.l1 += cost_cfg.lambda_l1 * res.l1_term * scale
            layer_assign.append(res.assignment)
            matched_tracks.append(
                {gts[fi][j][2]: res.assignment.pred_of_gt[j]
                 for j in range(len(gts[fi]))})
        assignments.append(layer_assign)
        if train_identity and layer.ident is not None:
            con, pairs = ica_mod.contrastive_loss(layer.states, matched_tracks)
            if pairs > 0:
                terms.append(con * CONTRASTIVE_WEIGHT)
                parts.con += CONTRASTIVE_WEIGHT * float(con.data)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    parts.total = float(total.data)
    return total, parts, assignments


# ---------------------------------------------------------------------------
# Optimizer: adaptive moments with bias correction and decoupled decay


@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= lr * (mhat / (np.sqrt(vhat) + self.eps)
                            + self.weight_decay * p.data)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainSettings:
    iters: int = 2000
    lr: float = 1e-3
    lr_drop_at: int = 1500
    batch: int = 2
    seed: int = 0
    workers: int = 1


def sample_frames(clip: ClipSample, t: int, rng: np.random.Generator
                  ) -> tuple[np.ndarray, list[list[tuple]]]:
    """Random sorted frame subset of one clip plus its annotations."""
    total = clip.frames.shape[0]
    take = min(t, total)
    idx = np.sort(rng.choice(total, size=take, replace=False))
    frames = clip.frames[idx]
    gts = [clip.frame_gts(int(i)) for i in idx]
    return frames, gts


def _clip_gradients(params: dict[str, Tensor], max_norm: float = 5.0) -> None:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale


def train(dataset: list[ClipSample], cfg: M.ModelConfig, params: M.ModelParams,
          stage: int, use_ica: bool, settings: TrainSettings,
          log=None) -> list[str]:
    """Seeded training loop; returns the per-iteration loss log lines."""
    named = M.named_parameters(params)
    if stage == 1:
        trainable = {k: v for k, v in named.items() if not M.is_ica_param(k)}
    else:
        trainable = dict(named)
    ica_active = use_ica and stage >= 2
    cost_cfg = mt.MatchCostConfig()
    opt = AdamW(lr=settings.lr)
    rng = np.random.default_rng(settings.seed)
    lines = []

    def run_clip(args):
        frames, gts = args
        with ad.ComputationTape() as tape:
            out = M.clip_forward(frames, cfg, params, mode="train",
                                 ica_active=ica_active)
            loss, parts, _ = clip_loss(out, gts, cfg, cost_cfg,
                                       train_identity=ica_active)
        tape.backward(loss)
        return parts

    pool = ThreadPoolExecutor(settings.workers) if settings.workers > 1 else None
    try:
        for it in range(settings.iters):
            picks = rng.integers(len(dataset), size=settings.batch)
            batch_args = [sample_frames(dataset[int(c)], cfg.t_train, rng)
                          for c in picks]
            for p in trainable.values():
                p.zero_grad()
            if pool is not None:
                all_parts = list(pool.map(run_clip, batch_args))
            else:
                all_parts = [run_clip(a) for a in batch_args]
            inv = 1.0 / settings.batch
            for p in trainable.values():
                if p.grad is not None:
                    p.grad *= inv
            _clip_gradients(trainable)
            lr = settings.lr * (0.1 if it >= settings.lr_drop_at else 1.0)
            opt.step(trainable, lr)
            agg = LossParts(
                total=sum(p.total for p in all_parts) * inv,
                cls=sum(p.cls for p in all_parts) * inv,
                giou=sum(p.giou for p in all_parts) * inv,
                l1=sum(p.l1 for p in all_parts) * inv,
                con=sum(p.con for p in all_parts) * inv)
            line = (f"{it},{agg.total:.9g},{agg.cls:.9g},{agg.giou:.9g},"
                    f"{agg.l1:.9g},{agg.con:.9g}")
            lines.append(line)
            if log is not None:
                print(line, file=log, flush=True)
    finally:
        if pool is not None:
            pool.shutdown()
    return lines


# ---------------------------------------------------------------------------
# Inference over full clips


def infer_clip(clip: ClipSample, cfg: M.ModelConfig, params: M.ModelParams,
               mode: str = "infer", use_ica: bool = True,
               frames_per_pass: int | None = None,
               collect_matches: bool = False):
    """Detect on every frame of a clip, windowed by the inference length.

    Returns (per-frame detections, identity-match diagnostics).
    """
    t_pass = frames_per_pass or cfg.t_infer
    total = clip.frames.shape[0]
    detections: list[list] = []
    diagnostics = []
    for start in range(0, total, t_pass):
        stop = min(start + t_pass, total)
        frames = clip.frames[start:stop]
        gts = [clip.frame_gts(i) for i in range(start, stop)]
        out = M.clip_forward(frames, cfg, params, mode=mode,
                             gts=gts if mode == "oracle_ica" else None,
                             ica_active=use_ica)
        detections.extend(M.extract_detections(out.layers[-1], cfg))
        if collect_matches:
            for layer in out.layers:
                diagnostics.extend(layer.matches)
    return detections, diagnostics
