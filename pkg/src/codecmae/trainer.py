"""Training loop: codec-token pretraining followed by cluster-ID self-training."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from . import container
from .audio_io import AudioBuffer, crop_at, draw_crop_offset, n_samples_for
from .errors import ConfigError, NumericError, ShapeError
from .frontend import melspectrogram
from .masking import sample_mask
from .model import MaskedAutoencoder, ModelConfig, backward, model_from_tensors, model_to_tensors
from .objective import LossConfig, batch_masked_accuracy, weighted_ce_from_log_probs
from .rvq import Codebook, rvq_encode
from .selftrain import build_selftrain_targets

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskConfig:
    proportion: float = 0.5
    span: int = 15


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    batch_size: int = 4
    steps_stage1: int = 5000
    steps_stage2: int = 1500
    seed: int = 0
    eval_every: int = 250
    eval_items: int = 32
    crop_s: float = 4.0
    grad_clip: float | None = None
    cache_items: int = 4096

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, cfg: TrainConfig):
    """One AdamW update in place: decoupled decay, then the bias-corrected Adam step."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient, step aborted", step=state.step + 1, tensor=name)
    if cfg.grad_clip is not None:
        total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
        if total > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / total).to(g.dtype) for k, g in grads.items()}
    state.step += 1
    bc1 = 1.0 - cfg.beta1 ** state.step
    bc2 = 1.0 - cfg.beta2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.exp_avg.setdefault(name, torch.zeros_like(p))
            v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
            p.mul_(1.0 - cfg.lr * cfg.weight_decay)
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            denom = (v / bc2).sqrt_().add_(cfg.eps)
            p.addcdiv_(m / bc1, denom, value=-cfg.lr)
    return params, state


@dataclass
class Checkpoint:
    model: MaskedAutoencoder
    opt: AdamWState
    stage: int
    step: int
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors, meta = model_to_tensors(ckpt.model)
    for name, t in ckpt.opt.exp_avg.items():
        tensors[f"opt.exp_avg.{name}"] = t.detach().numpy()
    for name, t in ckpt.opt.exp_avg_sq.items():
        tensors[f"opt.exp_avg_sq.{name}"] = t.detach().numpy()
    meta.update({"stage": ckpt.stage, "step": ckpt.step, "opt_step": ckpt.opt.step, **ckpt.meta})
    container.save(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = container.load(path)
    if meta.get("kind") != "mae":
        raise ShapeError(f"{path} is not a model checkpoint")
    model = model_from_tensors(tensors, meta)
    opt = AdamWState(step=int(meta.get("opt_step", 0)))
    for key, arr in tensors.items():
        for prefix, store in (("opt.exp_avg.", opt.exp_avg), ("opt.exp_avg_sq.", opt.exp_avg_sq)):
            if key.startswith(prefix):
                store[key[len(prefix):]] = torch.from_numpy(np.array(arr))
    extra = {k: v for k, v in meta.items() if k not in ("kind", "config", "stage", "step", "opt_step")}
    return Checkpoint(model, opt, int(meta["stage"]), int(meta["step"]), meta=extra)


# -- batches -----------------------------------------------------------------

TargetFn = Callable[[np.ndarray], np.ndarray]


class ClipCache:
    """Memoises (features, targets) per (clip index, crop offset)."""

    def __init__(self, clips: list[AudioBuffer], n_mels: int, crop_s: float, target_fn, max_items: int):
        self.clips = clips
        self.n_mels = n_mels
        self.crop_s = crop_s
        self.target_fn = target_fn
        self.max_items = max_items
        self._store: dict = {}

    def get(self, i: int, offset: int):
        key = (i, offset)
        hit = self._store.get(key)
        if hit is None:
            clip = self.clips[i]
            audio = crop_at(clip, offset, n_samples_for(self.crop_s, clip.sample_rate))
            feats = melspectrogram(audio, self.n_mels).data.astype(np.float32)
            hit = (feats, np.asarray(self.target_fn(feats[None])[0], dtype=np.int64))
            if len(self._store) < self.max_items:
                self._store[key] = hit
        return hit


def _batch(cache: ClipCache, rng: np.random.Generator, n: int, mask_cfg: MaskConfig, pick=None):
    idx = rng.integers(0, len(cache.clips), size=n) if pick is None else pick
    feats, targets, masks = [], [], []
    for i in idx:
        clip = cache.clips[int(i)]
        offset = draw_crop_offset(len(clip), n_samples_for(cache.crop_s, clip.sample_rate), rng)
        f, y = cache.get(int(i), offset)
        feats.append(f)
        targets.append(y)
        masks.append(sample_mask(f.shape[0], mask_cfg.proportion, mask_cfg.span, rng))
    flags = torch.from_numpy(np.stack([m.flags() for m in masks]))
    return torch.from_numpy(np.stack(feats)), torch.from_numpy(np.stack(targets)), masks, flags


def _step_rng(seed: int, stage: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, stage, step])


def batch_loss(model, x, y, masks, flags, delta, gamma):
    logits = model(x.to(model.proj.weight.dtype), masks)
    loss = weighted_ce_from_log_probs(logits.log_softmax(dim=-1), y, flags, delta, gamma)
    return loss, logits


def train_loop(
    model: MaskedAutoencoder,
    clips: list[AudioBuffer],
    target_fn: TargetFn,
    gamma: np.ndarray,
    loss_cfg: LossConfig,
    mask_cfg: MaskConfig,
    cfg: TrainConfig,
    steps: int,
    stage: int,
    opt: AdamWState | None = None,
    start_step: int = 0,
    metrics_path=None,
) -> Checkpoint:
    """Run ``steps`` optimisation steps starting after ``start_step``.

    Every batch is drawn from a generator seeded by ``(seed, stage, step)``, so a
    run resumed from a checkpoint continues exactly as an uninterrupted one.
    """
    if not clips:
        raise ConfigError("training corpus is empty")
    opt = opt or AdamWState()
    cache = ClipCache(clips, model.cfg.input_dim, cfg.crop_s, target_fn, cfg.cache_items)
    eval_rng = np.random.default_rng([cfg.seed, stage, 2**31])
    n_eval = min(cfg.eval_items, len(clips))
    eval_batch = _batch(cache, eval_rng, n_eval, mask_cfg, pick=eval_rng.choice(len(clips), n_eval, replace=False))
    history = []
    header = "step,loss," + ",".join(f"acc_q{q}" for q in range(model.cfg.n_books))
    out = None
    if metrics_path is not None:
        out = open(metrics_path, "a" if start_step else "w")
        if not start_step:
            out.write(header + "\n")

    def evaluate(step):
        model.eval()
        with torch.no_grad():
            x, y, masks, flags = eval_batch
            loss, logits = batch_loss(model, x, y, masks, flags, loss_cfg.delta, gamma)
            acc = batch_masked_accuracy(logits, y, flags)
        model.train()
        row = (step, float(loss), *map(float, acc))
        history.append(row)
        log.info("stage %d step %d loss %.4f acc %s", stage, step, row[1], np.round(acc, 3))
        if out is not None:
            out.write(",".join([str(step)] + [f"{v:.6f}" for v in row[1:]]) + "\n")
            out.flush()

    params = dict(model.named_parameters())
    try:
        if start_step == 0:
            evaluate(0)
        end = start_step + steps
        for step in range(start_step + 1, end + 1):
            x, y, masks, flags = _batch(cache, _step_rng(cfg.seed, stage, step), cfg.batch_size, mask_cfg)
            loss, _ = batch_loss(model, x, y, masks, flags, loss_cfg.delta, gamma)
            if not torch.isfinite(loss):
                raise NumericError("non-finite loss", step=step)
            try:
                grads = backward(loss, model)
                adamw_step(params, grads, opt, cfg)
            except NumericError as exc:
                raise NumericError(str(exc), step=step) from exc
            if step % cfg.eval_every == 0 or step == end:
                evaluate(step)
    finally:
        if out is not None:
            out.close()
    return Checkpoint(model, opt, stage, start_step + steps, history)


def rvq_target_fn(books: list[Codebook]) -> TargetFn:
    def targets(feats: np.ndarray) -> np.ndarray:
        return np.stack([rvq_encode(f.astype(np.float64), books)[0].indices for f in feats])

    return targets


def pretrain(
    corpus: list[AudioBuffer],
    books: list[Codebook],
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    cfg: TrainConfig,
    mask_cfg: MaskConfig = MaskConfig(),
    metrics_path=None,
    resume: Checkpoint | None = None,
    steps: int | None = None,
) -> Checkpoint:
    """Stage 1: predict frozen RVQ codes of log-mel frames."""
    if not corpus:
        raise ConfigError("pretraining corpus is empty")
    if len(books) != model_cfg.n_books or books[0].size != model_cfg.n_classes or books[0].dim != model_cfg.input_dim:
        raise ShapeError("model heads / input width do not match the tokenizer codebooks")
    steps = cfg.steps_stage1 if steps is None else steps
    if resume is None:
        model = MaskedAutoencoder(model_cfg, seed=cfg.seed)
        opt, start = AdamWState(), 0
    else:
        model, opt, start = resume.model, resume.opt, resume.step
    gamma = loss_cfg.gamma_for(len(books))
    ckpt = train_loop(model, corpus, rvq_target_fn(books), gamma, loss_cfg, mask_cfg, cfg,
                      steps, stage=1, opt=opt, start_step=start, metrics_path=metrics_path)
    ckpt.meta = {"gamma": [float(g) for g in gamma], "delta": loss_cfg.delta}
    return ckpt


def selftrain_stage(
    ckpt: Checkpoint,
    corpus: list[AudioBuffer],
    k: int,
    cfg: TrainConfig,
    loss_cfg: LossConfig = LossConfig(),
    mask_cfg: MaskConfig = MaskConfig(),
    sample_size: int = 200,
    source: MaskedAutoencoder | None = None,
    metrics_path=None,
    steps: int | None = None,
) -> tuple[Checkpoint, object]:
    """Stage 2: fit k-means on embeddings of ``source`` (default: the stage-1 model),
    swap in a fresh single ``k``-way head and keep training with a new optimiser.

    Returns the new checkpoint and the k-means model used for the targets.
    """
    rng = np.random.default_rng([cfg.seed, 2, 2**31 + 1])
    kmeans, provider = build_selftrain_targets(source or ckpt.model, corpus, sample_size, k, rng, cfg.crop_s)
    model = copy.deepcopy(ckpt.model)
    model.reset_heads(1, k, seed=cfg.seed + 1)
    steps = cfg.steps_stage2 if steps is None else steps
    loss_cfg = LossConfig(loss_cfg.delta, None)
    out = train_loop(model, corpus, lambda f: provider.labels_for_features(f)[:, None], np.ones(1), loss_cfg, mask_cfg, cfg,
                     steps, stage=2, metrics_path=metrics_path)
    out.meta = {"gamma": [1.0], "delta": loss_cfg.delta, "kmeans_k": k}
    return out, kmeans

