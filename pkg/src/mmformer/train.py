"""Adam, modality-dropout sampling and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import AdamState, Checkpoint, load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig
from .data import Sample, augment, derive_seed, normalize
from .losses import LossReport, labels_to_nested_regions, total_loss
from .modality import MODALITIES, ModalityMask, coerce_mask, enumerate_subsets
from .network import ModelParams, init_params, mmformer_forward
from .tensor import NonFiniteError, backward

log = logging.getLogger(__name__)

_SUBSETS = enumerate_subsets()


def adam_step(params: ModelParams, grads: dict, state: AdamState, config: TrainConfig, lr: Optional[float] = None) -> None:
    """One bias-corrected Adam update, in place.

    Parameters absent from ``grads`` keep their values and moment buffers.
    """
    lr = config.lr if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    state.t += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        step = state.steps.get(name, 0) + 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(p.dtype, copy=False)
        state.m[name], state.v[name], state.steps[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False), step


def sample_modality_mask(rng: np.random.Generator, policy: str = "uniform", dropout_p: float = 0.5) -> ModalityMask:
    """Draw a non-empty availability mask.

    ``uniform`` picks one of the 15 non-empty subsets with equal probability.
    ``bernoulli`` drops each modality independently with ``dropout_p`` and
    redraws the empty mask. ``full`` always keeps every modality.
    """
    if policy == "uniform":
        return _SUBSETS[int(rng.integers(len(_SUBSETS)))]
    if policy == "bernoulli":
        while True:
            keep = rng.random(len(MODALITIES)) >= dropout_p
            if keep.any():
                return ModalityMask(tuple(bool(k) for k in keep))
    if policy == "full":
        return ModalityMask.full()
    raise ValueError(f"unknown mask policy {policy!r}")


def sample_inputs(sample: Sample) -> list[np.ndarray]:
    return [sample.volumes[i][None, None] for i in range(len(MODALITIES))]


def _accumulate_sample(params: ModelParams, cfg: ModelConfig, sample: Sample, mask: ModalityMask, scale: float) -> LossReport:
    out = mmformer_forward(sample_inputs(sample), mask, params, cfg, with_aux=cfg.use_aux)
    report = total_loss(out, labels_to_nested_regions(sample.labels), mask, use_aux=cfg.use_aux)
    if not math.isfinite(report.total):
        raise NonFiniteError(f"non-finite loss {report.total} (mask {mask}, seed {sample.seed})")
    loss = report.loss if scale == 1.0 else report.loss * scale
    backward(loss)
    report.loss = None
    return report


def _clip(grads: dict, max_norm: Optional[float]) -> dict:
    if not max_norm:
        return grads
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm <= max_norm:
        return grads
    scale = np.float32(max_norm / (norm + 1e-12))
    return {k: g * scale for k, g in grads.items()}


def train_step(
    params: ModelParams,
    cfg: ModelConfig,
    sample,
    mask,
    state: AdamState,
    tcfg: TrainConfig,
    lr: Optional[float] = None,
) -> LossReport:
    """Forward with ``mask``, total loss, backward, Adam update.

    ``sample`` may be a list of samples with a matching list of masks, in
    which case gradients are averaged over the batch and the returned report
    holds mean terms.
    """
    samples = list(sample) if isinstance(sample, (list, tuple)) else [sample]
    masks = list(mask) if isinstance(mask, (list, tuple)) and not isinstance(mask[0], bool) else [mask]
    if len(masks) != len(samples):
        raise ValueError("need one mask per sample")
    params.zero_grad()
    reports = [_accumulate_sample(params, cfg, s, coerce_mask(m), 1.0 / len(samples)) for s, m in zip(samples, masks)]
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    adam_step(params, _clip(grads, tcfg.grad_clip), state, tcfg, lr)
    params.zero_grad()
    return reports[0] if len(reports) == 1 else _mean_report(reports)


def _mean_report(reports: Sequence[LossReport]) -> LossReport:
    n = len(reports)
    enc: dict[str, list] = {}
    for r in reports:
        for k, v in r.encoder_terms.items():
            enc.setdefault(k, []).append(v)
    dec = [float(np.mean(col)) for col in zip(*[r.decoder_terms for r in reports])] if reports[0].decoder_terms else []
    return LossReport(
        total=sum(r.total for r in reports) / n,
        output_term=sum(r.output_term for r in reports) / n,
        encoder_terms={k: float(np.mean(v)) for k, v in enc.items()},
        decoder_terms=dec,
    )


@dataclass
class TrainResult:
    params: ModelParams
    history: list[float]
    state: AdamState
    rng_state: dict
    epochs_done: int
    step_reports: list[dict] = field(default_factory=list)


def learning_rate(tcfg: TrainConfig, epoch: int) -> float:
    if tcfg.lr_schedule == "poly":
        return tcfg.lr * (1 - epoch / tcfg.epochs) ** tcfg.poly_power
    return tcfg.lr


def prepare_sample(sample: Sample, rng: np.random.Generator, tcfg: TrainConfig) -> Sample:
    if tcfg.augment:
        sample = augment(sample, int(rng.integers(2 ** 63)), tcfg.crop_extent)
    return normalize(sample)


def train_loop(
    dataset: Sequence[Sample],
    cfg: ModelConfig,
    tcfg: TrainConfig,
    params: Optional[ModelParams] = None,
    checkpoint_path=None,
    resume=None,
    callback=None,
) -> TrainResult:
    """Train for ``tcfg.epochs`` epochs; returns parameters and per-epoch mean loss.

    Every random choice (sample order, augmentation, masks) flows from one
    generator seeded by ``tcfg.seed``, and its state is checkpointed so a
    resumed run continues the exact trajectory. ``callback(epoch, params,
    history)`` may return True to stop early.
    """
    if not dataset:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(tcfg.seed)
    state = AdamState()
    history: list[float] = []
    start = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume, expected=cfg)
        params = ckpt.params
        state = ckpt.adam or AdamState()
        rng.bit_generator.state = ckpt.rng_state
        history = list(ckpt.meta.get("history", []))
        start = int(ckpt.meta.get("epoch", 0))
    elif params is None:
        params = init_params(cfg, derive_seed(tcfg.seed, 1))
    steps = tcfg.steps_per_epoch or math.ceil(len(dataset) / tcfg.batch_size)
    log.info("training %s for %d epochs x %d steps (seed %d)", cfg.variant_name(), tcfg.epochs, steps, tcfg.seed)
    for epoch in range(start, tcfg.epochs):
        lr = learning_rate(tcfg, epoch)
        order = rng.permutation(len(dataset))
        losses = []
        cursor = 0
        for _ in range(steps):
            batch, masks = [], []
            for _ in range(tcfg.batch_size):
                idx = int(order[cursor % len(order)])
                cursor += 1
                batch.append(prepare_sample(dataset[idx], rng, tcfg))
                masks.append(sample_modality_mask(rng, tcfg.mask_policy, tcfg.dropout_p))
            report = train_step(params, cfg, batch, masks, state, tcfg, lr)
            losses.append(report.total)
        history.append(float(np.mean(losses)))
        log.info("epoch %d/%d mean loss %.5f", epoch + 1, tcfg.epochs, history[-1])
        done = epoch + 1
        if checkpoint_path is not None and tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0:
            save_training_checkpoint(checkpoint_path, params, cfg, tcfg, state, rng, history, done)
        if callback is not None and callback(done, params, history):
            break
    result = TrainResult(params, history, state, rng.bit_generator.state, len(history))
    if checkpoint_path is not None:
        save_training_checkpoint(checkpoint_path, params, cfg, tcfg, state, rng, history, len(history))
    return result


def save_training_checkpoint(path, params, cfg, tcfg, state, rng, history, epoch) -> None:
    meta = {"epoch": epoch, "history": history}
    save_checkpoint(Path(path), Checkpoint(params, cfg, tcfg, state, rng.bit_generator.state, meta))
