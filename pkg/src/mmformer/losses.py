"""Dice loss, the multi-head training objective and DSC evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .modality import MODALITIES, ModalityMask, coerce_mask
from .network import ModelOutput
from .tensor import Tensor

# Channel order of every logit/target volume.
REGIONS: tuple[str, ...] = ("wt", "tc", "et")
SMOOTH = 1e-5


@dataclass
class RegionTargets:
    """Binary whole-tumor, tumor-core and enhancing-tumor volumes."""

    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __post_init__(self):
        self.wt, self.tc, self.et = (np.asarray(v, dtype=bool) for v in (self.wt, self.tc, self.et))
        if not (self.wt.shape == self.tc.shape == self.et.shape):
            raise ValueError("region volumes must share a shape")

    def is_nested(self) -> bool:
        return bool(np.all(self.wt >= self.tc) and np.all(self.tc >= self.et))

    def stack(self) -> np.ndarray:
        """``[1, 3, D, H, W]`` float32 target in :data:`REGIONS` order."""
        return np.stack([getattr(self, r) for r in REGIONS])[None].astype(np.float32)

    def region(self, name: str) -> np.ndarray:
        return getattr(self, name)


def labels_to_nested_regions(labels: np.ndarray) -> RegionTargets:
    """Map codes {0 background, 1 edema, 2 non-enhancing core, 3 enhancing}."""
    labels = np.asarray(labels)
    bad = ~np.isin(labels, (0, 1, 2, 3))
    if bad.any():
        raise ValueError(f"unknown label codes: {sorted(set(np.unique(labels[bad]).tolist()))}")
    return RegionTargets(wt=labels >= 1, tc=labels >= 2, et=labels == 3)


def dice_loss(pred: Tensor, target, smooth: float = SMOOTH) -> Tensor:
    """``1 - (2 sum(g p) + s) / (sum(g^2) + sum(p^2) + s)`` summed over all classes."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if pred.shape != target.shape:
        raise ValueError(f"dice_loss: prediction {pred.shape} vs target {target.shape}")
    if smooth < 0:
        raise ValueError("smooth must be non-negative")
    inter = ops.sum(ops.mul(pred, target))
    denom = ops.add(ops.sum(ops.square(target)), ops.sum(ops.square(pred)))
    num = ops.add(ops.mul(inter, 2.0), smooth)
    denom = ops.add(denom, smooth)
    ratio = _divide(num, denom)
    return ops.sub(1.0, ratio)


def _divide(num: Tensor, den: Tensor) -> Tensor:
    from .tensor import make_result

    out = num.data / den.data
    return make_result(out, (num, den), lambda g: (g / den.data, -g * num.data / (den.data * den.data)), "divide")


@dataclass
class LossReport:
    total: float
    output_term: float
    encoder_terms: dict[str, float] = field(default_factory=dict)
    decoder_terms: list[float] = field(default_factory=list)
    loss: Optional[Tensor] = field(default=None, repr=False, compare=False)

    @property
    def num_terms(self) -> int:
        return 1 + len(self.encoder_terms) + len(self.decoder_terms)

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "output": self.output_term,
            "encoder": dict(self.encoder_terms),
            "decoder": list(self.decoder_terms),
        }


def total_loss(output: ModelOutput, target, mask, use_aux: bool = True) -> LossReport:
    """Unweighted sum of Dice losses over every present head.

    Encoder auxiliary terms exist only for available modalities.
    """
    mask: ModalityMask = coerce_mask(mask)
    tgt = target.stack() if isinstance(target, RegionTargets) else np.asarray(target, dtype=np.float32)
    tgt_t = Tensor(tgt)

    def term(logits: Tensor) -> Tensor:
        return dice_loss(ops.sigmoid(logits), tgt_t)

    out_term = term(output.main_logits)
    terms = [out_term]
    enc, dec = {}, []
    if use_aux:
        if len(output.encoder_aux_logits) != len(MODALITIES) or not output.decoder_aux_logits:
            raise ValueError("auxiliary heads are missing from the model output")
        for m, logits in zip(MODALITIES, output.encoder_aux_logits):
            if not mask[m]:
                continue
            if logits is None:
                raise ValueError(f"missing encoder head for available modality {m.name}")
            t = term(logits)
            enc[m.name] = t
            terms.append(t)
        for logits in output.decoder_aux_logits:
            t = term(logits)
            dec.append(t)
            terms.append(t)
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return LossReport(
        total=total.item(),
        output_term=out_term.item(),
        encoder_terms={k: v.item() for k, v in enc.items()},
        decoder_terms=[t.item() for t in dec],
        loss=total,
    )


def dsc_metric(pred_binary, target_binary) -> float:
    """Dice similarity in percent; two empty masks score 100."""
    p = np.asarray(pred_binary, dtype=bool)
    g = np.asarray(target_binary, dtype=bool)
    if p.shape != g.shape:
        raise ValueError(f"dsc_metric: shape mismatch {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(p, g).sum()) / denom
