"""Central-difference gradient verification."""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import ops
from .config import ModelConfig
from .losses import dice_loss, labels_to_nested_regions, total_loss
from .modality import ModalityMask, coerce_mask
from .network import (
    _transformer_shapes,
    init_params,
    mmformer_forward,
    multi_head_self_attention,
    transformer_block,
)
from .tensor import Tensor, backward


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-3,
    max_coords: Optional[int] = None,
    seed: int = 0,
    reduction: str = "max",
) -> float:
    """Relative error between the analytic and a central-difference gradient.

    ``reduction="max"`` returns the worst coordinate of
    ``|analytic - numeric| / (|numeric| + 1e-8)``; ``reduction="norm"``
    returns ``||analytic - numeric|| / ||numeric||`` over the checked
    coordinates, which tolerates individual near-zero entries.

    The analytic gradient comes from one backward pass of ``f`` at ``x`` in
    ``x``'s own dtype. The numeric side evaluates ``f`` at ``x +/- h e_i``
    promoted to float64. ``max_coords`` limits the check to a seeded random
    subset of coordinates, which keeps whole-network checks affordable.
    """
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    out = f(probe)
    if out.size != 1:
        raise ValueError("finite_difference_check needs a scalar-valued function")
    backward(out)
    analytic = np.zeros(x.shape) if probe.grad is None else probe.grad.astype(np.float64)

    base = x.data.astype(np.float64)
    coords = np.arange(base.size)
    if max_coords is not None and max_coords < base.size:
        coords = np.sort(np.random.default_rng(seed).choice(base.size, size=max_coords, replace=False))

    if reduction not in ("max", "norm"):
        raise ValueError(f"unknown reduction {reduction!r}")
    numeric = np.empty(len(coords))
    for j, i in enumerate(coords):
        shifted = base.copy()
        shifted.flat[i] += h
        f_plus = float(f(Tensor(shifted, dtype=np.float64)).data)
        shifted.flat[i] -= 2 * h
        f_minus = float(f(Tensor(shifted, dtype=np.float64)).data)
        numeric[j] = (f_plus - f_minus) / (2 * h)
    picked = analytic.flat[coords]
    if reduction == "norm":
        return float(np.linalg.norm(picked - numeric) / (np.linalg.norm(numeric) + 1e-12))
    return float(np.max(np.abs(picked - numeric) / (np.abs(numeric) + 1e-8)))


def _projected(op: Callable[[Tensor], Tensor], seed: int) -> Callable[[Tensor], Tensor]:
    """Wrap ``op`` as ``sum(op(x) * R)`` with a fixed random ``R``.

    A plain ``sum`` would give identically zero gradients for shift-invariant
    ops such as softmax and the normalizations.
    """
    rng = np.random.default_rng(seed)
    weights = {}

    def f(x: Tensor) -> Tensor:
        y = op(x)
        if y.shape not in weights:
            weights[y.shape] = Tensor(rng.uniform(0.5, 1.5, size=y.shape) * rng.choice([-1, 1], size=y.shape))
        return ops.sum(ops.mul(y, weights[y.shape]))

    return f


def op_suite(seed: int = 0) -> dict[str, tuple[Callable[[Tensor], Tensor], Tensor]]:
    """Named (function, input) pairs covering every differentiable kernel.

    All inputs have extents of at most 5.
    """
    rng = np.random.default_rng(seed)

    def rand(*shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale)

    w3 = rand(3, 2, 3, 3, 3, scale=0.3)
    b3 = rand(3)
    wt = rand(2, 3, 2, 2, 2)
    bt = rand(3)
    gamma4, beta4 = rand(4), rand(4)
    gamma5, beta5 = rand(5), rand(5)
    wl, bl = rand(5, 3), rand(3)
    kmat = rand(2, 4, 3)
    rand_fixed = rand(1, 2, 4, 4, 4)
    rand_tfixed = rand(1, 2, 2, 2, 2)
    rand_gn = rand(1, 4, 2, 2, 2)
    rand_ln = rand(3, 5)
    rand_lin = rand(2, 4, 5)

    tiny = ModelConfig(extent=16, channels=(2, 4), token_dim=4, heads=2, ffn_mult=2, groups=2)
    attn = {}
    for name, shape in _transformer_shapes("a", tiny).items():
        attn[name] = Tensor(rng.standard_normal(shape) * (0.5 if name.endswith(".w") else 0.1) + (1.0 if name.endswith(".g") else 0.0))
    target = Tensor((rng.random((1, 3, 2, 3, 2)) < 0.5).astype(np.float32))

    def away_from_kink(*shape):
        vals = rng.uniform(0.1, 1.5, size=shape) * rng.choice([-1, 1], size=shape)
        return Tensor(vals)

    suite = {
        "conv3d": (lambda x: ops.conv3d(x, w3, b3, stride=1, padding=1), rand(1, 2, 4, 4, 4)),
        "conv3d_stride2": (lambda x: ops.conv3d(x, w3, b3, stride=2, padding=1), rand(1, 2, 5, 4, 4)),
        "conv3d_weight": (lambda w: ops.conv3d(rand_fixed, w, b3, stride=1, padding=1), w3),
        "transposed_conv3d": (lambda x: ops.transposed_conv3d(x, wt, bt), rand(1, 2, 2, 3, 2)),
        "transposed_conv3d_weight": (lambda w: ops.transposed_conv3d(rand_tfixed, w, bt), wt),
        "group_norm": (lambda x: ops.group_norm(x, 2, gamma4, beta4), rand(1, 4, 2, 2, 2)),
        "group_norm_gamma": (lambda g: ops.group_norm(rand_gn, 2, g, beta4), gamma4),
        "layer_norm": (lambda x: ops.layer_norm(x, gamma5, beta5), rand(3, 5)),
        "layer_norm_gamma": (lambda g: ops.layer_norm(rand_ln, g, beta5), gamma5),
        "relu": (ops.relu, away_from_kink(4, 5)),
        "gelu": (ops.gelu, rand(4, 5)),
        "sigmoid": (ops.sigmoid, rand(4, 5)),
        "linear": (lambda x: ops.linear(x, wl, bl), rand(2, 4, 5)),
        "linear_weight": (lambda w: ops.linear(rand_lin, w, bl), wl),
        "matmul": (lambda a: ops.matmul(a, kmat), rand(2, 3, 4)),
        "softmax": (lambda x: ops.softmax(x, axis=-1), rand(3, 5)),
        "concat": (lambda x: ops.concat([x, ops.square(x)], axis=1), rand(2, 3, 4)),
        "flatten_spatial": (ops.flatten_spatial, rand(1, 3, 2, 3, 2)),
        "trilinear_interpolate": (lambda x: ops.trilinear_interpolate(x, (4, 5, 3)), rand(1, 2, 2, 3, 2)),
        "mul": (lambda x: ops.mul(x, ops.transpose(x, (1, 0))), rand(4, 4)),
        "mean": (lambda x: ops.mean(ops.square(x), axis=1), rand(3, 4)),
        "attention": (lambda x: multi_head_self_attention(x, attn, "a.attn", heads=2), rand(1, 5, 4)),
        "transformer_block": (lambda x: transformer_block(x, attn, "a", tiny), rand(1, 4, 4)),
        "dice_loss": (lambda x: dice_loss(ops.sigmoid(x), target), rand(1, 3, 2, 3, 2)),
    }
    return {name: (_projected(fn, seed + i), x) for i, (name, (fn, x)) in enumerate(suite.items())}


def run_op_suite(h: float = 1e-3, tol: float = 1e-3, seed: int = 0) -> dict[str, tuple[float, bool]]:
    results = {}
    for name, (f, x) in op_suite(seed).items():
        err = finite_difference_check(f, x, h=h)
        results[name] = (err, err < tol)
    return results


TINY_NETWORK = ModelConfig(extent=16, channels=(4, 8, 16), token_dim=8, heads=2, ffn_mult=2, groups=2)


def network_loss_check(
    param_name: str = "enc.flair.s1.conv.w",
    cfg: ModelConfig = TINY_NETWORK,
    mask=None,
    seed: int = 0,
    h: float = 1e-5,
    max_coords: int = 12,
) -> float:
    """Norm-wise finite-difference error of the whole training loss w.r.t. one parameter tensor.

    The step is small because first-layer weights move many activations
    across ReLU kinks; the numeric side runs in float64, so this is safe.

    Every other parameter and the input volumes stay fixed; the probed tensor
    is substituted into a copy of the parameter dict on each evaluation.
    """
    mask = ModalityMask.full() if mask is None else coerce_mask(mask)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    e = cfg.extent
    vols = [Tensor(rng.standard_normal((1, 1, e, e, e))) for _ in range(4)]
    labels = np.zeros((e, e, e), dtype=np.uint8)
    c = e // 2
    labels[c - 4:c + 4, c - 4:c + 4, c - 4:c + 4] = 1
    labels[c - 2:c + 2, c - 2:c + 2, c - 2:c + 2] = 2
    labels[c - 1:c + 1, c - 1:c + 1, c - 1:c + 1] = 3
    target = labels_to_nested_regions(labels)

    def f(w: Tensor) -> Tensor:
        local = dict(params)
        local[param_name] = w
        out = mmformer_forward(vols, mask, local, cfg, with_aux=cfg.use_aux)
        return total_loss(out, target, mask, use_aux=cfg.use_aux).loss

    return finite_difference_check(f, params[param_name], h=h, max_coords=max_coords, seed=seed, reduction="norm")


NETWORK_PROBES = ("enc.flair.s1.conv.w", "intra.t1c.blk0.attn.q.w", "inter.embed.w", "dec.l1.block2.conv.w", "dec.ds2.w", "aux.out.w")
