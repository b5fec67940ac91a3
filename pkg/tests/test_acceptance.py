"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import dataclasses
import time

import numpy as np
import pytest

from mmformer import ops
from mmformer.checkpoint import AdamState
from mmformer.cli import main
from mmformer.config import ModelConfig, PhantomConfig, TrainConfig
from mmformer.data import generate_phantom
from mmformer.evaluation import aggregate_by_missing_count, evaluate_subsets, parse_report_csv
from mmformer.gradcheck import NETWORK_PROBES, network_loss_check, run_op_suite
from mmformer.losses import labels_to_nested_regions, total_loss
from mmformer.modality import MODALITIES, ModalityMask, enumerate_subsets
from mmformer.network import ModelParams, init_params, mmformer_forward, multi_head_self_attention
from mmformer.tensor import Tensor, no_grad
from mmformer.train import adam_step, train_loop

from oracles import (
    adam_scalar,
    attention_loop,
    conv3d_naive,
    group_norm_stats,
    layer_norm_direct,
    softmax_direct,
    transposed_conv3d_scatter,
)

pytestmark = pytest.mark.slow

# Desk-scale run shared by the robustness and ablation criteria.
DESK_CONFIG = """\
model.extent = 16
model.channels = 8,16,32,64
model.token_dim = 64
train.lr = 0.002
train.epochs = 30
data.extent = 16
"""
DESK_SAMPLES = 20  # 16 train, 4 val


def test_gradient_suite(verdict):
    t0 = time.perf_counter()
    ops_res = run_op_suite(tol=1e-3)
    net = {name: network_loss_check(name) for name in NETWORK_PROBES}
    elapsed = time.perf_counter() - t0
    worst_op = max(err for err, _ in ops_res.values())
    worst_net = max(net.values())
    ok = all(p for _, p in ops_res.values()) and worst_net < 1e-2 and elapsed < 120
    verdict(
        "1 gradient suite",
        ok,
        f"{len(ops_res)} ops max rel err {worst_op:.1e} (<1e-3), {len(net)} network probes max {worst_net:.1e} (<1e-2), {elapsed:.0f}s (<120s)",
    )
    assert ok


def test_oracle_suite(verdict):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    errs = {}
    x = rng.standard_normal((1, 2, 5, 4, 5)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    errs["conv3d"] = max(
        np.abs(ops.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=s, padding=1).data - conv3d_naive(x, w, b, s, 1)).max() for s in (1, 2)
    )
    x = rng.standard_normal((1, 3, 2, 3, 2)).astype(np.float32)
    w = rng.standard_normal((3, 2, 2, 2, 2)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    errs["transposed_conv3d"] = np.abs(ops.transposed_conv3d(Tensor(x), Tensor(w), Tensor(b)).data - transposed_conv3d_scatter(x, w, b)).max()
    x = rng.standard_normal((1, 4, 3, 5, 2)).astype(np.float32)
    g, bt = rng.standard_normal(4), rng.standard_normal(4)
    errs["group_norm"] = np.abs(ops.group_norm(Tensor(x), 2, Tensor(g), Tensor(bt)).data - group_norm_stats(x, 2, g, bt)).max()
    x = rng.standard_normal((4, 5)).astype(np.float32)
    g, bt = rng.standard_normal(5), rng.standard_normal(5)
    errs["layer_norm"] = np.abs(ops.layer_norm(Tensor(x), Tensor(g), Tensor(bt)).data - layer_norm_direct(x, g, bt)).max()
    x = rng.standard_normal((3, 5)) * 4
    errs["softmax"] = np.abs(ops.softmax(Tensor(x)).data - softmax_direct(x)).max()
    d, heads = 4, 2
    p = {f"a.{n}.{s}": Tensor(rng.standard_normal((d, d) if s == "w" else d) * 0.5) for n in "qkvo" for s in "wb"}
    x = rng.standard_normal((5, d)).astype(np.float32)
    args = [p[f"a.{n}.{s}"].data.astype(np.float64) for n in "qkvo" for s in "wb"]
    errs["attention"] = np.abs(multi_head_self_attention(Tensor(x[None]), p, "a", heads).data[0] - attention_loop(x, *args, heads=heads)).max()
    grads = rng.standard_normal((10, 5))
    params = ModelParams({"theta": Tensor(np.zeros(5))})
    state = AdamState()
    for gvec in grads:
        adam_step(params, {"theta": gvec.astype(np.float32)}, state, TrainConfig(lr=1e-2))
    expected = [adam_scalar(0.0, list(grads[:, i]), lr=1e-2)[-1] for i in range(5)]
    errs["adam"] = np.abs(params["theta"].data - expected).max()
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and elapsed < 60
    verdict("2 oracle suite", ok, f"{len(errs)} ops, max abs err {worst:.1e} (<1e-4), {elapsed:.1f}s (<60s)")
    assert ok


def test_structural_fidelity(verdict, five_stage_cfg):
    cfg = five_stage_cfg
    p = init_params(cfg, 0)
    rng = np.random.default_rng(0)
    vols = [rng.standard_normal((16,) * 3) for _ in MODALITIES]
    target = labels_to_nested_regions(generate_phantom(0, PhantomConfig(extent=16)).labels)
    with no_grad():
        heads = mmformer_forward(vols, ModalityMask.full(), p, cfg).num_heads
        counts_ok = True
        for mask in enumerate_subsets():
            out = mmformer_forward(vols, mask, p, cfg)
            counts_ok &= total_loss(out, target, mask).num_terms == 1 + mask.count + (cfg.stages - 1)
            counts_ok &= total_loss(out, target, mask, use_aux=False).num_terms == 1
        no_aux = dataclasses.replace(cfg, use_aux=False)
        out = mmformer_forward(vols, ModalityMask.full(), init_params(no_aux, 0), no_aux)
        counts_ok &= out.num_heads == 1 and total_loss(out, target, ModalityMask.full(), use_aux=False).num_terms == 1
    tokens = ModelConfig(extent=128).tokens_per_modality
    subsets = enumerate_subsets()
    distinct = len({m.delta for m in subsets}) == 15 and all(m.count for m in subsets)
    ok = heads == 9 and tokens == 512 and len(subsets) == 15 and distinct and counts_ok
    verdict("3 structural fidelity", ok, f"{heads} heads, {tokens} tokens/modality at 128^3, {len(subsets)} subsets, loss term counts {'match' if counts_ok else 'MISMATCH'}")
    assert ok


def test_masked_modality_inertness(verdict, tiny_cfg):
    rng = np.random.default_rng(2024)
    partial = [m for m in enumerate_subsets() if m.count < 4]
    params = [init_params(tiny_cfg, s) for s in range(3)]
    changed = 0
    trials = 100
    with no_grad():
        for t in range(trials):
            mask = partial[rng.integers(len(partial))]
            p = params[t % len(params)]
            vols = [rng.standard_normal((16,) * 3).astype(np.float32) for _ in MODALITIES]
            scale = 10.0 ** rng.uniform(-3, 3)
            perturbed = [v if mask[m] else (rng.standard_normal(v.shape) * scale).astype(np.float32) for m, v in zip(MODALITIES, vols)]
            a = mmformer_forward(vols, mask, p, tiny_cfg)
            b = mmformer_forward(perturbed, mask, p, tiny_cfg)
            same = all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.heads(), b.heads()))
            same &= [e is None for e in a.encoder_aux_logits] == [e is None for e in b.encoder_aux_logits]
            changed += not same
    ok = changed == 0
    verdict("4 masked-modality inertness", ok, f"{trials} randomized trials, {changed} with any changed output bit")
    assert ok


def test_overfit_two_phantoms(verdict):
    cfg = ModelConfig(extent=32, channels=(8, 16, 32, 64, 128), token_dim=128)
    samples = [generate_phantom(seed, PhantomConfig(extent=32)) for seed in (0, 1)]
    full = [ModalityMask.full()]
    every = 20
    best = {"wt": 0.0, "steps": 0}

    def check(epoch, params, history):
        best["wt"] = evaluate_subsets(params, samples, cfg, full).rows[0].wt
        best["steps"] = epoch * every
        return best["wt"] > 90

    t0 = time.perf_counter()
    train_loop(samples, cfg, TrainConfig(lr=2e-3, epochs=500 // every, steps_per_epoch=every, mask_policy="full", augment=False), callback=check)
    elapsed = time.perf_counter() - t0
    ok = best["wt"] > 90 and best["steps"] <= 500 and elapsed < 900
    verdict("5 overfit", ok, f"WT training DSC {best['wt']:.2f} (>90) after {best['steps']} steps (<=500), {elapsed:.0f}s (<900s)")
    assert ok


@pytest.fixture(scope="module")
def desk_ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablate")
    cfg = root / "desk.cfg"
    cfg.write_text(DESK_CONFIG)
    out = root / "out"
    code = main(["ablate", "--config", str(cfg), "--samples", str(DESK_SAMPLES), "--seed", "0", "--out", str(out), "--format", "csv"])
    return code, out


def test_robustness_trend(verdict, desk_ablation):
    code, out = desk_ablation
    summary = aggregate_by_missing_count(parse_report_csv((out / "report_full.csv").read_text()))
    wt = summary.region("WT")
    steps_ok = [later <= earlier + 3.0 for earlier, later in zip(wt, wt[1:])]
    ok = code == 0 and all(steps_ok)
    verdict(
        "6 robustness trend",
        ok,
        f"WT by missing count k=0..3: {', '.join(f'{v:.2f}' for v in wt)} (non-increasing within 3 points: {steps_ok})",
    )
    assert ok


def test_ablation_smoke(verdict, desk_ablation):
    code, out = desk_ablation
    tables = {}
    finite = True
    for variant in ("full", "no-intra", "no-inter", "no-aux"):
        table = parse_report_csv((out / f"report_{variant}.csv").read_text(), variant)
        finite &= table.is_complete() and all(np.isfinite(r.values()).all() and all(0 <= v <= 100 for v in r.values()) for r in table.rows)
        tables[variant] = table.average[2]
    summary_text = (out / "ablation.md").read_text()
    valid = finite and summary_text.count("\n") == 6
    full = tables.pop("full")
    directional = all(full >= v - 2.0 for v in tables.values())
    ok = code == 0 and valid and directional
    detail = ", ".join(f"{k} {v:.2f}" for k, v in tables.items())
    verdict("7 ablation smoke", ok, f"valid reports {valid}; average WT full {full:.2f} vs {detail} (full >= each - 2)")
    assert ok


def test_determinism(verdict, tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(
        "model.extent = 16\nmodel.channels = 4,8,16\nmodel.token_dim = 8\nmodel.heads = 2\nmodel.groups = 2\n"
        "train.epochs = 2\ntrain.lr = 0.001\ndata.extent = 16\n"
    )
    artifacts = []
    for run in ("a", "b"):
        out = tmp_path / run
        args = ["--config", str(cfg), "--samples", "4", "--seed", "11", "--out", str(out)]
        assert main(["train"] + args) == 0
        assert main(["eval", "--format", "csv"] + args) == 0
        artifacts.append([(out / name).read_bytes() for name in ("model.ckpt", "report.csv", "missing_count.md", "history.csv")])
    same = [x == y for x, y in zip(*artifacts)]
    ok = all(same)
    verdict("8 determinism", ok, f"checkpoint, report, summary, history identical across two runs: {same}")
    assert ok
