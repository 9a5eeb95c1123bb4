"""Acceptance criteria 1 to 9, one test each.

Every test records a single ``PASS``/``FAIL`` line (also printed live) that
the terminal summary repeats under "acceptance criteria". Run alone with
``pytest tests/test_acceptance.py -v -s``.
"""

import itertools
import json
import math
import time

import numpy as np
import pytest

from focalconvnet import engine as E
from focalconvnet import gradcheck
from focalconvnet import profiler as P
from focalconvnet.cli import run
from focalconvnet.layers import focal_modulation_forward
from focalconvnet.metrics import ConfusionMatrix, accuracy, averaged, mcc
from focalconvnet.model import ModelConfig, build, forward, tiny_config
from focalconvnet.tensor import Tensor, no_grad

import oracles
from test_layers import arrays, make_focal

RESULTS: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def default_net():
    return build(ModelConfig(), seed=0)


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    per_kind: dict[str, int] = {}
    for r in results:
        per_kind[r.name] = per_kind.get(r.name, 0) + int(r.ok)
    kinds_needed = {"linear", "conv2d", "depthwise_conv2d", "gelu", "sigmoid", "softmax", "layer_norm",
                    "global_avg_pool", "elementwise_mul", "softmax+weighted_ce", "conv_block", "focal_modulation"}
    worst = max(r.rel_error for r in results)
    ok = (
        all(r.ok for r in results)
        and kinds_needed <= set(per_kind)
        and min(per_kind.values()) >= 3
        and worst < 1e-4
        and elapsed < 120
    )
    verdict(1, "gradient correctness", ok,
            f"{len(results)} cases over {len(per_kind)} kinds, max rel err {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 120s)")


def test_criterion_2_equation_fidelity():
    worst = 0.0
    cases = [((1, 4, 6, 6), 2, False), ((2, 3, 5, 5), 3, False), ((1, 2, 7, 7), 3, True), ((2, 5, 4, 4), 1, False)]
    for i, (shape, levels, per_channel) in enumerate(cases):
        p, store = make_focal(shape[1], levels=levels, seed=10 + i, gates_per_channel=per_channel)
        x = np.random.default_rng(20 + i).standard_normal(shape)
        ours = focal_modulation_forward(Tensor(x), p).data
        ref = oracles.focal_modulation_literal(x, arrays(store, "f"), levels, gates_per_channel=per_channel)
        worst = max(worst, float(np.abs(ours - ref).max()))
    rf = P.receptive_field([3, 3, 3])
    ok = worst <= 1e-12 and rf == [3, 5, 7]
    verdict(2, "equation fidelity", ok, f"max abs diff {worst:.1e} (<= 1e-12) over {len(cases)} cases, receptive fields {rf}")


def test_criterion_3_shape_contract(default_net):
    feats = []
    x = np.random.default_rng(0).random((6, 3, 224, 224)).astype(np.float32)
    with no_grad():
        out = forward(default_net, Tensor(x), features=feats)
    sides = [f.shape[-1] for f in feats]
    depths = [len(s.blocks) for s in default_net.stages]
    ok = out.shape == (6, 11) and sides == [112, 56, 28, 14, 7] and depths == [2, 2, 5, 2]
    verdict(3, "architecture shape contract", ok, f"output {out.shape}, sides {sides}, stage blocks {depths}")


def test_criterion_4_profiling(default_net, tmp_path):
    _, counted = P.count_params(default_net)
    closed = oracles.closed_form_params(default_net.config)
    E.save_checkpoint(default_net.params, None, tmp_path / "c.fctn", {"model_config": default_net.config.to_dict()})
    in_ckpt = E.load_checkpoint(tmp_path / "c.fctn").num_param_scalars()
    rep = P.profile(default_net)
    d_params = (rep.total_params - P.REPORTED_PARAMS) / P.REPORTED_PARAMS
    d_2mac = (rep.gflops - P.REPORTED_GFLOPS) / P.REPORTED_GFLOPS
    d_1mac = (rep.gflops_mac - P.REPORTED_GFLOPS) / P.REPORTED_GFLOPS
    ok = (
        counted == closed == in_ckpt
        and abs(d_params) <= 0.20
        and min(abs(d_2mac), abs(d_1mac)) <= 0.20
    )
    verdict(
        4, "profiling oracles", ok,
        f"params {counted} = closed form {closed} = checkpoint {in_ckpt}; "
        f"vs 34.66M {d_params:+.1%}; GFLOPs 2xMAC {rep.gflops:.2f} ({d_2mac:+.1%}), "
        f"1xMAC {rep.gflops_mac:.2f} ({d_1mac:+.1%}) vs 5.23",
    )


def test_criterion_5_metrics():
    worst_mcc = 0.0
    for tp, fn, fp, tn in itertools.product(range(11), repeat=4):
        worst_mcc = max(worst_mcc, abs(mcc(ConfusionMatrix(np.array([[tp, fn], [fp, tn]]))) - oracles.binary_mcc(tp, fn, fp, tn)))

    rng = np.random.default_rng(99)
    worst_recall = worst_avg = 0.0
    checked = 0
    while checked < 1000:
        k = int(rng.integers(2, 12))
        counts = rng.integers(0, 50, (k, k))
        if counts.sum() == 0:
            continue
        cm = ConfusionMatrix(counts)
        worst_recall = max(worst_recall, abs(averaged(cm, "weighted")[1] - accuracy(cm)))
        per = oracles.prf_from_formulas(counts.tolist())
        support = counts.sum(axis=1)
        macro = np.mean(per, axis=0)
        weighted = (np.array(per) * support[:, None]).sum(axis=0) / support.sum()
        worst_avg = max(
            worst_avg,
            float(np.abs(np.array(averaged(cm, "macro")) - macro).max()),
            float(np.abs(np.array(averaged(cm, "weighted")) - weighted).max()),
        )
        checked += 1
    ok = worst_mcc < 1e-12 and worst_recall < 1e-12 and worst_avg <= 1e-12
    verdict(5, "metrics oracles", ok,
            f"binary MCC max diff {worst_mcc:.1e} over 14641 matrices; weighted recall vs accuracy {worst_recall:.1e} "
            f"and averages vs formulas {worst_avg:.1e} over {checked} matrices")


def test_criterion_6_trainability(tmp_path):
    t0 = time.perf_counter()
    cfg_path = tmp_path / "tiny.json"
    tiny_config(num_classes=4).save(cfg_path)
    assert run(["synth", "--classes", "4", "--per-class", "16", "--seed", "7", "--output-dir", str(tmp_path / "data")]) == 0
    manifest = tmp_path / "data" / "manifest.csv"
    histories = []
    for name in ("a", "b"):
        rc = run(["train", "--config", str(cfg_path), "--train-manifest", str(manifest), "--epochs", "50",
                  "--seed", "0", "--set", "lr=0.001", "--set", "momentum=0.9", "--output-dir", str(tmp_path / name)])
        assert rc == 0
        histories.append((tmp_path / name / "history.csv").read_text())
    elapsed = time.perf_counter() - t0
    rows = [line.split(",") for line in histories[0].splitlines()[1:]]
    accs = [float(r[2]) for r in rows]
    first = next((int(r[0]) for r in rows if float(r[2]) == 1.0), None)
    identical = histories[0] == histories[1] and all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in ("best.fctn", "last.fctn")
    )
    ok = accs[-1] == 1.0 and first is not None and identical and elapsed < 300
    verdict(6, "end-to-end trainability", ok,
            f"train acc 1.0 first at epoch {first}, final {accs[-1]:.4f}; runs byte-identical: {identical}; "
            f"{elapsed:.1f}s for two runs (< 300s)")


def test_criterion_7_linear_modulation_cost():
    ratios = []
    for c, h in [(64, 56), (128, 28), (256, 14), (512, 7)]:
        p, _ = make_focal(c, levels=3, randomize=False)
        one = sum(x.flops for x in P.focal_block_costs("f", p, h, h))
        two = sum(x.flops for x in P.focal_block_costs("f", p, h, 2 * h))
        ratios.append(two / one)
    ok = all(abs(r / 2.0 - 1.0) <= 0.01 for r in ratios)
    verdict(7, "linear modulation cost", ok, "H*W doubled gives FLOP ratios " + ", ".join(f"{r:.4f}" for r in ratios))


def test_criterion_8_bench_smoke(tmp_path):
    rc = run(["bench", "--batch", "6", "--warmup", "1", "--iters", "1", "--output-dir", str(tmp_path)])
    ips = json.loads((tmp_path / "bench.json").read_text())["throughput_ips"] if rc == 0 else float("nan")
    ok = rc == 0 and math.isfinite(ips) and ips > 0
    verdict(8, "bench smoke (default config)", ok,
            f"{ips:.2f} images/s at batch 6; reference-only F1/MCC/throughput figures are not targets")


def test_criterion_9_checkpoint_round_trip(tmp_path):
    net = build(tiny_config(), seed=11)
    path = tmp_path / "ck.fctn"
    E.save_checkpoint(net.params, E.OptimizerState.create(net.params), path, {"model_config": net.config.to_dict()})
    back, _ = E.net_from_checkpoint(path)
    rng = np.random.default_rng(3)
    same = 0
    with no_grad():
        for _ in range(10):
            x = Tensor(rng.random((2, 3, 32, 32)))
            same += net(x).data.tobytes() == back(x).data.tobytes()
    verdict(9, "checkpoint round-trip", same == 10, f"{same}/10 random inputs bit-identical after save and load")
