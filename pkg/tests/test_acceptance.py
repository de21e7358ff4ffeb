"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line.  Run
``python tests/test_acceptance.py`` for the lines alone, or
``pytest tests/test_acceptance.py -s`` to see them inside pytest.
"""

from __future__ import annotations

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import micro_experiment, tiny_config  # noqa: E402
from splitjscc import checkpoint as ck  # noqa: E402
from splitjscc import functional as F  # noqa: E402
from splitjscc.channel import AwgnChannel, capacity, power_normalize  # noqa: E402
from splitjscc.complexity import device_flops  # noqa: E402
from splitjscc.data import channel_stats, synthetic_dataset  # noqa: E402
from splitjscc.harness import RESULTS_FILE, ExperimentConfig, expand_grid, sweep  # noqa: E402
from splitjscc.models import BackboneConfig, build_split_model, uniform_widths  # noqa: E402
from splitjscc.pipeline import Phase1Config, PipelineConfig, phase1_pretrain, phase4_end_to_end, phase3_codec_pretrain  # noqa: E402
from splitjscc.pruning import (  # noqa: E402
    PruneMask,
    apply_prune,
    naive_taylor_saliency,
    oracle_loss_delta,
    saliency_batches,
    taylor_saliency,
)
from splitjscc.tensor import Tensor, grad_check, make_rng, no_grad  # noqa: E402

SEEDS = range(10)


def report(n: int, ok: bool, detail: str, seconds: float) -> str:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{seconds:.1f}s]"
    print(line, flush=True)
    return line


def leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# -- 1. gradient suite ----------------------------------------------------------------


def _layer_cases(seed: int):
    """(name, f, [tensors]) where f(*tensors) is a scalar and each tensor is checked."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    w4 = r(2, 3, 4, 4)
    rv = np.abs(r(3)) + 0.5
    cases = [
        ("conv2d", lambda x, w, b: (F.conv2d(x, w, b, 1 + seed % 2, 1) ** 2).sum(), [r(2, 2, 5, 5), r(3, 2, 3, 3), r(3)]),
        ("maxpool", lambda x: (F.maxpool2d(x) ** 2).sum(), [r(2, 3, 4, 4)]),
        ("batch_norm", lambda x, g, b: (F.batch_norm(x, g, b, np.zeros(3), rv.copy(), seed % 2 == 0) * w4).sum(), [r(2, 3, 4, 4), r(3) + 1, r(3)]),
        ("gdn", lambda x, b, g: (F.gdn(x, b, g) * w4).sum(), [r(2, 3, 4, 4), rng.uniform(0.5, 1.5, 3), rng.uniform(0, 0.3, (3, 3))]),
        ("igdn", lambda x, b, g: (F.igdn(x, b, g) * w4).sum(), [r(2, 3, 4, 4), rng.uniform(0.5, 1.5, 3), rng.uniform(0, 0.3, (3, 3))]),
        ("prelu", lambda x, s: (F.prelu(x, s) ** 2).sum(), [r(2, 3, 4, 4), rng.uniform(0.1, 0.5, 3)]),
        ("linear", lambda x, w, b: (F.linear(x, w, b) ** 2).sum(), [r(4, 5), r(3, 5), r(3)]),
        ("upsample", lambda x: (F.upsample_nearest2x(x) * r(2, 3, 4, 4)).sum(), [r(2, 3, 2, 2)]),
        ("cross_entropy", lambda z: F.cross_entropy(z, rng.integers(0, 5, 4)), [r(4, 5)]),
        ("l1_loss", lambda a: F.l1_loss(a, Tensor(r(3, 4))), [r(3, 4)]),
        ("power_normalize", lambda x: (power_normalize(x) * r(3, 8)).sum(), [r(3, 8)]),
    ]
    out = []
    for name, f, arrays in cases:
        # fix the closure's random draws before differencing
        tensors = [leaf(a) for a in arrays]
        frozen_rng_state = rng.bit_generator.state

        def call(*ts, f=f, state=frozen_rng_state):
            rng.bit_generator.state = state
            return f(*ts)

        out.append((name, call, tensors))
    return out


def _max_layer_error(seed: int) -> dict[str, float]:
    errors: dict[str, float] = {}
    for name, f, tensors in _layer_cases(seed):
        for i, t in enumerate(tensors):
            args = list(tensors)

            def g(v, i=i, args=args):
                args = list(args)
                args[i] = v
                return f(*args)

            errors[name] = max(errors.get(name, 0.0), grad_check(g, t))
    return errors


def _end_to_end_error(seed: int) -> float:
    cfg = tiny_config(width=2)
    model = build_split_model(cfg, 2, rng=make_rng(seed, "init"), c_enc=2, snr_db=10.0)
    # zero-initialized biases put dead hidden units exactly on a ReLU kink
    rng = np.random.default_rng(100 + seed)
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.normal(0.0, 0.1, p.shape)
    model.eval()
    x = np.random.default_rng(seed).normal(size=(2, 3, 32, 32))
    labels = np.array([seed % 4, (seed + 1) % 4])

    def loss(_):
        model.channel.reseed(seed, "channel")  # frozen noise realization
        return F.cross_entropy(model(Tensor(x)), labels)

    return max(grad_check(loss, p) for p in model.parameters())


def criterion_1() -> tuple[bool, str]:
    layer_max: dict[str, float] = {}
    e2e = 0.0
    for seed in SEEDS:
        for name, err in _max_layer_error(seed).items():
            layer_max[name] = max(layer_max.get(name, 0.0), err)
        e2e = max(e2e, _end_to_end_error(seed))
    worst = max(layer_max, key=layer_max.get)
    ok = all(v < 1e-4 for v in layer_max.values()) and e2e < 1e-3
    return ok, f"layers max rel err {layer_max[worst]:.2e} ({worst}) < 1e-4; end-to-end {e2e:.2e} < 1e-3; 10 seeds each"


# -- 2. channel invariants -------------------------------------------------------------


def criterion_2() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 512)) * rng.uniform(0.01, 100, size=(16, 1))
    power_err = np.abs((power_normalize(Tensor(x)).data ** 2).mean(axis=1) - 1).max()
    ch = AwgnChannel(10.0, rng=make_rng(0, "channel"))
    var = ch.transmit(Tensor(np.zeros(10**6))).data.var()
    c0, c145 = capacity(0.0), capacity(14.5)
    ok = power_err <= 1e-9 and abs(var / 0.1 - 1) < 0.01 and c0 == 0.5 and abs(c145 - 2.4337) <= 1e-3
    return ok, f"power err {power_err:.1e}; noise var {var:.5f} vs 0.1; C(0dB)={c0}; C(14.5dB)={c145:.4f}"


# -- 3. FLOP cross-checks ----------------------------------------------------------------


def criterion_3() -> tuple[bool, str]:
    cfg = BackboneConfig()
    full = build_split_model(cfg, 5)
    conv_total = sum(m for name, m in device_flops(full).layers if "Conv2d" in name)
    a = build_split_model(cfg, 2, widths=uniform_widths(cfg, 2, 0.5), c_enc=32)
    b = build_split_model(cfg, 4, widths=uniform_widths(cfg, 4, 0.25), c_enc=128)
    fa, fb = device_flops(a).device_total, device_flops(b).device_total
    half = 156e6 / conv_total
    checks = [
        abs(conv_total - 313.2e6) / 313.2e6 <= 0.01,
        abs(half - 0.5) <= 0.01,
        abs(fa - 24.3e6) / 24.3e6 <= 0.10,
        abs(fb - 160.2e6) / 160.2e6 <= 0.10,
    ]
    return all(checks), (
        f"VGG16 conv {conv_total / 1e6:.1f}M (313.2M +-1%), 156M is {half:.3f} of it; "
        f"pool2/r0.5/c32 {fa / 1e6:.2f}M (24.3M +-10%); pool4/r0.25/c128 {fb / 1e6:.2f}M (160.2M +-10%)"
    )


# -- 4. bandwidth law ---------------------------------------------------------------------


def criterion_4() -> tuple[bool, str]:
    cfg = BackboneConfig()
    expected = {(2, 32): 2048, (4, 128): 128, (5, 8): 8}
    got = {k: build_split_model(cfg, k[0], c_enc=k[1]).bandwidth for k in expected}
    parts = [f"(pool {s}, c_enc={c}) -> B={got[(s, c)]} (want {want})" for (s, c), want in expected.items()]
    return got == expected, "; ".join(parts)


# -- 5. pruning oracles ----------------------------------------------------------------------


def _spearman_net(seed: int, train):
    cfg = BackboneConfig(block_widths=((8, 1),) * 5, classifier_hidden=(16, 16), num_classes=4, min_width=1)
    model = build_split_model(cfg, None, rng=make_rng(seed, "init"))
    p = PipelineConfig(phase1=Phase1Config(epochs=4, lr=0.05, milestones=()), batch_size=32, augment=False, seed=seed)
    phase1_pretrain(model, train, None, p)
    model.split = 2
    model.train()
    return model


def criterion_5() -> tuple[bool, str]:
    from scipy.stats import spearmanr

    train = synthetic_dataset(4, 50, seed=0)
    train = train.with_stats(channel_stats(train))

    # (a) vectorized vs naive loop on a 2-conv, 8-filter toy net
    model = build_split_model(tiny_config(width=4), 2, rng=make_rng(0, "init"))
    model.train()
    b = list(saliency_batches(train, 2, 16, 0))
    fast, slow = taylor_saliency(model, b), naive_taylor_saliency(model, b)
    naive_err = max(np.abs(f - s).max() for f, s in zip(fast.raw, slow.raw))

    # (b) removing a provably dead filter
    layers = model.backbone.layers
    conv, bn = layers[0], layers[1]
    for t in (conv.weight, conv.bias, bn.weight, bn.bias):
        t.data[1] = 0.0
    mask = PruneMask.all_keep(model.device_conv_widths())
    mask.keep[0][1] = False
    x = Tensor(train.normalized()[:16])
    model.eval()
    pruned = apply_prune(model, mask)
    with no_grad():
        dead_diff = np.abs(pruned(x).data - model(x).data).max()

    # (c) rank correlation with the brute-force loss change, 20 seeds
    rhos = []
    for seed in range(20):
        net = _spearman_net(seed, train)
        batches = list(saliency_batches(train, 4, 50, seed))
        raw = np.concatenate(taylor_saliency(net, batches).raw)
        delta = [abs(oracle_loss_delta(net, k, f, batches)) for k, w in enumerate(net.device_conv_widths()) for f in range(w)]
        rhos.append(spearmanr(raw, delta).statistic)
    wins = sum(r > 0.5 for r in rhos)
    ok = naive_err <= 1e-10 and dead_diff < 1e-12 and wins >= 16
    return ok, (
        f"vectorized vs naive {naive_err:.1e} (<=1e-10); dead-filter diff {dead_diff:.1e} (<1e-12); "
        f"Spearman > 0.5 in {wins}/20 seeds (need 16; median {np.median(rhos):.2f})"
    )


# -- 6. GDN / IGDN --------------------------------------------------------------------------------


def criterion_6() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 3, 3))
    beta, gamma = Tensor(rng.uniform(0.5, 2.0, 4)), Tensor(np.zeros((4, 4)))
    inv_err = np.abs(F.igdn(F.gdn(Tensor(x), beta, gamma), beta, gamma).data - x).max()
    one = Tensor(np.ones((1, 1, 1, 1)))
    g = F.gdn(one, Tensor([1.0]), Tensor([[3.0]])).data.item()
    ig = F.igdn(Tensor(np.full((1, 1, 1, 1), 0.5)), Tensor([1.0]), Tensor([[3.0]])).data.item()
    ok = inv_err <= 1e-12 and abs(g - 0.5) <= 1e-12 and abs(ig - 0.5 * math.sqrt(1.75)) <= 1e-12 and round(ig, 4) == 0.6614
    return ok, f"inverse err at gamma=0 {inv_err:.1e}; GDN hand value {g!r} (0.5); IGDN hand value {ig:.12f} (0.6614)"


# -- 7. desk-scale pipeline ----------------------------------------------------------------------------


def toy_experiment(seed: int, out: Path) -> ExperimentConfig:
    return ExperimentConfig(
        dataset={"kind": "synthetic", "class_count": 4, "n_train_per_class": 500, "n_test_per_class": 100, "seed": 0},
        backbone=BackboneConfig(num_classes=4, width_scale=1 / 8),
        split=2,
        pruning_ratio=0.25,
        c_enc=8,
        snr_db_list=[20.0, 0.0, -5.0],
        pipeline=PipelineConfig.toy(snr_db=20.0),
        seed=seed,
        output_dir=str(out),
    )


def criterion_7(out_dir: Path | None = None) -> tuple[bool, str]:
    with tempfile.TemporaryDirectory() as tmp:
        out = out_dir or Path(tmp)
        cells = [toy_experiment(seed, out) for seed in range(5)]
        result = sweep(cells)
        rows = result.rows
        by_seed = {s: {r.snr_db: r for r in rows if r.seed == s} for s in range(5)}
        completed = not result.partial and all(len(v) == 3 for v in by_seed.values())
        if not completed:
            return False, f"pipeline failed: {result.failures}"
        r0 = by_seed[0][20.0]
        gap = abs(r0.accuracy - r0.split_accuracy)
        gaps = [abs(v[20.0].accuracy - v[20.0].split_accuracy) for v in by_seed.values()]
        mean = {snr: float(np.mean([v[snr].accuracy for v in by_seed.values()])) for snr in (20.0, 0.0, -5.0)}
        trend = mean[-5.0] <= mean[0.0] <= mean[20.0] + 0.01
        unpruned = device_flops(build_split_model(cells[0].backbone, 2, c_enc=8)).device_total
        flops_ok = all(r.device_flops < unpruned for r in rows)
        ok = gap <= 0.03 and trend and flops_ok
        return ok, (
            f"(a) 5 seeds x 4 phases done; (b) seed 0: {r0.accuracy:.3f} at 20dB vs split baseline {r0.split_accuracy:.3f} "
            f"(gap {100 * gap:.1f} pts <= 3; all seeds max {100 * max(gaps):.1f}); "
            f"(c) mean acc -5dB {mean[-5.0]:.3f} <= 0dB {mean[0.0]:.3f} <= 20dB {mean[20.0]:.3f} + 0.01: {trend}; "
            f"(d) device FLOPs {r0.device_flops} < unpruned {unpruned}: {flops_ok}"
        )


# -- 8. determinism and persistence ---------------------------------------------------------------------


def criterion_8() -> tuple[bool, str]:
    train = synthetic_dataset(4, 16, seed=0)
    train = train.with_stats(channel_stats(train))
    p = PipelineConfig.toy(
        phase1=Phase1Config(epochs=2, lr=0.05, milestones=(1,)),
        batch_size=16,
    )
    p.phase2.target_ratio = 0.0

    def trace():
        model = build_split_model(tiny_config(width=2), None, rng=make_rng(7, "init"))
        _, s1 = phase1_pretrain(model, train, None, p)
        model.split = 2
        model.attach_codec(2, make_rng(7, "init", 3))
        phase3_codec_pretrain(model, train, p)
        _, s4 = phase4_end_to_end(model, train, None, p)
        return model, s1 + [r["loss"] for r in model.meta.history if r["phase"] == "phase3"] + s4

    model, t1 = trace()
    _, t2 = trace()
    traces_equal = t1 == t2

    x = Tensor(train.normalized()[:8])
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        model.eval()
        model.channel = AwgnChannel(math.inf)
        with no_grad():
            before = model(x).data
        ck.save(ck.Checkpoint(model), tmp / "m.ckpt")
        loaded = ck.load(tmp / "m.ckpt").model
        loaded.eval()
        with no_grad():
            round_trip = loaded(x).data.tobytes() == before.tobytes()

        grid = {"pruning_ratio": [0.0, 0.25], "seed": [0, 1]}
        sweep(expand_grid(micro_experiment(tmp / "a"), grid))
        ref = (tmp / "a" / "runs" / RESULTS_FILE).read_text()
        calls = []

        def interrupt(cfg, stage):
            calls.append(stage)
            if len(calls) == 9:
                raise KeyboardInterrupt

        cells = expand_grid(micro_experiment(tmp / "b"), grid)
        try:
            sweep(cells, on_phase=interrupt)
            interrupted = False
        except KeyboardInterrupt:
            interrupted = True
        sweep(cells, resume=True)
        resumed = (tmp / "b" / "runs" / RESULTS_FILE).read_text()
        rows_equal = interrupted and resumed == ref
    ok = traces_equal and round_trip and rows_equal
    return ok, (
        f"loss traces bit-exact over {len(t1)} steps: {traces_equal}; checkpoint forward bit-exact: {round_trip}; "
        f"interrupted+resumed sweep equals uninterrupted ({ref.count(chr(10)) - 1} rows): {rows_equal}"
    )


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6, 7: criterion_7, 8: criterion_8}
BUDGET_S = {1: 120, 2: 10, 3: 1, 4: 1, 5: 600, 6: 1, 7: 1800, 8: 300}


def _check(n: int, capsys=None):
    t0 = time.perf_counter()
    ok, detail = CRITERIA[n]()
    seconds = time.perf_counter() - t0
    if seconds > BUDGET_S[n]:
        detail += f"; over the {BUDGET_S[n]}s budget"
        ok = False
    if capsys is not None:
        with capsys.disabled():
            print()
            report(n, ok, detail, seconds)
    else:
        report(n, ok, detail, seconds)
    assert ok, detail


@pytest.mark.parametrize("n", [1, 2, 3, 4, 6, 8])
def test_criterion(n, capsys):
    _check(n, capsys)


@pytest.mark.slow
def test_criterion_5_pruning_oracles(capsys):
    _check(5, capsys)


@pytest.mark.slow
def test_criterion_7_desk_scale_pipeline(capsys):
    _check(7, capsys)


if __name__ == "__main__":
    wanted = [int(a) for a in sys.argv[1:]] or sorted(CRITERIA)
    failed = 0
    for n in wanted:
        try:
            _check(n)
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
