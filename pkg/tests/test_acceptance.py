"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line with the
measured quantity, then asserts.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""

import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

import oracles
from busnet import Tensor, precision
from busnet.attention import cbam_apply
from busnet.checkpoint import Checkpoint, load_model, save_model
from busnet.data import SplitSpec, discover_pairs, load_all, split, synthetic_disk_sample
from busnet.gradcheck import compare, relative_errors
from busnet.layers import LSTMCellParams, LSTMState, lstm_cell_step, lstm_sequence, zero_state
from busnet.losses import distance_map, tempered_softmax
from busnet.metrics import COLUMN_TITLES, METRIC_NAMES, ConfusionCounts, confusion, format_table, report
from busnet.model import UNetPPLSTM
from busnet import tensor as T
from busnet.train import DATASET_ENV, RunConfig, evaluate, overfit_config, train
from busnet.unetpp import ModelConfig, NodeId
from harness import tensor_relative_error, tiny_model_gradients
from test_tensor import PRIMITIVES, leaf, weighted

pytestmark = pytest.mark.acceptance

# tolerances
PRIMITIVE_REL = 1e-6
MODEL_REL = 1e-4
GRAD_SECONDS = 60.0
DISTANCE_SECONDS = 30.0
OVERFIT_DICE = 0.95
LSTM_ABS = 1e-6
SOFTMAX_ABS = 1e-6


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        return ok
    return emit


def test_1_gradient_suite(verdict):
    start = time.perf_counter()
    worst_primitive, worst_name = 0.0, ""
    weights = np.random.default_rng(0).uniform(0.5, 1.5, 4096)
    with precision(np.float64):
        for name, (fn, arrays) in sorted(PRIMITIVES.items()):
            params = [leaf(a.copy()) for a in arrays]
            analytic, numeric = compare(weighted(lambda: fn(*params), weights), params)
            err = max(float(relative_errors(a, n).max()) for a, n in zip(analytic, numeric))
            if err > worst_primitive:
                worst_primitive, worst_name = err, name
    names, analytic, numeric = tiny_model_gradients(seed=0)
    model_errs = {n: tensor_relative_error(a, b) for n, a, b in zip(names, analytic, numeric)}
    worst_param = max(model_errs, key=model_errs.get)
    elapsed = time.perf_counter() - start
    ok = worst_primitive < PRIMITIVE_REL and model_errs[worst_param] < MODEL_REL and elapsed < GRAD_SECONDS
    verdict(1, "gradient suite", ok,
            f"{len(PRIMITIVES)} primitives worst {worst_primitive:.2e} ({worst_name}); "
            f"tiny model {len(names)} tensors worst {model_errs[worst_param]:.2e} ({worst_param}); "
            f"{elapsed:.1f}s")
    assert ok


def test_2_distance_oracle(verdict):
    start = time.perf_counter()
    masks = oracles.random_masks(200, 32, seed=2024)
    mismatches = 0
    for k, mask in enumerate(masks):
        d = 1 + k % 8
        if not np.array_equal(distance_map(mask, d).real, oracles.signed_distance(mask, d)):
            mismatches += 1
    elapsed = time.perf_counter() - start
    has_edge_cases = not masks[0].any() and masks[1].all()
    ok = mismatches == 0 and has_edge_cases and elapsed < DISTANCE_SECONDS
    verdict(2, "distance-map oracle", ok,
            f"{len(masks)} masks (empty and full included), {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


def test_3_metrics_oracle(verdict):
    rng = np.random.default_rng(3)
    pair_failures = 0
    for _ in range(100):
        shape = tuple(rng.integers(1, 48, 2))
        gt = (rng.random(shape) < rng.random()).astype(np.uint8)
        pred = (rng.random(shape) < rng.random()).astype(np.uint8)
        counts, ref = oracles.recount(pred, gt)
        got = report(confusion(pred, gt))
        if confusion(pred, gt) != ConfusionCounts(*counts) or {n: getattr(got, n) for n in METRIC_NAMES} != ref:
            pair_failures += 1
    # f1 is undefined when TP = 0 (P or R undefined, or P + R = 0) while dice is 0
    # there, so f1 == dice is checked where both are defined
    identity_failures = 0
    both = 0
    for _ in range(1000):
        c = ConfusionCounts(*(int(v) for v in rng.integers(0, 10 ** rng.integers(1, 7), 4)))
        if c.total == 0:
            c = ConfusionCounts(c.tp, c.fp, c.fn, 1)
        r = report(c)
        if r.dice is not None and r.dice != 2 * r.jaccard / (1 + r.jaccard):
            identity_failures += 1
        if r.dice is not None and r.f1 is not None:
            both += 1
            identity_failures += r.f1 != r.dice
        elif r.f1 is not None or (r.dice is not None and c.tp > 0):
            identity_failures += 1
    ok = pair_failures == 0 and identity_failures == 0
    verdict(3, "metrics oracle", ok,
            f"100 pairs, {pair_failures} mismatches; 1000 counts ({both} with f1 and dice defined), "
            f"{identity_failures} identity failures")
    assert ok


def test_4_default_shapes(verdict):
    config = ModelConfig()
    model = UNetPPLSTM(config).eval()
    x = Tensor(np.random.default_rng(4).random((1, 1, 128, 128), dtype=np.float32))
    pred = model(x)
    bad = [f"x{i},{j}{t.shape}" for (i, j), t in pred.backbone.nodes.items()
           if t.shape != (1, 16 * 2**i, 128 // 2**i, 128 // 2**i)]
    fused = T.concat_channels(pred.backbone.maps)
    _, m_c, m_s = cbam_apply(model.fusion.cbam, fused[0], return_maps=True)
    checks = {
        "15 nodes": len(pred.backbone.nodes) == 15,
        "x4,0": pred.backbone.nodes[NodeId(4, 0)].shape == (1, 256, 8, 8),
        "M_c": m_c.shape == (64, 1, 1),
        "M_s": m_s.shape == (1, 128, 128),
        "seg": pred.seg_logits.shape[1:] == (1, 128, 128),
        "dc": pred.dc_logits.shape[1:] == (11, 128, 128),
    }
    ok = not bad and all(checks.values())
    verdict(4, "default shapes", ok,
            f"nodes ok={not bad}; " + ", ".join(f"{k}={'ok' if v else 'bad'}" for k, v in checks.items())
            + f"; seg {pred.seg_logits.shape}, dc {pred.dc_logits.shape}")
    assert ok


@pytest.mark.slow
def test_5_overfit(verdict, tmp_path):
    start = time.perf_counter()
    sample = synthetic_disk_sample(64, seed=0)
    config = overfit_config(out_dir=str(tmp_path / "overfit"))
    result = train(config, [sample], [])
    dice = evaluate(result.model, [sample]).micro.dice
    elapsed = time.perf_counter() - start
    # one sample, batch 1: every epoch is one step, so history holds the Dice after each step
    trace = [float(h["report"].dice or 0) for h in result.history]
    best = int(np.argmax(trace))
    ok = result.steps == 200 and dice is not None and dice >= OVERFIT_DICE
    verdict(5, "overfit single disk", ok,
            f"{result.steps} Adam steps, 64x64, base {config.base_channels}, d={config.distance_threshold}, "
            f"seed {config.seed}: final train Dice {float(dice or 0):.4f} (need >= {OVERFIT_DICE}); "
            f"best {trace[best]:.4f} after step {best + 1}; {elapsed:.0f}s")
    assert ok


def test_6_determinism(verdict, tmp_path):
    samples = [synthetic_disk_sample(32, radius=4 + k, seed=k) for k in range(6)]
    blobs = []
    for run in ("a", "b"):
        config = RunConfig(out_dir=str(tmp_path / run), depth=3, base_channels=4, image_size=32,
                           lstm_hidden=4, batch_size=2, epochs=5, max_steps=5, seed=11)
        result = train(config, samples, [])
        blobs.append(result.checkpoint_path.read_bytes())
    identical = blobs[0] == blobs[1]
    model, ckpt = load_model(tmp_path / "a" / "final.busn")
    save_model(model, tmp_path / "again.busn", ckpt.step)
    roundtrip = (tmp_path / "again.busn").read_bytes() == blobs[0]
    reparsed = Checkpoint.from_bytes(blobs[0]).to_bytes() == blobs[0]
    ok = identical and roundtrip and reparsed and ckpt.step == 5
    verdict(6, "determinism and checkpoint round trip", ok,
            f"two 5-step runs identical={identical}; save/load/save identical={roundtrip}; "
            f"parse/serialize identical={reparsed}")
    assert ok


def test_7_lstm_hand_values(verdict):
    errors = {}
    with precision(np.float64):
        p = LSTMCellParams(1, 1, zeros=True)
        zero = lstm_cell_step(p, Tensor(np.array([0.7])), zero_state(p))
        errors["zero"] = max(abs(zero.h.item()), abs(zero.c.item()))
        one = lstm_cell_step(p, Tensor(np.array([0.7])), LSTMState(Tensor(np.zeros(1)), Tensor(np.ones(1))))
        errors["c=1"] = max(abs(one.c.item() - 0.5), abs(one.h.item() - 0.231059))
        rng = np.random.default_rng(7)
        q = LSTMCellParams(2, 3, rng)
        for t in q.parameters():
            t.data = rng.uniform(-1, 1, t.shape)
        xs = [rng.normal(size=2).tolist() for _ in range(3)]
        hs = lstm_sequence(q, [Tensor(np.array(x)) for x in xs])
        W, U, b = oracles.lstm_params_as_lists(q)
        ref = oracles.lstm_run(W, U, b, xs, 3)
        errors["3-step"] = max(float(np.abs(h.numpy() - r).max()) for h, r in zip(hs, ref))
    ok = all(e < LSTM_ABS for e in errors.values())
    verdict(7, "LSTM hand values", ok, ", ".join(f"{k} err {v:.1e}" for k, v in errors.items()))
    assert ok


def _softmax_errors(rng, dtype):
    worst_sum = worst_shift = 0.0
    with precision(dtype):
        for sigma in (0.1, 1.0, 10.0):
            for _ in range(1000):
                logits = rng.normal(0, 3, rng.integers(2, 12))
                p = tempered_softmax(logits, sigma).numpy().astype(np.float64)
                shifted = tempered_softmax(logits + rng.uniform(-50, 50), sigma).numpy().astype(np.float64)
                worst_sum = max(worst_sum, abs(p.sum() - 1))
                worst_shift = max(worst_shift, float(np.abs(p - shifted).max()))
        uniform = all(
            np.all(tempered_softmax(np.full(k, c), s).numpy() == dtype(1) / dtype(k))
            for k in (2, 4, 8) for c in (-3.0, 0.0, 7.5) for s in (0.1, 1.0, 10.0)
        )
    return worst_sum, worst_shift, uniform


def test_8_tempered_softmax(verdict):
    # Measured at 64-bit: at sigma 0.1 the 1/sigma^2 = 100 gain turns float32
    # rounding of the logits themselves (ulp ~2e-7 near 3) into ~1e-5
    # probability changes, so a 1e-6 shift bound is out of float32's reach.
    worst_sum, worst_shift, uniform = _softmax_errors(np.random.default_rng(8), np.float64)
    f32_sum, f32_shift, f32_uniform = _softmax_errors(np.random.default_rng(8), np.float32)
    ok = worst_sum < SOFTMAX_ABS and worst_shift < SOFTMAX_ABS and uniform
    verdict(8, "tempered softmax", ok,
            f"3000 vectors at 64-bit, worst |sum-1| {worst_sum:.1e}, worst shift change {worst_shift:.1e}, "
            f"uniform exact={uniform} (32-bit for reference: {f32_sum:.1e}, {f32_shift:.1e}, {f32_uniform})")
    assert ok


def _smoke(root, out_dir, model_kwargs):
    pairs = discover_pairs(root)
    samples = load_all(pairs, model_kwargs.get("image_size", 128))
    train_s, test_s = split(samples, SplitSpec(0.8, seed=0, stratify=False))
    subset = train_s[:40]
    config = RunConfig(out_dir=str(out_dir), epochs=2, seed=0, **model_kwargs)
    result = train(config, subset, [])
    final = result.history[-1]["report"]
    table = format_table([("smoke", final)])
    values = final.values()
    seven = len(values) == 7 and table.splitlines()[0].split()[1:] == list(COLUMN_TITLES)
    in_range = all(v is None or 0 <= v <= 1 for v in values)
    finite = all(math.isfinite(h["loss"]) for h in result.history)
    return len(pairs), len(train_s), len(test_s), result.steps, seven and in_range and finite, final


def _write_busi_like(root, counts, size, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    for label, n in counts.items():
        folder = root / label
        folder.mkdir(parents=True)
        for k in range(1, n + 1):
            mask = np.zeros((size, size), np.uint8)
            if label != "normal":
                cy, cx = rng.uniform(size / 4, 3 * size / 4, 2)
                mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= (size / 6) ** 2] = 255
            image = np.clip(60 + 0.4 * mask + rng.normal(0, 20, mask.shape), 0, 255).astype(np.uint8)
            Image.fromarray(image).save(folder / f"{label} ({k}).png")
            Image.fromarray(mask).save(folder / f"{label} ({k})_mask.png")


def test_9_busi_smoke_synthetic_tree(verdict, tmp_path):
    # stand-in tree with BUSI's class counts and naming; small model so it runs in seconds
    _write_busi_like(tmp_path / "busi", {"benign": 437, "malignant": 210, "normal": 133}, size=32)
    found, n_train, n_test, steps, report_ok, final = _smoke(
        tmp_path / "busi", tmp_path / "run",
        dict(image_size=32, depth=3, base_channels=4, lstm_hidden=4))
    ok = found == 780 and (n_train, n_test) == (624, 156) and report_ok
    verdict(9, "BUSI smoke on a synthetic BUSI-layout tree", ok,
            f"{found} pairs, split {n_train}/{n_test}, {steps} steps on 40 images, "
            f"report {final.table_row()}")
    assert ok


@pytest.mark.skipif(not os.environ.get(DATASET_ENV), reason=f"set ${DATASET_ENV} to the BUSI root")
def test_9_busi_smoke_real(verdict, tmp_path):
    found, n_train, n_test, steps, report_ok, final = _smoke(
        Path(os.environ[DATASET_ENV]), tmp_path / "run", {})
    ok = found == 780 and (n_train, n_test) == (624, 156) and report_ok
    verdict(9, "BUSI smoke on the real dataset", ok,
            f"{found} pairs, split {n_train}/{n_test}, {steps} steps on 40 images, "
            f"report {final.table_row()}")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
