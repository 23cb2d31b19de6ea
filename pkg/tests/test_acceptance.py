"""End-to-end acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL ...`` line that the terminal
summary prints (see ``conftest.py``), then asserts.
"""

import time

import numpy as np
import pytest
import torch

from reclip.backbone import ToyEncoder
from reclip.bias import bias_logits
from reclip.cli import main
from reclip.core import ClassVocabulary, ImageRecord, PatchGrid, RunConfig
from reclip.hypothesis import build_hypothesis, enumerate_crops
from reclip.loss import contrastive_loss, cosine_similarities, masked_pool
from reclip.metrics import (
    DistanceCurve,
    ablate_bias,
    class_preference_score,
    confusion,
    evaluate_labels,
    evaluate_model,
    miou,
    space_preference_score,
)
from reclip.model import RectificationModel, baseline_infer, infer
from reclip.rectify import MaskDecoder, decode
from reclip.synthetic import make_dataset, toy_fixture
from reclip.train import TrainState, _next_batch, fit, load_checkpoint, save_checkpoint, train_step

from oracles import (
    GRADIENT_PARAMS,
    W3,
    StubEncoder,
    cos_oracle,
    gradient_check,
    hypothesis_oracle,
    loop_matmul,
    loss_oracle,
    miou_oracle,
    naive_conv,
    planted_scene,
    pool_oracle,
)

N_INSTANCES = 50


@pytest.fixture
def report(record_property):
    def _report(n, ok, detail):
        record_property("criterion", f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return _report


def _rel(got, ref, floor=1e-12):
    got, ref = np.asarray(got, float), np.asarray(ref, float)
    return float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), floor), initial=0.0))


def _oracle_errors():
    errs = {k: 0.0 for k in ("bias_logits", "decode", "masked_pool", "cosine_similarities",
                             "contrastive_loss", "build_hypothesis", "miou")}
    for seed in range(N_INSTANCES):
        g = np.random.default_rng(seed)
        n, C, D = g.integers(1, 7), g.integers(2, 5), g.integers(1, 6)
        W_p, W_r = g.standard_normal((n, D)), g.standard_normal((C, D))
        got = bias_logits(torch.as_tensor(W_p), torch.as_tensor(W_r)).numpy()
        errs["bias_logits"] = max(errs["bias_logits"], _rel(got, loop_matmul(W_p, W_r), 1e-6))

        h, w = g.integers(1, 6, 2)
        dec = MaskDecoder(C, D, rng=g, init_std=0.5, dtype=torch.float64, bypass_norm=True)
        with torch.no_grad():
            dec.conv.bias.copy_(torch.as_tensor(g.standard_normal(C)))
        M, Z = g.standard_normal((h * w, C)), g.standard_normal((h * w, D))
        got = decode(torch.as_tensor(M), torch.as_tensor(Z), PatchGrid(h, w), dec).detach().numpy()
        x = np.concatenate([M, Z], axis=1).T.reshape(C + D, h, w)
        ref = naive_conv(x, dec.conv.weight.detach().numpy(), dec.conv.bias.detach().numpy())
        errs["decode"] = max(errs["decode"], _rel(got, ref.reshape(C, -1).T, 1e-6))

        Zp, m = g.standard_normal((n, D)), g.random((n, C))
        got = masked_pool(torch.as_tensor(Zp), torch.as_tensor(m)).Z_g.numpy()
        errs["masked_pool"] = max(errs["masked_pool"], _rel(got, pool_oracle(Zp, m), 1e-6))

        A, B = g.standard_normal((C, D)), g.standard_normal((C, D))
        got = cosine_similarities(torch.as_tensor(A), torch.as_tensor(B)).numpy()
        errs["cosine_similarities"] = max(errs["cosine_similarities"],
                                          _rel(got, cos_oracle(A, B), 1e-6))

        S = g.uniform(-1, 1, (C, C))
        H = sorted(set(g.integers(0, C, g.integers(1, C + 1)).tolist()))
        tau = float(g.uniform(0.05, 2.0))
        got = float(contrastive_loss(torch.as_tensor(S), H, tau))
        errs["contrastive_loss"] = max(errs["contrastive_loss"], _rel(got, loss_oracle(S, H, tau)))

        image, t = planted_scene(seed), [0.0, 0.03, 0.07, 0.15][seed % 4]
        hyp = build_hypothesis(image, StubEncoder(), W3, 1 / 4, t)
        classes, freq = hypothesis_oracle(image, StubEncoder(), W3, 1 / 4, t)
        same_set = hyp.classes == classes if classes else (hyp.fallback and len(hyp.classes) == 1)
        errs["build_hypothesis"] = max(errs["build_hypothesis"],
                                       _rel(hyp.freq, freq, 1e-6) if same_set else np.inf)

        gt, pred = g.integers(0, C, (5, 6)), g.integers(0, C, (5, 6))
        gt[g.random((5, 6)) < 0.1] = 255
        if (gt != 255).any():
            got = miou(confusion(pred, gt, C))[0]
            errs["miou"] = max(errs["miou"], _rel(got, miou_oracle(pred, gt, C)))
    return errs


def test_criterion_1_oracle_equivalence(report):
    t0 = time.perf_counter()
    errs = _oracle_errors()
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = all(v <= 1e-5 for v in errs.values()) and elapsed < 10
    report(1, ok, f"{len(errs)} ops x {N_INSTANCES} instances, worst rel {errs[worst]:.1e} "
                  f"({worst}), {elapsed:.1f}s")
    assert ok, errs


def test_criterion_2_gradients(report):
    t0 = time.perf_counter()
    results = {w: gradient_check(w) for w in GRADIENT_PARAMS}
    elapsed = time.perf_counter() - t0
    ok = all(f >= 0.95 and worst < 1e-3 for f, worst in results.values()) and elapsed < 60
    detail = ", ".join(f"{w.split('.')[0]} {f:.0%}/{worst:.1e}" for w, (f, worst) in results.items())
    report(2, ok, f"{detail}, {elapsed:.1f}s")
    assert ok, results


def test_criterion_3_baseline_reduction(report):
    fx = toy_fixture(n_train=0, n_val=20)
    enc = ToyEncoder(fx.spec)
    vocab = ClassVocabulary(fx.class_names)
    model = RectificationModel(vocab, enc, RunConfig(upsample="nearest"))
    model.decoder = MaskDecoder.identity(vocab.C, enc.dim)
    W_r = torch.zeros(vocab.C, enc.dim)
    same = sum(np.array_equal(infer(r, model, W_r=W_r), baseline_infer(r, enc, model.query))
               for r in fx.val)
    ok = same == len(fx.val)
    report(3, ok, f"{same}/{len(fx.val)} images bit-identical to argmax of query logits")
    assert ok


def _train(fx, **cfg_kw):
    cfg = RunConfig(upsample="nearest", seed=0, max_iters=300, **cfg_kw)
    state = TrainState.create(ClassVocabulary(fx.class_names), ToyEncoder(fx.spec), cfg)
    fit(fx.train, state)
    return state


@pytest.fixture(scope="module")
def dual():
    fx = toy_fixture()
    t0 = time.perf_counter()
    state = _train(fx)
    elapsed = time.perf_counter() - t0
    base = RectificationModel.baseline(ClassVocabulary(fx.class_names), ToyEncoder(fx.spec),
                                       RunConfig(upsample="nearest"))
    return fx, state, evaluate_model(base, fx.val), elapsed


def test_criterion_4_toy_rectification(report, dual):
    fx, state, base, elapsed = dual
    losses = np.array([h[2] for h in state.history])
    first, last = losses[:50].mean(), losses[-50:].mean()
    res = evaluate_model(state.model, fx.val)
    gain = res.miou - base.miou
    checks = {
        "loss": last < first,
        "miou": gain >= 0.10,
        "class_pref": res.class_preference > base.class_preference,
        "space_pref": res.space_preference > base.space_preference,
        "runtime": elapsed < 300,
    }
    ok = all(checks.values())
    report(4, ok, f"loss {first:.3f}->{last:.3f}, mIoU {base.miou:.4f}->{res.miou:.4f} "
                  f"(+{100 * gain:.1f}), class pref {base.class_preference:.3f}->"
                  f"{res.class_preference:.3f}, space pref {base.space_preference:.3f}->"
                  f"{res.space_preference:.3f}, {elapsed:.0f}s")
    assert ok, checks


def test_criterion_5_ablation_directions(report, dual):
    fx, state, _, _ = dual
    t0 = time.perf_counter()
    sub = evaluate_model(state.model, fx.val).miou
    add = evaluate_model(_train(fx, bias_combine="add").model, fx.val).miou
    learn = evaluate_model(_train(fx, query_learnable=True).model, fx.val).miou
    abl = {w: ablate_bias(state.model, fx.val, w).miou for w in ("class", "space")}
    elapsed = time.perf_counter() - t0
    checks = {
        "add < subtract": add < sub,
        "learnable query < fixed": learn < sub,
        "ablate class < none": abl["class"] < sub,
        "ablate space < none": abl["space"] < sub,
        "runtime": elapsed < 600,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report(5, ok, f"subtract {sub:.4f}, add {add:.4f}, learnable query {learn:.4f}, "
                  f"ablate class {abl['class']:.4f}, ablate space {abl['space']:.4f}"
                  + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok, checks


def test_criterion_6_hypothesis_suite(report):
    t0 = time.perf_counter()
    n_crops = len(enumerate_crops(96, 96, 1 / 6))
    fx = toy_fixture(n_train=0, n_val=8, size=96)
    enc = ToyEncoder(fx.spec)
    model = RectificationModel.baseline(ClassVocabulary(fx.class_names), enc)
    W_q = model.query_features()
    ts = (0.0, 0.03, 0.07, 0.15)
    monotone = True
    for rec in fx.val:
        hyps = [build_hypothesis(rec, enc, W_q, 1 / 6, t) for t in ts]
        for lo, hi in zip(hyps, hyps[1:]):
            if not hi.fallback and not set(hi.classes) <= set(lo.classes):
                monotone = False
    blanks = [ImageRecord(f"blank{v}", np.full((96, 96, 3), v, np.float32)) for v in (0.0, 0.5, 1.0)]
    nonempty = all(len(build_hypothesis(b, e, W, 1 / 6, 0.07).classes) >= 1
                   for b in blanks for e, W in ((enc, W_q), (StubEncoder(), W3)))
    elapsed = time.perf_counter() - t0
    ok = n_crops == 121 and monotone and nonempty and elapsed < 10
    report(6, ok, f"{n_crops} crops, monotone over t={list(ts)}: {monotone}, "
                  f"blank fallback nonempty: {nonempty}, {elapsed:.1f}s")
    assert ok


def _discs(size=64):
    yy, xx = np.mgrid[0:size, 0:size]
    out = []
    for cy, cx in [(32, 32), (10, 10), (54, 54), (10, 50)]:
        m = np.zeros((size, size), dtype=np.int64)
        m[(yy - cy) ** 2 + (xx - cx) ** 2 <= 100] = 1
        out.append(m)
    return out


def test_criterion_7_metric_fixtures(report):
    t0 = time.perf_counter()
    m = miou(np.array([[1, 1], [1, 1]]))[0]
    gts = _discs()
    perfect = evaluate_labels(gts, gts, 2, bins=4)
    edges = np.array([0.0, 0.2, 0.8, 1.0])
    slope = space_preference_score(DistanceCurve(edges, np.array([0.9, 0.7, 0.5]),
                                                 np.ones(3, int), np.zeros((3, 2, 2))))
    elapsed = time.perf_counter() - t0
    ok = (abs(m - 1 / 3) <= 1e-9 and perfect.class_preference == 1.0
          and class_preference_score(perfect.confusion) == 1.0
          and perfect.space_preference == 0.0 and slope == -0.5 and elapsed < 5)
    report(7, ok, f"mIoU {m:.10f}, perfect class/space {perfect.class_preference}/"
                  f"{perfect.space_preference}, slope {slope}, {elapsed:.2f}s")
    assert ok


CLI_CONFIG = """\
seed: 3
output_dir: {out}
encoder:
  toy:
    preset: dual-bias
dataset:
  synthetic:
    n: 8
    size: 64
train:
  max_iters: 6
  batch_size: 2
  upsample: nearest
"""


def test_criterion_8_determinism_and_persistence(report, tmp_path, biased_spec, vocab):
    t0 = time.perf_counter()
    logs = []
    for name in ("a", "b"):
        cfg = tmp_path / f"{name}.yaml"
        cfg.write_text(CLI_CONFIG.format(out=name))
        assert main(["train", "--config", str(cfg)]) == 0
        logs.append((tmp_path / name / "loss.log").read_bytes())
    identical = logs[0] == logs[1] and len(logs[0].splitlines()) == 6

    images = make_dataset(6, biased_spec.palette, seed=3, size=64)
    cfg = RunConfig(max_iters=6, batch_size=2, crop_ratio=0.5, upsample="nearest")
    full = TrainState.create(vocab, ToyEncoder(biased_spec), cfg)
    fit(images, full)
    part = TrainState.create(vocab, ToyEncoder(biased_spec), cfg)
    for _ in range(3):
        train_step(_next_batch(part, images), part)
    save_checkpoint(part, tmp_path / "half.pt")
    resumed = load_checkpoint(tmp_path / "half.pt")
    fit(images, resumed)
    same_trace = [h[2] for h in resumed.history] == [h[2] for h in full.history]
    same_params = all(torch.equal(v, resumed.model.state_dict()[k])
                      for k, v in full.model.state_dict().items())
    elapsed = time.perf_counter() - t0
    ok = identical and same_trace and same_params and elapsed < 60
    report(8, ok, f"loss logs byte-identical: {identical}, resume bit-exact: "
                  f"{same_trace and same_params}, {elapsed:.1f}s")
    assert ok


@pytest.mark.skip(reason="needs a real CLIP checkpoint and the PASCAL VOC dataset")
def test_criterion_9_real_benchmark():
    pass
