"""Built-in property suite: gradient checks, loss invariances, scheduler
equivalence, determinism, and checkpoint round-trips.

Backs the ``verify`` CLI command and the acceptance tests. Everything
runs at float64 on tiny configurations; each check returns its worst
observed error so callers can print one summary line per property.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, VisionBackbone
from .caption import BOS_ID, CaptionConfig, CaptionHead
from .checkpoint import load_checkpoint, save_checkpoint
from .data import gen_scene
from .depth import DepthHead
from .losses import LossWeights, affine_normalize, loss_all, loss_bce, loss_depth, \
    loss_dice, loss_gm, loss_seg, loss_ssi
from .model import DepthHeadConfig, MultiTaskModel, SegHeadConfig
from .rng import stream
from .seg import PromptEncoder, SegHead
from .tensor import Tensor, backward, finite_diff_check, seeded_init
from .trainer import TASKS, TaskBatch, TrainConfig, build_optimizer, multitask_step, task_loss

GRAD_TOL = 1e-4


class CheckFailure(AssertionError):
    pass


def _rand(shape, seed, lo=0.0, hi=1.0, requires_grad=True):
    return Tensor(stream(seed, "verify").uniform(lo, hi, size=shape), requires_grad=requires_grad)


def _tiny_caption(seed=0):
    cfg = CaptionConfig(d_text=8, num_layers=1, num_heads=2, vocab_size=16, max_text_len=8)
    return CaptionHead(8, 4, cfg, seed=seed)


def _rotate(params: list, instance: int, count: int = 2) -> list:
    if len(params) <= count:
        return params
    start = (instance * count) % len(params)
    return [params[(start + j) % len(params)] for j in range(count)]


# -- gradient checks -----------------------------------------------------------------


def check_loss_gradients(instances: int = 20) -> dict[str, float]:
    """Finite-difference check for every loss; returns worst error per loss."""
    worst: dict[str, float] = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for i in range(instances):
        pred = _rand((8, 8), seed=1000 + i)
        gt = _rand((8, 8), seed=2000 + i, requires_grad=False)
        record("L_ssi", finite_diff_check(lambda p: loss_ssi(p[0], gt), [pred]))
        record("L_gm", finite_diff_check(lambda p: loss_gm(p[0], gt, scales=3), [pred]))
        record("L_depth", finite_diff_check(
            lambda p: loss_depth(p[0], gt, 1.0, 0.5, scales=3), [pred]))

        logits = _rand((6, 6), seed=3000 + i, lo=-2, hi=2)
        mask = Tensor((stream(4000 + i, "verify").uniform(size=(6, 6)) > 0.5).astype(float))
        record("L_bce", finite_diff_check(lambda p: loss_bce(p[0], mask), [logits]))
        record("L_dice", finite_diff_check(lambda p: loss_dice(p[0], mask), [logits]))
        record("L_seg", finite_diff_check(lambda p: loss_seg(p[0], mask), [logits]))

        head = _tiny_caption(seed=i)
        feats = _rand((4, 8), seed=5000 + i, lo=-1, hi=1)
        seq = [BOS_ID] + [int(t) for t in stream(6000 + i, "verify").integers(2, 16, size=4)]
        cap_params = [feats] + _rotate([p for _, p in head.named_params()], i)
        record("L_cap", finite_diff_check(
            lambda p: head.caption_loss(head.project(feats), seq), cap_params))

        def combined(p):
            return loss_all(head.caption_loss(head.project(feats), seq),
                            loss_depth(pred, gt, 1.0, 0.5, scales=3),
                            loss_seg(logits, mask), LossWeights())

        record("L_all", finite_diff_check(combined, [pred, logits, feats]))

    bad = {k: v for k, v in worst.items() if v >= GRAD_TOL}
    if bad:
        raise CheckFailure(f"loss gradients off: {bad}")
    return worst


def check_head_gradients(instances: int = 20) -> dict[str, float]:
    """Finite-difference check through every head (params rotate per instance)."""
    worst: dict[str, float] = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for i in range(instances):
        # projector
        head = _tiny_caption(seed=100 + i)
        x = _rand((4, 8), seed=100 + i, lo=-1, hi=1)
        proj_params = [x] + _rotate(
            [head.proj_fc1.w, head.proj_fc1.b, head.proj_fc2.w, head.proj_fc2.b], i)
        record("projector", finite_diff_check(
            lambda p: (head.project(x) ** 2.0).mean(), proj_params))

        # decoder (through the caption loss)
        seq = [BOS_ID] + [int(t) for t in stream(7000 + i, "verify").integers(2, 16, size=3)]
        dec_params = _rotate([p for n, p in head.named_params()
                              if not n.startswith("proj_")], i)
        record("decoder", finite_diff_check(
            lambda p: head.caption_loss(head.project(x), seq), dec_params))

        # depth head
        dh = DepthHead(8, 8, seed=200 + i)
        sel = [_rand((16, 8), seed=300 + i + 50 * j, lo=-1, hi=1) for j in range(3)]
        dh_params = [sel[i % 3]] + _rotate([p for _, p in dh.named_params()], i)
        record("depth_head", finite_diff_check(
            lambda p: dh.predict_depth(sel, 16).mean(), dh_params))

        # prompt encoder
        enc = PromptEncoder(16, 8, seed=400 + i)
        phrase = [int(t) for t in stream(8000 + i, "verify").integers(0, 16, size=3)]
        record("prompt_encoder", finite_diff_check(
            lambda p: (enc.embed_prompt(phrase) ** 2.0).mean(), [enc.embed, enc.fc.w, enc.fc.b]))

        # mask decoder
        sh = SegHead(8, patch_size=4, num_heads=2, seed=500 + i, num_blocks=1)
        f = _rand((16, 8), seed=600 + i, lo=-1, hi=1)
        sh_params = [f, enc.embed] + _rotate([p for _, p in sh.named_params()], i)
        record("mask_decoder", finite_diff_check(
            lambda p: T.sigmoid(sh.predict_mask(f, enc.embed_prompt(phrase), 16)).mean(),
            sh_params))

        # backbone
        bb = VisionBackbone(BackboneConfig(4, 3, 8, 2, 8), seed=700 + i)
        img = _rand((8, 8, 3), seed=800 + i, requires_grad=False)
        bb_params = _rotate([p for _, p in bb.named_params()], i)
        record("backbone", finite_diff_check(
            lambda p: bb.forward_features(img)[-1].sum(), bb_params))

    bad = {k: v for k, v in worst.items() if v >= GRAD_TOL}
    if bad:
        raise CheckFailure(f"head gradients off: {bad}")
    return worst


# -- loss invariances and oracles -----------------------------------------------------


def check_loss_invariances(instances: int = 50) -> float:
    """Affine invariance of L_ssi (both arguments), shift invariance of
    L_gm, and the Dice range; returns the worst deviation."""
    worst = 0.0
    for i in range(instances):
        gen = stream(i, "inv")
        a = gen.uniform(0, 1, size=(6, 6))
        b = gen.uniform(0, 1, size=(6, 6))
        alpha = float(gen.uniform(0.05, 20.0))
        beta = float(gen.uniform(-10.0, 10.0))
        base = loss_ssi(Tensor(a), Tensor(b)).item()
        worst = max(worst, abs(loss_ssi(Tensor(alpha * a + beta), Tensor(b)).item() - base))
        worst = max(worst, abs(loss_ssi(Tensor(a), Tensor(alpha * b + beta)).item() - base))
        gm_base = loss_gm(Tensor(a), Tensor(b), scales=2).item()
        worst = max(worst, abs(loss_gm(Tensor(a + beta), Tensor(b), scales=2).item() - gm_base))
        logits = Tensor(gen.normal(scale=8.0, size=(6, 6)))
        mask = Tensor((gen.uniform(size=(6, 6)) > 0.5).astype(float))
        dice = loss_dice(logits, mask).item()
        if not 0.0 <= dice <= 1.0:
            raise CheckFailure(f"dice out of range: {dice}")
    if worst >= 1e-9:
        raise CheckFailure(f"invariance violated by {worst:g}")
    return worst


def check_hand_oracles() -> float:
    """Hand-derived loss values must match to 1e-12."""
    worst = 0.0

    def expect(value, target):
        nonlocal worst
        worst = max(worst, abs(value - target))

    d, t, s = affine_normalize(Tensor([[1.0, 2.0, 3.0]]))
    expect(t.item(), 2.0)
    expect(s.item(), 2.0 / 3.0)
    expect(float(np.abs(d.data - [[-1.5, 0.0, 1.5]]).max()), 0.0)
    expect(loss_ssi(Tensor([[4.0, 3.0, 2.0, 1.0]]), Tensor([[1.0, 2.0, 3.0, 4.0]])).item(), 2.0)
    expect(loss_gm(Tensor([[0.0, 2.0], [0.0, 2.0]]), Tensor([[0.0, 1.0], [0.0, 1.0]]),
                   scales=1).item(), 0.0)
    half = np.zeros((4, 4))
    half[:2] = 1.0
    expect(loss_bce(Tensor(np.zeros((4, 4))), Tensor(half)).item(), float(np.log(2.0)))
    expect(loss_dice(Tensor(np.zeros((4, 4))), Tensor(half)).item(), 1.0 - 9.0 / 17.0)
    expect(loss_all(Tensor(2.0), Tensor(4.0), Tensor(4.0),
                    LossWeights(lambda_cap=0.5, lambda_depth=0.25, lambda_seg=0.25)).item(), 3.0)
    expect(loss_all(Tensor(3.0), Tensor(6.0), Tensor(9.0), LossWeights()).item(), 6.0)
    if worst >= 1e-12:
        raise CheckFailure(f"hand oracle off by {worst:g}")
    return worst


# -- scheduler equivalence ---------------------------------------------------------------


def _toy_batches(side=16, n=4):
    samples = [gen_scene(seed, side=side) for seed in range(n)]
    images = np.stack([s.image for s in samples])
    return {
        "cap": TaskBatch("cap", images, captions=[s.caption for s in samples]),
        "depth": TaskBatch("depth", images, depths=np.stack([s.depth for s in samples])),
        "seg": TaskBatch("seg", images, pairs=[(r, m, p) for r, s in enumerate(samples)
                                               for m, p in s.instances]),
    }


def _toy_model(seed=0):
    return MultiTaskModel(
        BackboneConfig(patch_size=4, num_layers=3, embed_dim=8, num_heads=2, image_side=16),
        CaptionConfig(d_text=8, num_layers=1, num_heads=2, vocab_size=16, max_text_len=16),
        DepthHeadConfig(width=8), SegHeadConfig(num_blocks=1), seed=seed)


def check_accumulation_equivalence() -> dict[str, float]:
    """Alternating accumulation vs a single update on the weighted summed
    loss: exact for stateless descent, tight for the adaptive optimizer."""
    weights = LossWeights(gm_scales=2)
    batches = _toy_batches()
    results = {}
    for opt_name, tol, relative in (("sgd", 1e-12, False), ("adamw", 1e-6, True)):
        cfg = TrainConfig(optimizer=opt_name, precision="float64")
        m1, m2 = _toy_model(seed=3), _toy_model(seed=3)
        multitask_step(m1, batches, weights, build_optimizer(m1, cfg))

        total = None
        lam = {"cap": weights.lambda_cap, "depth": weights.lambda_depth,
               "seg": weights.lambda_seg}
        for t in TASKS:
            term = lam[t] * task_loss(m2, batches[t], weights)
            total = term if total is None else total + term
        gm = backward(total)
        grads = {}
        for name, p in m2.named_params():
            g = gm.get(p)
            if g is not None:
                grads[name] = g
        build_optimizer(m2, cfg).step(grads)

        diffs = []
        for (_, p1), (_, p2) in zip(m1.named_params(), m2.named_params()):
            d = np.abs(p1.data - p2.data)
            if relative:
                d = d / np.maximum(np.abs(p2.data), 1e-12)
            diffs.append(d.max())
        worst = float(max(diffs))
        if worst >= tol:
            raise CheckFailure(f"{opt_name} accumulation mismatch {worst:g} (tol {tol:g})")
        results[opt_name] = worst
    return results


# -- determinism / serialization ------------------------------------------------------------


def check_determinism() -> float:
    a = seeded_init([16, 16], "uniform-fan-in", seed=9).data
    b = seeded_init([16, 16], "uniform-fan-in", seed=9).data
    if not np.array_equal(a, b):
        raise CheckFailure("seeded_init not reproducible")
    s1 = gen_scene(41, side=16)
    s2 = gen_scene(41, side=16)
    if not (np.array_equal(s1.image, s2.image) and s1.caption == s2.caption):
        raise CheckFailure("gen_scene not reproducible")
    return 0.0


def check_checkpoint_roundtrip() -> float:
    model = _toy_model(seed=11)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.bin"
        with T.using_dtype("float32"):
            params = [(n, Tensor(p.data.astype(np.float32), requires_grad=True))
                      for n, p in model.named_params()]
            save_checkpoint(params, path, fingerprint="cd" * 32)
            stored, fp = load_checkpoint(path)
            if fp != "cd" * 32:
                raise CheckFailure("fingerprint did not round-trip")
            for name, p in params:
                if not np.array_equal(stored[name], p.data):
                    raise CheckFailure(f"tensor {name} did not round-trip bit-exactly")
    return 0.0


SUITE = (
    ("loss_gradients", check_loss_gradients, {"instances": 3}),
    ("head_gradients", check_head_gradients, {"instances": 3}),
    ("loss_invariances", check_loss_invariances, {}),
    ("hand_oracles", check_hand_oracles, {}),
    ("accumulation_equivalence", check_accumulation_equivalence, {}),
    ("determinism", check_determinism, {}),
    ("checkpoint_roundtrip", check_checkpoint_roundtrip, {}),
)


def run_suite(emit=print) -> bool:
    """Run every property; one PASS/FAIL line each. True iff all passed."""
    ok = True
    with T.using_dtype("float64"):
        for name, fn, kwargs in SUITE:
            try:
                detail = fn(**kwargs)
                emit(f"PASS {name} ({_fmt(detail)})")
            except Exception as exc:  # report and keep going
                ok = False
                emit(f"FAIL {name}: {exc}")
    return ok


def _fmt(detail) -> str:
    if isinstance(detail, dict):
        return ", ".join(f"{k}={v:.3g}" for k, v in detail.items())
    if isinstance(detail, float):
        return f"worst={detail:.3g}"
    return str(detail)
