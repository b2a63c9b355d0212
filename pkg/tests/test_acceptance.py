"""Acceptance suite: one test per release criterion, at pinned tolerances.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
PASS lines. The synthetic ablation values asserted here are recorded in
docs/ablation.md and regenerate deterministically from the pinned seeds.
"""

import json
import time

import numpy as np
import pytest

from ttastream.domain import (
    DomainLabel,
    extract_features,
    predict_domain,
    train_discriminator,
)
from ttastream.evaluation import evaluate
from ttastream.formats import parse_detections, parse_ground_truth
from ttastream.fusion import SoftNmsConfig, soft_nms
from ttastream.imaging import (
    Image,
    VisibilityConfig,
    augment_fog,
    augment_night,
    luminance_stats,
    visibility_boost,
)
from ttastream.mean_teacher import (
    MtConfig,
    ParamVector,
    ema_update,
    head_apply,
    mt_loss,
    mt_loss_and_gradient,
    stochastic_restore,
)
from ttastream.pipeline import PipelineConfig, run_stream
from ttastream.synth import SynthConfig, benchmark_channels, day_scene, generate_synthetic_stream

from conftest import make_det, random_detections, run_cli
from oracles import central_difference_gradient, coco_eval_reference, soft_nms_reference
from test_evaluation import _random_micro_dataset, _to_oracle_format

BENCH_SEED = 20240501
ROUTER_SEED = 424242

# Pinned ablation results (docs/ablation.md); tolerance is +/-0.1 AP point.
PINNED = {
    "full": 0.435455,
    "night_off": 0.308509,
    "single": {
        "source": 0.277649,
        "multi_domain": 0.270986,
        "auxiliary": 0.272288,
        "night": 0.134889,
    },
}
AP_TOL = 0.001  # 0.1 AP point on the percentage scale


def report(line: str) -> None:
    print(f"[acceptance] {line}")


@pytest.fixture(scope="module")
def bench_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    cfg = SynthConfig(
        seed=BENCH_SEED,
        timeline=[("day", 700), ("night", 600), ("fog", 300), ("day", 400)],
        channels=benchmark_channels(),
        width=96,
        height=64,
        objects_per_frame=6,
    )
    manifest = generate_synthetic_stream(cfg, out)
    return out, manifest


@pytest.fixture(scope="module")
def router(tmp_path_factory):
    """Discriminator trained on an independent synthetic day/night corpus."""
    rng = np.random.default_rng(ROUTER_SEED)
    samples = []
    for _ in range(400):
        img, _ = day_scene(rng, 48, 32, 3, 2)
        samples.append((extract_features(img), DomainLabel.DAY))
        night = augment_night(
            img, float(rng.uniform(1.5, 2.5)), float(rng.uniform(0.2, 0.6))
        )
        samples.append((extract_features(night), DomainLabel.NIGHT))
    model = train_discriminator(samples, lr=0.5, epochs=300, seed=0)
    path = tmp_path_factory.mktemp("router") / "model.json"
    model.save(path)
    return model, path


@pytest.fixture(scope="module")
def ablation(bench_corpus, router):
    root, manifest = bench_corpus
    model, _ = router
    _, full = run_stream(manifest, PipelineConfig(night_routing=True), model)
    _, off = run_stream(manifest, PipelineConfig(night_routing=False), model)
    gts = parse_ground_truth(root / "gt.jsonl")
    gts_by_frame = {f.frame_id: gts.get(f.frame_id, []) for f in manifest.frames}
    singles = {}
    for chan in ("source", "multi_domain", "auxiliary", "night"):
        dets = {
            f.frame_id: parse_detections(root / f.detections[chan]).get(f.frame_id, [])
            for f in manifest.frames
        }
        singles[chan] = evaluate(dets, gts_by_frame, 2)
    return full, off, singles


def test_criterion_1_soft_nms_oracle_equivalence():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    for trial in range(500):
        n = int(rng.integers(1, 11))
        dets = random_detections(rng, n, channels=("only",))
        cfg = SoftNmsConfig(
            method="gaussian" if trial % 2 == 0 else "linear",
            sigma=float(rng.uniform(0.1, 1.0)),
            linear_iou_threshold=float(rng.uniform(0.2, 0.6)),
            score_floor=0.001,
        )
        kept, _ = soft_nms(dets, cfg)
        order = sorted(range(n), key=lambda i: (-dets[i].score, dets[i].channel_id, i))
        boxes = [
            (dets[i].box.x1, dets[i].box.y1, dets[i].box.x2, dets[i].box.y2)
            for i in order
        ]
        scores = [dets[i].score for i in order]
        ref_idx, ref_scores = soft_nms_reference(
            boxes, scores, cfg.method, cfg.sigma, cfg.linear_iou_threshold,
            cfg.score_floor,
        )
        assert len(kept) == len(ref_idx), "kept-set size diverged from reference"
        for det, idx, ref_score in zip(kept, ref_idx, ref_scores):
            assert det.box == dets[order[idx]].box  # identity exact
            assert abs(det.score - ref_score) < 1e-9
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0, f"500 instances took {elapsed:.2f}s"
    report(f"criterion 1 PASS: soft-nms matches plain-loop reference on 500 "
           f"instances in {elapsed:.2f}s")


def test_criterion_2_evaluator_oracle_equivalence():
    rng = np.random.default_rng(202)
    for _ in range(200):
        dets_by_frame, gts_by_frame = _random_micro_dataset(rng)
        mine = evaluate(dets_by_frame, gts_by_frame, 2)
        o_dets, o_gts = _to_oracle_format(dets_by_frame, gts_by_frame)
        ref_ap, ref_map, ref_ar = coco_eval_reference(o_dets, o_gts, 2)
        for c in range(2):
            for a, b in zip(mine.ap[c], ref_ap[c]):
                assert (a is None) == (b is None)
                if a is not None:
                    assert abs(a - b) < 1e-9
        assert abs(mine.map_5095 - ref_map) < 1e-9
        assert abs(mine.ar_100 - ref_ar) < 1e-9
    # hand-computed envelope case
    from ttastream.evaluation import average_precision

    got = average_precision([(0.9, True), (0.8, False), (0.7, True)], 2)
    assert abs(got - (51 + 50 * 2.0 / 3.0) / 101.0) < 1e-12
    assert abs(got - 0.834983) < 1e-6
    report("criterion 2 PASS: evaluator matches brute-force reference on 200 "
           "micro-datasets to 1e-9, hand case 0.834983 exact")


def test_criterion_3_gradient_verification():
    rng = np.random.default_rng(303)
    frame = (200.0, 200.0)
    cfg = MtConfig()
    checked = 0
    for _ in range(100):
        num_classes = 3
        dets = []
        for _ in range(int(rng.integers(1, 6))):
            w = float(rng.uniform(10, 40))
            h = float(rng.uniform(10, 40))
            x1 = float(rng.uniform(40, 160 - w))
            y1 = float(rng.uniform(40, 160 - h))
            dets.append(
                make_det(x1, y1, x1 + w, y1 + h, float(rng.uniform(0.15, 0.85)),
                         class_id=int(rng.integers(0, num_classes)))
            )

        def noisy_params():
            p = ParamVector.identity(num_classes)
            vals = p.values.copy()
            vals[:num_classes] += rng.uniform(-0.3, 0.3, num_classes)
            vals[num_classes:2 * num_classes] += rng.uniform(-0.2, 0.2, num_classes)
            vals[2 * num_classes:] += rng.uniform(-0.03, 0.03, 4)
            return ParamVector(vals, num_classes)

        params = noisy_params()
        teacher_out = head_apply(noisy_params(), dets, frame)
        _, grad = mt_loss_and_gradient(params, dets, teacher_out, frame, cfg)

        def loss_at(vec):
            p = ParamVector(np.array(vec), num_classes)
            return mt_loss(head_apply(p, dets, frame), teacher_out, cfg)[0]

        fd = central_difference_gradient(loss_at, list(params.values), h=1e-6)
        for a, f in zip(grad.values, fd):
            m = max(abs(a), abs(f))
            if m < 1e-7:
                continue  # parameter untouched by this frame; both sides ~0
            assert abs(a - f) / m < 1e-5, (a, f)
            checked += 1
    report(f"criterion 3 PASS: analytic gradient matches central differences "
           f"(h=1e-6, rel<1e-5) on 100 instances ({checked} coordinates)")


def test_criterion_4_ema_exactness():
    rng = np.random.default_rng(404)
    alpha = 0.0001
    student = ParamVector(rng.uniform(-1, 1, 10), 3)
    teacher = ParamVector(rng.uniform(-1, 1, 10), 3)
    gap0 = float(np.max(np.abs(teacher.values - student.values)))
    worst = 0.0
    for k in range(1, 1001):
        teacher = ema_update(teacher, student, alpha)
        gap = float(np.max(np.abs(teacher.values - student.values)))
        expected = (1.0 - alpha) ** k * gap0
        worst = max(worst, abs(gap - expected))
    assert worst < 1e-12, f"worst deviation {worst:.2e}"
    report(f"criterion 4 PASS: EMA contraction exact to {worst:.2e} over k<=1000 "
           f"at alpha=0.0001")


def test_criterion_5_stochastic_restoration_statistics():
    n = 10_000
    num_classes = (n - 4) // 2
    student = ParamVector(np.ones(n), num_classes)
    source = ParamVector(np.zeros(n), num_classes)
    fractions = []
    for seed in range(20):
        out = stochastic_restore(student, source, 0.1, np.random.default_rng(seed))
        fraction = float(np.mean(out.values == 0.0))
        assert 0.088 <= fraction <= 0.112, f"seed {seed}: fraction {fraction}"
        fractions.append(fraction)
    report(f"criterion 5 PASS: restored fraction in [0.088, 0.112] for 20 seeds "
           f"(min {min(fractions):.4f}, max {max(fractions):.4f})")


def test_criterion_6_discriminator_accuracy():
    start = time.perf_counter()
    rng = np.random.default_rng(606)
    samples = []
    for _ in range(2000):
        img, _ = day_scene(rng, 64, 48, 4, 2)
        samples.append((extract_features(img), DomainLabel.DAY))
        night = augment_night(
            img, float(rng.uniform(1.5, 2.5)), float(rng.uniform(0.2, 0.6))
        )
        samples.append((extract_features(night), DomainLabel.NIGHT))
    assert len(samples) == 4000
    order = rng.permutation(len(samples))
    holdout = [samples[i] for i in order[:1000]]
    train = [samples[i] for i in order[1000:]]
    model = train_discriminator(train, lr=0.5, epochs=300, seed=0)
    correct = sum(1 for f, label in holdout if predict_domain(model, f)[0] is label)
    accuracy = correct / len(holdout)
    elapsed = time.perf_counter() - start
    assert accuracy >= 0.95, f"holdout accuracy {accuracy:.4f}"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    report(f"criterion 6 PASS: discriminator holdout accuracy {accuracy:.4f} "
           f"on 4000-image corpus in {elapsed:.1f}s")


def test_criterion_7_synthetic_ablation(ablation):
    full, off, singles = ablation
    best_single = max(r.map_5095 for r in singles.values())
    assert full.map_5095 >= off.map_5095, "night routing must not hurt mAP"
    assert full.map_5095 >= best_single + 0.02, (
        f"full {full.map_5095:.4f} vs best single {best_single:.4f}"
    )
    # regression pins
    assert full.map_5095 == pytest.approx(PINNED["full"], abs=AP_TOL)
    assert off.map_5095 == pytest.approx(PINNED["night_off"], abs=AP_TOL)
    for chan, pinned in PINNED["single"].items():
        assert singles[chan].map_5095 == pytest.approx(pinned, abs=AP_TOL), chan
    report(
        "criterion 7 PASS: ablation mAP full={:.6f} >= night-off={:.6f}, "
        ">= best single {:.6f} + 0.02; pins within +/-0.1 AP".format(
            full.map_5095, off.map_5095, best_single
        )
    )


def test_criterion_8_run_determinism(tmp_path, router):
    _, model_path = router
    corpus = tmp_path / "stream"
    cfg = SynthConfig(
        seed=808,
        timeline=[("day", 40), ("night", 30), ("fog", 15), ("day", 15)],
        channels=benchmark_channels(),
        width=64,
        height=48,
        objects_per_frame=4,
    )
    generate_synthetic_stream(cfg, corpus)
    run_cfg = {
        "manifest": "manifest.json",
        "discriminator": str(model_path),
        "seed": 11,
    }
    (corpus / "run.json").write_text(json.dumps(run_cfg))

    outputs = []
    for name, extra_env in (
        ("r1", {"OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1"}),
        ("r2", {"OMP_NUM_THREADS": "1", "OPENBLAS_NUM_THREADS": "1"}),
        ("r4", {"OMP_NUM_THREADS": "4", "OPENBLAS_NUM_THREADS": "4"}),
    ):
        out = tmp_path / name
        proc = run_cli(
            ["run", "--config", str(corpus / "run.json"), "--out", str(out)],
            extra_env=extra_env,
        )
        assert proc.returncode == 0, proc.stderr
        outputs.append(
            (
                (out / "frames.jsonl").read_bytes(),
                (out / "eval.json").read_bytes(),
                (out / "config_resolved.json").read_bytes(),
            )
        )
    assert outputs[0] == outputs[1], "repeat invocation diverged"
    assert outputs[0] == outputs[2], "thread count changed the output"
    report("criterion 8 PASS: run outputs byte-identical across invocations "
           "and thread counts (100-frame stream)")


def test_criterion_9_visibility_transform():
    rng = np.random.default_rng(909)
    cfg = VisibilityConfig()
    applied_count = 0
    increased = 0
    low_contrast_seen = 0
    while low_contrast_seen < 100:
        base, _ = day_scene(rng, 48, 32, 3, 2)
        img = augment_fog(base, float(rng.uniform(0.6, 0.85)))
        stats = luminance_stats(img)
        if not (stats.mean > 0.55 and stats.std < 0.12):
            continue
        low_contrast_seen += 1
        out, applied = visibility_boost(img, cfg)
        assert applied, "low-contrast bright frame must be boosted"
        applied_count += 1
        out_std = luminance_stats(out).std
        assert out_std >= 0.99 * stats.std
        if out_std > stats.std:
            increased += 1
    assert increased >= 95, f"std increased in only {increased}/100 frames"

    high_contrast_seen = 0
    while high_contrast_seen < 100:
        px = np.where(rng.random((32, 48, 3)) < 0.5, 0.15, 0.9)
        img = Image(px)
        if luminance_stats(img).std <= 0.12:
            continue
        high_contrast_seen += 1
        _, applied = visibility_boost(img, cfg)
        assert not applied, "high-contrast frame must pass through"
    report(f"criterion 9 PASS: boost applied on all 100 low-contrast frames "
           f"(std increased in {increased}), never on 100 high-contrast frames")
