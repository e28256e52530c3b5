"""Acceptance suite: one test per criterion, each reporting a single pass/fail line.

The lines are printed as the tests run (visible with ``-s``) and repeated in
the terminal summary.
"""

import hashlib
import math
import os
import time
from fractions import Fraction

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE, gradient_check
from noduledet import cli, detector, fpr, froc, ops
from noduledet.geometry import ANCHOR_SIZES, assign_anchors, generate_anchors, iou_matrix, nms
from noduledet.phantom import PhantomParams, generate_dataset
from noduledet.records import (
    Annotation,
    Candidate,
    load_annotations,
    load_candidates,
    read_annotations,
    read_candidates,
    write_annotations,
    write_candidates,
)
from noduledet.tensor import Tensor
from noduledet.volume import CtVolume, parse_mhd, write_mhd

FIXTURE = os.path.join(os.path.dirname(__file__), "fixtures", "froc_3scan")


def report(number, title, passed, detail):
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE.append(line)
    print(line)
    assert passed, line


# -- 1: gradients -------------------------------------------------------------


def projected(out, r):
    """Scalar with a non-symmetric dependence on every output element."""
    return (out * Tensor(r.normal(size=out.shape))).sum()


def grad_cases(op, seed):
    """Random shapes and a scalar-valued builder for one op."""
    r = np.random.default_rng(seed)
    proj = np.random.default_rng(seed + 10**6)

    def scalar(out):
        return projected(out, np.random.default_rng(proj.integers(2**32)))

    if op == "conv2d":
        c, co, k, stride = int(r.integers(1, 3)), int(r.integers(1, 3)), int(r.integers(1, 4)), int(r.integers(1, 3))
        pad = int(r.integers(0, k))
        e = int(r.integers(k, k + 4))
        arrays = [r.normal(size=(c, e, e)), r.normal(size=(co, c, k, k)), r.normal(size=co)]
        seed_p = proj.integers(2**32)
        return arrays, lambda x, w, b: projected(ops.conv2d(x, w, b, stride, pad), np.random.default_rng(seed_p))
    if op == "transposed_conv2d":
        c, co, k, stride = int(r.integers(1, 3)), int(r.integers(1, 3)), int(r.integers(2, 5)), int(r.integers(1, 4))
        pad = int(r.integers(0, k))
        e = int(r.integers(2, 4))
        while ops.transposed_output_extent(e, k, stride, pad) < 1:
            e += 1
        arrays = [r.normal(size=(c, e, e)), r.normal(size=(c, co, k, k)), r.normal(size=co)]
        seed_p = proj.integers(2**32)
        return arrays, lambda x, w, b: projected(
            ops.transposed_conv2d(x, w, b, stride, pad), np.random.default_rng(seed_p)
        )
    if op == "conv3d":
        c, co, k = int(r.integers(1, 3)), int(r.integers(1, 3)), int(r.integers(1, 3))
        pad = int(r.integers(0, k))
        e = [int(v) for v in r.integers(k, k + 3, 3)]
        arrays = [r.normal(size=(c, *e)), r.normal(size=(co, c, k, k, k)), r.normal(size=co)]
        seed_p = proj.integers(2**32)
        return arrays, lambda x, w, b: projected(ops.conv3d(x, w, b, 1, pad), np.random.default_rng(seed_p))
    if op == "max_pool":
        dims = int(r.integers(2, 4))
        window = int(r.integers(1, 3))
        stride = int(r.integers(1, 3))
        shape = [int(r.integers(1, 3))] + [int(v) for v in r.integers(window, window + 4, dims)]
        # well separated values keep every window's maximum unique under perturbation
        x = r.permutation(np.prod(shape)).reshape(shape) * 0.1 + r.uniform(0, 0.01, shape)
        seed_p = proj.integers(2**32)
        return [x], lambda x: projected(ops.max_pool(x, window, stride, dims=dims), np.random.default_rng(seed_p))
    if op == "roi_pool":
        c, h, w = int(r.integers(1, 3)), int(r.integers(3, 9)), int(r.integers(3, 9))
        x = r.permutation(c * h * w).reshape(c, h, w) * 0.1 + r.uniform(0, 0.01, (c, h, w))
        x1, y1 = r.uniform(0, w - 1), r.uniform(0, h - 1)
        roi = (x1, y1, r.uniform(x1 + 0.5, w), r.uniform(y1 + 0.5, h))
        grid = (int(r.integers(1, 4)), int(r.integers(1, 4)))
        seed_p = proj.integers(2**32)
        return [x], lambda x: projected(ops.roi_pool(x, roi, grid), np.random.default_rng(seed_p))
    if op == "dense":
        n, i, o = (int(v) for v in r.integers(1, 6, 3))
        arrays = [r.normal(size=(n, i)), r.normal(size=(o, i)), r.normal(size=o)]
        seed_p = proj.integers(2**32)
        return arrays, lambda x, w, b: projected(ops.dense(x, w, b), np.random.default_rng(seed_p))
    if op == "softmax_xent":
        n, k = int(r.integers(1, 8)), int(r.integers(2, 5))
        labels = r.integers(0, k, n)
        return [r.normal(scale=2, size=(n, k))], lambda z: ops.softmax_cross_entropy(z, labels).sum()
    if op == "smooth_l1":
        n = int(r.integers(1, 8))
        target = r.normal(size=(n, 4))
        pred = target + r.choice([-1, 1], size=(n, 4)) * r.uniform(0.05, 2.5, size=(n, 4))
        pred[np.abs(np.abs(pred - target) - 1) < 0.05] += 0.2  # stay clear of the kink
        return [pred], lambda p: ops.smooth_l1(p, target).sum()
    if op == "joint_loss":
        n1, n2, n3, n4 = (int(v) for v in r.integers(1, 8, 4))
        labels1, labels3 = r.integers(0, 2, n1), r.integers(0, 2, n3)
        t2, t4 = r.normal(size=(n2, 4)), r.normal(size=(n4, 4))
        arrays = [r.normal(size=(n1, 2)), r.normal(size=(n2, 4)), r.normal(size=(n3, 2)), r.normal(size=(n4, 4))]
        for a, t in ((arrays[1], t2), (arrays[3], t4)):
            a[np.abs(np.abs(a - t) - 1) < 0.05] += 0.2

        def build(a, b, c, d):
            return detector.joint_loss(detector.LossBatch(a, labels1, c, labels3, b, t2, d, t4))

        return arrays, build
    raise KeyError(op)


GRAD_OPS = (
    "conv2d",
    "transposed_conv2d",
    "conv3d",
    "max_pool",
    "roi_pool",
    "dense",
    "softmax_xent",
    "smooth_l1",
    "joint_loss",
)


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for op in GRAD_OPS:
        worst[op] = max(gradient_check(build, arrays) for arrays, build in (grad_cases(op, s) for s in range(20)))
    elapsed = time.perf_counter() - start
    bad = {op: w for op, w in worst.items() if not w < 1e-5}
    passed = not bad and elapsed < 60
    detail = f"{len(GRAD_OPS)} ops x 20 shapes, worst rel err {max(worst.values()):.2e}, {elapsed:.1f} s"
    if bad:
        detail += f", failing {bad}"
    report(1, "finite-difference gradients", passed, detail)


# -- 2: oracles ---------------------------------------------------------------


def oracle_conv(r):
    c, co, k, stride = (int(v) for v in (r.integers(1, 4), r.integers(1, 4), r.integers(1, 4), r.integers(1, 3)))
    pad = int(r.integers(0, k))
    if r.random() < 0.5:
        x, w = r.normal(size=(c, *r.integers(k, k + 5, 2))), r.normal(size=(co, c, k, k))
        got = ops.conv2d(Tensor(x), Tensor(w), None, stride, pad).data
    else:
        x, w = r.normal(size=(c, *r.integers(k, k + 3, 3))), r.normal(size=(co, c, k, k, k))
        got = ops.conv3d(Tensor(x), Tensor(w), None, stride, pad).data
    return np.max(np.abs(got - oracles.conv_loops(x, w, stride, pad))) <= 1e-12


def oracle_pool(r):
    dims = int(r.integers(2, 4))
    window, stride = int(r.integers(1, 4)), int(r.integers(1, 3))
    x = r.normal(size=(int(r.integers(1, 3)), *r.integers(window, window + 5, dims)))
    expected, _ = oracles.max_pool_loops(x, (window,) * dims, (stride,) * dims)
    return np.array_equal(ops.max_pool(Tensor(x), window, stride, dims=dims).data, expected)


def oracle_roi_pool(r):
    c, h, w = int(r.integers(1, 3)), int(r.integers(2, 16)), int(r.integers(2, 16))
    feat = r.normal(size=(c, h, w))
    x1, y1 = r.uniform(0, w - 1), r.uniform(0, h - 1)
    roi = (x1, y1, r.uniform(x1 + 0.1, w), r.uniform(y1 + 0.1, h))
    grid = (int(r.integers(1, 8)), int(r.integers(1, 8)))
    return np.array_equal(ops.roi_pool(Tensor(feat), roi, grid).data, oracles.roi_pool_loops(feat, roi, grid))


def random_boxes(r, n, size=40.0):
    return np.column_stack([r.uniform(0, size, (n, 2)), r.uniform(1, 15, (n, 2))])


def oracle_iou(r):
    a, b = random_boxes(r, int(r.integers(1, 8))), random_boxes(r, int(r.integers(1, 8)))
    got = iou_matrix(a, b)
    expected = np.array(
        [[oracles.iou_corners(oracles.center_to_corners(p), oracles.center_to_corners(q)) for q in b] for p in a]
    )
    return np.max(np.abs(got - expected)) <= 1e-12


def oracle_nms(r):
    n = int(r.integers(1, 30))
    boxes = random_boxes(r, n, 30.0)
    scores = r.integers(0, 6, n) / 5.0
    t = float(r.uniform(0.1, 0.9))
    return nms(boxes, scores, t) == oracles.nms_loops(boxes, scores, t)


def oracle_assign(r):
    f = int(r.integers(2, 6))
    anchors = generate_anchors((f, f), 4, ANCHOR_SIZES[: int(r.integers(1, 7))])
    gts = random_boxes(r, int(r.integers(0, 4)), 4.0 * f)
    inside = anchors.inside(4 * f, 4 * f) if r.random() < 0.5 else None
    got = assign_anchors(anchors, gts, 0.7, 0.3, inside)
    return list(got.labels) == oracles.assign_loops(anchors.boxes, gts, 0.7, 0.3, inside)


def oracle_froc(r):
    uids = [f"s{i}" for i in range(int(r.integers(1, 4)))]
    anns = [
        Annotation(uids[int(r.integers(len(uids)))], *r.uniform(0, 30, 3), float(r.uniform(3, 12)))
        for _ in range(int(r.integers(1, 5)))
    ]
    cands = []
    for _ in range(int(r.integers(0, 25))):
        if r.random() < 0.5:
            a = anns[int(r.integers(len(anns)))]
            cands.append(Candidate(a.uid, *(np.asarray(a.center) + r.normal(scale=a.diameter / 3, size=3)), float(r.integers(0, 10)) / 10))
        else:
            cands.append(Candidate(uids[int(r.integers(len(uids)))], *r.uniform(0, 30, 3), float(r.integers(0, 10)) / 10))
    curve = froc.froc_curve(froc.match_candidates(cands, anns, uids))
    return set(curve.points()) == oracles.froc_points(cands, anns, len(uids))


ORACLES = {
    "conv": oracle_conv,
    "pool": oracle_pool,
    "roi_pool": oracle_roi_pool,
    "nms": oracle_nms,
    "iou": oracle_iou,
    "anchor-assignment": oracle_assign,
    "froc": oracle_froc,
}


def test_criterion_2_oracle_suite():
    failures = {}
    for name, check in ORACLES.items():
        bad = [s for s in range(100) if not check(np.random.default_rng(s))]
        if bad:
            failures[name] = bad
    report(2, "brute-force oracles", not failures, f"{len(ORACLES)} ops x 100 seeded instances, failures {failures or 'none'}")


# -- 3: fixed arithmetic ------------------------------------------------------


def test_criterion_3_arithmetic():
    checks = {}
    full_fpr = fpr.full_preset()
    r = np.random.default_rng(0)
    patch = fpr.Patch(r.normal(size=full_fpr.patch_extent[::-1]), label=1)
    augmented = fpr.enumerate_augmentations(patch, full_fpr.crop_extent, full_fpr.patch_extent)
    digests = {hashlib.sha256(p.voxels.tobytes()).hexdigest() for p in augmented}
    checks["125 crops x 8 flips = 1000 unique"] = len(augmented.offsets) == 125 and len(augmented) == 1000 == len(digests)
    neg = fpr.Patch(np.zeros((1, 1, 1)), label=0)
    balanced = fpr.balance_duplicate([patch, neg], full_fpr.duplicate_factor)
    checks["duplication factor 8"] = full_fpr.duplicate_factor == 8 and sum(p is patch for p in balanced) == 8
    det = detector.full_preset()
    checks["anchors [4,6,10,16,22,32]"] = list(det.anchor_sizes) == [4, 6, 10, 16, 22, 32] == list(ANCHOR_SIZES)
    checks["roi grid 7x7"] = det.roi_grid == (7, 7)
    shapes = detector.parameter_shapes(det)
    checks["deconv (4,4,2,512)"] = (
        (det.deconv_kernel, det.deconv_kernel, det.deconv_pad, det.deconv_channels) == (4, 4, 2, 512)
        and shapes["deconv.w"][0][1:] == (512, 4, 4)
        and det.feature_stride == 4
    )
    census = fpr.build_fpr(full_fpr, np.random.default_rng(0)).census()
    checks["fpr3d 6 conv / 3 pool / 3 dense / 2-way"] = census == {"conv3d": 6, "maxpool3d": 3, "dense": 3, "outputs": 2}
    failed = [k for k, ok in checks.items() if not ok]
    report(3, "fixed arithmetic", not failed, f"{len(checks) - len(failed)}/{len(checks)} checks" + (f", failed {failed}" if failed else ""))


# -- 4: joint loss --------------------------------------------------------------


def xent_mean(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        total += math.log(sum(math.exp(v - m) for v in row)) + m - row[y]
    return total / len(labels)


def smooth_l1_mean(pred, target):
    total = 0.0
    for p, t in zip(np.ravel(pred), np.ravel(target)):
        d = abs(p - t)
        total += 0.5 * d * d if d < 1 else d - 0.5
    return total / len(pred)


def random_batch(r):
    n1, n2, n3, n4 = (int(v) for v in r.integers(1, 30, 4))
    return detector.LossBatch(
        Tensor(r.normal(scale=3, size=(n1, 2))),
        r.integers(0, 2, n1),
        Tensor(r.normal(scale=3, size=(n3, 2))),
        r.integers(0, 2, n3),
        Tensor(r.normal(size=(n2, 4))),
        r.normal(size=(n2, 4)),
        Tensor(r.normal(size=(n4, 4))),
        r.normal(size=(n4, 4)),
    )


def test_criterion_4_joint_loss():
    worst_sum, worst_dup = 0.0, 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        b = random_batch(r)
        expected = (
            xent_mean(b.rpn_cls.data, b.rpn_labels)
            + smooth_l1_mean(b.rpn_reg.data, b.rpn_targets)
            + xent_mean(b.roi_cls.data, b.roi_labels)
            + smooth_l1_mean(b.roi_reg.data, b.roi_targets)
        )
        worst_sum = max(worst_sum, abs(detector.joint_loss(b).item() - expected))
        k = int(r.integers(2, 5))
        dup = detector.LossBatch(
            Tensor(np.tile(b.rpn_cls.data, (k, 1))), np.tile(b.rpn_labels, k), b.roi_cls, b.roi_labels,
            b.rpn_reg, b.rpn_targets, b.roi_reg, b.roi_targets,
        )
        worst_dup = max(worst_dup, abs(detector.loss_terms(dup)[0].item() - detector.loss_terms(b)[0].item()))
    r = np.random.default_rng(0)
    labels = r.integers(0, 2, 64)
    logits = np.where(np.eye(2)[labels] == 1, 50.0, 0.0)
    target = r.normal(size=(16, 4))
    perfect = detector.LossBatch(
        Tensor(logits), labels, Tensor(logits), labels, Tensor(target), target, Tensor(target), target
    )
    limit = detector.joint_loss(perfect).item()
    passed = worst_sum < 1e-10 and worst_dup < 1e-10 and limit < 1e-8
    report(
        4, "joint loss properties", passed,
        f"term-sum err {worst_sum:.1e}, duplication err {worst_dup:.1e}, margin-50 loss {limit:.1e}",
    )


# -- 5: synthetic end to end ----------------------------------------------------

E2E_SEEDS = range(10)
E2E_SCANS, E2E_TRAIN = 12, 8
CPU_BUDGET_S = 20 * 60


def end_to_end(seed):
    """Train both stages on 8 phantoms and score the 4 held-out ones."""
    start = time.process_time()
    scans = generate_dataset(seed, E2E_SCANS, PhantomParams(vessel_count=2))
    train, test = scans[:E2E_TRAIN], scans[E2E_TRAIN:]
    rng = np.random.default_rng(seed)
    det = detector.build_detector(detector.desk_preset(seed=seed), rng)
    detector.train_detector(det, train, rng)
    cands = [detector.detect_candidates(det, v) for v, _ in scans]
    reducer = fpr.build_fpr(fpr.desk_preset(seed=seed), rng)
    reducer, _ = fpr.fit_fpr(reducer, train, cands[:E2E_TRAIN], rng)
    stage1 = [c for group in cands[E2E_TRAIN:] for c in group]
    stage2 = [c for (v, _), group in zip(test, cands[E2E_TRAIN:]) for c in fpr.reduce_candidates(reducer, v, group)]
    uids = [v.uid for v, _ in test]
    annotations = [a for _, anns in test for a in anns]
    curves = [froc.froc_curve(froc.match_candidates(s, annotations, uids)) for s in (stage1, stage2)]
    return curves, time.process_time() - start


@pytest.mark.slow
def test_criterion_5_end_to_end():
    sens_ok = reduce_ok = 0
    cpu = []
    rows = []
    for seed in E2E_SEEDS:
        (c1, c2), seconds = end_to_end(seed)
        cpu.append(seconds)
        s2 = froc.sensitivity_at(c2, 4.0)
        f1, f2 = froc.fps_at_sensitivity(c1, 0.8), froc.fps_at_sensitivity(c2, 0.8)
        sens_ok += s2 >= 0.8
        reduce_ok += f2 < f1 and math.isfinite(f2)
        rows.append(f"seed {seed}: sens@4 {s2:.3f}, FPs/scan at 0.8 {f1:.2f} -> {f2:.2f}, {seconds:.0f} s")
        print(rows[-1])
    within_budget = max(cpu) <= CPU_BUDGET_S
    passed = sens_ok >= 8 and reduce_ok >= 8 and within_budget
    report(
        5, "synthetic end to end", passed,
        f"sens>=0.8 at 4 FPs/scan on {sens_ok}/10 seeds, stage 2 fewer FPs on {reduce_ok}/10, "
        f"CPU per 12-scan run max {max(cpu) / 60:.1f} min (total {sum(cpu) / 60:.1f} min)",
    )


# -- 6: FROC fixture ------------------------------------------------------------


def test_criterion_6_froc_fixture():
    F = Fraction
    anns = load_annotations(os.path.join(FIXTURE, "annotations.csv"))
    cands = load_candidates(os.path.join(FIXTURE, "candidates.csv"))
    uids = cli.read_scan_list(os.path.join(FIXTURE, "seriesuids.csv"))
    curve = froc.froc_curve(froc.match_candidates(cands, anns, uids))
    points = [(F(0), F(1, 3)), (F(1, 3), F(1, 3)), (F(2, 3), F(1, 3)), (F(2, 3), F(2, 3)), (F(2, 3), F(1)),
              (F(4, 3), F(1)), (F(5, 3), F(1)), (F(2), F(1))]
    at_rates = [F(1, 3), F(1, 3), F(1, 3), F(1), F(1), F(1), F(1)]
    ok_points = curve.points() == [(float(a), float(b)) for a, b in points]
    ok_rates = [froc.sensitivity_at(curve, r) for r in froc.FP_RATES] == [float(v) for v in at_rates]
    ok_avg = froc.average_froc_score(curve) == float(F(5, 7))
    constant = froc.FrocCurve(np.array([0.5, 0.4]), np.array([0.0, 8.0]), np.array([1.0, 1.0]), 2, 1)
    ok_const = froc.average_froc_score(constant) == 1.0
    passed = ok_points and ok_rates and ok_avg and ok_const
    report(
        6, "FROC fixture", passed,
        f"points {ok_points}, seven rates {ok_rates}, average 5/7 {ok_avg}, constant-1 curve {ok_const}",
    )


# -- 7: CLI determinism ---------------------------------------------------------

FAST = [
    "--set", "detector.steps=6",
    "--set", "fpr3d.epochs=1",
    "--set", "fpr3d.epoch_size=16",
    "--set", "fpr3d.max_negatives=16",
]


def tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in files:
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


@pytest.mark.slow
def test_criterion_7_cli_determinism(tmp_path):
    data = tmp_path / "data"
    fixture = [
        "--annotations", os.path.join(FIXTURE, "annotations.csv"),
        "--scans", os.path.join(FIXTURE, "seriesuids.csv"),
    ]
    commands = {
        "phantom-gen": lambda out: ["phantom-gen", "--scans", "3", "--seed", "7", "--out", out],
        "train-detector": lambda out: ["train-detector", "--data", data, "--seed", "7", *FAST, "--out", out],
        "detect": lambda out: ["detect", "--data", data, "--model", tmp_path / "train-detector-a",
                               "--set", "detector.score_floor=0.0", "--out", out],
        "train-fpr": lambda out: ["train-fpr", "--data", data, "--candidates", tmp_path / "detect-a" / "candidates.csv",
                                  "--seed", "7", *FAST, "--out", out],
        "reduce": lambda out: ["reduce", "--data", data, "--candidates", tmp_path / "detect-a" / "candidates.csv",
                               "--model", tmp_path / "train-fpr-a", "--out", out],
        "froc": lambda out: ["froc", "--candidates", os.path.join(FIXTURE, "candidates.csv"), *fixture, "--out", out],
        "report": lambda out: ["report", "--system", f"x={os.path.join(FIXTURE, 'candidates.csv')}", *fixture, "--out", out],
        "pipeline": lambda out: ["pipeline", "--data", data, "--train-data", data, "--seed", "7", *FAST, "--out", out],
    }
    differing = []
    for name, argv in commands.items():
        outs = []
        for run in "ab":
            out = data if (name == "phantom-gen" and run == "a") else tmp_path / f"{name}-{run}"
            assert cli.main([str(a) for a in argv(out)]) == 0, name
            outs.append(tree(out))
        if outs[0] != outs[1] or not outs[0]:
            differing.append(name)
    report(
        7, "CLI determinism", not differing,
        f"{len(commands) - len(differing)}/{len(commands)} commands byte-identical on rerun"
        + (f", differing {differing}" if differing else ""),
    )


# -- 8: format round trips -----------------------------------------------------


def random_uid(r):
    alphabet = "abcXYZ0123456789._-, \"é"
    n = int(r.integers(1, 12))
    uid = "".join(alphabet[int(i)] for i in r.integers(len(alphabet), size=n)).strip()
    return uid or "u"


def test_criterion_8_round_trips():
    bad = []
    for seed in range(100):
        r = np.random.default_rng(seed)
        shape = tuple(int(v) for v in r.integers(1, 9, 3))
        if r.random() < 0.5:
            values = r.integers(-2000, 3000, shape).astype(np.int16)
        else:
            values = r.normal(scale=500, size=shape).astype(np.float32)
        vol = CtVolume(f"v{seed}", values, tuple(r.uniform(0.1, 3, 3)), tuple(r.normal(scale=200, size=3)))
        header, raw = write_mhd(vol)
        again = write_mhd(parse_mhd(header, raw, vol.uid))
        if again != (header, raw):
            bad.append(("mhd", seed))
        anns = [Annotation(random_uid(r), *r.normal(scale=100, size=3), float(r.uniform(0.5, 40))) for _ in range(int(r.integers(0, 8)))]
        text = write_annotations(anns)
        if write_annotations(read_annotations(text)) != text:
            bad.append(("annotations", seed))
        cands = [Candidate(random_uid(r), *r.normal(scale=100, size=3), float(r.random())) for _ in range(int(r.integers(0, 8)))]
        text = write_candidates(cands)
        if write_candidates(read_candidates(text)) != text:
            bad.append(("candidates", seed))
    report(8, "format round trips", not bad, f"MHD + 2 CSV formats x 100 random instances, failures {bad or 'none'}")
