"""Acceptance suite: one test per numbered criterion.

Each test records a PASS/FAIL line (printed in the "acceptance criteria"
section of the pytest summary) and then asserts. Run on its own with::

    pytest tests/test_acceptance.py -v
"""

import math
import os
import time

import numpy as np
import pytest
from test_autodiff import OPS, _op_cases

from relpose import autodiff as ad
from relpose.autodiff.gradcheck import check_gradients
from relpose.cli import main
from relpose.config import render_config
from relpose.data import synth_scene
from relpose.evaluate import evaluate
from relpose.features import ExtractorConfig, FeatureExtractor
from relpose.geometry import (
    AbsolutePose,
    align_scale,
    axis_angle_to_quat,
    erroneous_relative_translation,
    matrix_to_quat,
    quat_multiply,
    quat_normalize_canonical,
    quat_to_matrix,
    relative_pose,
    rot_z,
    rotation_error_deg,
)
from relpose.matching import match, match_and_warp
from relpose.regressor import (
    LossWeights,
    ModelConfig,
    PosePrediction,
    PoseRegressor,
    RegressorConfig,
    RelPoseNet,
    loss_total,
    pose_loss,
)
from relpose.report import unnormalized_cdf
from relpose.tensorio import encode_checkpoint, encode_tensor, load_checkpoint, load_tensor, save_checkpoint, save_tensor
from relpose.training import TrainConfig, predict, train

OVERFIT_MODEL = ModelConfig(ExtractorConfig(channels=32, layers=2, heads=4, widths=(16, 32, 32)), RegressorConfig())
OVERFIT_TRAIN = TrainConfig(epochs=200, lr=1e-3, batch_size=8, step_size=6, gamma=0.9, seed=0)


class Checks:
    """Collects named sub-checks for one criterion."""

    def __init__(self):
        self.items = []

    def __call__(self, name, ok, info=""):
        self.items.append((name, bool(ok), info))

    @property
    def passed(self):
        return all(ok for _, ok, _ in self.items)

    def detail(self):
        return "; ".join(f"{n}{'' if ok else ' FAILED'}{f' ({i})' if i else ''}" for n, ok, i in self.items)

    def finish(self, acceptance, number, title):
        acceptance(number, title, self.passed, self.detail())
        assert self.passed, self.detail()


def t64(x):
    return ad.Tensor(np.asarray(x, dtype=np.float64))


def test_criterion_1_gradients(acceptance):
    start = time.perf_counter()
    c = Checks()
    worst_op, worst = "", 0.0
    for op in OPS:
        for seed in range(5):
            fn, inputs = _op_cases(seed)[op]
            res = check_gradients(fn, inputs, h=1e-3)
            if res.max_rel_error > worst:
                worst_op, worst = op, res.max_rel_error
    c(f"{len(OPS)} ops x 5 seeds", worst <= 1e-4, f"max rel err {worst:.2e} at {worst_op}")

    # end-to-end loss on a 16x16 toy pair, float64, every parameter group
    _, recs = synth_scene(0, n_pairs=2, image_size=(16, 16), min_covisible=1)
    a = np.stack([r.img_a[None] for r in recs]).astype(np.float64)
    b = np.stack([r.img_b[None] for r in recs]).astype(np.float64)
    q = np.stack([np.asarray(r.target.rotation) for r in recs])
    t = np.stack([r.target.translation for r in recs])
    cfg = ModelConfig(ExtractorConfig(channels=8, layers=2, heads=2, widths=(4, 4, 8)), RegressorConfig(hidden=16))
    net = RelPoseNet(cfg, seed=0, dtype=np.float64)
    fn = lambda *_: pose_loss(net(a, b), q, t, net.loss).total  # noqa: E731
    e2e_worst, checked, groups = 0.0, 0, set()
    for name, p in net.named_parameters().items():
        res = check_gradients(fn, [p], h=1e-3, max_coords=12, rng=np.random.default_rng(0))
        e2e_worst = max(e2e_worst, res.max_rel_error)
        checked += res.checked
        if res.checked:
            groups.add(name.split(".")[0])
    c("end-to-end 16x16", e2e_worst <= 1e-3 and groups == {"extractor", "regressor", "loss"},
      f"max rel err {e2e_worst:.2e} over {checked} coords in {sorted(groups)}")
    elapsed = time.perf_counter() - start
    c("runtime < 2 min", elapsed < 120, f"{elapsed:.1f} s")
    c.finish(acceptance, 1, "gradient suite")


def test_criterion_2_matcher_oracle(acceptance):
    c = Checks()
    rng = np.random.default_rng(2024)
    idx_ok, conf_err = True, 0.0
    for _ in range(200):
        h, w = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        ch = int(rng.integers(1, 17))
        fa, fb = rng.normal(size=(1, ch, h, w)), rng.normal(size=(1, ch, h, w))
        _, cmap = match_and_warp(fa, fb)
        rows_a, rows_b = fa[0].reshape(ch, -1).T, fb[0].reshape(ch, -1).T
        for i in range(h * w):
            scores = [sum(rows_a[i, k] * rows_b[j, k] for k in range(ch)) for j in range(h * w)]
            best = max(range(h * w), key=lambda j: (scores[j], -j))
            idx_ok &= cmap.index[0, i] == best
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            conf_err = max(conf_err, abs(cmap.confidence.data[0, i] - e[best] / sum(e)))
    c("indices == brute force on 200 grids", idx_ok)
    c("confidence == hand softmax", conf_err <= 1e-6, f"max err {conf_err:.1e}")

    recovered = 0
    for seed in range(50):
        r = np.random.default_rng(seed)
        n = 48
        rows_a = r.normal(size=(n, 16))
        perm = r.permutation(n)
        rows_b = np.empty_like(rows_a)
        rows_b[perm] = rows_a / np.linalg.norm(rows_a, axis=1, keepdims=True)
        rows_a = rows_a / np.linalg.norm(rows_a, axis=1, keepdims=True)
        cmap = match(rows_a @ rows_b.T, 6, 8)
        recovered += bool(np.array_equal(cmap.index[0], perm))
    c("planted permutations recovered", recovered == 50, f"{recovered}/50")
    c.finish(acceptance, 2, "matcher oracle")


def test_criterion_3_geometry(acceptance):
    c = Checks()
    rng = np.random.default_rng(3)
    qs = [np.asarray(quat_normalize_canonical(rng.normal(size=4))) for _ in range(200)]
    c("R_err(q, q) = 0", max(rotation_error_deg(q, q) for q in qs) == 0.0)
    c("R_err(q, -q) = 0", max(rotation_error_deg(q, -q) for q in qs) == 0.0)
    worst = 0.0
    for _ in range(200):
        angle = rng.uniform(0, math.pi)
        q0 = quat_normalize_canonical(rng.normal(size=4))
        q1 = quat_multiply(axis_angle_to_quat(rng.normal(size=3), angle), q0)
        worst = max(worst, abs(rotation_error_deg(q0, q1) - math.degrees(angle)))
    c("known axis-angle", worst <= 1e-9, f"max err {worst:.1e} deg")
    dist_err = 0.0
    for _ in range(1000):
        pa = AbsolutePose.from_matrix(quat_to_matrix(rng.normal(size=4)), rng.uniform(-5, 5, size=3))
        pb = AbsolutePose.from_matrix(quat_to_matrix(rng.normal(size=4)), rng.uniform(-5, 5, size=3))
        d = np.linalg.norm(pa.center - pb.center)
        dist_err = max(dist_err, abs(np.linalg.norm(relative_pose(pa, pb).translation) - d))
    c("|t| = center distance (1000 pairs)", dist_err <= 1e-9, f"max err {dist_err:.1e}")
    pa = AbsolutePose((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))
    pb = AbsolutePose.from_matrix(rot_z(90), (1.0, 0.0, 0.0))
    rect, wrong = relative_pose(pa, pb).translation, erroneous_relative_translation(pa, pb)
    c("Rz(90) worked example", np.allclose(rect, [0, 1, 0], atol=1e-12) and np.allclose(wrong, [-1, 0, 0], atol=1e-12),
      f"rectified {np.round(rect, 12).tolist()}, erroneous {np.round(wrong, 12).tolist()}")
    c.finish(acceptance, 3, "geometry identities")


def test_criterion_4_scale_alignment(acceptance):
    c = Checks()
    rng = np.random.default_rng(4)
    s_err, post_err = 0.0, 0.0
    for _ in range(100):
        gt = list(rng.normal(size=(int(rng.integers(2, 20)), 3)))
        s_true = math.exp(rng.uniform(-3, 3))
        s, errs = align_scale([g / s_true for g in gt], gt)
        s_err = max(s_err, abs(s - s_true) / s_true)
        post_err = max(post_err, max(errs))
    c("planted scale recovered", s_err <= 1e-9, f"max rel err {s_err:.1e}")
    c("post-alignment errors", post_err <= 1e-9, f"max {post_err:.1e}")
    deriv = 0.0
    for _ in range(50):
        pred, gt = rng.normal(size=(10, 3)), rng.normal(size=(10, 3))
        s, _ = align_scale(list(pred), list(gt))
        f = lambda x: float(((x * pred - gt) ** 2).sum())  # noqa: E731
        h = 1e-3
        deriv = max(deriv, abs((f(s + h) - f(s - h)) / (2 * h)))
    c("d/ds of least squares = 0 at s*", deriv <= 1e-8, f"max |fd| {deriv:.1e}")
    c.finish(acceptance, 4, "scale alignment")


def test_criterion_5_loss_weights(acceptance):
    c = Checks()
    worst = 0.0
    rng = np.random.default_rng(5)
    for _ in range(50):
        s, L = rng.uniform(-2, 2), rng.uniform(0.01, 5)
        w = LossWeights(dtype=np.float64)
        w.s_q.data[...] = s
        loss_total(t64(L), t64(1.0), t64(1.0), w).backward()
        analytic = 1 - math.exp(-s) * L
        h, vals = 1e-5, []
        for step in (h, -h):
            w.s_q.data[...] = s + step
            vals.append(loss_total(t64(L), t64(1.0), t64(1.0), w).item())
        worst = max(worst, abs((vals[0] - vals[1]) / (2 * h) - analytic), abs(w.s_q.grad.item() - analytic))
    c("dL/ds = 1 - exp(-s) L", worst <= 1e-6, f"max err {worst:.1e}")
    w = LossWeights(dtype=np.float64)
    loss_total(t64(1.0), t64(1.0), t64(1.0), w).backward()
    c("gradient 0 at s=0, L=1", all(x.grad.item() == 0 for x in (w.s_q, w.s_t, w.s_tn)))
    q = np.array([[0.5, 0.5, -0.5, 0.5]])
    t = np.array([[0.3, -0.2, 0.9]])
    total = pose_loss(PosePrediction(t64(q), t64(t)), q, t, LossWeights(dtype=np.float64)).total.item()
    c("perfect prediction loss = 0", abs(total) <= 1e-12, f"{total:.1e}")
    c.finish(acceptance, 5, "loss-weight calculus")


def _correspondence_recall(model, scene, records):
    """Fraction of ground-truth cell correspondences whose predicted match is
    within one cell (Chebyshev) of the true cell in image B."""
    hits = total = 0
    gw = scene.grid[1]
    with ad.no_grad():
        for rec, corr in zip(records, scene.correspondences):
            a, b = rec.img_a[None, None].astype(np.float32), rec.img_b[None, None].astype(np.float32)
            fa, fb = model.extractor(a, b)
            _, cmap = match_and_warp(fa, fb)
            for cell_a, cell_b in corr:
                ra, ca = divmod(int(cmap.index[0, cell_a]), gw)
                rb, cb = divmod(int(cell_b), gw)
                hits += max(abs(ra - rb), abs(ca - cb)) <= 1
                total += 1
    return hits / total


@pytest.mark.slow
def test_criterion_6_synthetic_overfit(acceptance):
    c = Checks()
    scene, records = synth_scene(0, n_pairs=32, image_size=(64, 64))
    model = RelPoseNet(OVERFIT_MODEL, seed=0)
    start = time.perf_counter()
    result = train(model, records, [], OVERFIT_TRAIN)
    elapsed = time.perf_counter() - start
    rep = evaluate(records, predict(model, records))
    med_r, med_t = rep.scenes[0].median_rotation_deg, rep.scenes[0].median_translation_m
    first, last = result.history[0], result.history[-1]
    raw_drop = 1 - last.train_raw / first.train_raw
    weighted_drop = (first.train_loss - last.train_loss) / abs(first.train_loss)
    c("median R_err < 5 deg", med_r < 5, f"{med_r:.3f} deg")
    c("median t_err < 0.1 m", med_t < 0.1, f"{med_t:.4f} m")
    c("loss decrease >= 50%", raw_drop >= 0.5 and weighted_drop >= 0.5,
      f"components {first.train_raw:.3f} -> {last.train_raw:.4f} ({100 * raw_drop:.1f}%), "
      f"weighted {first.train_loss:.3f} -> {last.train_loss:.3f}")
    threads = os.environ.get("OPENBLAS_NUM_THREADS", "?")
    c("runtime < 15 min", elapsed < 900, f"{elapsed:.0f} s, OPENBLAS_NUM_THREADS={threads}")
    recall = _correspondence_recall(model, scene, records)
    c("correspondence recall within 1 cell (reported)", True, f"{100 * recall:.1f}%, trend target 80%")
    c.finish(acceptance, 6, "synthetic overfit")


def test_criterion_7_full_scale_shapes(acceptance):
    c = Checks()
    cfg = ExtractorConfig.full_scale()
    ext = FeatureExtractor(cfg, seed=0)
    img = np.random.default_rng(7).uniform(size=(1, 1, 256, 341)).astype(np.float32)
    with ad.no_grad():
        fa, fb = ext(img, img[:, :, ::-1].copy())
        g, _ = match_and_warp(fa, fb)
    c("feature grids", fa.shape[1:] == fb.shape[1:] == (256, 32, 42), f"{fa.shape[1:]}")
    c("warped map", g.shape[1:] == (517, 32, 42), f"{g.shape[1:]}")
    reg = PoseRegressor(517, RegressorConfig(), seed=0)
    c("first MLP width", reg.fc1.weight.shape == (1024, 517), f"{reg.fc1.weight.shape}")
    with ad.no_grad():
        pred = reg(g)
    c("pose output", pred.q.shape == (1, 4) and pred.t.shape == (1, 3))
    c.finish(acceptance, 7, "full-scale shapes")


@pytest.mark.slow
def test_criterion_8_ablation(acceptance, tmp_path, capsys):
    c = Checks()
    smoke = tmp_path / "smoke"
    main(["synth", "--seed", "1", "--pairs", "4", "--out", str(smoke)])
    (smoke / "config.ini").write_text(render_config({
        "data": {"manifest": "pairs.txt", "split_ratios": (0.5, 0.25, 0.25)},
        "extractor": {"channels": 8, "layers": 2, "heads": 2, "widths": (4, 4, 8)},
        "regressor": {"hidden": 16},
        "optim": {"epochs": 1, "batch_size": 2},
        "run": {"output_dir": "run"},
    }))
    codes = {}
    for variant in ("full", "no_warp", "cnn_only", "self_attn_only"):
        codes[variant] = main(["ablate", "--config", str(smoke / "config.ini"), "--variant", variant])
        codes[variant] |= main(["eval", "--checkpoint", str(smoke / "run" / f"ablate_{variant}" / "best.rpck"),
                                "--pairs", str(smoke / "pairs.txt")])
    capsys.readouterr()
    c("4 variants train + eval", all(v == 0 for v in codes.values()), str(codes))

    img = np.random.default_rng(8).uniform(size=(2, 1, 64, 64)).astype(np.float32)
    shapes = {v: RelPoseNet(ModelConfig(OVERFIT_MODEL.extractor, RegressorConfig(hidden=16), variant=v))
              .correspondence_map(img, img[::-1].copy()).shape for v in ("full", "no_warp")}
    c("no_warp keeps shapes", shapes["full"] == shapes["no_warp"] == (2, 69, 8, 8), str(shapes["no_warp"]))

    # informational trend: paired shorter runs on the overfit set
    trend = []
    for seed in range(3):
        _, records = synth_scene(seed, n_pairs=32, image_size=(64, 64))
        errs = {}
        for variant in ("full", "no_warp"):
            model = RelPoseNet(ModelConfig(OVERFIT_MODEL.extractor, OVERFIT_MODEL.regressor, variant=variant), seed=seed)
            train(model, records, [], TrainConfig(epochs=60, seed=seed))
            errs[variant] = evaluate(records, predict(model, records)).average_rotation_deg
        trend.append(errs)
    wins = sum(e["full"] <= e["no_warp"] for e in trend)
    summary = ", ".join(f"seed {i}: full {e['full']:.2f} vs no_warp {e['no_warp']:.2f} deg" for i, e in enumerate(trend))
    c("trend full <= no_warp (reported)", True, f"{wins}/3 seeds; {summary}")
    c.finish(acceptance, 8, "ablation plumbing")


def test_criterion_9_io(acceptance, tmp_path, capsys):
    c = Checks()
    net = RelPoseNet(ModelConfig(ExtractorConfig(channels=8, layers=2, heads=2, widths=(4, 4, 8)),
                                 RegressorConfig(hidden=16)), seed=9)
    state = net.state_dict()
    save_checkpoint(tmp_path / "m.rpck", state)
    back = load_checkpoint(tmp_path / "m.rpck")
    same = list(back) == list(state) and all(back[k].tobytes() == state[k].tobytes() for k in state)
    c("RPCK round-trip", same and encode_checkpoint(back) == (tmp_path / "m.rpck").read_bytes(), f"{len(state)} tensors")
    arr = np.random.default_rng(9).normal(size=(3, 17, 5)).astype(np.float32)
    save_tensor(tmp_path / "x.rptn", arr)
    arr2 = load_tensor(tmp_path / "x.rptn")
    c("RPTN round-trip", arr2.tobytes() == arr.tobytes() and encode_tensor(arr2) == (tmp_path / "x.rptn").read_bytes())

    d = tmp_path / "run"
    main(["synth", "--seed", "2", "--pairs", "6", "--out", str(d)])
    (d / "config.ini").write_text(render_config({
        "data": {"manifest": "pairs.txt"},
        "extractor": {"channels": 8, "layers": 2, "heads": 2, "widths": (4, 4, 8)},
        "regressor": {"hidden": 16}, "optim": {"epochs": 1, "batch_size": 3}, "run": {"output_dir": "out"},
    }))
    main(["train", "--config", str(d / "config.ini")])
    outs = []
    for k in range(2):
        out = tmp_path / f"eval{k}"
        main(["eval", "--checkpoint", str(d / "out" / "best.rpck"), "--pairs", str(d / "pairs.txt"),
              "--scale-align", "--out", str(out)])
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    capsys.readouterr()
    c("repeated eval byte-identical", outs[0] == outs[1] and len(outs[0]) >= 11, f"{len(outs[0])} files")

    errors = np.random.default_rng(10).exponential(5, size=400)
    counts = [n for _, n in unnormalized_cdf(errors)]
    c("CDF nondecreasing, ends at pair count", all(a <= b for a, b in zip(counts, counts[1:])) and counts[-1] == 400)
    c.finish(acceptance, 9, "I/O bit-exactness")
