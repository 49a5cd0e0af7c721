"""Acceptance benchmarks. Each test records its outcome in ``ACCEPTANCE`` so the
session summary prints one PASS/FAIL line per criterion."""

import contextlib
import io
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from test_pipeline import oracle_regions, random_map

from salgrad import cli
from salgrad import colorvision as cv
from salgrad import diffcore as dc
from salgrad import imageio
from salgrad import operators as ops
from salgrad import pipeline as pl
from salgrad import synthetic as sy
from salgrad.objective import RunConfig, TargetMap, loss_sal, loss_sim, mask_mean, optimize, total_objective


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


def in_mask_saliency(img, m):
    return mask_mean(cv.predict_saliency(dc.const(img)).data, m)


# 1. gradient suite --------------------------------------------------------------


def _primitive_cases(rng):
    n = 32
    a = dc.tensor(rng.uniform(0.1, 0.9, (n, n)))
    b = dc.tensor(rng.uniform(0.1, 0.9, (n, n)))
    signed = dc.tensor(rng.normal(size=(n, n)))
    img = dc.tensor(rng.uniform(0.05, 0.95, (n, n, 3)))
    lab = dc.tensor(np.stack([rng.uniform(20, 80, (n, n)), rng.uniform(-30, 30, (n, n)), rng.uniform(-30, 30, (n, n))], -1))
    coords = dc.tensor(sy_coords(n, rng))
    kern = dc.tensor(rng.normal(0, 0.3, (3, 3, 3, 4)))
    bias = dc.tensor(rng.normal(size=4))
    theta = dc.tensor(ops.identity_grid(8) + 0.05 * rng.normal(size=(8, 8, 6)))
    control = dc.tensor(0.4 * rng.normal(size=(3, 3, 2)))
    params = ops.convnet_init(seed=3)
    delta = dc.tensor(rng.normal(0, 0.1, (n, n, 3)))
    grid = dc.tensor(rng.normal(size=(6, 6, 2)))
    m = sy.disk_mask(n, 0.25)
    target = np.zeros((n, n))
    reference = rng.uniform(0.0, 1.0, (n, n, 3))

    w2 = rng.normal(size=(n, n))
    w3 = rng.normal(size=(n, n, 3))

    def s2(t):
        return dc.reduce("sum", t, weights=w2)

    def s3(t):
        return dc.reduce("sum", t, weights=w3)

    def sn(t):
        return dc.reduce("sum", t, weights=rng_fixed(t.shape))

    return [
        ("add", lambda: s2(dc.add(a, b)), [a, b]),
        ("sub", lambda: s2(dc.sub(a, b)), [a, b]),
        ("mul", lambda: s2(dc.mul(a, b)), [a, b]),
        ("scale", lambda: s2(dc.scale(a, -2.5)), [a]),
        ("add_const", lambda: s2(dc.add_const(a, 0.3)), [a]),
        ("relu", lambda: s2(dc.relu(signed)), [signed]),
        ("square", lambda: s2(dc.square(signed)), [signed]),
        ("abs", lambda: s2(dc.absolute(signed)), [signed]),
        ("logistic", lambda: s2(dc.logistic(signed)), [signed]),
        ("reduce_sum", lambda: dc.reduce("sum", a), [a]),
        ("reduce_mean_weighted", lambda: dc.reduce("mean", a, weights=np.abs(w2)), [a]),
        ("channel", lambda: s2(dc.channel(img, 1)), [img]),
        ("concat", lambda: s3(dc.concat([a, b, signed])), [a, b, signed]),
        ("tile_channels", lambda: s3(dc.tile_channels(a, 3)), [a]),
        ("gaussian_blur", lambda: s3(dc.gaussian_blur(img, 2.0)), [img]),
        ("resample_down", lambda: sn(dc.resample_bilinear(a, 16, 12)), [a]),
        ("resample_up", lambda: sn(dc.resample_bilinear(a, 48, 40)), [a]),
        ("spatial_diff_0", lambda: s2(dc.spatial_diff(a, 0)), [a]),
        ("spatial_diff_1", lambda: s2(dc.spatial_diff(a, 1)), [a]),
        ("conv2d", lambda: sn(dc.conv2d(img, kern, bias)), [img, kern, bias]),
        ("grid_sample", lambda: s3(dc.grid_sample(img, coords)), [img, coords]),
        ("rgb_to_lab", lambda: s3(cv.rgb_to_lab(img)), [img]),
        ("lab_to_rgb", lambda: s3(cv.lab_to_rgb(lab)), [lab]),
        ("opponent_channels", lambda: s3(dc.concat(list(cv.opponent_channels(img)))), [img]),
        ("center_surround", lambda: s2(cv.center_surround(a, 1.0, 3.0)), [a]),
        ("predict_saliency", lambda: s2(cv.predict_saliency(img)), [img]),
        ("recolor_apply", lambda: s3(ops.recolor_apply(dc.const(img.data), theta)), [theta]),
        ("warp_densify", lambda: sn(ops.warp_densify(control, n, n)), [control]),
        ("warp_sample", lambda: s3(ops.warp_sample(img, ops.warp_densify(control, n, n))), [img, control]),
        ("convnet_forward", lambda: s3(ops.convnet_forward(dc.const(img.data), params)), params),
        ("noise_apply", lambda: s3(ops.noise_apply(img, delta, m)), [img, delta]),
        ("bounded_noise", lambda: s3(ops.bounded_noise(delta, 0.2)), [delta]),
        ("tv_penalty", lambda: ops.tv_penalty(grid), [grid]),
        ("loss_sal", lambda: loss_sal(a, target, m), [a]),
        ("loss_sim", lambda: loss_sim(img, reference, m), [img]),
    ]


def sy_coords(n, rng):
    # interior, off-integer sample points
    base = ops.pixel_grid(n, n)
    return np.clip(base + rng.uniform(-2.0, 2.0, base.shape), 0.0, n - 1.0)


def rng_fixed(shape):
    return np.random.default_rng(int(np.prod(shape))).normal(size=shape)


def _objective_cases(rng):
    img, m = sy.disk_image(32, radius_frac=0.2)
    cases = []
    for tag in ("recolor", "warp", "convnet", "noise"):
        cfg = RunConfig(operator=tag)
        op = ops.make_operator(tag, img, m, spacing=16, bins=8)
        for p in op.parameters():
            if tag == "recolor":
                p.data = p.data + 0.05 * rng.normal(size=p.shape)
            elif tag in ("warp", "noise"):
                p.data = 0.3 * rng.normal(size=p.shape)
        cases.append((f"objective[{tag}]", lambda op=op, cfg=cfg: total_objective(op, img, m, cfg).total, op.parameters()))
    return cases


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    failures, refined, kinks, checked = [], 0, 0, 0
    for name, build, tensors in _primitive_cases(rng) + _objective_cases(rng):
        report = dc.gradcheck(build, tensors, tolerance=1e-4, h=1e-4, samples=8)
        refined += sum(report.refined)
        kinks += sum(report.kinks)
        checked += sum(report.checked)
        if not report.passed:
            failures.append(f"{name}: {report}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60.0 and kinks <= 0.05 * checked
    detail = f"{checked} entries, {refined} refined, {kinks} kinks, {elapsed:.1f}s" + (f"; {failures}" if failures else "")
    record(1, ok, detail)


# 2. identity suite --------------------------------------------------------------


def test_criterion_2_identity():
    img, m = sy.disk_image(64)
    errs, sims = {}, {}
    for tag in ("recolor", "warp", "noise"):
        edited = ops.make_operator(tag, img, m).forward()
        errs[tag] = float(np.abs(edited.data - img).max())
        sims[tag] = loss_sim(edited, img, m).item()
    tv = ops.tv_penalty(dc.const(np.full((16, 16, 6), 0.7))).item()
    ok = max(errs.values()) < 1e-3 and max(sims.values()) < 1e-6 and tv == 0.0
    record(2, ok, f"max abs {max(errs.values()):.1e}, max L_sim {max(sims.values()):.1e}, tv {tv}")


# 3. recolor reduction benchmark ---------------------------------------------------


@pytest.fixture(scope="module")
def disk128():
    return sy.disk_image(128)


def test_criterion_3_recolor_reduction(disk128):
    img, m = disk128
    start = time.perf_counter()
    res = optimize(img, m, "recolor", RunConfig(iters=500))
    elapsed = time.perf_counter() - start
    before, after = in_mask_saliency(img, m), in_mask_saliency(res.image, m)
    red = 100 * (before - after) / before
    out_mse = float(np.mean(((res.image - img) * (1 - m)[..., None]) ** 2))
    ok = red >= 50.0 and out_mse < 1e-3 and elapsed < 120.0
    record(3, ok, f"reduction {red:.1f}%, out-of-mask MSE {out_mse:.1e}, {elapsed:.1f}s")


# 4. warp removal benchmark ------------------------------------------------------


def test_criterion_4_warp_removal():
    color = np.array([1.0, 0.0, 0.0])
    img, m = sy.textured_square(64, side=12, color=tuple(color))
    res = optimize(img, m, "warp", RunConfig(iters=500))
    before, after = in_mask_saliency(img, m), in_mask_saliency(res.image, m)
    red = 100 * (before - after) / before

    def area(x):
        return int((np.linalg.norm(x - color, axis=2) < 0.3).sum())

    a0, a1 = area(img), area(res.image)
    ok = red >= 40.0 and a1 < a0
    record(4, ok, f"reduction {red:.1f}%, square area {a0} -> {a1} px")


# 5. adversarial noise ------------------------------------------------------------


def test_criterion_5_adversarial_noise(disk128):
    img, m = disk128
    res = optimize(img, m, "noise", RunConfig(iters=500))
    before, after = in_mask_saliency(img, m), in_mask_saliency(res.image, m)
    red = 100 * (before - after) / before
    in_mse = float(np.mean((res.image - img)[m > 0] ** 2))
    ok = red >= 50.0 and in_mse < 0.05
    record(5, ok, f"reduction {red:.1f}%, in-mask MSE {in_mse:.4f}")


# 6. saliency increase -------------------------------------------------------------


def test_criterion_6_saliency_increase(disk128):
    img, m = disk128
    res = optimize(img, m, "recolor", RunConfig(iters=500, target=TargetMap.constant(1.0)))
    before, after = in_mask_saliency(img, m), in_mask_saliency(res.image, m)
    inc = 100 * (after - before) / before
    record(6, inc >= 30.0, f"increase {inc:.1f}% ({before:.3f} -> {after:.3f})")


# 7. pipeline correctness ------------------------------------------------------------


def test_criterion_7_pipeline():
    problems = []
    for seed in range(50):
        s = random_map(seed)
        threshold = 0.3 + 0.4 * (seed / 49)
        got = [r.mask > 0 for r in pl.segment_distractors(s, threshold)]
        want = oracle_regions(s, threshold)
        if len(got) != len(want) or not all(np.array_equal(g, w) for g, w in zip(got, want)):
            problems.append(f"segmentation seed {seed}")

    rng = np.random.default_rng(11)
    for _ in range(20):
        before, after = rng.random((9, 9)), rng.random((9, 9))
        m = (rng.random((9, 9)) > 0.5).astype(float)
        num = den = 0.0
        for i in range(9):
            for j in range(9):
                if m[i, j]:
                    num += before[i, j] - after[i, j]
                    den += before[i, j]
        if abs(pl.reduction_from_maps(before, after, m) - 100 * num / den) > 1e-9:
            problems.append("reduction metric")

    runs = [
        (sy.textured_square(48, side=10, color=(1.0, 0.0, 0.0)), ["recolor", "warp"]),
        (sy.disk_image(40), ["noise", "recolor"]),
        (sy.two_blobs(48), ["recolor", "noise", "warp"]),
    ]
    for (img, m), cands in runs:
        s = cv.predict_saliency(dc.const(img)).data
        ys, xs = np.nonzero(m)
        region = pl.DistractorRegion(m, (ys.min(), xs.min(), np.ptp(ys) + 1, np.ptp(xs) + 1), float(s[m > 0].max()))
        plan = pl.select_operator(img, region, cands, RunConfig(iters=20))
        scores = [plan.traces[f"{i}:{t}"].best.mask_mean_saliency for i, t in enumerate(cands)]
        if plan.operator != cands[int(np.argmin(scores))] or plan.achieved_saliency != min(scores):
            problems.append(f"selection {cands}")
    record(7, not problems, "50 maps, 20 metric checks, 3 selections" + (f"; {problems}" if problems else ""))


# 8. color correctness ------------------------------------------------------------


def test_criterion_8_color():
    x = np.random.default_rng(8).random((100, 100, 3))
    back = cv.lab_to_rgb(cv.rgb_to_lab(dc.const(x))).data
    err = float(np.abs(back - x).max())
    white = cv.rgb_to_lab(dc.const(np.ones((1, 1, 3)))).data[0, 0]
    black = cv.rgb_to_lab(dc.const(np.zeros((1, 1, 3)))).data[0, 0]
    anchor = max(np.abs(white - [100, 0, 0]).max(), np.abs(black).max())
    record(8, err < 1e-3 and anchor < 1e-2, f"round trip {err:.1e}, anchors {anchor:.1e}")


# 9. determinism ------------------------------------------------------------------


def _tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path, monkeypatch):
    img, m = sy.two_blobs(64)
    imageio.write_png(tmp_path / "img.png", img)
    imageio.write_png(tmp_path / "mask.png", (m * 255).astype(np.uint8))
    frames = tmp_path / "frames"
    frames.mkdir()
    for i in range(2):
        imageio.write_png(frames / f"{i}.png", img)
    i, k = tmp_path / "img.png", tmp_path / "mask.png"
    commands = {
        "edit recolor": ["edit", "--image", i, "--mask", k, "--iters", 8, "--seed", 3],
        "edit warp": ["edit", "--image", i, "--mask", k, "--operator", "warp", "--iters", 8],
        "edit convnet": ["edit", "--image", i, "--mask", k, "--operator", "convnet", "--iters", 3, "--seed", 9],
        "edit noise": ["edit", "--image", i, "--mask", k, "--operator", "noise", "--iters", 8],
        "edit baseline": ["edit", "--image", i, "--mask", k, "--operator", "baseline"],
        "auto": ["auto", "--image", i, "--frames", frames, "--candidates", "recolor,warp,noise", "--iters", 6],
        "inspect": ["inspect", "--image", i],
    }
    differing = []
    for name, args in commands.items():
        outs = []
        out = tmp_path / name.replace(" ", "_")
        for run in range(2):
            if name == "auto":
                monkeypatch.setenv("SALGRAD_THREADS", str(run + 1))
            assert cli.main([str(a) for a in args + ["--out", out]]) == 0
            outs.append(_tree(out))
        if outs[0] != outs[1]:
            differing.append(name)
    monkeypatch.delenv("SALGRAD_THREADS", raising=False)

    printed = []
    for _ in range(2):
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            cli.main(["eval", "--original", str(i), "--edited", str(tmp_path / "auto" / "edited.png"), "--mask", str(k)])
        printed.append(buf.getvalue())
    if printed[0] != printed[1] or not printed[0]:
        differing.append("eval")
    record(9, not differing, f"{len(commands) + 1} commands repeated" + (f"; differ: {differing}" if differing else ""))


# 10. convnet schedule ------------------------------------------------------------


def test_criterion_10_convnet():
    suite = {
        "disk": sy.disk_image(64),
        "square": sy.textured_square(64, side=12),
        "blobs": sy.two_blobs(64),
    }
    psnrs = {}
    for name, (img, _) in suite.items():
        params = ops.convnet_init(seed=0)
        ops.convnet_pretrain(img, params)
        psnrs[name] = ops.psnr(ops.convnet_forward(dc.const(img), params).data, img)

    img, m = suite["disk"]
    res = optimize(img, m, "convnet", RunConfig(iters=500))
    before, after = in_mask_saliency(img, m), in_mask_saliency(res.image, m)
    red = 100 * (before - after) / before
    ok = min(psnrs.values()) > 40.0 and red >= 30.0
    psnr_text = ", ".join(f"{k} {v:.1f}" for k, v in psnrs.items())
    record(10, ok, f"pretrain PSNR dB: {psnr_text}; reduction {red:.1f}%")
