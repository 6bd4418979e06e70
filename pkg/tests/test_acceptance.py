"""Release acceptance checklist, one test per gate criterion.

Every test exercises the public API end to end and finishes by printing a
single ``[C..] PASS`` or ``[C..] FAIL`` line, so a verbose run reads as a
checklist. The assertions pin the tolerances that define each criterion;
nothing here relaxes what the unit suites already enforce.

The two training criteria (C6, C7) really train models at the default desk
scale and dominate the suite's wall time (roughly fifteen minutes together).
"""

import json
import time

import numpy as np
import pytest

import oracles
from amaa.attention import (SimamConfig, aggregate_residual, se_block_3d,
                            simam_3d, simam_energy)
from amaa.autodiff import Var
from amaa.camera import CameraGrid, build_sample_plan, flosp_lift
from amaa.cli import main
from amaa.config import default_run_config
from amaa.errors import DataFormatError
from amaa.experiments import (check_names, gradcheck_suite, median_miou,
                              run_ablation, run_alpha_sweep)
from amaa.fusion import GateParams, afg_fuse, afg_gate
from amaa.losses import (LossConfig, affinity_loss, consistency_loss,
                         loss_total, weighted_cross_entropy)
from amaa.metrics import mean_iou
from amaa.model import ModelConfig, build_model, variant_config
from amaa.volume_io import load_volume, save_volume
from amaa.volume_ops import softmax_channels

# Published NYUv2 per-class IoUs (ceiling, floor, wall, window, chair, bed,
# sofa, table, tv, furniture, objects) for the two reference rows.
MONOSCENE_IOUS = [8.89, 93.50, 12.06, 12.57, 13.72, 48.19, 36.11, 15.13,
                  15.22, 27.96, 12.94]
LMSCNET_IOUS = [4.49, 88.41, 4.63, 0.25, 3.94, 32.03, 15.44, 6.57, 0.02,
                14.51, 4.39]

SIGMOID_2 = 0.8807970779778823  # sigmoid(2), the constant-input plateau

FIXTURE_HEX = ("56564f5831010001000000010000000100000002000000"
               "000000000000f03f0000000000000040"
               "5f89a37b")


def _verdict(tag, problems, detail):
    ok = not problems
    note = detail if ok else "; ".join(problems)
    print(f"[{tag}] {'PASS' if ok else 'FAIL'}: {note}")
    assert ok, f"{tag}: {note}"


def _scalar(x):
    return float(np.asarray(x))


def _micro_grid():
    return CameraGrid(fx=10.0, fy=10.0, cx=4.0, cy=4.0,
                      image_rows=8, image_cols=8,
                      dims=(4, 4, 4), voxel_size=0.25,
                      origin=(-0.5, -0.5, 0.4))


def _random_geometry(rng):
    return CameraGrid(
        fx=rng.uniform(20, 60), fy=rng.uniform(20, 60),
        cx=rng.uniform(10, 22), cy=rng.uniform(8, 16),
        image_rows=24, image_cols=32,
        dims=(5, 4, 6), voxel_size=rng.uniform(0.05, 0.2),
        origin=(rng.uniform(-0.4, -0.2), rng.uniform(-0.3, -0.1),
                rng.uniform(0.1, 0.4)))


def test_c01_published_row_means():
    # The mIoU aggregation rule must reproduce the two published row means.
    problems = []
    mono = mean_iou(MONOSCENE_IOUS)
    lms = mean_iou(LMSCNET_IOUS)
    if abs(mono - 26.94) >= 0.005:
        problems.append(f"MonoScene row mean {mono:.4f} != 26.94")
    if abs(lms - 15.88) >= 0.005:
        problems.append(f"LMSCNet row mean {lms:.4f} != 15.88")
    _verdict("C1 published-rows", problems,
             f"row means {mono:.4f} / {lms:.4f} within 0.005")


def test_c02_gradient_audit():
    """Every registered check passes at 1e-4 for five seeds, inside 2 min."""
    t0 = time.monotonic()
    results = gradcheck_suite(seeds=(0, 1, 2, 3, 4), h=1e-3, tolerance=1e-4)
    wall = time.monotonic() - t0
    problems = []
    failed = [r for r in results if not r.passed]
    if failed:
        problems.append("failing checks: " + ", ".join(
            f"{r.name}/s{r.seed}={r.max_error:.2e}" for r in failed[:5]))
    names = {r.name for r in results}
    if names != set(check_names()):
        problems.append(f"coverage gap: {sorted(set(check_names()) - names)}")
    if "micro_model" not in names:
        problems.append("end-to-end micro model check missing")
    if len(results) != 5 * len(check_names()):
        problems.append(f"expected {5 * len(check_names())} runs, "
                        f"got {len(results)}")
    if wall >= 120.0:
        problems.append(f"suite took {wall:.1f}s, budget 120s")
    worst = max(r.max_error for r in results)
    _verdict("C2 gradient-audit", problems,
             f"{len(results)} checks, worst rel err {worst:.2e} < 1e-4, "
             f"{wall:.1f}s")


def test_c03_attention_plateau():
    """Constant input hits the sigmoid(2) plateau; bounds hold elsewhere."""
    cfg = SimamConfig()
    problems = []
    worst_plateau = 0.0
    for seed in range(30):
        rng = np.random.default_rng(seed)
        shape = (int(rng.integers(1, 5)),) + tuple(rng.integers(2, 6, size=3))
        flat = np.full(shape, rng.normal())
        att, _ = simam_3d(flat, cfg)
        worst_plateau = max(worst_plateau,
                            float(np.max(np.abs(np.asarray(att) - SIGMOID_2))))
        vol = rng.normal(size=shape)
        energy = np.asarray(simam_energy(vol, cfg))
        att, _ = simam_3d(vol, cfg)
        att = np.asarray(att)
        if energy.min() < 0.5:
            problems.append(f"seed {seed}: energy {energy.min()} below 0.5")
        if att.min() <= 0.5 or att.max() > SIGMOID_2 + 1e-12:
            problems.append(f"seed {seed}: attention range "
                            f"[{att.min()}, {att.max()}] escapes "
                            f"(0.5, sigmoid(2)]")
    if worst_plateau > 1e-12:
        problems.append(f"plateau off by {worst_plateau:.2e} > 1e-12")
    _verdict("C3 attention-plateau", problems,
             f"30 volumes, plateau err {worst_plateau:.2e}, "
             f"energies >= 0.5, attention in (0.5, sigmoid(2)]")


def test_c04_identity_wirings():
    """Zero residual scale and zero fusion strength are bit-exact no-ops."""
    problems = []
    rng = np.random.default_rng(0)
    zero = Var(np.array(0.0))
    same = 0
    for i in range(100):
        c = int(rng.integers(2, 6))
        shape = (c,) + tuple(rng.integers(2, 5, size=3))
        vol = rng.normal(size=shape)
        out = aggregate_residual(
            Var(vol), Var(rng.normal(size=shape)), Var(rng.normal(size=shape)),
            Var(rng.normal(size=(c, 2 * c, 1, 1, 1))),
            Var(rng.normal(size=c)), zero)
        if np.asarray(out).tobytes() == vol.tobytes():
            same += 1
    if same != 100:
        problems.append(f"zero-scale aggregation broke identity on "
                        f"{100 - same}/100 volumes")

    grid = _micro_grid()
    base = dict(n_classes=2, widths=(2, 3), n_scales=2, seed=5)
    gated_off = build_model(variant_config(ModelConfig(alpha=0.0, **base), "D"),
                            grid)
    no_gate = build_model(variant_config(ModelConfig(**base), "C"), grid)
    matched = 0
    for _ in range(10):
        image = rng.random((3, 8, 8))
        a = np.asarray(gated_off.forward(image)).tobytes()
        b = np.asarray(no_gate.forward(image)).tobytes()
        matched += a == b
    if matched != 10:
        problems.append(f"alpha=0 pipeline differed from the gate-free "
                        f"variant on {10 - matched}/10 inputs")
    _verdict("C4 identity-wirings", problems,
             "zero-scale aggregation and alpha=0 fusion both bit-exact "
             "(100 volumes, 10 full forwards)")


def test_c05_equation_chains():
    """Each processing chain matches its scalar re-derivation to 1e-12."""
    cfg = SimamConfig()
    problems = []

    def close(tag, got, want, seed):
        got = np.asarray(got)
        err = float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0)))
        if not np.allclose(got, want, rtol=1e-12, atol=1e-12):
            problems.append(f"{tag} seed {seed}: err {err:.2e}")
        return err

    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(4, 3, 2, 3))
        w1 = rng.normal(size=(2, 4))
        w2 = rng.normal(size=(4, 2))
        s, out = se_block_3d(Var(v), w1, w2)
        want_s, want_out = oracles.se_block_ref(v, w1, w2)
        worst = max(worst, close("se scales", s, want_s, seed),
                    close("se output", out, want_out, seed))

        att, mod = simam_3d(Var(v), cfg)
        want_att, want_mod = oracles.simam_ref(v, cfg.lam, cfg.window)
        worst = max(worst, close("simam attention", att, want_att, seed),
                    close("simam output", mod, want_mod, seed))

        w_mix = rng.normal(size=(4, 8, 1, 1, 1))
        b_mix = rng.normal(size=4)
        gamma = rng.normal()
        agg = aggregate_residual(Var(v), out, mod, Var(w_mix), Var(b_mix),
                                 Var(np.array(gamma)))
        want_agg = oracles.aggregate_ref(v, want_out, want_mod, w_mix, b_mix,
                                         gamma)
        worst = max(worst, close("aggregation", agg, want_agg, seed))

        f_dec = rng.normal(size=(2, 2, 2, 3))
        v_enc = rng.normal(size=(2, 2, 2, 3))
        gate = GateParams(weight=Var(rng.normal(size=(1, 4, 1, 1, 1))),
                          bias=Var(rng.normal(size=1)))
        alpha = rng.uniform(0.1, 1.2)
        mask = afg_gate(Var(f_dec), Var(v_enc), gate)
        fused = afg_fuse(Var(f_dec), Var(v_enc), gate, alpha)
        want_mask, want_fused = oracles.afg_ref(
            f_dec, v_enc, gate.weight.value, gate.bias.value, alpha)
        worst = max(worst, close("gate mask", mask, want_mask, seed),
                    close("gated fusion", fused, want_fused, seed))

        geo = _random_geometry(rng)
        feat = rng.normal(size=(2, 12, 16))
        for sampling in ("nearest", "bilinear"):
            got = flosp_lift(feat, geo, sampling=sampling)
            want = oracles.lift_ref(feat, geo.fx, geo.fy, geo.cx, geo.cy,
                                    geo.image_rows, geo.image_cols, geo.origin,
                                    geo.voxel_size, geo.dims, sampling=sampling)
            worst = max(worst, close(f"{sampling} lift", got, want, seed))

        logits = rng.uniform(-3, 3, size=(3, 2, 3, 2))
        probs = np.asarray(softmax_channels(Var(logits)))
        worst = max(worst, close("softmax", probs,
                                 oracles.softmax_ref(logits), seed))
        labels = rng.integers(0, 3, size=(2, 3, 2))
        weights = rng.uniform(0.2, 5.0, size=3)
        pairs = [
            ("cross-entropy",
             _scalar(weighted_cross_entropy(probs, labels, weights)),
             oracles.weighted_ce_ref(probs, labels, weights)),
            ("affinity", _scalar(affinity_loss(probs, labels)),
             oracles.affinity_ref(probs, labels)),
            ("consistency", _scalar(consistency_loss(probs)),
             oracles.consistency_ref(probs)),
        ]
        for tag, got, want in pairs:
            err = abs(got - want)
            worst = max(worst, err)
            if err >= 1e-12:
                problems.append(f"{tag} seed {seed}: err {err:.2e}")
        terms = loss_total(probs, labels, weights, LossConfig())
        total = sum(want for _, _, want in pairs[:2]) + 0.1 * pairs[2][2]
        err = abs(_scalar(terms["total"]) - total)
        worst = max(worst, err)
        if err >= 1e-12:
            problems.append(f"total seed {seed}: err {err:.2e}")
    _verdict("C5 equation-chains", problems,
             f"20 seeds x 12 chains, worst err {worst:.2e} <= 1e-12")


def test_c06_ablation_directions():
    """Desk-scale ablation and gate-strength sweep point the right way.

    Trains the four variants over three seeds plus a six-point strength
    sweep on the default desk dataset, then checks the medians: the full
    method must not trail the baseline, and disabling the skip gate must
    trail the best non-zero strength. Runs are deterministic, so this is
    reproducible rather than flaky, but it is the slow part of the suite.
    """
    t0 = time.monotonic()
    records = run_ablation(default_run_config(), seeds=(0, 1, 2))
    sweep = run_alpha_sweep(default_run_config(), seed=0)
    wall = time.monotonic() - t0

    problems = []
    med = {v: median_miou(records, v) for v in "ABCD"}
    if med["D"] < med["A"]:
        problems.append(f"full method {med['D']:.4f} trails "
                        f"baseline {med['A']:.4f}")
    off = next(r for r in sweep if r.alpha == 0.0).report.miou
    best_on = max(r.report.miou for r in sweep if r.alpha > 0.0)
    if not off < best_on:
        problems.append(f"alpha=0 at {off:.4f} does not trail best "
                        f"non-zero alpha at {best_on:.4f}")
    stuck = [r.label for r in records if r.logs[-1].total >= r.logs[0].total]
    if stuck:
        problems.append(f"loss failed to decrease for {stuck}")
    if wall >= 1800.0:
        problems.append(f"took {wall:.0f}s, budget 1800s")
    _verdict("C6 ablation-directions", problems,
             f"medians A={med['A']:.4f} <= D={med['D']:.4f}, "
             f"alpha0={off:.4f} < best={best_on:.4f}, "
             f"18 runs in {wall:.0f}s")


def test_c07_train_determinism(tmp_path):
    """Two identical CLI training runs agree byte for byte."""
    t0 = time.monotonic()
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        assert main(["train", "--out", str(out)]) == 0
        outs.append(out)
    wall = time.monotonic() - t0

    problems = []
    for artifact in ("params.vpar", "report.json", "train_log.json"):
        a = (outs[0] / artifact).read_bytes()
        b = (outs[1] / artifact).read_bytes()
        if a != b:
            problems.append(f"{artifact} differs between runs")
    if wall >= 600.0:
        problems.append(f"took {wall:.0f}s, budget 600s")
    _verdict("C7 train-determinism", problems,
             f"params, report and log byte-identical, {wall:.0f}s")


def test_c08_volume_container(tmp_path):
    """A thousand round trips, the frozen byte fixture, and CRC rejection."""
    problems = []
    rng = np.random.default_rng(0)
    path = tmp_path / "probe.vox"
    bad = 0
    for i in range(1000):
        shape = tuple(int(n) for n in rng.integers(1, 5, size=4))
        if i % 3 == 2:
            vol = rng.integers(0, 7, size=shape)
            save_volume(path, vol)
            back = load_volume(path)
            ok = back.dtype == np.uint16 and np.array_equal(back, vol)
        else:
            vol = rng.normal(size=shape)
            save_volume(path, vol)
            ok = load_volume(path).tobytes() == vol.tobytes()
        bad += not ok
    if bad:
        problems.append(f"{bad}/1000 round trips not bit-exact")

    save_volume(path, np.array([[[[1.0, 2.0]]]]))
    blob = path.read_bytes()
    if blob.hex() != FIXTURE_HEX:
        problems.append("43-byte fixture drifted from the frozen layout")

    flipped = bytearray(blob)
    flipped[25] ^= 0x40
    path.write_bytes(bytes(flipped))
    try:
        load_volume(path)
        problems.append("corrupted payload was accepted")
    except DataFormatError as exc:
        if "CRC" not in str(exc):
            problems.append(f"corruption surfaced as {exc!r}, not a CRC error")
    path.write_bytes(blob[:-3])
    with pytest.raises(DataFormatError):
        load_volume(path)
    _verdict("C8 volume-container", problems,
             "1000 bit-exact round trips, frozen fixture intact, "
             "corruption rejected")


def test_c09_lifting_geometry():
    """Lifting is linear, shares rays in nearest mode, zeros the invalid."""
    problems = []
    shared_total = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        geo = _random_geometry(rng)
        f1 = rng.normal(size=(2, 12, 16))
        f2 = rng.normal(size=(2, 12, 16))
        a, b = rng.uniform(-2, 2, size=2)
        lhs = np.asarray(flosp_lift(a * f1 + b * f2, geo))
        rhs = (a * np.asarray(flosp_lift(f1, geo))
               + b * np.asarray(flosp_lift(f2, geo)))
        if not np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12):
            problems.append(f"seed {seed}: lift is not linear")

        plan = build_sample_plan(geo, (12, 16), sampling="nearest")
        out = np.asarray(flosp_lift(f1, geo, sampling="nearest", plan=plan))
        flat = out.reshape(2, -1)
        if flat[:, ~plan.valid.ravel()].any():
            problems.append(f"seed {seed}: invalid voxels got features")
        by_pixel = {}
        for k, pix in zip(np.flatnonzero(plan.valid), plan.indices[0]):
            by_pixel.setdefault(int(pix), []).append(k)
        for voxels in by_pixel.values():
            for k in voxels[1:]:
                shared_total += 1
                if not np.array_equal(flat[:, k], flat[:, voxels[0]]):
                    problems.append(f"seed {seed}: voxels on one ray differ")
    if shared_total == 0:
        problems.append("no geometry exercised ray sharing")

    # Grid straddling the camera plane: two slabs behind it, one projecting
    # wide of the image; all three must come back as exact zeros.
    geo = CameraGrid(fx=30.0, fy=30.0, cx=16.0, cy=12.0, image_rows=24,
                     image_cols=32, dims=(4, 2, 2), voxel_size=1.0,
                     origin=(-1.0, -1.0, -2.0))
    out = np.asarray(flosp_lift(np.full((2, 24, 32), 5.0), geo))
    if out[:, :3].any():
        problems.append("behind-camera or out-of-image voxels are non-zero")
    _verdict("C9 lifting-geometry", problems,
             f"20 geometries linear to 1e-12, {shared_total} ray-sharing "
             f"pairs identical, invalid voxels exactly zero")


def test_c10_loss_floor():
    """Loss terms never go negative and vanish on a perfect prediction."""
    problems = []
    cfg = LossConfig()
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_classes = int(rng.integers(3, 6))
        spatial = tuple(rng.integers(2, 5, size=3))
        logits = rng.uniform(-3, 3, size=(n_classes,) + spatial)
        probs = np.asarray(softmax_channels(Var(logits)))
        labels = rng.integers(0, n_classes, size=spatial)
        weights = rng.uniform(0.2, 5.0, size=n_classes)
        terms = loss_total(probs, labels, weights, cfg)
        for tag in ("ce", "affinity", "consistency", "total"):
            if _scalar(terms[tag]) < 0.0:
                problems.append(f"seed {seed}: {tag} = {_scalar(terms[tag])}")

    # Spatially constant logits give constant occupancy, where the local
    # agreement term must vanish identically, not just approximately.
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        logits = np.broadcast_to(rng.normal(size=(4, 1, 1, 1)),
                                 (4, 3, 2, 3)).copy()
        probs = np.asarray(softmax_channels(Var(logits)))
        got = _scalar(consistency_loss(probs))
        if got != 0.0:
            problems.append(f"constant occupancy seed {seed}: "
                            f"consistency {got!r} != 0.0")

    worst_total = 0.0
    for seed in range(10):
        rng = np.random.default_rng(300 + seed)
        labels = rng.integers(1, 4, size=(3, 2, 3))
        probs = np.zeros((4, 3, 2, 3))
        np.put_along_axis(probs, labels[None], 1.0, axis=0)
        total = _scalar(loss_total(probs, labels, np.ones(4), cfg)["total"])
        worst_total = max(worst_total, abs(total))
    if worst_total > 1e-9:
        problems.append(f"perfect prediction keeps total at {worst_total:.2e}")
    _verdict("C10 loss-floor", problems,
             f"terms >= 0 on 100 inputs, exact zero agreement on constant "
             f"occupancy, perfect-prediction total {worst_total:.2e} <= 1e-9")
