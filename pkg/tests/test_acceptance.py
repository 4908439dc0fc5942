"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The trend criteria (6-8) share memoised networks from ``toy_world``;
their thresholds are applied to medians over three pipeline seeds.
"""

import json
import time

import numpy as np
import pytest
import toy_world as toy
from conftest import record

from todsynth import flow
from todsynth import numerics as nx
from todsynth.cli import main as cli_main
from todsynth.config import load_config
from todsynth.model import SCHEMES, FlowNet, FlowNetConfig
from todsynth.scenes import SceneConfig, generate_dataset
from todsynth.segment import SegNet, SegNetConfig, compute_metrics, seg_loss, train_seg
from todsynth.synthpipe import frechet_distance
pytestmark = pytest.mark.acceptance


def _verdict(n, ok, detail):
    record(n, ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {n} failed: {detail}"


# -- 1. gradient correctness ------------------------------------------------------
def _sampled_rel_error(build, tensors, rng, per_tensor=2, h=1e-5):
    grads = nx.grad_of(build(), tensors)
    got, want = [], []
    for t, g in zip(tensors, grads):
        idx = rng.choice(t.size, size=min(per_tensor, t.size), replace=False)
        fd = nx.finite_difference(lambda: build().data, t.data, h=h, indices=idx)
        got.append(g.reshape(-1)[idx])
        want.append(fd.reshape(-1)[idx])
    return nx.rel_error(np.concatenate(got), np.concatenate(want))


def _random_flow_case(rng):
    patch = int(rng.choice([2, 4]))
    heads = int(rng.choice([1, 2]))
    cfg = FlowNetConfig(image_size=8, num_classes=int(rng.integers(2, 5)), d_model=4 * heads,
                        heads=heads, depth=int(rng.integers(1, 3)), patch=patch,
                        scheme=str(rng.choice(SCHEMES)), ff_mult=int(rng.integers(1, 3)))
    net = FlowNet(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    B = 2
    z = rng.normal(size=(B, 3, 8, 8))
    mask = rng.integers(0, cfg.num_classes, size=(B, 8, 8))
    hist = np.stack([np.bincount(m.ravel(), minlength=cfg.num_classes) / 64 for m in mask])
    t = rng.uniform(size=B)
    target = rng.normal(size=z.shape)
    return net, lambda: nx.mse(net(z, mask, hist, t), target)


def _random_seg_case(rng):
    K = int(rng.integers(2, 6))
    net = SegNet(SegNetConfig(num_classes=K, width=int(rng.choice([2, 4]))), seed=int(rng.integers(1 << 30)),
                 dtype=np.float64)
    x = nx.Tensor(rng.normal(size=(2, 3, 8, 8)), dtype=np.float64, requires_grad=True)
    mask = rng.integers(0, K, size=(2, 8, 8))
    mask[0, 0, :3] = nx.IGNORE_INDEX
    return net, x, lambda: seg_loss(net, x, mask)


PRIMITIVES = {
    "matmul": lambda x, w: nx.matmul(x, w),
    "softmax": lambda x, w: nx.softmax(nx.matmul(x, w), axis=-1),
    "log_softmax": lambda x, w: nx.log_softmax(nx.matmul(x, w), axis=0),
    "silu_tanh": lambda x, w: nx.tanh(nx.silu(nx.matmul(x, w))),
    "exp_log": lambda x, w: nx.log(nx.exp(nx.matmul(x, w) * 0.2) + 1.0),
    "sqrt_div": lambda x, w: nx.sqrt(x * x + 1.0) / (nx.sigmoid(x) + 0.5),
    "mean_sum": lambda x, w: nx.mean(x, axis=1, keepdims=True) * nx.tsum(x * x, axis=0),
    "sin_cos_pow": lambda x, w: nx.sin(x) * nx.cos(x) + (x * x + 1.0) ** 1.5,
    "concat_split": lambda x, w: nx.split(nx.concat([x, x * 3.0], 1), [2, 6], 1)[1] ** 2,
    "getitem_transpose": lambda x, w: nx.transpose(x)[1:, ::2] * 2.0,
}


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_net = 0.0
    for i in range(50):
        if i % 2 == 0:
            net, build = _random_flow_case(rng)
            err = _sampled_rel_error(build, net.parameters(), rng)
        else:
            net, x, build = _random_seg_case(rng)
            err = _sampled_rel_error(build, net.parameters() + [x], rng)
        worst_net = max(worst_net, err)
    worst_prim = 0.0
    for name, op in PRIMITIVES.items():
        x = nx.Tensor(rng.uniform(0.3, 1.2, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)),
                      dtype=np.float64, requires_grad=True)
        w = nx.Tensor(rng.normal(size=(4, 5)), dtype=np.float64, requires_grad=True)
        weights = rng.normal(size=op(x, w).shape)
        build = lambda op=op, x=x, w=w, weights=weights: nx.tsum(op(x, w) * weights)  # noqa: E731
        grads = nx.grad_of(build(), [x, w])
        for leaf, g in zip((x, w), grads):
            fd = nx.finite_difference(lambda: build().data, leaf.data, h=1e-5)
            worst_prim = max(worst_prim, nx.rel_error(g, fd))
    elapsed = time.perf_counter() - t0
    ok = worst_net < 1e-3 and worst_prim < 1e-4 and elapsed < 120
    _verdict(1, ok, f"worst net rel err {worst_net:.2e} (<1e-3), primitives {worst_prim:.2e} (<1e-4), "
                    f"{elapsed:.0f}s (<120s)")


# -- 2. flow algebra --------------------------------------------------------------
def test_criterion_2_flow_algebra():
    rng = np.random.default_rng(7)
    z0, z1 = rng.normal(size=(2, 4, 3, 16, 16))
    worst = 0.0
    for t in np.round(np.arange(0.1, 1.0001, 0.1), 10):
        z_t = flow.interpolate(z0, z1, t)
        worst = max(worst, float(np.abs(flow.presynth(z_t, t, z1 - z0) - z0).max()))
    endpoint = 0.0
    for n in (1, 2, 3, 5, 16, 23, 50, 100):
        out = flow.euler_sample(lambda z, m, c, t: z1 - z0, z1, None, None, n)
        endpoint = max(endpoint, float(np.abs(out - z0).max()))
    _verdict(2, worst < 1e-6 and endpoint < 1e-6,
             f"presynth/interpolate max err {worst:.1e}, constant-field endpoint max err {endpoint:.1e} (<1e-6)")


# -- 3. residual decomposition -------------------------------------------------------
def test_criterion_3_residual_decomposition():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(6, 6)) * 0.3

    def oracle(z, m, c, t):
        return np.tanh(z @ A) + np.cos(3 * t) * z

    def prior(z, m, c, t):
        return 0.5 * z - t

    def recombined(z, m, c, t):
        vp = prior(z, m, c, t)
        return vp + (oracle(z, m, c, t) - vp)

    z1 = rng.normal(size=(128, 6))
    worst = 0.0
    for n in (4, 16, 23):
        ref = z1.copy()
        traj_ref, traj = [ref.copy()], [z1.copy()]
        z = z1.copy()
        for i in range(n, 0, -1):
            ref = ref + oracle(ref, None, None, i / n) * (-1.0 / n)
            z = z + recombined(z, None, None, i / n) * (-1.0 / n)
            traj_ref.append(ref.copy())
            traj.append(z.copy())
        worst = max(worst, max(float(np.abs(a - b).max()) for a, b in zip(traj, traj_ref)))
        worst = max(worst, float(np.abs(flow.euler_sample(recombined, z1, None, None, n) - ref).max()))
    _verdict(3, worst < 1e-6, f"max trajectory deviation {worst:.1e} (<1e-6)")


# -- 4. CRFM descent -----------------------------------------------------------------
def test_criterion_4_crfm_descent():
    t0 = time.perf_counter()
    cfg = SceneConfig(size=16, regions=(2, 4), seed=21)
    data = generate_dataset(cfg, 96)
    seg = train_seg(data, steps=150, width=8, seed=0)
    rng = np.random.default_rng(4)
    wins, noop_exact = 0, True
    for trial in range(100):
        s = data[trial % len(data)]
        z1 = rng.standard_normal(s.image.shape).astype(np.float32)
        t = float(rng.uniform(0.3, 1.0))
        z_t = flow.interpolate(s.image, z1, t).astype(np.float32)
        # an imperfect velocity estimate: the exact one plus Gaussian error
        v = (z1 - s.image + 0.5 * rng.standard_normal(s.image.shape)).astype(np.float32)
        same, ce0, g = flow.crfm_rectify(v, z_t, t, s.mask, seg, 0.0)
        noop_exact &= same.tobytes() == v.tobytes()
        alpha = 0.1 * np.linalg.norm(v) / max(np.linalg.norm(g), 1e-12)
        v_rect, _, _ = flow.crfm_rectify(v, z_t, t, s.mask, seg, alpha)
        _, ce1, _ = flow.crfm_rectify(v_rect, z_t, t, s.mask, seg, 0.0)
        wins += ce1 < ce0
    elapsed = time.perf_counter() - t0
    ok = wins >= 90 and noop_exact and elapsed < 300
    _verdict(4, ok, f"CE reduced in {wins}/100 trials (>=90), alpha=0 bit-exact no-op: {noop_exact}, "
                    f"{elapsed:.0f}s")


# -- 5. metric oracles -------------------------------------------------------------
def _oracle_metrics(pred, gt, K):
    pred, gt = pred.ravel().tolist(), gt.ravel().tolist()
    n = len(gt)
    oa = sum(p == g for p, g in zip(pred, gt)) / n
    ious, accs = [], []
    for c in range(K):
        tp = sum(p == c and g == c for p, g in zip(pred, gt))
        fp = sum(p == c and g != c for p, g in zip(pred, gt))
        fn = sum(p != c and g == c for p, g in zip(pred, gt))
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
        if tp + fn:
            accs.append(tp / (tp + fn))
    return oa, sum(ious) / len(ious), sum(accs) / len(accs)


def test_criterion_5_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    exact = True
    for _ in range(200):
        K = int(rng.integers(2, 7))
        gt = rng.integers(0, K, size=(8, 8))
        pred = np.where(rng.random((8, 8)) < 0.5, gt, rng.integers(0, K, size=(8, 8)))
        m = compute_metrics(pred, gt, K)
        exact &= (m.oa, m.miou, m.macc) == pytest.approx(_oracle_metrics(pred, gt, K), abs=1e-12)
    hand = compute_metrics(np.array([[0, 1], [1, 1]]), np.array([[0, 1], [0, 1]]), 2)
    hand_ok = hand.oa == 0.75 and abs(hand.miou - 0.58333333) < 1e-6 and hand.macc == 0.75
    x, y = rng.normal(0, 1, 100_000), rng.normal(1, 1, 100_000)
    fd1 = frechet_distance(x, y)
    feats = rng.normal(size=(300, 8))
    other = rng.normal(0.2, 1.3, size=(250, 8))
    fd_self = frechet_distance(feats, feats)
    asym = abs(frechet_distance(feats, other) - frechet_distance(other, feats))
    elapsed = time.perf_counter() - t0
    ok = exact and hand_ok and abs(fd1 - 1.0) <= 0.05 and fd_self <= 1e-6 and asym <= 1e-6 and elapsed < 60
    _verdict(5, ok, f"oracle exact on 200 maps: {exact}, 2x2 case OA {hand.oa} mIoU {hand.miou:.4f}, "
                    f"1-D FD {fd1:.4f} (1 +/- 0.05), FD(X,X) {fd_self:.1e}, asymmetry {asym:.1e}")


# -- 6-8. trend criteria on the toy pipeline ------------------------------------------
def _median(values):
    return float(np.median(values))


@pytest.mark.filterwarnings("ignore::todsynth.flow.ModeCollapseWarning")
def test_criterion_6_crfm_step_trend():
    t0 = time.perf_counter()
    ks = (0, 2, 4, toy.STEPS // 2, toy.STEPS)
    table = {k: [toy.cell(s, "tri", k)[:2] for s in toy.SEEDS] for k in ks}
    miou = {k: _median([m for m, _ in table[k]]) for k in ks}
    fd = {k: _median([f for _, f in table[k]]) for k in ks}
    elapsed = time.perf_counter() - t0
    early = max(miou[2], miou[4]) > miou[0]
    late = all(fd[k] > fd[0] for k in ks if k >= toy.STEPS // 2)
    rows = ", ".join(f"k={k}: mIoU {miou[k]:.4f} FD {fd[k]:.3f}" for k in ks)
    _verdict(6, early and late and elapsed < 3600,
             f"medians over seeds {toy.SEEDS} ({rows}); early mIoU gain {early}, late FD rise {late}, "
             f"{elapsed / 60:.0f} min")


def test_criterion_7_scheme_trend():
    t0 = time.perf_counter()
    scores, kept = {}, {}
    for scheme in SCHEMES:
        runs = [toy.cell(s, scheme, 0) for s in toy.SEEDS]
        scores[scheme] = _median([r[0] for r in runs])
        kept[scheme] = min(r[2].kept_pixel for r in runs)
    elapsed = time.perf_counter() - t0
    ok = scores["tri"] >= scores["adapter"] and min(kept.values()) > 0 and elapsed < 5400
    detail = ", ".join(f"{k} {v:.4f}" for k, v in scores.items())
    _verdict(7, ok, f"median downstream mIoU ({detail}); all schemes synthesised: {min(kept.values()) > 0}, "
                    f"{elapsed / 60:.0f} min")


def test_criterion_8_guide_sensitivity():
    t0 = time.perf_counter()
    k = load_config().sampler.crfm_steps
    base = _median([toy.cell(s, "tri", 0, pixel_filter=False)[0] for s in toy.SEEDS])
    small = _median([toy.cell(s, "tri", k, 64, pixel_filter=False)[0] for s in toy.SEEDS])
    large = _median([toy.cell(s, "tri", k, 256, pixel_filter=False)[0] for s in toy.SEEDS])
    elapsed = time.perf_counter() - t0
    ok = large >= small and small > base and large > base and elapsed < 2700
    _verdict(8, ok, f"median mIoU: k=0 {base:.4f}, k={k} with 64-sample guide {small:.4f}, "
                    f"with 256-sample guide {large:.4f}; {elapsed / 60:.0f} min")


# -- 9. determinism ---------------------------------------------------------------
DETERMINISM_CONFIG = {
    "seed": 17,
    "scene": {"size": 16},
    "data": {"count": 60},
    "flow": {"train": {"steps": 150, "log_every": 50}},
    "seg": {"steps": 60},
    "sampler": {"steps": 8, "crfm_steps": 2},
    "downstream": {"steps": 60},
}


def test_criterion_9_determinism(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(DETERMINISM_CONFIG))
    outputs = []
    for run in ("a", "b"):
        work = tmp_path / run
        codes = [cli_main([cmd, "--config", str(cfg), "--workdir", str(work)])
                 for cmd in ("gen-data", "train-flow", "train-seg", "synth", "eval")]
        assert codes == [0] * 5, codes
        outputs.append({name: (work / name).read_bytes()
                        for name in ("train.tods", "val.tods", "flow_tri.todw", "seg.todw", "synth.tods",
                                     "synth_report.json", "metrics.json")})
    capsys.readouterr()
    differing = [k for k in outputs[0] if outputs[0][k] != outputs[1][k]]
    metrics = json.loads(outputs[0]["metrics.json"])
    _verdict(9, not differing, f"artifacts differing between runs: {differing or 'none'}; "
                               f"mIoU {metrics['mIoU']:.4f}, FD {metrics['FD']:.4f}")
