"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The heavy criteria (5, 6, 11, 12) drive the CLI on the bundled desk config
and share session-scoped run directories.
"""

import copy
import json
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
from conftest import TINY, tiny_model

from deskvla import autodiff as ad
from deskvla import config as config_mod
from deskvla.autodiff import Tensor
from deskvla.backbone import init_mot_from_dense
from deskvla.cli import _load_model, _streams, main
from deskvla.flow import euler_integrate, velocity_target
from deskvla.grpo import group_advantages, kl_k3, moving_average
from deskvla.intent import GuidanceConfig, cfg_velocity, drop_intents
from deskvla.layout import MODES, R, build_mask, build_sequence
from deskvla.memory import MemoryChannel, MemoryModule
from deskvla.metrics import RaterSet, RfsParams, ade, rfs, trust_region_rate
from deskvla.mot import GROUPINGS
from deskvla.rng import make_rng
from deskvla.scenario import IntentVocabulary
from deskvla.se2 import Pose2, align_points, stitch_chain
from deskvla.train import DataContext, joint_loss

RESULTS = {}


@contextmanager
def criterion(n, title):
    ok = False
    try:
        yield
        ok = True
    finally:
        RESULTS.setdefault(n, []).append((title, ok))
        print(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}")


# -- shared desk runs -------------------------------------------------------------

@pytest.fixture(scope="session")
def desk_cfg():
    return config_mod.load(config_mod.bundled())


def _cli(run_dir, *argv):
    assert main([*argv, "--run-dir", str(run_dir)]) == 0, argv


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """The bundled desk config trained and evaluated twice in separate run directories."""
    runs = []
    for name in ("a", "b"):
        rd = tmp_path_factory.mktemp(f"desk-{name}")
        t0 = time.perf_counter()
        _cli(rd, "train")
        _cli(rd, "eval")
        runs.append((rd, time.perf_counter() - t0))
    return runs


@pytest.fixture(scope="session")
def stream_run(tmp_path_factory):
    rd = tmp_path_factory.mktemp("desk-stream")
    for temporal in ("chunk", "stream", "stream+memory"):
        _cli(rd, "train", "--temporal", temporal)
    _cli(rd, "stream")
    return rd


# -- 1 ------------------------------------------------------------------------

# central differences with h=1e-5 on an O(1) loss cannot resolve gradients below this
ROUNDOFF = 1e-9


def test_criterion_01_gradient_fidelity(ctx, frames):
    with criterion(1, "joint loss gradient matches central differences"):
        t0 = time.perf_counter()
        m = tiny_model()
        # move the zero-initialised modulation output off zero so every path carries gradient
        m.memory.modulation.fc2.weight.data[:] = make_rng(7).normal(0, 0.1, m.memory.modulation.fc2.weight.shape)
        modes = ["vqa_first", "vqa_only", "action_first", "action_only"]
        prev = ctx.batch(frames)
        hidden_prev = Tensor(np.random.default_rng(1).normal(size=(len(frames), 6, TINY["hidden"])))

        def loss():
            ch = m.memory.new_channel()
            m.memory.write(ch, hidden_prev, prev.stamps, prev.times - 0.5)
            mem = m.memory.read(ch, prev.stamps, prev.times)
            return joint_loss(m, ctx, frames, modes, make_rng(0, "gc"), GuidanceConfig(), memory=mem)[0]

        ad.backward(loss())
        params = dict(m.named_parameters())
        grads = {k: p.grad.copy() for k, p in params.items() if p.grad is not None}
        assert set(grads) == set(params) - {"memory.null"}, sorted(set(params) - set(grads))
        pick = np.random.default_rng(0)
        h, worst = 1e-5, 0.0
        for k, p in params.items():
            if k not in grads:
                continue
            flat = p.data.reshape(-1)
            for i in pick.choice(flat.size, min(2, flat.size), replace=False):
                old = flat[i]
                with ad.no_grad():
                    flat[i] = old + h
                    fp = loss().item()
                    flat[i] = old - h
                    fm = loss().item()
                flat[i] = old
                c, a = (fp - fm) / (2 * h), grads[k].reshape(-1)[i]
                if max(abs(a), abs(c)) < ROUNDOFF:
                    # structurally zero (e.g. key biases under softmax): only roundoff remains
                    continue
                worst = max(worst, abs(a - c) / (abs(a) + abs(c)))
        elapsed = time.perf_counter() - t0
        print(f"  max rel error {worst:.2e} over {len(grads)} tensors, {elapsed:.1f}s")
        assert worst < 1e-4
        assert elapsed < 60


# -- 2 ------------------------------------------------------------------------

SPANS = {
    "vqa_first": {R.MEMORY: 1, R.VISION: 3, R.STATE: 1, R.QUESTION: 2, R.ANSWER: 2, R.ACTION: 3},
    "vqa_only": {R.MEMORY: 2, R.VISION: 3, R.STATE: 1, R.QUESTION: 3, R.ANSWER: 3},
    "action_first": {R.MEMORY: 1, R.VISION: 3, R.STATE: 1, R.ACTION: 3, R.QUESTION: 2, R.ANSWER: 2},
    "action_only": {R.MEMORY: 2, R.VISION: 5, R.STATE: 2, R.ACTION: 3},
}


def test_criterion_02_mask_law(batch, noise):
    with criterion(2, "invisible perturbations leave outputs unchanged; action_only == action_first"):
        m = tiny_model()
        rng = np.random.default_rng(0)
        for mode in sorted(MODES):
            spans = {r: Tensor(rng.normal(size=(1, n, TINY["hidden"]))) for r, n in SPANS[mode].items()}
            seq = build_sequence(spans, mode)
            assert len(seq) == 12
            mask = build_mask(seq.roles)
            base = m.forward(seq).data
            for j in range(12):
                emb = seq.embeddings.data.copy()
                emb[:, j] += rng.normal(size=TINY["hidden"])
                out = m.forward(type(seq)(**{**vars(seq), "embeddings": Tensor(emb)})).data
                for p in range(12):
                    same = np.array_equal(out[:, p], base[:, p])
                    assert same == (not mask[p, j]), (mode, p, j)
        t, eps = noise
        slow = m.embed(batch, "action_first", eps, t)
        fast = m.embed(batch, "action_only", eps, t)
        a0, a1 = slow.spans[R.ACTION]
        assert np.array_equal(m.forward(slow).data[:, a0:a1], m.forward(fast).data[:, a0:a1])


# -- 3 ------------------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 2, 5])
def test_criterion_03_flow_exactness(k):
    with criterion(3, f"exact field recovers x0 under Euler, K={k}"):
        rng = np.random.default_rng(k)
        x0, eps = rng.normal(size=(8, 20, 6)), rng.normal(size=(8, 20, 6))
        v = velocity_target(x0, eps)
        err = np.max(np.abs(euler_integrate(lambda x, t: v, eps, k).x - x0))
        assert err <= 8 * np.finfo(float).eps * max(1.0, np.abs(eps).max(), np.abs(x0).max())
        # dyadic data leave no rounding at all
        d0, de = rng.integers(-64, 64, (20, 6)) / 16.0, rng.integers(-64, 64, (20, 6)) / 16.0
        if k in (1, 2):
            assert np.array_equal(euler_integrate(lambda x, t: velocity_target(d0, de), de, k).x, d0)


# -- 4 ------------------------------------------------------------------------

def test_criterion_04_cfg_laws(batch):
    with criterion(4, "guidance scale laws and dropout rate"):
        m = tiny_model()
        x = np.random.default_rng(3).standard_normal((len(batch), 20, 6))
        cond = m.velocity_fn(batch, "action_only", batch.intent)(x, 0.7)
        vs = [m.velocity_fn(batch, "action_only", batch.intent, s)(x, 0.7) for s in (0.0, 1.0, 2.0)]
        assert np.array_equal(vs[1], cond)
        assert np.max(np.abs((vs[2] - vs[1]) - (vs[1] - vs[0]))) < 1e-10
        rng = np.random.default_rng(4)
        vc, vu = rng.normal(size=(64, 6)), rng.normal(size=(64, 6))
        assert np.array_equal(cfg_velocity(vc, vu, 1.0), vc)
        ids = drop_intents(make_rng(0, "acceptance-drop"), np.zeros(10_000, dtype=int), 0.15, m.null_intent)
        rate = float(np.mean(ids == m.null_intent))
        print(f"  dropout rate {rate:.4f}")
        assert 0.13 <= rate <= 0.17


# -- 5 ------------------------------------------------------------------------

def test_criterion_05_controllability(desk_runs):
    with criterion(5, "left vs right conditioning flips lateral sign on >= 90% of held-out frames"):
        rd, seconds = desk_runs[0]
        report = json.loads((rd / "metrics.json").read_text())
        rate = report["controllability_flip_rate"]
        print(f"  flip rate {rate:.3f}, train+eval {seconds / 60:.1f} min, RFS {report['rfs_mean']:.3f}")
        assert rate >= 0.9
        assert seconds < 15 * 60


def test_flow_steps_two_close_to_eight(desk_runs):
    report = json.loads((desk_runs[0][0] / "metrics.json").read_text())
    k2, k8 = report["ade_5s_by_steps"]["2"], report["ade_5s_by_steps"]["8"]
    print(f"  ADE@5s K=2 {k2:.3f}  K=8 {k8:.3f}")
    assert abs(k2 - k8) <= 0.2 * k8


# -- 6 ------------------------------------------------------------------------

def test_criterion_06_streaming_memory(stream_run, desk_cfg):
    with criterion(6, "memory beats no-memory and chunk-wise streaming; gradient crosses frames"):
        report = json.loads((stream_run / "stream_report.json").read_text())
        for name, r in report.items():
            print(f"  {name:14s} seqADE {r['sequence_ade']}  late acc {r['late_frame_intent_accuracy']:.3f}")
        mem = report["stream+memory"]
        for other in ("stream", "chunk"):
            for h, v in mem["sequence_ade"].items():
                assert v is not None and v < report[other]["sequence_ade"][h], (other, h)
            assert mem["late_frame_intent_accuracy"] > report[other]["late_frame_intent_accuracy"], other

        model, _ = _load_model(stream_run, "model-stream+memory")
        ctx = DataContext.for_vocab(IntentVocabulary.named(desk_cfg.data.vocabulary))
        scen = _streams(desk_cfg, "eval")[:2]
        prev, cur = ctx.batch([s.frames[0] for s in scen]), [s.frames[1] for s in scen]
        writer = copy.deepcopy(model.memory)
        ch = model.memory.new_channel()
        seq = model.embed(prev, "vqa_only", memory=model.memory.read(ch, prev.stamps, prev.times))
        writer.write(ch, model.forward(seq)[:, : seq.spans[R.STATE][1]], prev.stamps, prev.times)
        now = ctx.batch(cur)
        mem = model.memory.read(ch, now.stamps, now.times)
        loss = joint_loss(model, ctx, cur, ["vqa_first"] * len(cur), make_rng(0), GuidanceConfig(), memory=mem)[0]
        ad.backward(loss)
        norm = math.sqrt(sum(float((p.grad**2).sum()) for p in writer.parameters() if p.grad is not None))
        print(f"  cross-frame gradient norm {norm:.3e}")
        assert norm > 0


# -- 7 ------------------------------------------------------------------------

def test_criterion_07_fifo_laws():
    with criterion(7, "channel bounded and evicts oldest first over 1000-frame streams"):
        rng = np.random.default_rng(0)
        for cap in (1, 2, 3, 5):
            mod = MemoryModule(make_rng(cap), 8, n_tokens=2, slots=cap, layers=1, heads=2, frame_rate=2.0)
            ch = mod.new_channel()
            written = []
            for k in range(1000):
                hidden = Tensor(rng.normal(size=(1, 3, 8)))
                evicted = mod.write(ch, hidden, [Pose2(*rng.normal(size=3))], np.array([0.5 * k]))
                written.append(ch.entries[-1])
                assert len(ch) <= cap
                if k >= cap:
                    assert evicted is written[k - cap]
                else:
                    assert evicted is None
                assert all(a is b for a, b in zip(ch.entries, written[-cap:]))
        with pytest.raises(ValueError):
            MemoryChannel(0)


# -- 8 ------------------------------------------------------------------------

def _rand_pose(rng):
    return Pose2(*rng.uniform(-20, 20, 2), rng.uniform(-math.pi, math.pi))


def _close(a, b, tol=1e-12):
    d = a.as_array() - b.as_array()
    d[2] = math.remainder(d[2], 2 * math.pi)
    return np.max(np.abs(d)) < tol


def test_criterion_08_se2_suite():
    with criterion(8, "SE(2) axioms, alignment recovery, 4-clip stitch, noisy residual"):
        rng = np.random.default_rng(0)
        e = Pose2.identity()
        for _ in range(200):
            a, b, c = _rand_pose(rng), _rand_pose(rng), _rand_pose(rng)
            assert _close((a @ b) @ c, a @ (b @ c), 1e-11)
            assert _close(a @ e, a) and _close(e @ a, a)
            assert _close(a @ a.inverse(), e) and _close(a.inverse() @ a, e)
            pts = rng.normal(size=(5, 2))
            assert np.max(np.abs((a @ b).apply(pts) - a.apply(b.apply(pts)))) < 1e-11

        for _ in range(50):
            t = _rand_pose(rng)
            src = rng.normal(size=(10, 2)) * 5
            got = align_points(src, t.apply(src)).transform
            assert _close(got, t, 1e-9)

        # a smooth path cut into four overlapping clips, each in its own frame
        s = np.linspace(0, 40, 61)
        path = np.stack([s, 3 * np.sin(s / 8)], axis=1)
        cuts, overlap = [(0, 20), (15, 35), (30, 50), (45, 61)], 5
        clips = [path[a:b] if a == 0 else _rand_pose(rng).apply(path[a:b]) for a, b in cuts]
        res = stitch_chain(clips, [overlap] * 3)
        err = np.max(np.linalg.norm(res.points - path, axis=1))
        print(f"  4-clip chain max error {err:.2e} m")
        assert err < 1e-9

        sigma, means = 0.05, []
        for seed in range(100):
            r = np.random.default_rng(seed)
            src = r.normal(size=(20, 2)) * 5
            t = _rand_pose(r)
            dst = t.apply(src) + r.normal(0, sigma, size=src.shape)
            means.append(align_points(src, dst).mean_residual)
        m = float(np.mean(means))
        print(f"  noisy mean residual {m:.4f} (sigma {sigma})")
        assert 0.5 * sigma <= m <= 1.5 * sigma


# -- 9 ------------------------------------------------------------------------

def _oracle_rfs(pred, trajs, scores, speed, p):
    r = p.base_radius + p.speed_gain * speed
    idx = [int(round(c / p.waypoint_dt)) - 1 for c in p.checkpoints]
    best = -1.0
    for traj, s in zip(trajs, scores):
        d = 0.0
        for i in idx:
            d = max(d, math.hypot(traj[i][0] - pred[i][0], traj[i][1] - pred[i][1]))
        if d <= r:
            score = s
        else:
            score = max(min(p.floor, s), s * math.exp(-p.decay * (d - r)))
        best = max(best, score)
    return best


def _oracle_ade(pred, ref, n):
    return sum(math.hypot(pred[i][0] - ref[i][0], pred[i][1] - ref[i][1]) for i in range(n)) / n


def test_criterion_09_metric_oracles():
    with criterion(9, "RFS, ADE and trust-region rate match scalar oracles"):
        rng = np.random.default_rng(0)
        p = RfsParams()
        preds, sets, speeds, inside = [], [], [], []
        for _ in range(1000):
            k = int(rng.integers(1, 4))
            base = np.cumsum(rng.normal(1, 0.5, size=(20, 2)), axis=0)
            trajs = base[None] + rng.normal(0, rng.uniform(0.1, 4), size=(k, 20, 2))
            scores = rng.uniform(0, 10, k)
            pred = base + rng.normal(0, rng.uniform(0.01, 6), size=(20, 2))
            speed = float(rng.uniform(0, 15))
            rs = RaterSet(trajs, scores)
            assert abs(rfs(pred, rs, speed, p) - _oracle_rfs(pred, trajs, scores, speed, p)) < 1e-12
            for h in (3.0, 5.0):
                n = int(h / 0.25)
                assert abs(ade(pred, trajs[0], h) - _oracle_ade(pred, trajs[0], n)) < 1e-12
            preds.append(pred)
            sets.append(rs)
            speeds.append(speed)
            r = p.base_radius + p.speed_gain * speed
            dmin = min(
                max(math.hypot(*(t[i] - pred[i])) for i in (11, 19)) for t in trajs
            )
            inside.append(dmin <= r)
        assert abs(trust_region_rate(preds, sets, speeds, p) - sum(inside) / len(inside)) < 1e-12

        traj = np.cumsum(np.ones((20, 2)), axis=0)
        rs = RaterSet(traj[None], np.array([7.5]))
        assert rfs(traj, rs, 5.0, p) == 7.5
        assert rfs(traj + 1000.0, rs, 5.0, p) == 4.0


# -- 10 -----------------------------------------------------------------------

@pytest.mark.parametrize("preset", sorted(GROUPINGS))
def test_criterion_10_mot_identity(preset, batch, noise):
    with criterion(10, f"tied MoT equals dense ({preset})"):
        t, eps = noise
        dense = tiny_model()
        mot = tiny_model(seed=9, backbone="mot", grouping=preset, action_heads=2, action_ffn=32)
        init_mot_from_dense(mot, dense, tie_action=True)
        worst = 0.0
        for mode in sorted(MODES):
            hd = dense.forward(dense.embed(batch, mode, eps, t)).data
            hm = mot.forward(mot.embed(batch, mode, eps, t)).data
            worst = max(worst, float(np.max(np.abs(hd - hm))))
        print(f"  max |MoT - dense| {worst:.2e}")
        assert worst < 1e-12


# -- 11 -----------------------------------------------------------------------

def test_criterion_11_grpo(desk_runs):
    with criterion(11, "k3 and advantage laws; 200-iteration GRPO reward moving average non-decreasing"):
        rng = np.random.default_rng(0)
        r, c = rng.normal(size=10_000) * 3, rng.normal(size=10_000) * 3
        k = kl_k3(r, c)
        assert np.all(k >= 0)
        assert np.all((k == 0) == (r == c))
        assert np.all(kl_k3(r, r) == 0)
        adv = group_advantages(rng.normal(size=(16, 8)))
        assert np.max(np.abs(adv.mean(axis=1))) < 1e-12

        rd = desk_runs[0][0]
        t0 = time.perf_counter()
        _cli(rd, "grpo")
        seconds = time.perf_counter() - t0
        rows = (rd / "grpo_log.csv").read_text().splitlines()[1:]
        rewards = [float(row.split(",")[1]) for row in rows]
        ma = moving_average(rewards, 20)
        print(f"  {len(rewards)} iterations in {seconds / 60:.1f} min; reward MA {ma[0]:.4f} -> {ma[-1]:.4f}")
        assert len(rewards) == 200
        assert np.all(np.diff(ma) >= 0)
        assert seconds < 20 * 60


# -- 12 -----------------------------------------------------------------------

def test_criterion_12_end_to_end_determinism(desk_runs):
    with criterion(12, "desk config run twice gives byte-identical metric reports"):
        (a, _), (b, _) = desk_runs
        assert (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
        assert (a / "model.bin").read_bytes() == (b / "model.bin").read_bytes()
