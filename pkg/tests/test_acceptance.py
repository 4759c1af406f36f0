"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the pytest terminal summary.
Criterion 7 trains 20 agents and takes roughly an hour on one CPU core; set
``DUALSTREAM_ACCEPTANCE_DIR`` to keep its logs.
"""
import logging
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from dualstream.ablation import run_ablation, summarize
from dualstream.config import EnvConfig, ModelConfig, load_config
from dualstream.gradcheck import check_gradients
from dualstream.interaction import attention_map
from dualstream.losses import similarity_loss
from dualstream.model import DualStreamModel
from dualstream.oracle import (ExternalBackend, GroundTruthBackend, OracleError, OracleServer, aggregate_logits,
                               knowledge_mask, sigmoid)
from dualstream.replay import SelectiveReplayBuffer, TransitionRecord, delta
from dualstream.trainer import Trainer
from dualstream.worldsim import Action, DrivingWorld, Obstacle

import gradcases
import toyenvs

ROOT = Path(__file__).resolve().parents[1]
RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS[n] = line
    print(line)


def check(n: int, outcomes: dict[str, bool], detail: str = "") -> None:
    failed = [k for k, v in outcomes.items() if not v]
    report(n, not failed, detail or ("all checks hold" if not failed else "failed: " + ", ".join(failed)))
    assert not failed, failed


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.time()
    worst = {}
    for name, build in gradcases.CASES.items():
        fractions = []
        for seed in range(20):
            fn, params = build(seed)
            assert sum(p.numel() for _, p in params) <= 1000
            fractions.append(check_gradients(fn, params, step=1e-3, rtol=1e-3).pass_fraction)
        worst[name] = min(fractions)
    elapsed = time.time() - t0
    outcomes = {f"{k} >= 99%": v >= 0.99 for k, v in worst.items()}
    outcomes["runtime < 5 min"] = elapsed < 300
    detail = ", ".join(f"{k} min {v:.3f}" for k, v in worst.items()) + f"; {elapsed:.0f}s"
    check(1, outcomes, detail)


# 2 ---------------------------------------------------------------------------

def test_criterion_2_similarity_properties():
    g = torch.Generator().manual_seed(0)
    f = torch.rand(4, 3, 5, 5, generator=g, dtype=torch.float64) + 0.1
    h = torch.rand(4, 3, 5, 5, generator=g, dtype=torch.float64) + 0.1
    base = similarity_loss(f, h)[0].item()
    scale_ok = all(abs(similarity_loss(c * f, c * h)[0].item() - base) <= 1e-6 * max(1.0, abs(base))
                   for c in (1e-3, 0.5, 3.0, 1e3))
    hand = similarity_loss(torch.tensor([[2.0]]), torch.tensor([[1.0]]))[0].item()
    check(2, {"loss(F,F) == 0": similarity_loss(f, f.clone())[0].item() == 0.0,
              "scale invariance 1e-6": scale_ok,
              "loss([2],[1]) == 1.0": hand == 1.0})


# 3 ---------------------------------------------------------------------------

def _softmax(row):
    z = sum(math.exp(v) for v in row)
    return [math.exp(v) / z for v in row]


def test_criterion_3_attention_properties():
    g = torch.Generator().manual_seed(0)
    x = attention_map(torch.randn(5, 16, 4, generator=g), torch.randn(5, 16, 4, generator=g))
    rows = bool(torch.all((x.sum(-1) - 1).abs() <= 1e-6))
    u = attention_map(torch.full((9, 3), 0.4), torch.full((9, 3), 0.4))
    uniform = bool(torch.all((u - 1 / 9).abs() <= 1e-7))
    # N = 2, C' = 1, H = F = (1, 0): both one-way maps are softmax rows of [[1, 0], [0, 0]]
    a = [_softmax([1.0, 0.0]), _softmax([0.0, 0.0])]
    oracle = torch.tensor([_softmax([2 * v for v in row]) for row in a], dtype=torch.float64)
    h = torch.tensor([[1.0], [0.0]], dtype=torch.float64)
    hand = bool(torch.all((attention_map(h, h.clone()) - oracle).abs() <= 1e-6))
    check(3, {"rows sum to 1": rows, "uniform input -> 1/N": uniform, "N=2 hand example": hand})


# 4 ---------------------------------------------------------------------------

def test_criterion_4_mask_pipeline():
    env = DrivingWorld(EnvConfig(image_size=32))
    empty = knowledge_mask(GroundTruthBackend(), env.reset(0, obstacles=[]), []).aggregate
    half = aggregate_logits(np.zeros((1, 6, 6)))
    rng = np.random.default_rng(0)
    monotone = True
    for _ in range(100):
        logits = rng.normal(0.0, 4.0, size=(int(rng.integers(1, 5)), 6, 6))
        k, i, j = (int(rng.integers(0, s)) for s in logits.shape)
        bumped = logits.copy()
        bumped[k, i, j] += float(rng.uniform(0.01, 3.0))
        before, after = aggregate_logits(logits), aggregate_logits(bumped)
        others = np.ones_like(before, dtype=bool)
        others[i, j] = False
        grew = after[i, j] > before[i, j] or sigmoid(logits[k, i, j]) >= 1.0 - 1e-12
        monotone &= bool(grew and np.array_equal(after[others], before[others]))
    check(4, {"empty phrases -> zero map": bool(np.all(empty == 0.0)),
              "sigmoid(0) pixel == 0.5": bool(np.all(half == 0.5)),
              "monotone on 100 perturbations": monotone})


# 5 ---------------------------------------------------------------------------

class _Unreasonable:
    def judge(self, obs, action):
        from dualstream.oracle import AdvisorVerdict

        return AdvisorVerdict("unreasonable")


class _Obs:
    def __init__(self, i):
        self.latest = np.full((8, 8, 3), i % 251, dtype=np.uint8)


def _record(i):
    return TransitionRecord(np.full((4, 8, 8, 3), i % 256, np.uint8), np.array([0.1, 0.2], np.float32),
                            0.0, False)


def test_criterion_5_replay_protocol():
    t = 1000
    buf = SelectiveReplayBuffer(16, 8, t, advisor=_Unreasonable(), seed=11)
    step = 400  # delta = 1 - 0.5 * 0.4 = 0.8
    n = 10_000
    frac = sum(buf.push(_record(i), step, _Obs(i)) for i in range(n)) / n
    low = SelectiveReplayBuffer(16, 8, t, advisor=_Unreasonable(), seed=12)
    all_in = all(low.push(_record(i), s, _Obs(i)) for i, s in enumerate(range(t, t + 2000)))
    check(5, {"delta(0) == 1": delta(0, t) == 1.0,
              "delta clamps at 0.5": delta(t, t) == 0.5 and delta(50 * t, t) == 0.5,
              "delta(400) == 0.8": math.isclose(buf.delta(step), 0.8),
              "admitted 0.2 +- 0.02": abs(frac - 0.2) <= 0.02,
              "delta <= 0.5 admits all": all_in},
          f"admitted fraction {frac:.4f} at delta 0.8")


# 6 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_sac_sanity():
    t0 = time.time()
    scores = {}
    for seed in range(5):
        steps, best, _ = toyenvs.train_quadratic(seed, max_steps=20_000)
        scores[seed] = (steps, best)
    q = toyenvs.train_two_state(0)
    v = toyenvs.two_state_values(0.9)
    q_err = max(abs(a - b) for a, b in zip(q, v))
    elapsed = time.time() - t0
    outcomes = {f"seed {s} >= 90%": best >= 0.9 for s, (_, best) in scores.items()}
    outcomes["two-state |Q - V| < 1e-2"] = q_err < 1e-2
    outcomes["runtime < 10 min"] = elapsed < 600
    detail = (", ".join(f"seed {s}: {b:.3f} by step {n}" for s, (n, b) in scores.items())
              + f"; two-state error {q_err:.2e}; {elapsed:.0f}s")
    check(6, outcomes, detail)


# 7 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_ablation_direction(tmp_path_factory):
    config = load_config(ROOT / "configs" / "ablation_jw.ini")
    out = Path(os.environ.get("DUALSTREAM_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("ablation"))
    t0 = time.time()
    results = run_ablation(config, out, tags=("M1", "M2", "M3", "M4"), seeds=config.train.seeds, progress=print)
    elapsed = time.time() - t0
    summary = summarize(results)
    (out / "summary.txt").write_text(summary.text())
    print(summary.text())
    if summary.violations:
        logging.getLogger("dualstream.acceptance").warning("ordering violations: %s", summary.violations)
    order = " ".join(f"{t}={summary.means[t]:.1f}" for t in ("M1", "M2", "M3", "M4"))
    detail = (f"{order}; M4-M1 {summary.margin:.2f} vs pooled SE {summary.pooled_se:.2f}; "
              f"violations: {', '.join(summary.violations) or 'none'}; {elapsed / 60:.0f} min")
    check(7, {"M4 > M1 + pooled SE": summary.m4_beats_m1, "runtime < 2 h": elapsed < 7200}, detail)


# 8 ---------------------------------------------------------------------------

def test_criterion_8_zero_interaction_reduces_to_m2():
    torch.manual_seed(0)
    m4 = DualStreamModel(32, ModelConfig(channels=8, feature_dim=16, reduced_channels=4))
    m2 = DualStreamModel(32, ModelConfig(channels=8, feature_dim=16, reduced_channels=4, use_interaction=False))
    m2.load_state_dict(m4.state_dict())
    with torch.no_grad():
        for lin in (m4.interaction.fn_semantic, m4.interaction.fn_motion):
            lin.weight.zero_()
            lin.bias.zero_()
    g = torch.Generator().manual_seed(1)
    frames = torch.rand(4, 3, 32, 32, 3, generator=g)
    mask = torch.rand(4, 32, 32, generator=g)
    same = {}
    for label, kwargs in (("eval", {"training": False}), ("train with mask", {"mask": mask, "training": True})):
        a, b = m4(frames, **kwargs), m2(frames, **kwargs)
        same[label] = all(torch.equal(x, y) for x, y in ((a.f, b.f), (a.f_s, b.f_s), (a.f_m, b.f_m)))
    check(8, {f"bit-identical ({k})": v for k, v in same.items()})


# 9 ---------------------------------------------------------------------------

def test_criterion_9_determinism(small_config, tmp_path):
    outcomes = {}
    for tag in ("M1", "full"):
        cfg = small_config.replace(train={"ablation": tag})
        runs = []
        for _ in range(2):
            tr = Trainer(cfg)
            tr.run_steps(60, evaluate=False)
            runs.append(tr.log.loss_trace())
        outcomes[f"{tag} repeat identical"] = runs[0] == runs[1] and len(runs[0]) > 0
        first = Trainer(cfg)
        first.run_steps(35, evaluate=False)
        resumed = Trainer.load_state(first.save_state(tmp_path / f"{tag}.npz"))
        resumed.run_steps(25, evaluate=False)
        outcomes[f"{tag} resume identical"] = resumed.log.loss_trace() == runs[0]
    check(9, outcomes)


# 10 --------------------------------------------------------------------------

def test_criterion_10_oracle_protocol(monkeypatch, caplog):
    import urllib.request

    env = DrivingWorld(EnvConfig(image_size=32))
    obs = env.reset(0, obstacles=[Obstacle(0, "pedestrian", 5.0, 10.0), Obstacle(1, "vehicle", 11.0, 14.0)])
    gt = GroundTruthBackend()
    outcomes = {}
    with OracleServer() as srv:
        ext = ExternalBackend(srv.url, timeout=5)
        outcomes["semantics round trip"] = set(ext.semantics(obs, "?")) == set(gt.semantics(obs))
        outcomes["mask round trip"] = all(
            ((ext.mask(obs, p) > 0) != (gt.mask(obs, p) > 0)).sum() <= 0.1 * (gt.mask(obs, p) > 0).sum()
            for p in gt.semantics(obs))
        outcomes["advisor round trip"] = ext.judge(obs, Action(0.0, -1.0)).verdict == \
            gt.judge(obs, Action(0.0, -1.0)).verdict
        url = srv.url

    class Fake:
        def __init__(self, body):
            self.body = body.encode()

        def read(self):
            return self.body

        def __enter__(self):
            return self

        def __exit__(self, *exc):
            return False

    malformed = [("not json", "semantics", ()), ('{"words": []}', "semantics", ()),
                 ('{"logits": [1], "height": 2, "width": 2}', "mask", ("pedestrian",)),
                 ('{"verdict": "maybe"}', "judge", (Action(),))]
    raised = []
    for body, method, args in malformed:
        with monkeypatch.context() as m:
            m.setattr(urllib.request, "urlopen", lambda *a, _b=body, **k: Fake(_b))
            try:
                getattr(ExternalBackend("http://oracle.invalid"), method)(obs, *args)
                raised.append(False)
            except OracleError as exc:
                raised.append(bool(exc.diagnostics))
    outcomes["malformed -> OracleError with diagnostics"] = all(raised)

    down = SelectiveReplayBuffer(8, 32, 100, advisor=ExternalBackend(url, timeout=1))
    rec = TransitionRecord(np.zeros((4, 32, 32, 3), np.uint8), np.array([0.9, 1.0], np.float32), 0.0, False)
    with caplog.at_level(logging.WARNING, logger="dualstream.replay"):
        admitted = [down.push(rec, 0, obs) for _ in range(3)]
    outcomes["outage admits"] = all(admitted) and down.stats["advisor_failures"] == 3
    outcomes["outage logged"] = "advisor unavailable" in caplog.text
    check(10, outcomes)
