"""Fast oracle checks runnable from the command line (``cfcl selftest``)."""
from __future__ import annotations

import math
import os
import tempfile
import time
from typing import Callable, List, NamedTuple

import numpy as np

from . import clustering, data, encoder, explicit, implicit, metrics


class CheckResult(NamedTuple):
    name: str
    passed: bool
    detail: str
    seconds: float


def _close(got, want, rel=1e-6):
    return abs(got - want) <= rel * abs(want)


def _cost_check(kind, payload_fn, want_bytes, want_seconds):
    def check():
        cost = metrics.CostModel()
        nbytes, secs = metrics.account_event(kind, payload_fn(cost), cost)
        ok = _close(nbytes, want_bytes) and _close(secs, want_seconds)
        return ok, f"{nbytes:g} B, {secs:.7g} s (want {want_bytes:g} B, {want_seconds:.7g} s)"
    return check


def _fd_gradient(model, batch, reg, margin, h=1e-5):
    w = model.weights
    g = np.zeros_like(w)
    for k in range(len(w)):
        e = np.zeros_like(w)
        e[k] = h
        up = encoder.batch_loss(model.with_weights(w + e), batch, reg, margin)
        dn = encoder.batch_loss(model.with_weights(w - e), batch, reg, margin)
        g[k] = (up - dn) / (2 * h)
    return g


def check_gradients(instances: int = 20, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(instances):
        model = encoder.EncoderModel.initialize([3, 5, 4], rng, "tanh")
        batch = encoder.TripletBatch(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)),
                                     rng.normal(size=(4, 3)))
        reg = None
        if k % 2:
            reg = encoder.RegularizerState({0: rng.normal(size=(3, 4))}, reg_margin=1.5,
                                           reg_weight=0.7)
        ga = encoder.loss_gradient(model, batch, reg, 2.0)
        gf = _fd_gradient(model, batch, reg, 2.0)
        denom = max(np.linalg.norm(gf), 1e-12)
        worst = max(worst, np.linalg.norm(ga - gf) / denom)
    return worst < 1e-4, f"worst relative error {worst:.2e}"


def check_distributions(instances: int = 100, seed: int = 1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        cand = rng.normal(size=(int(rng.integers(4, 15)), 3))
        res = rng.normal(size=(int(rng.integers(2, 6)), 3))
        tr = explicit.explicit_distribution(cand, res, res + 0.1 * rng.normal(size=res.shape),
                                            int(rng.integers(1, 5)), 1.0, 1.0, rng)
        tr2 = implicit.implicit_distribution(cand, res, implicit.OverlapParams(k_local=3,
                                                                               k_reserve=2), rng)
        for p in (tr.macro, tr.final, tr2.macro, tr2.final):
            worst = max(worst, abs(p.sum() - 1.0))
            if p.min() < 0 or p.max() > 1:
                return False, "entry outside [0, 1]"
    return worst < 1e-9, f"worst |sum - 1| = {worst:.1e}"


def check_staleness():
    params = implicit.StalenessParams(T_a=25, T=2000)
    got = implicit.reg_weight(12, params)
    want = math.exp(-12 / 24) + math.exp(12 / 2000)
    first = [math.exp(-(t % 25) / 24) for t in range(2000)]
    sawtooth = all(first[t] == 1.0 for t in range(0, 2000, 25)) and all(
        first[t] > first[t + 1] for t in range(2000 - 1) if (t + 1) % 25)
    return abs(got - 1.61255) < 1e-5 and abs(got - want) < 1e-12 and sawtooth, f"W_12 = {got:.6f}"


def check_kmeans(seed: int = 2):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    pts = np.vstack([c + 0.1 * rng.normal(size=(30, 2)) for c in centers])
    cm = clustering.kmeanspp(pts, 3, rng)
    err = np.abs(np.sort(cm.centroids, axis=0) - np.sort(centers, axis=0)).max()
    return err < 0.1 and sorted(cm.counts.tolist()) == [30, 30, 30], f"centroid error {err:.3f}"


def check_idx_roundtrip(seed: int = 3):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, size=(7, 4, 5), dtype=np.uint8)
    labs = rng.integers(0, 10, size=7, dtype=np.uint8)
    with tempfile.TemporaryDirectory() as d:
        ip, lp = os.path.join(d, "img"), os.path.join(d, "lab")
        data.write_idx(ip, lp, imgs, labs)
        gi, gl = data.load_idx_bytes(ip, lp)
    return bool(np.array_equal(gi, imgs) and np.array_equal(gl, labs)), "7 images 4x5"


def check_replay():
    from .config import build_config
    from .federation import run

    cfg = dict(T=50, T_a=25, T_p=25, devices=4, avg_degree=2, per_class=20, test_per_class=10,
               probe_iters=100, eval_per_class=5, k_approx=20)
    a = run(build_config(overrides=cfg)).metrics_csv()
    b = run(build_config(overrides=cfg)).metrics_csv()
    return a == b, f"{len(a.splitlines()) - 1} rows"


CHECKS: List[tuple] = [
    ("accounting_fmnist_datapoint",
     _cost_check("pull", lambda c: metrics.datapoints(1, 784, c), 784, 6.272e-3)),
    ("accounting_embedding_16",
     _cost_check("pull", lambda c: metrics.embeddings(1, 16, c), 64, 5.12e-4)),
    ("accounting_model_upload",
     _cost_check("upload", lambda c: metrics.model_params(45433, c), 181732, 1.453856)),
    ("gradient_finite_differences", check_gradients),
    ("distribution_sums", check_distributions),
    ("staleness_weight", check_staleness),
    ("kmeans_recovery", check_kmeans),
    ("idx_roundtrip", check_idx_roundtrip),
    ("replay_determinism", check_replay),
]


def run_checks(checks=None) -> List[CheckResult]:
    out = []
    for name, fn in (checks or CHECKS):
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(CheckResult(name, bool(ok), detail, time.perf_counter() - start))
    return out


def format_table(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL':<6}  "
                     f"{r.seconds:5.2f}s  {r.detail}")
    return "\n".join(lines)
