"""Acceptance gate: one PASS/FAIL line per criterion.

The training criteria (7, 8, 9) share one set of desk-scale runs built by a
module fixture; expect roughly 25 minutes on one core.
"""

import time

import numpy as np
import pytest

from evnav import env as E
from evnav.config import EnvConfig, Method, load_config
from evnav.estimators import CvaeRecommender
from evnav.graph import RoadClass, sample_velocities
from evnav.harness import run_training, train_and_eval
from evnav.selftest import check_gradients, check_mgda, check_queue, check_routing

from conftest import ACCEPTANCE_LINES, line_graph

pytestmark = pytest.mark.acceptance

TRAIN_SEEDS = [0, 1, 2, 3, 4]
FIG12_SEEDS = [0, 1, 2]
TABLE_METHODS = [Method.IQL, Method.IQL_GLOBAL_FCC, Method.IQL_LSTM_ONLY,
                 Method.IQL_CVAE_NOMGDA, Method.IQL_CVAE_MGDA]


def verdict(request, number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
    print(line)
    assert ok, line


# -- 1-4: exact suites --------------------------------------------------------

def test_c01_fcc_oracle(request):
    res = check_queue(1000)
    verdict(request, 1, "FCC oracle equivalence", res.passed and res.worst <= 1e-9 and res.seconds < 10,
            f"worst |diff|={res.worst:.1e} over 1000 instances, {res.seconds:.1f}s")


def test_c02_routing_oracle(request):
    res = check_routing(500, 50)
    verdict(request, 2, "Dijkstra vs Bellman-Ford", res.passed and res.worst <= 1e-9 and res.seconds < 10,
            f"worst |diff|={res.worst:.1e} over 500 graphs, {res.seconds:.1f}s")


def test_c03_gradients(request):
    results = check_gradients(100, limit=1e-4)
    worst = max(r.worst for r in results)
    detail = "; ".join(f"{r.name.removeprefix('gradient ')}={r.worst:.1e}" for r in results)
    verdict(request, 3, "central-difference gradients", all(r.passed for r in results) and worst < 1e-4,
            f"max rel err {worst:.1e} ({detail})")


def test_c04_mgda(request):
    res = check_mgda(1000)
    verdict(request, 4, "min-norm weight", res.passed, f"norm excess {res.worst:.1e}; {res.detail}")


# -- 5: distributions ----------------------------------------------------------

def test_c05_distributions(request):
    per_class = 1000
    classes = ["green"] * per_class + ["yellow"] * per_class + ["red"] * per_class
    g = line_graph([1.0] * len(classes), classes)
    rng = np.random.default_rng(5)
    v = np.concatenate([sample_velocities(g, rng).v[None] for _ in range(100)])
    notes, ok = [], True
    for i, rc in enumerate((RoadClass.GREEN, RoadClass.YELLOW, RoadClass.RED)):
        x = v[:, i * per_class:(i + 1) * per_class].ravel()
        target = rc.mean_factor * rc.speed_limit
        err = abs(x.mean() - target) / target
        ok &= x.size == 100_000 and err < 0.01 and x.min() > 0 and x.max() <= rc.speed_limit
        notes.append(f"{rc.tag} mean {x.mean():.2f}/{target:.0f}")
    cfg = EnvConfig()
    base, price = [], []
    for seed in range(2000):
        s = E.reset(cfg, seed)
        base += [c.base_price for c in s.evcss]
        price += [c.price for c in s.evcss]
    lam = E._sample_prices(np.full(10_000, 0.3), 1.0, np.random.default_rng(1))  # heavy redraw regime
    base, price = np.array(base), np.array(price)
    ok &= base.min() >= 0.3 and base.max() <= 0.7 and price.min() > 0 and lam.min() > 0
    notes.append(f"a in [{base.min():.3f}, {base.max():.3f}], min lambda {min(price.min(), lam.min()):.2e}")
    verdict(request, 5, "distribution conformance", ok, "; ".join(notes))


# -- 6: determinism ------------------------------------------------------------

def test_c06_determinism(request, tmp_path):
    config = load_config("scene_2ev")
    config.method = Method.IQL_CVAE_MGDA
    config.episodes = 6
    names = ("metrics.csv", "trace.csv", "steps.csv")
    blobs = []
    for run in ("a", "b"):
        run_training(config, 3, tmp_path / run)
        blobs.append({n: (tmp_path / run / n).read_bytes() for n in names})
    same = all(blobs[0][n] == blobs[1][n] for n in names)
    verdict(request, 6, "determinism", same, f"{', '.join(names)} byte-identical: {same}")


# -- 7-9: desk-scale training --------------------------------------------------

@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    config = load_config("scene_2ev")
    root = tmp_path_factory.mktemp("runs")
    out, wall = {}, {}
    for method in TABLE_METHODS:
        config.method = method
        t0 = time.perf_counter()
        out[method] = [train_and_eval(config.to_dict(), s, str(root / method.value / str(s)))
                       for s in TRAIN_SEEDS]
        wall[method] = time.perf_counter() - t0
    return out, wall


def seed_mean(runs, method):
    return float(np.mean([r["report"]["cost_ratio"] for r in runs[method]]))


def test_c07_mgda_cvae_loss(request, desk_runs):
    runs, _ = desk_runs
    pairs = [(runs[Method.IQL_CVAE_MGDA][s]["final_cvae_loss"], runs[Method.IQL_CVAE_NOMGDA][s]["final_cvae_loss"])
             for s in FIG12_SEEDS]
    ok = all(m < n for m, n in pairs)
    verdict(request, 7, "final CVAE loss MGDA < naive sum", ok,
            ", ".join(f"seed {s}: {m:.4f} vs {n:.4f}" for s, (m, n) in zip(FIG12_SEEDS, pairs)))


def test_c08_method_ordering(request, desk_runs):
    runs, wall = desk_runs
    g, c, i = (seed_mean(runs, m) for m in (Method.IQL_GLOBAL_FCC, Method.IQL_CVAE_MGDA, Method.IQL))
    slowest = max(wall.values())
    ok = g >= c >= i and c - i >= 0.05 and 0.9 <= i <= 1.1 and slowest < 1800
    verdict(request, 8, "method ordering", ok,
            f"Global_FCC {g:.3f} >= CVAE_MGDA {c:.3f} >= IQL {i:.3f}, gap {c - i:+.3f} (need 0.05), "
            f"slowest method {slowest / 60:.1f} min")


def test_c09_ablation_ordering(request, desk_runs):
    runs, _ = desk_runs
    order = (Method.IQL_CVAE_MGDA, Method.IQL_CVAE_NOMGDA, Method.IQL_LSTM_ONLY, Method.IQL)
    vals = [seed_mean(runs, m) for m in order]
    ok = all(a >= b for a, b in zip(vals, vals[1:]))
    verdict(request, 9, "ablation ordering", ok,
            " >= ".join(f"{m.value} {v:.3f}" for m, v in zip(order, vals)))


# -- 10: CVAE convergence --------------------------------------------------------

def test_c10_cvae_convergence(request):
    # eight fixed request windows, each mapped to one FCC-shaped target
    rng = np.random.default_rng(123)
    n_cond, W, K = 8, 8, 4
    windows = np.zeros((n_cond, W, 3))
    windows[..., 0] = -1
    for i in range(n_cond):
        L = int(rng.integers(1, W + 1))
        windows[i, W - L:, 0] = rng.integers(0, 39, L)
        windows[i, W - L:, 1] = rng.uniform(0, 1, L)
        windows[i, W - L:, 2] = np.sort(rng.uniform(0, 1, L))
    raw = rng.uniform(0, 10, (n_cond, K))  # expected queue minutes
    targets = np.exp(raw) / np.exp(raw).sum(axis=1, keepdims=True)
    idx = rng.integers(0, n_cond, 4000)
    est = CvaeRecommender(steps=2000, lr_encoder=1e-5, lr_shared=5e-4, random_state=0)
    est.fit(windows[idx], targets[idx])
    mse = -est.score(windows, targets)
    verdict(request, 10, "CVAE convergence", mse < 0.01,
            f"reconstruction MSE {mse:.4f} after 2000 Adam steps (limit 0.01)")
