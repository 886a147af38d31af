"""Independent oracles and the self-test suites built on them.

Each oracle solves the same problem as a production routine by a different
method: Bellman-Ford for routing, a discrete-event simulation for station
queues, central differences for gradients and a dense grid for the min-norm
weight. The suites draw random instances and compare.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .cvae import CvaeModel
from .dqn import QNetwork, td_loss
from .fcc import PlannedArrival, expected_queue, queue_oracle
from .graph import Edge, RoadClass, TrafficGraph, VelocityField, dijkstra
from .mgda import combine, mgda_alpha
from .nn import (LSTM, MLP, Dense, ParamVector, gaussian_reparam, gaussian_reparam_backward,
                 kl_diag_gaussian, kl_diag_gaussian_backward)


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    limit: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: worst={self.worst:.3g} limit={self.limit:.3g} ({self.seconds:.2f}s) {self.detail}"


# -- routing ------------------------------------------------------------------

def bellman_ford(graph: TrafficGraph, field: VelocityField, source: int) -> np.ndarray:
    n = graph.node_count
    dist = np.full(n, np.inf)
    dist[source] = 0.0
    arcs = []
    for i, e in enumerate(graph.edges):
        w = e.length / field.v[i] * 60.0
        arcs.append((e.u, e.v, w))
        if not e.directed:
            arcs.append((e.v, e.u, w))
    for _ in range(n - 1):
        changed = False
        for a, b, w in arcs:
            if dist[a] + w < dist[b]:
                dist[b] = dist[a] + w
                changed = True
        if not changed:
            break
    return dist


def random_graph(rng: np.random.Generator, n: int) -> tuple[TrafficGraph, VelocityField]:
    """Connected random graph: a random spanning tree plus extra chords."""
    classes = list(RoadClass)
    order = rng.permutation(n)
    pairs = set()
    for i in range(1, n):
        a, b = int(order[i]), int(order[rng.integers(i)])
        pairs.add((min(a, b), max(a, b)))
    for _ in range(int(rng.integers(0, 2 * n))):
        a, b = (int(x) for x in rng.choice(n, 2, replace=False))
        pairs.add((min(a, b), max(a, b)))
    edges = [Edge(a, b, float(rng.uniform(0.5, 20.0)), classes[rng.integers(3)], False)
             for a, b in sorted(pairs)]
    g = TrafficGraph(n, edges, [0])
    v = np.array([rng.uniform(5.0, e.road_class.speed_limit) for e in edges])
    return g, VelocityField(v, 0.0, 5.0)


def check_routing(n_graphs: int = 500, max_nodes: int = 50, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(n_graphs):
        n = int(rng.integers(2, max_nodes + 1))
        g, field = random_graph(rng, n)
        s = int(rng.integers(n))
        d, _ = dijkstra(g, field, {s: 0.0})
        ref = bellman_ford(g, field, s)
        worst = max(worst, float(np.max(np.abs(d - ref))))
    dt = time.perf_counter() - t0
    return CheckResult("dijkstra vs bellman-ford", worst <= 1e-9 and dt < 10, worst, 1e-9, dt,
                       f"{n_graphs} graphs")


# -- station queue ------------------------------------------------------------

def random_queue_instance(rng: np.random.Generator, max_evs: int = 5, max_spots: int = 2):
    """Plans of other EVs at one station, the deciding EV and spot occupation."""
    spots = int(rng.integers(1, max_spots + 1))
    n_other = int(rng.integers(0, max_evs))
    ids = rng.permutation(max_evs)
    me = PlannedArrival(int(ids[0]), 0, float(rng.uniform(0, 60)), float(rng.uniform(1, 60)))
    plans = [PlannedArrival(int(ids[i + 1]), 0, float(rng.uniform(0, 60)), float(rng.uniform(1, 60)))
             for i in range(n_other)]
    if rng.random() < 0.2 and plans:  # exact ties in arrival time
        plans[0] = PlannedArrival(plans[0].ev, 0, me.at, plans[0].ct)
    busy = [float(rng.uniform(0, 40)) if rng.random() < 0.4 else 0.0 for _ in range(spots)]
    return plans, me, spots, busy


def check_queue(n_instances: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(n_instances):
        plans, me, spots, busy = random_queue_instance(rng)
        if i % 10 == 0:
            busy = [0.0] * spots
            plans = [p for p in plans if (p.at, p.ev) > (me.at, me.ev)]
        got = expected_queue(plans, me, spots, busy)
        worst = max(worst, abs(got - queue_oracle(plans, me, spots, busy)))
        if i % 10 == 0 and got != 0.0:
            worst = max(worst, abs(got))
        later = [PlannedArrival(100 + k, 0, me.at + float(rng.uniform(0.1, 50)), float(rng.uniform(1, 60)))
                 for k in range(int(rng.integers(1, 4)))]
        worst = max(worst, abs(expected_queue(plans + later, me, spots, busy) - got))
    dt = time.perf_counter() - t0
    return CheckResult("expected_queue vs event simulation", worst <= 1e-9 and dt < 10, worst, 1e-9, dt,
                       f"{n_instances} instances")


# -- gradients ----------------------------------------------------------------

def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        old = arr[ix]
        arr[ix] = old + h
        fp = f()
        arr[ix] = old - h
        fm = f()
        arr[ix] = old
        g[ix] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Largest entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _relu_safe(caches, margin: float = 1e-3) -> bool:
    """False when a ReLU pre-activation sits close enough to 0 for the check to cross the kink."""
    return all(np.min(np.abs(a)) > margin for _, a in caches)


def _check_module(params, loss, backward, inputs=()) -> float:
    """Compare analytic gradients (params and named inputs) with central differences."""
    for _, _, g in params:
        g[...] = 0.0
    grads_in = backward()
    worst = 0.0
    for _, arr, g in params:
        worst = max(worst, rel_error(g.copy(), numeric_grad(loss, arr)))
    for arr, g in zip(inputs, grads_in):
        worst = max(worst, rel_error(g, numeric_grad(loss, arr)))
    return worst


def grad_dense(rng) -> float:
    while True:
        n_in, n_out, B = (int(x) for x in rng.integers(1, 7, 3))
        layer = Dense(n_in, n_out, "relu" if rng.random() < 0.5 else "linear", rng)
        layer.b[:] = rng.normal(0, 0.5, n_out)
        x = rng.normal(size=(B, n_in))
        R = rng.normal(size=(B, n_out))
        _, cache = layer.forward(x)
        if layer.activation == "linear" or _relu_safe([cache]):
            break

    def loss():
        return float(np.sum(R * layer.forward(x)[0]))

    def backward():
        _, c = layer.forward(x)
        return [layer.backward(c, R)]

    return _check_module(layer.params(), loss, backward, [x])


def grad_lstm(rng) -> float:
    n_in, H = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    T, B, L = int(rng.integers(1, 9)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
    lstm = LSTM(n_in, H, L, rng)
    for b in lstm.b:
        b[:] = rng.normal(0, 0.3, b.shape)
    X = rng.normal(size=(B, T, n_in))
    mask = np.ones((B, T), dtype=bool)
    for i in range(B):
        mask[i, :int(rng.integers(0, T))] = False  # left padding
    R = rng.normal(size=(B, T, H))

    def loss():
        return float(np.sum(R * lstm.forward(X, mask)[0]))

    def backward():
        _, caches = lstm.forward(X, mask)
        dX = lstm.backward(caches, R)
        return [dX]

    return _check_module(lstm.params(), loss, backward, [X])


def _small_cvae(rng) -> tuple[CvaeModel, int]:
    K = int(rng.integers(2, 5))
    n = int(rng.integers(2, 5))
    m = CvaeModel(K, n, hidden=int(rng.integers(2, 7)), cond_dim=int(rng.integers(1, 5)),
                  latent_dim=int(rng.integers(1, 4)), lstm_layers=int(rng.integers(1, 3)), rng=rng)
    for layer in m.encoder.layers + m.decoder.layers:
        layer.b[:] = rng.normal(0, 0.3, layer.b.shape)
    return m, n


def grad_cvae_encoder(rng) -> float:
    while True:
        m, _ = _small_cvae(rng)
        B = int(rng.integers(1, 4))
        x = rng.dirichlet(np.ones(m.K), size=B)
        c = rng.normal(size=(B, m.cond_dim))
        inp = np.concatenate([x, c], axis=1)
        _, caches = m.encoder.forward(inp)
        if _relu_safe(caches[:-1]):
            break
    R = rng.normal(size=(B, 2 * m.latent_dim))

    def loss():
        return float(np.sum(R * m.encoder(inp)))

    def backward():
        _, cs = m.encoder.forward(inp)
        return [m.encoder.backward(cs, R)]

    return _check_module(m.encoder.params(), loss, backward, [inp])


def grad_cvae_decoder(rng) -> float:
    while True:
        m, _ = _small_cvae(rng)
        B = int(rng.integers(1, 4))
        z = rng.normal(size=(B, m.latent_dim))
        c = rng.normal(size=(B, m.cond_dim))
        _, caches = m.decoder.forward(np.concatenate([z, c], axis=1))
        if _relu_safe(caches[:-1]):
            break
    R = rng.normal(size=(B, m.K))
    from .nn import softmax_backward

    def loss():
        return float(np.sum(R * m.cvae_decode(z, c)[0]))

    def backward():
        p, cs = m.cvae_decode(z, c)
        d = m.decoder.backward(cs, softmax_backward(p, R))
        return [d[:, :m.latent_dim], d[:, m.latent_dim:]]

    return _check_module(m.decoder.params(), loss, backward, [z, c])


def grad_reparam(rng) -> float:
    B, L = int(rng.integers(1, 5)), int(rng.integers(1, 6))
    mu, lv = rng.normal(size=(B, L)), rng.normal(size=(B, L))
    eps = rng.normal(size=(B, L))  # frozen noise
    R = rng.normal(size=(B, L))
    w = float(rng.uniform(0.1, 2.0))

    def loss():
        return float(np.sum(R * gaussian_reparam(mu, lv, eps)) + w * np.sum(kl_diag_gaussian(mu, lv)))

    dmu, dlv = gaussian_reparam_backward(lv, eps, R)
    kmu, klv = kl_diag_gaussian_backward(mu, lv)
    return max(rel_error(dmu + w * kmu, numeric_grad(loss, mu)),
               rel_error(dlv + w * klv, numeric_grad(loss, lv)))


def grad_cvae_elbo(rng) -> float:
    """Whole platform: LSTM condition, encoder, frozen-noise sample, decoder, KL + MSE."""
    while True:
        m, n = _small_cvae(rng)
        B, T = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        x = rng.dirichlet(np.ones(m.K), size=B)
        W = rng.normal(size=(B, T, n + 2))
        mask = np.ones((B, T), dtype=bool)
        eps = rng.normal(size=(B, m.latent_dim))
        p = m.forward(x, W, mask, eps)
        if _relu_safe(p.enc_cache[:-1]) and _relu_safe(p.dec_cache[:-1]) and p.lv_live.all():
            break
    params = m.all_params().segments

    def loss():
        return m.forward(x, W, mask, eps).loss

    def backward():
        m.backward_elbo(m.forward(x, W, mask, eps))
        return []

    return _check_module(params, loss, backward)


def grad_td(rng) -> float:
    while True:
        obs_dim, K = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        net = QNetwork(obs_dim, K, int(rng.integers(2, 7)), int(rng.integers(2, 4)), rng)
        for layer in net.layers:
            layer.b[:] = rng.normal(0, 0.3, layer.b.shape)
        B = int(rng.integers(1, 5))
        obs = rng.normal(size=(B, obs_dim))
        _, caches = net.forward(obs)
        if _relu_safe(caches[:-1]):
            break
    actions = rng.integers(K, size=B)
    targets = rng.normal(size=B)

    def loss():
        return td_loss(net, obs, actions, targets, backward=False)[0]

    def backward():
        return [td_loss(net, obs, actions, targets)[1]]

    return _check_module(net.params(), loss, backward, [obs])


GRAD_CHECKS = {
    "dense": grad_dense,
    "lstm window": grad_lstm,
    "cvae encoder": grad_cvae_encoder,
    "cvae decoder": grad_cvae_decoder,
    "reparameterization + kl": grad_reparam,
    "cvae elbo (end to end)": grad_cvae_elbo,
    "td loss": grad_td,
}


def check_gradients(n_configs: int = 100, seed: int = 0, limit: float = 1e-4) -> list[CheckResult]:
    out = []
    for i, (name, fn) in enumerate(GRAD_CHECKS.items()):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        worst = max(fn(rng) for _ in range(n_configs))
        out.append(CheckResult(f"gradient {name}", worst < limit, worst, limit, time.perf_counter() - t0,
                               f"{n_configs} configs"))
    return out


# -- min-norm weight ----------------------------------------------------------

def grid_alpha(g_d: np.ndarray, g_c: np.ndarray, step: float = 1e-4) -> tuple[float, float]:
    """Best weight on a uniform grid over [0, 1] and the norm it attains."""
    grid = np.linspace(0.0, 1.0, int(round(1.0 / step)) + 1)
    dd, cc, dc = g_d @ g_d, g_c @ g_c, g_d @ g_c
    sq = grid ** 2 * dd + (1 - grid) ** 2 * cc + 2 * grid * (1 - grid) * dc
    i = int(np.argmin(sq))
    return float(grid[i]), float(np.sqrt(max(sq[i], 0.0)))


def check_mgda(n_pairs: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    worst_norm = worst_foc = 0.0
    problems = []
    for i in range(n_pairs):
        dim = int(rng.integers(2, 1001))
        g_d = rng.normal(size=dim) * rng.uniform(0.01, 10)
        if i % 4 == 0:  # near-parallel pairs push alpha to a boundary
            g_c = g_d * rng.uniform(0.05, 3) + rng.normal(size=dim) * 1e-3
        else:
            g_c = rng.normal(size=dim) * rng.uniform(0.01, 10)
        a = mgda_alpha(g_d, g_c)
        if not 0.0 <= a <= 1.0:
            problems.append(f"alpha {a} outside [0, 1]")
        v = combine(g_d, g_c, a)
        nv = float(np.linalg.norm(v))
        _, grid_norm = grid_alpha(g_d, g_c)
        worst_norm = max(worst_norm, nv - grid_norm)
        if nv > min(np.linalg.norm(g_d), np.linalg.norm(g_c)) + 1e-12:
            problems.append("combined norm above an endpoint")
        if 0.0 < a < 1.0:
            ref = v @ v
            worst_foc = max(worst_foc, abs(g_d @ v - ref) / ref, abs(g_c @ v - ref) / ref)
    dt = time.perf_counter() - t0
    ok = worst_norm <= 1e-6 and worst_foc <= 1e-8 and not problems
    return CheckResult("min-norm weight vs grid", ok, max(worst_norm, 0.0), 1e-6, dt,
                       f"first-order residual {worst_foc:.2e}; {len(problems)} problems")


SUITES = {
    "oracle": lambda: [check_queue(), check_routing()],
    "grad": lambda: check_gradients(),
    "mgda": lambda: [check_mgda()],
}


def run_suite(name: str) -> list[CheckResult]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name]()
