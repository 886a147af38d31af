"""Experiment driver: episodes, training runs, evaluation and cost-ratio reports."""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env as E
from .config import EnvConfig, Method, RunConfig
from .cvae import RecommendationSession
from .dqn import ReplayBuffer, Transition, linear_epsilon, select_action
from .fcc import fcc_tensor
from .graph import TrafficGraph, load_graph
from .mgda import Learner
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METHOD_ORDER = [Method.IQL_GLOBAL_FCC, Method.IQL_CVAE_MGDA, Method.IQL_CVAE_NOMGDA,
                Method.IQL_LSTM_ONLY, Method.IQL, Method.SHORTEST_PATH]
STEP_FIELDS = ("step", "dqn_loss", "cvae_kl", "cvae_recon", "alpha", "grad_norm_d", "grad_norm_c")
RI_DUMP_FIELDS = ("step", "ev", "node", "soc", "time", "c", "ri", "fcc_true")


def train_env_seed(seed: int, episode: int) -> int:
    return 10_000_000 + 100_000 * seed + episode


def shortest_path_policy(state: E.GlobalState, ev_id: int) -> int:
    """Station with the smallest expected arrival time; prices and queues are ignored."""
    ev = state.evs[ev_id]
    if ev.status is not E.EvStatus.AT_NODE:
        raise E.EnvError(f"EV {ev_id} is not at a node")
    return int(np.argmin(state.routing().dist[:, ev.node]))


class RequestStream:
    """The platform's chronological queue of charging requests, last ``window`` kept."""

    def __init__(self, window: int):
        self.window = window
        self.rows: deque = deque(maxlen=window)

    def push(self, node: int, soc: float, time_frac: float):
        self.rows.append((float(node), float(soc), float(min(1.0, max(0.0, time_frac)))))
        return self.rows[-1]

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """Left-padded ``(W, 3)`` rows and the validity mask."""
        out = np.zeros((self.window, 3))
        mask = np.zeros(self.window, dtype=bool)
        n = len(self.rows)
        if n:
            out[-n:] = np.array(self.rows)
            mask[-n:] = True
        return out, mask


@dataclass
class EpisodeResult:
    seed: int
    costs: list[float]
    breakdown: dict
    returns: list[float]
    decisions: int
    stranded: int
    metrics: list[dict] = field(default_factory=list)
    trace: list[tuple] = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        return float(sum(self.costs))


def run_episode(cfg: EnvConfig, graph: TrafficGraph, seed: int, method: Method,
                learner: Learner | None = None, *, epsilon: float = 0.0,
                rng: np.random.Generator | None = None, buffer: ReplayBuffer | None = None,
                training: bool = False, batch_size: int = 16, updates_per_step: int = 1,
                window: int = 8, ri_dump: list | None = None) -> EpisodeResult:
    """Play one episode; with ``training`` the learner updates after every decision."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    state = E.reset(cfg, seed, graph)
    stream = RequestStream(window)
    hyper = learner.hyper if learner is not None else None
    need_fcc = ri_dump is not None or method in (Method.IQL_GLOBAL_FCC, Method.IQL_CVAE_MGDA,
                                                  Method.IQL_CVAE_NOMGDA)
    session = None
    if method.uses_cvae and not training:
        session = RecommendationSession(learner.model, window, hyper.ri_runtime, hyper.ri_sample_prior,
                                        np.random.default_rng([seed, 5]))
    K = state.n_evcs
    pending: dict[int, dict] = {}
    returns = [0.0] * cfg.n_evs
    metrics = []
    decisions = 0

    def close(ev_id, reward, terminal, nxt):
        p = pending.pop(ev_id)
        if buffer is None:
            return
        buffer.push(Transition(
            node=p["node"], soc=p["soc"], action=p["action"], reward=reward,
            next_node=nxt["node"], next_soc=nxt["soc"], terminal=terminal,
            fcc_true=p["fcc"], next_fcc_true=nxt["fcc"], window=p["window"], window_mask=p["mask"],
            next_window=nxt["window"], next_window_mask=nxt["mask"], ev=ev_id))

    while True:
        ev_id, records = E.advance_to_decision(state)
        for rec in records:
            returns[rec.ev] += rec.value
            if rec.ev not in pending:
                continue
            if rec.terminal:
                close(rec.ev, rec.value, True, pending[rec.ev])
            else:
                pending[rec.ev]["reward"] = rec.value
        if ev_id is None:
            break
        ev = state.evs[ev_id]
        decisions += 1
        row = stream.push(ev.node, ev.soc, state.clock / cfg.horizon_min)
        win, mask = stream.snapshot()
        fcc = fcc_tensor(state, ev_id, hyper.fcc_softmax_sign if hyper else 1.0) if need_fcc else None
        probs = fcc.probs if fcc is not None else np.full(K, 1.0 / K)
        here = {"node": ev.node, "soc": ev.soc, "fcc": probs, "window": win, "mask": mask}
        if ev_id in pending:
            close(ev_id, pending[ev_id]["reward"], False, here)

        if method is Method.SHORTEST_PATH:
            action = shortest_path_policy(state, ev_id)
            ri = None
        else:
            if session is not None:
                ri = session.recommend(row)
                learner.check_wiring(ri, probs)
            else:
                ri = learner.ri(probs, win, mask, training)
            obs = learner.obs_matrix(np.array([ev.node]), np.array([ev.soc]), ri[None, :])[0]
            allowed = fcc.feasible if (fcc is not None and hyper.mask_unreachable) else None
            action = select_action(learner.q(obs), epsilon, rng, allowed)
        if ri_dump is not None:
            c = session.c[0] if session is not None and session.c is not None else np.zeros(0)
            ri_dump.append((decisions, ev_id, ev.node, ev.soc, row[2], c,
                            ri if ri is not None else np.zeros(0), probs))
        pending[ev_id] = dict(here, action=action, reward=None)
        E.apply_action(state, ev_id, action)
        if training and buffer is not None and len(buffer) >= batch_size:
            for _ in range(updates_per_step):
                metrics.append(learner.update(buffer.sample(batch_size, rng)))

    breakdown = dict.fromkeys(E.COST_KEYS, 0.0)
    for ev in state.evs:
        for k, v in ev.costs.items():
            breakdown[k] += v
    return EpisodeResult(
        seed=seed, costs=[ev.total_cost for ev in state.evs], breakdown=breakdown, returns=returns,
        decisions=decisions, stranded=sum(ev.status is E.EvStatus.STRANDED for ev in state.evs),
        metrics=metrics, trace=E.trace_rows(state))


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


@dataclass
class TrainResult:
    config: RunConfig
    seed: int
    learner: Learner | None
    episodes: list[dict]
    steps: list[dict]
    last_trace: list[tuple]
    run_dir: Path | None = None


def make_learner(config: RunConfig, seed: int, graph: TrafficGraph) -> Learner | None:
    if not config.method.learns:
        return None
    return Learner(config.method, graph.node_count, graph.n_evcs, config.hyper,
                   np.random.default_rng([seed, 7]))


def run_training(config: RunConfig, seed: int, run_dir: str | Path | None = None,
                 graph: TrafficGraph | None = None) -> TrainResult:
    """Train one method for ``config.episodes`` episodes; optionally write the run directory."""
    config.env.validate()
    graph = graph if graph is not None else load_graph(config.env.graph)
    hyper = config.hyper
    method = config.method
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.snapshot").write_text(config.dumps() + "\n")
    learner = make_learner(config, seed, graph)
    episodes, steps, trace = [], [], []
    if learner is None:
        log.info("%s has no parameters; skipping training", method.value)
    else:
        rng = np.random.default_rng([seed, 11])
        buffer = ReplayBuffer(hyper.buffer_size)
        for ep in range(config.episodes):
            eps = linear_epsilon(ep, config.episodes, hyper.eps_start, hyper.eps_end, hyper.eps_decay_frac)
            res = run_episode(config.env, graph, train_env_seed(seed, ep), method, learner, epsilon=eps,
                              rng=rng, buffer=buffer, training=True, batch_size=hyper.batch_size,
                              updates_per_step=hyper.updates_per_step, window=hyper.window)
            for m in res.metrics:
                steps.append(dict(m, step=len(steps) + 1))
            def mean_of(key):
                vals = [m[key] for m in res.metrics if key in m]
                return float(np.mean(vals)) if vals else float("nan")
            episodes.append({
                "episode": ep + 1, "returns": res.returns, "total_cost": res.total_cost,
                "dqn_loss": mean_of("dqn_loss"), "cvae_kl": mean_of("cvae_kl"),
                "cvae_recon": mean_of("cvae_recon"), "alpha": mean_of("alpha"), "epsilon": eps,
                "stranded": res.stranded,
            })
            trace = res.trace
            if run_dir is not None and (ep + 1) % config.checkpoint_every == 0:
                save_checkpoint(run_dir / "checkpoints" / f"ep{ep + 1:05d}.ckpt", learner.state_dict())
    result = TrainResult(config, seed, learner, episodes, steps, trace, run_dir)
    if run_dir is not None:
        write_run_files(result)
    return result


def write_run_files(result: TrainResult):
    run_dir = result.run_dir
    n_evs = result.config.env.n_evs
    header = (["episode"] + [f"return_ev{i}" for i in range(n_evs)]
              + ["total_cost", "dqn_loss", "cvae_kl", "cvae_recon", "alpha", "epsilon", "stranded"])
    rows = [[e["episode"], *e["returns"], e["total_cost"], e["dqn_loss"], e["cvae_kl"], e["cvae_recon"],
             e["alpha"], e["epsilon"], e["stranded"]] for e in result.episodes]
    write_csv(run_dir / "metrics.csv", header, rows)
    write_csv(run_dir / "steps.csv", STEP_FIELDS, [[s.get(k) for k in STEP_FIELDS] for s in result.steps])
    write_csv(run_dir / "trace.csv", E.TRACE_HEADER, result.last_trace)
    if result.learner is not None:
        save_checkpoint(run_dir / "checkpoints" / "final.ckpt", result.learner.state_dict())


@dataclass
class EvalReport:
    method: str
    eval_seeds: list[int]
    costs: list[float]
    baseline_costs: list[float]
    cost_ratio: float
    ratio_mean: float
    ratio_std: float
    breakdown: dict
    stranded: int = 0

    @property
    def total_cost(self) -> float:
        return float(sum(self.costs))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate_policy(config: RunConfig, learner: Learner | None, eval_seeds, graph: TrafficGraph | None = None,
                    ri_dump: list | None = None) -> EvalReport:
    """Greedy roll-outs on ``eval_seeds`` next to the shortest-path baseline on the same seeds."""
    graph = graph if graph is not None else load_graph(config.env.graph)
    window = config.hyper.window
    costs, base, strands = [], [], 0
    breakdown = dict.fromkeys(E.COST_KEYS, 0.0)
    for s in eval_seeds:
        res = run_episode(config.env, graph, s, config.method, learner, epsilon=0.0,
                          rng=np.random.default_rng([s, 3]), window=window, ri_dump=ri_dump)
        sp = res if config.method is Method.SHORTEST_PATH else run_episode(
            config.env, graph, s, Method.SHORTEST_PATH, window=window)
        costs.append(res.total_cost)
        base.append(sp.total_cost)
        strands += res.stranded
        for k, v in res.breakdown.items():
            breakdown[k] += v
    per_seed = np.array(base) / np.array(costs)
    return EvalReport(config.method.value, list(eval_seeds), costs, base,
                      float(np.sum(base) / np.sum(costs)), float(per_seed.mean()), float(per_seed.std()),
                      breakdown, strands)


def run_eval(checkpoint: str | Path, config: RunConfig, eval_seeds, ri_dump: list | None = None) -> EvalReport:
    graph = load_graph(config.env.graph)
    learner = make_learner(config, 0, graph)
    if learner is not None:
        try:
            learner.load_state_dict(load_checkpoint(checkpoint))
        except (KeyError, ValueError) as exc:
            raise ValueError(f"checkpoint {checkpoint} does not match the config: {exc}") from exc
    return evaluate_policy(config, learner, eval_seeds, graph, ri_dump)


def train_and_eval(config_dict: dict, seed: int, run_dir: str | None = None) -> dict:
    """Process-pool friendly job: train one (method, seed) and evaluate it."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        config = RunConfig.from_dict(config_dict)
        result = run_training(config, seed, run_dir)
        report = evaluate_policy(config, result.learner, config.eval_seeds)
    out = {"method": config.method.value, "seed": seed, "report": report.to_dict(),
           "final_cvae_loss": final_cvae_loss(result.steps)}
    if run_dir is not None:
        Path(run_dir, "eval.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def final_cvae_loss(steps: list[dict], frac: float = 0.1) -> float | None:
    """Mean CVAE loss (KL + reconstruction) over the last ``frac`` of update steps."""
    vals = [s["cvae_kl"] + s["cvae_recon"] for s in steps if "cvae_kl" in s]
    if not vals:
        return None
    n = max(1, int(len(vals) * frac))
    return float(np.mean(vals[-n:]))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("EVNAV_THREADS", "1")))
    except ValueError:
        return 1


def run_many(jobs: list[tuple[dict, int, str | None]]) -> list[dict]:
    """Run independent (config, seed, run_dir) jobs, in parallel when ``EVNAV_THREADS`` > 1."""
    n = min(worker_count(), len(jobs)) if jobs else 1
    if n <= 1:
        return [train_and_eval(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        futures = [pool.submit(train_and_eval, *j) for j in jobs]
        return [f.result() for f in futures]


def collect_runs(runs_dir: str | Path) -> dict[str, list[dict]]:
    found: dict[str, list[dict]] = {}
    for path in sorted(Path(runs_dir).glob("*/*/eval.json")):
        data = json.loads(path.read_text())
        found.setdefault(data["method"], []).append(data)
    return found


def summarize(found: dict[str, list[dict]]) -> list[dict]:
    rows = []
    order = [m.value for m in METHOD_ORDER]
    for name in sorted(found, key=lambda n: order.index(n) if n in order else len(order)):
        ratios = np.array([d["report"]["cost_ratio"] for d in found[name]])
        costs = np.array([np.mean(d["report"]["costs"]) for d in found[name]])
        cvae = [d["final_cvae_loss"] for d in found[name] if d.get("final_cvae_loss") is not None]
        rows.append({
            "method": name, "seeds": len(ratios), "cost_ratio_mean": float(ratios.mean()),
            "cost_ratio_std": float(ratios.std()), "mean_episode_cost": float(costs.mean()),
            "final_cvae_loss": float(np.mean(cvae)) if cvae else None,
        })
    return rows


def render_table(rows: list[dict]) -> str:
    lines = [f"{'Algorithm':<18} {'seeds':>5} {'cost ratio':>16} {'episode cost':>13} {'CVAE loss':>10}"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        cv = "" if r["final_cvae_loss"] is None else f"{r['final_cvae_loss']:.4f}"
        ratio = f"{r['cost_ratio_mean']:.3f} ± {r['cost_ratio_std']:.3f}"
        lines.append(f"{r['method']:<18} {r['seeds']:>5} {ratio:>16} {r['mean_episode_cost']:>13.2f} {cv:>10}")
    return "\n".join(lines)


def report(runs_dir: str | Path, csv_path: str | Path | None = None) -> str:
    rows = summarize(collect_runs(runs_dir))
    if csv_path is not None:
        keys = ("method", "seeds", "cost_ratio_mean", "cost_ratio_std", "mean_episode_cost", "final_cvae_loss")
        write_csv(Path(csv_path), keys, [[r[k] for k in keys] for r in rows])
    return render_table(rows)
