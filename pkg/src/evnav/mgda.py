"""Two-objective gradient balancing and the per-method learner.

The DQN loss and the CVAE loss both reach the parameters of the decoder and
the LSTM condition encoder (the shared block). On that block the two
gradients are blended with the weight that minimises the norm of their
convex combination; the Q-network and the CVAE encoder are each updated with
their own loss only.
"""

from __future__ import annotations

import numpy as np

from .config import HyperParams, Method
from .cvae import CvaeModel, encode_requests
from .dqn import QNetwork, TargetSync, Transition, td_loss, td_targets
from .nn import Adam, ParamVector


def mgda_alpha(g_d: np.ndarray, g_c: np.ndarray, tol: float = 1e-12) -> float:
    """Weight on ``g_d`` minimising ``|a g_d + (1 - a) g_c|`` over ``a`` in [0, 1]."""
    g_d = np.asarray(g_d, dtype=float)
    g_c = np.asarray(g_c, dtype=float)
    if g_d.shape != g_c.shape:
        raise ValueError("gradients must have the same length")
    diff = g_d - g_c
    denom = float(diff @ diff)
    if np.sqrt(denom) < tol:
        return 0.5
    a = float((g_c - g_d) @ g_c) / denom
    return min(1.0, max(0.0, a))


def combine(g_d: np.ndarray, g_c: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * g_d + (1.0 - alpha) * g_c


def partition_params(qnet: QNetwork, model: CvaeModel) -> dict[str, ParamVector]:
    """Split all trainable arrays into DQN-only, CVAE-encoder-only and shared groups."""
    parts = {
        "dqn": ParamVector.of(qnet),
        "cvae": model.encoder_params(),
        "shared": model.shared_params(),
    }
    seen: dict[int, str] = {}
    for group, pv in parts.items():
        for name, arr, _ in pv.segments:
            if id(arr) in seen:
                raise ValueError(f"{name} assigned to both {seen[id(arr)]} and {group}")
            seen[id(arr)] = group
    everything = ParamVector.of(qnet).segments + model.all_params().segments
    missing = [name for name, arr, _ in everything if id(arr) not in seen]
    if missing:
        raise ValueError(f"unassigned parameters: {missing}")
    return parts


class WiringError(RuntimeError):
    """A method received recommendation input from the wrong source."""


class Learner:
    """Networks, optimisers and the update rule of one learning method."""

    def __init__(self, method: Method, node_count: int, n_stations: int, hyper: HyperParams,
                 rng: np.random.Generator):
        if not method.learns:
            raise ValueError(f"{method.value} has nothing to learn")
        self.method = method
        self.hyper = hyper
        self.node_count = node_count
        self.K = n_stations
        self.rng = rng
        self.ri_dim = hyper.lstm_hidden if method is Method.IQL_LSTM_ONLY else n_stations
        obs_dim = node_count + 1 + self.ri_dim
        self.qnet = QNetwork(obs_dim, n_stations, hyper.dqn_hidden, hyper.dqn_layers, rng, "q")
        self.target = QNetwork(obs_dim, n_stations, hyper.dqn_hidden, hyper.dqn_layers, rng, "q_target")
        self.q_params = ParamVector.of(self.qnet)
        self.sync = TargetSync(self.q_params, ParamVector.of(self.target), hyper.target_sync)
        betas = tuple(hyper.adam_betas)
        self.opt_d = Adam(self.q_params, hyper.lr_dqn, betas, hyper.adam_eps)
        self.model = None
        if method is Method.IQL_LSTM_ONLY or method.uses_cvae:
            self.model = CvaeModel(n_stations, node_count, hyper.cvae_hidden, hyper.lstm_hidden,
                                   hyper.latent_dim, hyper.lstm_layers, hyper.logvar_clip, rng)
        if method is Method.IQL_LSTM_ONLY:
            self.lstm_params = ParamVector.of(self.model.lstm)
            self.opt_lstm = Adam(self.lstm_params, hyper.lr_dqn, betas, hyper.adam_eps)
        if method.uses_cvae:
            self.parts = partition_params(self.qnet, self.model)
            self.opt_c = Adam(self.parts["cvae"], hyper.lr_cvae, betas, hyper.adam_eps)
            self.opt_sh = Adam(self.parts["shared"], hyper.shared_lr, betas, hyper.adam_eps)
        self.updates = 0

    # -- observation assembly ---------------------------------------------------

    def obs_matrix(self, nodes: np.ndarray, socs: np.ndarray, ri: np.ndarray) -> np.ndarray:
        B = len(nodes)
        x = np.zeros((B, self.node_count + 1 + self.ri_dim))
        x[np.arange(B), nodes] = 1.0
        x[:, self.node_count] = socs
        x[:, self.node_count + 1:] = ri
        return x

    def _windows(self, rows: np.ndarray) -> np.ndarray:
        return encode_requests(rows, self.node_count)

    def ri(self, fcc_probs: np.ndarray, window: np.ndarray, mask: np.ndarray, training: bool) -> np.ndarray:
        """Recommendation vector the policy sees for one decision."""
        m = self.method
        if m is Method.IQL:
            out = np.zeros(self.K)
        elif m is Method.IQL_GLOBAL_FCC:
            out = np.array(fcc_probs, dtype=float)
        elif m is Method.IQL_LSTM_ONLY:
            c, _ = self.model.encode_condition(self._windows(window)[None], mask[None])
            out = c[0]
        elif training:
            eps = self.rng.standard_normal((1, self.model.latent_dim))
            out = self.model.reconstruct(fcc_probs, self._windows(window)[None], mask[None], eps)[0]
        else:
            out = self.model.generate(self._windows(window)[None], mask[None])[0]
        self.check_wiring(out, fcc_probs)
        return out

    def check_wiring(self, ri: np.ndarray, fcc_probs: np.ndarray):
        m = self.method
        if ri.shape != (self.ri_dim,):
            raise WiringError(f"{m.value}: RI shape {ri.shape} != ({self.ri_dim},)")
        if m is Method.IQL and np.any(ri != 0):
            raise WiringError("IQL must see a zero RI slice")
        if m is Method.IQL_GLOBAL_FCC and not np.array_equal(ri, fcc_probs):
            raise WiringError("IQL_Global_FCC must see the true FCC tensor")
        if m.uses_cvae and abs(ri.sum() - 1.0) > 1e-9:
            raise WiringError(f"{m.value}: reconstructed RI is not a probability vector")

    def q(self, obs: np.ndarray) -> np.ndarray:
        return self.qnet(obs[None, :])[0]

    # -- updates ----------------------------------------------------------------

    def update(self, batch: list[Transition]) -> dict:
        if not batch:
            raise ValueError("empty batch")
        h = self.hyper
        nodes = np.array([t.node for t in batch])
        socs = np.array([t.soc for t in batch])
        actions = np.array([t.action for t in batch])
        rewards = np.array([t.reward for t in batch]) * h.reward_scale
        terminals = np.array([t.terminal for t in batch])
        next_nodes = np.array([t.next_node for t in batch])
        next_socs = np.array([t.next_soc for t in batch])
        fcc = np.stack([t.fcc_true for t in batch])
        next_fcc = np.stack([t.next_fcc_true for t in batch])
        m = self.method
        self.q_params.zero_grad()
        metrics = {}
        if m in (Method.IQL, Method.IQL_GLOBAL_FCC):
            ri = np.zeros_like(fcc) if m is Method.IQL else fcc
            next_ri = np.zeros_like(next_fcc) if m is Method.IQL else next_fcc
            obs = self.obs_matrix(nodes, socs, ri)
            targets = td_targets(rewards, self.target(self.obs_matrix(next_nodes, next_socs, next_ri)),
                                 terminals, h.gamma)
            loss, _ = td_loss(self.qnet, obs, actions, targets)
            self.opt_d.step()
            metrics["dqn_loss"] = loss
        else:
            win = self._windows(np.stack([t.window for t in batch]))
            mask = np.stack([t.window_mask for t in batch])
            nwin = self._windows(np.stack([t.next_window for t in batch]))
            nmask = np.stack([t.next_window_mask for t in batch])
            if m is Method.IQL_LSTM_ONLY:
                metrics.update(self._update_lstm_only(nodes, socs, actions, rewards, terminals,
                                                      next_nodes, next_socs, win, mask, nwin, nmask))
            else:
                metrics.update(self._update_joint(nodes, socs, actions, rewards, terminals, next_nodes,
                                                  next_socs, fcc, next_fcc, win, mask, nwin, nmask))
        self.sync.tick()
        self.updates += 1
        return metrics

    def _update_lstm_only(self, nodes, socs, actions, rewards, terminals, next_nodes, next_socs,
                          win, mask, nwin, nmask):
        model = self.model
        self.lstm_params.zero_grad()
        c, cache = model.encode_condition(win, mask)
        c_next, _ = model.encode_condition(nwin, nmask)
        targets = td_targets(rewards, self.target(self.obs_matrix(next_nodes, next_socs, c_next)),
                             terminals, self.hyper.gamma)
        loss, d_obs = td_loss(self.qnet, self.obs_matrix(nodes, socs, c), actions, targets)
        dH = np.zeros((len(nodes), win.shape[1], model.cond_dim))
        dH[:, -1, :] = d_obs[:, self.node_count + 1:]
        model.lstm.backward(cache, dH)
        self.opt_d.step()
        self.opt_lstm.step()
        return {"dqn_loss": loss}

    def _update_joint(self, nodes, socs, actions, rewards, terminals, next_nodes, next_socs, fcc,
                      next_fcc, win, mask, nwin, nmask):
        model = self.model
        B, L = len(nodes), model.latent_dim
        shared, enc = self.parts["shared"], self.parts["cvae"]
        shared.zero_grad()
        enc.zero_grad()
        p = model.forward(fcc, win, mask, self.rng.standard_normal((B, L)))
        p_next = model.forward(next_fcc, nwin, nmask, self.rng.standard_normal((B, L)))
        targets = td_targets(rewards, self.target(self.obs_matrix(next_nodes, next_socs, p_next.recon)),
                             terminals, self.hyper.gamma)
        loss_d, d_obs = td_loss(self.qnet, self.obs_matrix(nodes, socs, p.recon), actions, targets)
        model.backward_through_recon(p, d_obs[:, self.node_count + 1:])
        g_d = shared.grad_flat()
        shared.zero_grad()
        model.backward_elbo(p)
        g_c = shared.grad_flat()
        if self.method is Method.IQL_CVAE_MGDA:
            alpha = mgda_alpha(g_d, g_c)
            g_sh = combine(g_d, g_c, alpha)
        else:
            alpha = 0.5
            g_sh = g_d + g_c
        self.opt_d.step()
        self.opt_c.step()
        self.opt_sh.step(g_sh)
        return {
            "dqn_loss": loss_d,
            "cvae_kl": p.kl_mean,
            "cvae_recon": p.recon_mean,
            "alpha": alpha,
            "grad_norm_d": float(np.linalg.norm(g_d)),
            "grad_norm_c": float(np.linalg.norm(g_c)),
        }

    # -- persistence ------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = ParamVector.of(self.qnet).state_dict()
        out.update(ParamVector.of(self.target).state_dict())
        if self.model is not None:
            out.update(self.model.all_params().state_dict())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        ParamVector.of(self.qnet).load_state_dict(state)
        ParamVector.of(self.target).load_state_dict(state)
        if self.model is not None:
            self.model.all_params().load_state_dict(state)
