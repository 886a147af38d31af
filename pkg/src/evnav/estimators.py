"""scikit-learn style wrappers around the recommendation platform and the navigator.

Only the parts that behave like a fitted model get this face: the CVAE-LSTM
(request windows in, station probabilities out) and a trained navigation
policy (local observations in, station index out). The environment and the
experiment driver keep their own interfaces.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .config import Method, load_config
from .cvae import CvaeModel, encode_requests
from .nn import Adam

PAD_NODE = -1


def check_windows(X, node_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Validate ``(n, W, 3)`` request windows; rows with node ``-1`` are padding.

    Returns the one-hot encoded windows and the validity mask.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=float)
    if X.ndim == 2:
        X = X[:, None, :]
    if X.ndim != 3 or X.shape[2] != 3:
        raise ValueError(f"request windows must have shape (n, W, 3), got {X.shape}")
    mask = X[..., 0] != PAD_NODE
    if not mask.any(axis=1).all():
        raise ValueError("every window needs at least one request")
    nodes = X[..., 0][mask]
    if np.any(nodes != np.round(nodes)) or nodes.min() < 0 or nodes.max() >= node_count:
        raise ValueError(f"request nodes must be integers in [0, {node_count})")
    rows = np.where(mask[..., None], X, 0.0)
    if np.any((rows[..., 1:] < 0) | (rows[..., 1:] > 1)):
        raise ValueError("request soc and time must lie in [0, 1]")
    return encode_requests(rows, node_count) * mask[..., None], mask


def check_probabilities(y) -> np.ndarray:
    y = check_array(y, dtype=float)
    if np.any(y < 0) or np.any(np.abs(y.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("targets must be probability vectors (rows summing to 1)")
    return y


class CvaeRecommender(TransformerMixin, BaseEstimator):
    """CVAE-LSTM trained on (request window, FCC probabilities) pairs.

    ``predict`` returns the recommendation (decoder at the prior mean),
    ``transform`` the LSTM condition label.
    """

    def __init__(self, node_count=39, hidden=64, cond_dim=32, latent_dim=8, lstm_layers=2,
                 lr_encoder=1e-5, lr_shared=5e-4, steps=2000, batch_size=16, random_state=0):
        self.node_count = node_count
        self.hidden = hidden
        self.cond_dim = cond_dim
        self.latent_dim = latent_dim
        self.lstm_layers = lstm_layers
        self.lr_encoder = lr_encoder
        self.lr_shared = lr_shared
        self.steps = steps
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        windows, mask = check_windows(X, self.node_count)
        y = check_probabilities(y)
        if len(y) != len(windows):
            raise ValueError("X and y have different lengths")
        rng = np.random.default_rng(self.random_state)
        model = CvaeModel(y.shape[1], self.node_count, self.hidden, self.cond_dim, self.latent_dim,
                          self.lstm_layers, rng=rng)
        shared, enc = model.shared_params(), model.encoder_params()
        opt_sh, opt_enc = Adam(shared, self.lr_shared), Adam(enc, self.lr_encoder)
        B = min(self.batch_size, len(y))
        curve = []
        for _ in range(self.steps):
            idx = rng.choice(len(y), size=B, replace=False)
            shared.zero_grad()
            enc.zero_grad()
            _, p = model.elbo_loss(y[idx], windows[idx], mask[idx], rng.standard_normal((B, self.latent_dim)))
            opt_sh.step()
            opt_enc.step()
            curve.append((p.kl_mean, p.recon_mean))
        self.model_ = model
        self.n_stations_ = y.shape[1]
        self.loss_curve_ = np.array(curve)
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        windows, mask = check_windows(X, self.node_count)
        return self.model_.generate(windows, mask)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        windows, mask = check_windows(X, self.node_count)
        return self.model_.encode_condition(windows, mask)[0]

    def score(self, X, y) -> float:
        """Negative mean squared reconstruction error of the recommendation."""
        y = check_probabilities(y)
        return -float(np.mean((self.predict(X) - y) ** 2))


class ChargingNavigator(BaseEstimator):
    """A navigation policy trained in the simulator.

    ``fit`` ignores ``X`` and runs the training loop of ``method`` on
    ``scene``; ``predict`` maps local observation rows ``(node, soc, ri...)``
    to the greedy station index; ``score`` is the cost ratio against the
    shortest-path baseline on the given evaluation seeds.
    """

    def __init__(self, method="IQL_CVAE_MGDA", scene="scene_2ev", episodes=None, random_state=0):
        self.method = method
        self.scene = scene
        self.episodes = episodes
        self.random_state = random_state

    def _config(self):
        config = load_config(self.scene)
        config.method = Method(self.method)
        if self.episodes is not None:
            config.episodes = int(self.episodes)
        return config

    def fit(self, X=None, y=None):
        from .harness import run_training

        config = self._config()
        result = run_training(config, int(self.random_state))
        self.config_ = config
        self.learner_ = result.learner
        self.episode_costs_ = np.array([e["total_cost"] for e in result.episodes])
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "config_")
        if self.learner_ is None:
            raise ValueError("the shortest-path baseline acts on the global state, not on observations")
        lr = self.learner_
        X = check_array(X, dtype=float)
        if X.shape[1] != 2 + lr.ri_dim:
            raise ValueError(f"observation rows need {2 + lr.ri_dim} columns (node, soc, ri)")
        nodes = X[:, 0].astype(int)
        if np.any(nodes != X[:, 0]) or nodes.min() < 0 or nodes.max() >= lr.node_count:
            raise ValueError("node column must hold valid node ids")
        obs = lr.obs_matrix(nodes, X[:, 1], X[:, 2:])
        return np.argmax(lr.qnet(obs), axis=1)

    def score(self, X, y=None) -> float:
        from .harness import evaluate_policy

        check_is_fitted(self, "config_")
        seeds = [int(s) for s in np.ravel(X)]
        return evaluate_policy(self.config_, self.learner_, seeds).cost_ratio
