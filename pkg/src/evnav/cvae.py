"""CVAE-LSTM recommendation platform.

A stacked LSTM turns the chronological stream of charging requests into a
condition label ``c``. The encoder maps (FCC probabilities, c) to a diagonal
Gaussian over the latent ``z``; the decoder maps (z, c) back to a probability
vector over stations. At execution time only requests are seen: ``z`` is the
prior mean and ``c`` comes from the request stream.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .nn import (LSTM, MLP, ParamVector, ShapeError, gaussian_reparam, gaussian_reparam_backward,
                 kl_diag_gaussian, kl_diag_gaussian_backward, softmax_backward, softmax_forward)

REQUEST_FIELDS = 3  # node, soc, time fraction


def request_dim(node_count: int) -> int:
    return node_count + 2


def encode_requests(rows: np.ndarray, node_count: int) -> np.ndarray:
    """Expand ``(..., 3)`` rows of (node, soc, time) into one-hot ⊕ soc ⊕ time."""
    rows = np.asarray(rows, dtype=float)
    out = np.zeros(rows.shape[:-1] + (node_count + 2,))
    nodes = rows[..., 0].astype(int)
    np.put_along_axis(out, nodes[..., None], 1.0, axis=-1)
    out[..., node_count] = rows[..., 1]
    out[..., node_count + 1] = rows[..., 2]
    return out


def check_request(row) -> np.ndarray:
    row = np.asarray(row, dtype=float)
    if row.shape != (REQUEST_FIELDS,):
        raise ShapeError("a charging request is (node, soc, time)")
    if not (0 <= row[1] <= 1 and 0 <= row[2] <= 1):
        raise ValueError("request soc and time must lie in [0, 1]")
    return row


@dataclass
class CvaePass:
    """Activations of one batched forward pass, kept for the backward passes."""

    x: np.ndarray
    c: np.ndarray
    lstm_cache: list
    T: int
    mu: np.ndarray
    logvar: np.ndarray
    lv_live: np.ndarray
    enc_cache: list
    eps: np.ndarray
    z: np.ndarray
    dec_cache: list
    recon: np.ndarray
    kl: np.ndarray
    mse: np.ndarray

    @property
    def kl_mean(self) -> float:
        return float(self.kl.mean())

    @property
    def recon_mean(self) -> float:
        return float(self.mse.mean())

    @property
    def loss(self) -> float:
        return self.kl_mean + self.recon_mean


class CvaeModel:
    """Networks of the platform: LSTM condition encoder, CVAE encoder and decoder."""

    def __init__(self, n_stations: int, node_count: int, hidden: int = 64, cond_dim: int = 32,
                 latent_dim: int = 8, lstm_layers: int = 2, logvar_clip: float = 10.0,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.K = n_stations
        self.node_count = node_count
        self.cond_dim = cond_dim
        self.latent_dim = latent_dim
        self.logvar_clip = logvar_clip
        self.lstm = LSTM(request_dim(node_count), cond_dim, lstm_layers, rng, "lstm")
        self.encoder = MLP([n_stations + cond_dim, hidden, 2 * latent_dim], rng, "enc")
        self.decoder = MLP([latent_dim + cond_dim, hidden, n_stations], rng, "dec")

    def shared_params(self) -> ParamVector:
        return ParamVector.of(self.decoder, self.lstm)

    def encoder_params(self) -> ParamVector:
        return ParamVector.of(self.encoder)

    def all_params(self) -> ParamVector:
        return ParamVector.of(self.lstm, self.encoder, self.decoder)

    # -- pieces -----------------------------------------------------------------

    def encode_condition(self, windows: np.ndarray, mask: np.ndarray | None = None):
        """Final top-layer LSTM state over each (already one-hot encoded) window."""
        windows = np.asarray(windows, dtype=float)
        if windows.ndim == 2:
            windows = windows[None]
        if windows.shape[1] == 0:
            raise ValueError("a condition window needs at least one request")
        Hs, cache = self.lstm.forward(windows, mask)
        return Hs[:, -1, :], cache

    def cvae_encode(self, x: np.ndarray, c: np.ndarray):
        x = np.atleast_2d(x)
        if x.shape[1] != self.K:
            raise ShapeError(f"expected {self.K} station probabilities, got {x.shape[1]}")
        if np.any(x < -1e-12) or np.any(np.abs(x.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("encoder input must be a probability vector")
        out, cache = self.encoder.forward(np.concatenate([x, np.atleast_2d(c)], axis=1))
        L = self.latent_dim
        raw_lv = out[:, L:]
        logvar = np.clip(raw_lv, -self.logvar_clip, self.logvar_clip)
        live = (raw_lv > -self.logvar_clip) & (raw_lv < self.logvar_clip)
        return out[:, :L], logvar, live, cache

    def cvae_decode(self, z: np.ndarray, c: np.ndarray):
        z, c = np.atleast_2d(z), np.atleast_2d(c)
        if z.shape[1] != self.latent_dim or c.shape[1] != self.cond_dim:
            raise ShapeError("decoder input dims do not match")
        logits, cache = self.decoder.forward(np.concatenate([z, c], axis=1))
        return softmax_forward(logits), cache

    # -- training ---------------------------------------------------------------

    def forward(self, x: np.ndarray, windows: np.ndarray, mask: np.ndarray | None,
                eps: np.ndarray) -> CvaePass:
        c, lstm_cache = self.encode_condition(windows, mask)
        mu, logvar, live, enc_cache = self.cvae_encode(x, c)
        z = gaussian_reparam(mu, logvar, eps)
        recon, dec_cache = self.cvae_decode(z, c)
        kl = kl_diag_gaussian(mu, logvar)
        mse = np.mean((recon - x) ** 2, axis=1)
        return CvaePass(x, c, lstm_cache, windows.shape[1], mu, logvar, live, enc_cache, eps, z,
                        dec_cache, recon, kl, mse)

    def _lstm_backward(self, p: CvaePass, dc: np.ndarray):
        dH = np.zeros((dc.shape[0], p.T, self.cond_dim))
        dH[:, -1, :] = dc
        self.lstm.backward(p.lstm_cache, dH)

    def backward_elbo(self, p: CvaePass, scale: float = 1.0):
        """Accumulate gradients of ``mean(KL + MSE)`` into encoder, decoder and LSTM."""
        B = p.x.shape[0]
        d_recon = scale * 2.0 * (p.recon - p.x) / (self.K * B)
        d_logits = softmax_backward(p.recon, d_recon)
        d_in = self.decoder.backward(p.dec_cache, d_logits)
        dz, dc = d_in[:, :self.latent_dim], d_in[:, self.latent_dim:]
        dmu, dlv = gaussian_reparam_backward(p.logvar, p.eps, dz)
        kmu, klv = kl_diag_gaussian_backward(p.mu, p.logvar)
        dmu = dmu + scale * kmu / B
        dlv = (dlv + scale * klv / B) * p.lv_live
        d_enc_in = self.encoder.backward(p.enc_cache, np.concatenate([dmu, dlv], axis=1))
        dc = dc + d_enc_in[:, self.K:]
        self._lstm_backward(p, dc)

    def backward_through_recon(self, p: CvaePass, d_recon: np.ndarray):
        """Push a gradient on the reconstruction into decoder and LSTM only.

        The path through the sampled latent back into the encoder is cut, so
        the encoder never sees this gradient.
        """
        d_logits = softmax_backward(p.recon, d_recon)
        d_in = self.decoder.backward(p.dec_cache, d_logits)
        self._lstm_backward(p, d_in[:, self.latent_dim:])

    def elbo_loss(self, x, windows, mask, eps, backward: bool = True):
        p = self.forward(np.atleast_2d(x), windows, mask, eps)
        if backward:
            self.backward_elbo(p)
        return p.loss, p

    def reconstruct(self, x, windows, mask, eps) -> np.ndarray:
        return self.forward(np.atleast_2d(x), windows, mask, eps).recon

    def generate(self, windows: np.ndarray, mask: np.ndarray | None = None,
                 z: np.ndarray | None = None) -> np.ndarray:
        c, _ = self.encode_condition(windows, mask)
        if z is None:
            z = np.zeros((c.shape[0], self.latent_dim))
        return self.cvae_decode(z, c)[0]


class RecommendationSession:
    """Execution-time platform state for one episode.

    It is fed charging requests only and keeps either the last ``window``
    requests (re-encoded from a zero state on every call, matching training)
    or a running LSTM state over the whole stream.
    """

    def __init__(self, model: CvaeModel, window: int = 8, runtime: str = "window",
                 sample_prior: bool = False, rng: np.random.Generator | None = None):
        if runtime not in ("window", "running"):
            raise ValueError("runtime must be 'window' or 'running'")
        self.model = model
        self.runtime = runtime
        self.sample_prior = sample_prior
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.requests: deque = deque(maxlen=window)
        self.state = None
        self.c = None

    def submit(self, request) -> np.ndarray:
        row = check_request(request)
        self.requests.append(row)
        x = encode_requests(row, self.model.node_count)
        if self.runtime == "running":
            self.c, self.state = self.model.lstm.step(x[None, :], self.state)
        else:
            rows = encode_requests(np.array(self.requests), self.model.node_count)
            self.c, _ = self.model.encode_condition(rows[None])
        return self.c[0]

    def recommend(self, request) -> np.ndarray:
        """Take one request, return the recommendation vector for it."""
        c = self.submit(request)[None, :]
        if self.sample_prior:
            z = self.rng.standard_normal((1, self.model.latent_dim))
        else:
            z = np.zeros((1, self.model.latent_dim))
        return self.model.cvae_decode(z, c)[0][0]


def generate_ri(session: RecommendationSession, request) -> np.ndarray:
    return session.recommend(request)
