"""Sequence variational autoencoder used as the unsupervised anomaly scorer.

A single-layer LSTM encoder maps a window of feature rows to a Gaussian
latent; a single-layer LSTM decoder (fed the latent at every step, followed
by a fully connected output layer) reconstructs the window. The scalar
anomaly score of a window is the reconstruction sum of squares plus the
analytic KL term, evaluated with zero latent noise.

Everything is plain numpy with hand-written reverse-mode gradients through
the unrolled sequence, so training is deterministic for a fixed seed and
checkpoints round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError

_CHECKPOINT_VERSION = 1

# Parameter tensors in a fixed order; gate slices within the 4H axis are
# (input, forget, cell, output).
_PARAM_SHAPES = (
    ("enc_wx", lambda h, l, t, d: (4 * h, d)),
    ("enc_wh", lambda h, l, t, d: (4 * h, h)),
    ("enc_b", lambda h, l, t, d: (4 * h,)),
    ("mu_w", lambda h, l, t, d: (l, h)),
    ("mu_b", lambda h, l, t, d: (l,)),
    ("logvar_w", lambda h, l, t, d: (l, h)),
    ("logvar_b", lambda h, l, t, d: (l,)),
    ("dec_wx", lambda h, l, t, d: (4 * h, l)),
    ("dec_wh", lambda h, l, t, d: (4 * h, h)),
    ("dec_b", lambda h, l, t, d: (4 * h,)),
    ("out_w", lambda h, l, t, d: (d, h)),
    ("out_b", lambda h, l, t, d: (d,)),
)


@dataclass
class ScorerConfig:
    """Geometry and training hyperparameters of the scorer."""

    timestep: int
    n_features: int
    hidden_size: int = 64
    latent_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs_initial: int = 30
    epochs_update: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.timestep < 1 or self.n_features < 1:
            raise ValueError("timestep and n_features must be >= 1")
        if self.hidden_size < 1 or self.latent_size < 1:
            raise ValueError("hidden_size and latent_size must be >= 1")


@dataclass(eq=False)
class SequenceWindow:
    """T consecutive feature rows ending at stream position ``end_index``."""

    rows: np.ndarray
    end_index: int


@dataclass(frozen=True)
class LossValue:
    """Scorer loss split into its reconstruction and KL components."""

    total: float
    recon: float
    kl: float


def parameter_count(config: ScorerConfig) -> int:
    """Total number of scalar parameters for a given geometry."""
    h, l, d = config.hidden_size, config.latent_size, config.n_features
    return 4 * h * (d + h + 1) + 2 * (h * l + l) + 4 * h * (l + h + 1) + (h * d + d)


def reparameterize(mu: np.ndarray, logvar: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Latent draw z = mu + exp(logvar / 2) * noise."""
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ShapeMismatchError(
            f"mu {mu.shape}, logvar {logvar.shape}, noise {noise.shape} must match"
        )
    return mu + np.exp(0.5 * logvar) * noise


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-free: sigmoid(x) = (1 + tanh(x / 2)) / 2
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class LstmVaeScorer:
    """LSTM encoder/decoder VAE scoring windows by negative ELBO.

    Scoring is pure and may run concurrently; ``train`` mutates the single
    parameter set and must not overlap with scoring.
    """

    def __init__(self, config: ScorerConfig):
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        bound = 1.0 / np.sqrt(config.hidden_size)
        self.params: dict[str, np.ndarray] = {}
        for name, shape_fn in _PARAM_SHAPES:
            shape = shape_fn(
                config.hidden_size, config.latent_size, config.timestep, config.n_features
            )
            self.params[name] = self.rng.uniform(-bound, bound, size=shape)

    # ----------------------------------------------------------------- basics

    @property
    def parameter_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def _window_rows(self, window) -> np.ndarray:
        rows = window.rows if isinstance(window, SequenceWindow) else window
        rows = np.asarray(rows, dtype=float)
        t, d = self.config.timestep, self.config.n_features
        if rows.shape != (t, d):
            raise ShapeMismatchError(f"window shape {rows.shape}, expected {(t, d)}")
        return rows

    def _stack(self, windows: Sequence) -> np.ndarray:
        if len(windows) == 0:
            raise ValueError("need at least one window")
        return np.stack([self._window_rows(w) for w in windows])

    # --------------------------------------------------------------- forward

    def _encode_batch(self, x: np.ndarray, need_cache: bool = True):
        b, t, _ = x.shape
        h_n = self.config.hidden_size
        p = self.params
        h = np.zeros((b, h_n))
        c = np.zeros((b, h_n))
        steps = [] if need_cache else None
        x_wx = np.einsum("btd,gd->btg", x, p["enc_wx"]) + p["enc_b"]
        for step in range(t):
            a = x_wx[:, step] + h @ p["enc_wh"].T
            gi = _sigmoid(a[:, :h_n])
            gf = _sigmoid(a[:, h_n : 2 * h_n])
            gg = np.tanh(a[:, 2 * h_n : 3 * h_n])
            go = _sigmoid(a[:, 3 * h_n :])
            c_prev, h_prev = c, h
            c = gf * c_prev + gi * gg
            tc = np.tanh(c)
            h = go * tc
            if need_cache:
                steps.append((gi, gf, gg, go, c_prev, h_prev, tc))
        mu = h @ p["mu_w"].T + p["mu_b"]
        logvar = h @ p["logvar_w"].T + p["logvar_b"]
        return mu, logvar, h, steps

    def _decode_batch(self, z: np.ndarray, t: int, need_cache: bool = True):
        b = z.shape[0]
        h_n = self.config.hidden_size
        p = self.params
        h = np.zeros((b, h_n))
        c = np.zeros((b, h_n))
        steps = [] if need_cache else None
        hs = np.empty((t, b, h_n))
        z_wx = z @ p["dec_wx"].T + p["dec_b"]
        for step in range(t):
            a = z_wx + h @ p["dec_wh"].T
            gi = _sigmoid(a[:, :h_n])
            gf = _sigmoid(a[:, h_n : 2 * h_n])
            gg = np.tanh(a[:, 2 * h_n : 3 * h_n])
            go = _sigmoid(a[:, 3 * h_n :])
            c_prev, h_prev = c, h
            c = gf * c_prev + gi * gg
            tc = np.tanh(c)
            h = go * tc
            hs[step] = h
            if need_cache:
                steps.append((gi, gf, gg, go, c_prev, h_prev, tc))
        xhat = np.einsum("tbh,dh->btd", hs, p["out_w"]) + p["out_b"]
        return xhat, hs, steps

    def encode(self, window) -> tuple[np.ndarray, np.ndarray]:
        """Latent Gaussian parameters (mu, logvar) of one window."""
        rows = self._window_rows(window)
        mu, logvar, _, _ = self._encode_batch(rows[None])
        return mu[0], logvar[0]

    def decode(self, z: np.ndarray, timesteps: int | None = None) -> np.ndarray:
        """Reconstruct ``timesteps`` rows from a latent vector."""
        z = np.asarray(z, dtype=float)
        if z.shape != (self.config.latent_size,):
            raise ShapeMismatchError(
                f"latent shape {z.shape}, expected {(self.config.latent_size,)}"
            )
        t = self.config.timestep if timesteps is None else timesteps
        xhat, _, _ = self._decode_batch(z[None], t)
        return xhat[0]

    def _losses_batch(self, x: np.ndarray, noise: np.ndarray, need_cache: bool = True):
        mu, logvar, h_enc, enc_steps = self._encode_batch(x, need_cache)
        z = mu + np.exp(0.5 * logvar) * noise
        xhat, h_dec, dec_steps = self._decode_batch(z, x.shape[1], need_cache)
        diff = xhat - x
        recon = np.sum(diff * diff, axis=(1, 2))
        kl_terms = -0.5 * (1.0 + logvar - mu * mu - np.exp(logvar))
        kl = np.sum(kl_terms, axis=1)
        if np.any(kl < -1e-9):
            raise NonFiniteError("KL term is negative; loss computation is invalid")
        kl = np.maximum(kl, 0.0)
        cache = (mu, logvar, z, xhat, diff, h_enc, enc_steps, h_dec, dec_steps)
        return recon, kl, cache

    def loss(self, window, noise: np.ndarray | None = None) -> LossValue:
        """Negative ELBO of one window; ``noise=None`` means zero noise."""
        rows = self._window_rows(window)
        if noise is None:
            noise = np.zeros(self.config.latent_size)
        noise = np.asarray(noise, dtype=float)
        if noise.shape != (self.config.latent_size,):
            raise ShapeMismatchError(
                f"noise shape {noise.shape}, expected {(self.config.latent_size,)}"
            )
        recon, kl, _ = self._losses_batch(rows[None], noise[None], need_cache=False)
        total = float(recon[0] + kl[0])
        if not np.isfinite(total):
            raise NonFiniteError("loss overflowed; training has diverged")
        return LossValue(total=total, recon=float(recon[0]), kl=float(kl[0]))

    def score(self, window) -> float:
        """Deterministic anomaly score: loss with zero latent noise."""
        return self.loss(window, noise=None).total

    def score_many(self, windows: Sequence, chunk: int = 512) -> np.ndarray:
        """Batched deterministic scores for a sequence of windows."""
        x = self._stack(windows)
        out = np.empty(x.shape[0])
        zeros = np.zeros((min(chunk, x.shape[0]), self.config.latent_size))
        for start in range(0, x.shape[0], chunk):
            part = x[start : start + chunk]
            recon, kl, _ = self._losses_batch(part, zeros[: part.shape[0]], need_cache=False)
            out[start : start + part.shape[0]] = recon + kl
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite score encountered")
        return out

    # -------------------------------------------------------------- backward

    def _grads_batch(self, x: np.ndarray, cache, weight: float):
        """Gradients of weight * sum_b total_b for the cached forward pass."""
        mu, logvar, z, _, diff, h_enc, enc_steps, h_dec, dec_steps = cache
        h_n = self.config.hidden_size
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        t = x.shape[1]

        dxhat = (2.0 * weight) * diff  # (B,T,D)
        grads["out_w"] = np.einsum("btd,tbh->dh", dxhat, h_dec)
        grads["out_b"] = dxhat.sum(axis=(0, 1))
        dh_ext = dxhat @ p["out_w"]  # (B,T,H)

        dz = np.zeros_like(z)
        dh_rec = np.zeros((x.shape[0], h_n))
        dc_rec = np.zeros((x.shape[0], h_n))
        for step in range(t - 1, -1, -1):
            gi, gf, gg, go, c_prev, h_prev, tc = dec_steps[step]
            dh = dh_ext[:, step] + dh_rec
            do = dh * tc
            dc = dc_rec + dh * go * (1.0 - tc * tc)
            da = np.concatenate(
                [
                    dc * gg * gi * (1.0 - gi),
                    dc * c_prev * gf * (1.0 - gf),
                    dc * gi * (1.0 - gg * gg),
                    do * go * (1.0 - go),
                ],
                axis=1,
            )
            grads["dec_wx"] += da.T @ z
            grads["dec_wh"] += da.T @ h_prev
            grads["dec_b"] += da.sum(axis=0)
            dz += da @ p["dec_wx"]
            dh_rec = da @ p["dec_wh"]
            dc_rec = dc * gf

        # KL gradients plus the reparameterization path from dz.
        std = np.exp(0.5 * logvar)
        noise = (z - mu) / std
        dmu = dz + weight * mu
        dlogvar = dz * noise * 0.5 * std + weight * 0.5 * (np.exp(logvar) - 1.0)

        grads["mu_w"] = dmu.T @ h_enc
        grads["mu_b"] = dmu.sum(axis=0)
        grads["logvar_w"] = dlogvar.T @ h_enc
        grads["logvar_b"] = dlogvar.sum(axis=0)

        dh_rec = dmu @ p["mu_w"] + dlogvar @ p["logvar_w"]
        dc_rec = np.zeros((x.shape[0], h_n))
        for step in range(t - 1, -1, -1):
            gi, gf, gg, go, c_prev, h_prev, tc = enc_steps[step]
            dh = dh_rec
            do = dh * tc
            dc = dc_rec + dh * go * (1.0 - tc * tc)
            da = np.concatenate(
                [
                    dc * gg * gi * (1.0 - gi),
                    dc * c_prev * gf * (1.0 - gf),
                    dc * gi * (1.0 - gg * gg),
                    do * go * (1.0 - go),
                ],
                axis=1,
            )
            grads["enc_wx"] += da.T @ x[:, step]
            grads["enc_wh"] += da.T @ h_prev
            grads["enc_b"] += da.sum(axis=0)
            dh_rec = da @ p["enc_wh"]
            dc_rec = dc * gf
        return grads

    def loss_and_gradients(self, window, noise: np.ndarray | None = None):
        """Loss of one window plus analytic gradients for every tensor."""
        rows = self._window_rows(window)
        if noise is None:
            noise = np.zeros(self.config.latent_size)
        noise = np.asarray(noise, dtype=float)
        recon, kl, cache = self._losses_batch(rows[None], noise[None])
        value = LossValue(float(recon[0] + kl[0]), float(recon[0]), float(kl[0]))
        grads = self._grads_batch(rows[None], cache, weight=1.0)
        return value, grads

    # -------------------------------------------------------------- training

    def train(self, windows: Sequence, epochs: int) -> "LstmVaeScorer":
        """Adam minimization of the mean loss over ``windows``.

        The optimizer state is fresh for each call; parameters continue from
        their current values, so repeated calls fine-tune the model.
        """
        if epochs <= 0:
            return self
        x = self._stack(windows)
        n = x.shape[0]
        cfg = self.config
        batch = max(1, min(cfg.batch_size, n))
        m_state = {k: np.zeros_like(v) for k, v in self.params.items()}
        v_state = {k: np.zeros_like(v) for k, v in self.params.items()}
        step = 0
        for _ in range(epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, batch):
                idx = order[start : start + batch]
                xb = x[idx]
                noise = self.rng.standard_normal((xb.shape[0], cfg.latent_size))
                recon, kl, cache = self._losses_batch(xb, noise)
                mean_loss = float(np.mean(recon + kl))
                if not np.isfinite(mean_loss):
                    raise NonFiniteError("training diverged to a non-finite loss")
                grads = self._grads_batch(xb, cache, weight=1.0 / xb.shape[0])
                step += 1
                bc1 = 1.0 - cfg.adam_beta1**step
                bc2 = 1.0 - cfg.adam_beta2**step
                for k, g in grads.items():
                    m_state[k] = cfg.adam_beta1 * m_state[k] + (1.0 - cfg.adam_beta1) * g
                    v_state[k] = cfg.adam_beta2 * v_state[k] + (1.0 - cfg.adam_beta2) * g * g
                    self.params[k] -= (
                        cfg.learning_rate * (m_state[k] / bc1) / (np.sqrt(v_state[k] / bc2) + cfg.adam_eps)
                    )
        return self

    def mean_loss(self, windows: Sequence) -> float:
        """Mean deterministic loss over a set of windows."""
        return float(np.mean(self.score_many(windows)))

    # ------------------------------------------------------------ checkpoint

    def save(self, path) -> None:
        """Write a versioned checkpoint; round-trips bit-exactly."""
        payload = {name: self.params[name] for name, _ in _PARAM_SHAPES}
        payload["format_version"] = np.array(_CHECKPOINT_VERSION)
        payload["config_json"] = np.array(json.dumps(asdict(self.config)))
        np.savez(path, **payload)

    @classmethod
    def load(cls, path) -> "LstmVaeScorer":
        with np.load(path, allow_pickle=False) as data:
            version = int(data["format_version"])
            if version != _CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            config = ScorerConfig(**json.loads(str(data["config_json"])))
            scorer = cls(config)
            for name, _ in _PARAM_SHAPES:
                tensor = data[name]
                if tensor.shape != scorer.params[name].shape:
                    raise ShapeMismatchError(
                        f"checkpoint tensor {name} has shape {tensor.shape}"
                    )
                scorer.params[name] = tensor.copy()
        return scorer
