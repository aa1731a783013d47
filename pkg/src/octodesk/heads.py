"""Action decoding heads over readout embeddings: diffusion (default),
MSE regression, and discretized cross-entropy. All three consume the same
(B, D) readout embedding and predict a chunk of C consecutive actions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T

STEP_EMB_DIM = 16
DEFAULT_STEPS = 20
CLIP_INTERMEDIATE = 3.0
BINS = 256


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step denoising coefficients for K steps.

    Arrays are indexed by step k in 1..K (index 0 is a placeholder except for
    alpha_bar, where alpha_bar[0] = 1). alpha_coef, gamma and sigma are the
    ancestral-update constants: the step is
        x_{k-1} = alpha_coef[k] * (x_k - gamma[k] * eps_hat + sigma[k] * z).
    sigma[1] == 0, so the last step injects no noise.
    """

    steps: int
    alpha_bar: np.ndarray   # (K+1,), strictly decreasing from 1
    alpha: np.ndarray       # (K+1,)
    beta: np.ndarray        # (K+1,)
    alpha_coef: np.ndarray  # (K+1,) = 1/sqrt(alpha_k)
    gamma: np.ndarray       # (K+1,) = (1-alpha_k)/sqrt(1-alpha_bar_k)
    sigma: np.ndarray       # (K+1,) = sqrt(posterior variance)


def cosine_schedule(steps: int = DEFAULT_STEPS, s: float = 0.008,
                    max_beta: float = 0.999) -> DiffusionSchedule:
    """Cosine noise schedule: alpha_bar(t) = f(t)/f(0) with
    f(t) = cos^2(((t/K + s)/(1 + s)) * pi/2), per-step beta clipped to <= max_beta."""
    if steps < 1:
        raise ValueError(f"need at least one diffusion step, got {steps}")

    def f(t):
        return math.cos(((t / steps + s) / (1 + s)) * math.pi / 2.0) ** 2

    f0 = f(0)
    raw_bar = np.array([f(k) / f0 for k in range(steps + 1)])
    beta = np.zeros(steps + 1)
    for k in range(1, steps + 1):
        beta[k] = min(1.0 - raw_bar[k] / raw_bar[k - 1], max_beta)
    alpha = 1.0 - beta
    alpha_bar = np.ones(steps + 1)
    for k in range(1, steps + 1):
        alpha_bar[k] = alpha_bar[k - 1] * alpha[k]

    alpha_coef = np.zeros(steps + 1)
    gamma = np.zeros(steps + 1)
    sigma = np.zeros(steps + 1)
    for k in range(1, steps + 1):
        alpha_coef[k] = 1.0 / math.sqrt(alpha[k])
        gamma[k] = beta[k] / math.sqrt(1.0 - alpha_bar[k])
        post_var = (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]) * beta[k]
        sigma[k] = math.sqrt(post_var)
    assert sigma[1] == 0.0
    return DiffusionSchedule(steps, alpha_bar, alpha, beta, alpha_coef, gamma, sigma)


def forward_noise(actions, k, eps, schedule: DiffusionSchedule):
    """x_k = sqrt(abar_k) * a + sqrt(1 - abar_k) * eps (vectorized over rows)."""
    ab = schedule.alpha_bar[np.asarray(k)]
    while ab.ndim < np.ndim(actions):
        ab = ab[..., None]
    return np.sqrt(ab) * actions + np.sqrt(1.0 - ab) * eps


def step_embedding(k, dim: int = STEP_EMB_DIM) -> np.ndarray:
    """Sinusoidal embedding of integer denoising step indices."""
    k = np.atleast_1d(np.asarray(k, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# diffusion head
# ---------------------------------------------------------------------------

def init_diffusion_head(name: str, d_model: int, chunk: int, action_dim: int,
                        hidden: int, rng: T.Rng, init_std: float = 0.02) -> dict:
    """Denoiser MLP: 3 hidden layers with residual connections and layer norm,
    input = noisy chunk (+) readout embedding (+) step embedding."""
    ca = chunk * action_dim
    in_dim = ca + d_model + STEP_EMB_DIM
    p = {}

    def w(nm, shape):
        p[nm] = T.parameter(rng.normal(shape) * init_std, nm)

    def zeros(nm, shape):
        p[nm] = T.parameter(np.zeros(shape), nm)

    def ones(nm, shape):
        p[nm] = T.parameter(np.ones(shape), nm)

    pre = f"head.{name}"
    w(f"{pre}.w1", (in_dim, hidden)); zeros(f"{pre}.b1", (hidden,))
    ones(f"{pre}.ln1.g", (hidden,)); zeros(f"{pre}.ln1.b", (hidden,))
    for i in (2, 3):
        w(f"{pre}.w{i}", (hidden, hidden)); zeros(f"{pre}.b{i}", (hidden,))
        ones(f"{pre}.ln{i}.g", (hidden,)); zeros(f"{pre}.ln{i}.b", (hidden,))
    w(f"{pre}.wo", (hidden, ca)); zeros(f"{pre}.bo", (ca,))
    return p


def denoise(params: dict, name: str, x_k, e, k, schedule: DiffusionSchedule) -> T.Tensor:
    """eps_theta(x_k, e, k): predict the injected noise. x_k: (B, C*A),
    e: (B, D) embedding, k: (B,) integer steps."""
    pre = f"head.{name}"
    x = x_k if isinstance(x_k, T.Tensor) else T.constant(x_k)
    emb = e if isinstance(e, T.Tensor) else T.constant(e)
    temb = T.constant(step_embedding(k))
    inp = T.concat([x, emb, temb], axis=1)

    def dense_ln_gelu(h, i):
        z = T.add(T.matmul(h, params[f"{pre}.w{i}"]), params[f"{pre}.b{i}"])
        z = T.layer_norm(z, params[f"{pre}.ln{i}.g"], params[f"{pre}.ln{i}.b"])
        return T.gelu(z)

    h = dense_ln_gelu(inp, 1)
    h = T.add(h, dense_ln_gelu(h, 2))
    h = T.add(h, dense_ln_gelu(h, 3))
    return T.add(T.matmul(h, params[f"{pre}.wo"]), params[f"{pre}.bo"])


def _chunk_weights(valid, chunk: int, action_dim: int):
    """(B, C) validity -> (B, C*A) per-element weights (or None for all-valid)."""
    if valid is None:
        return None
    v = np.asarray(valid, dtype=np.float64)
    return np.repeat(v, action_dim, axis=1)


def _masked_mean_sq(node: T.Tensor, weights) -> T.Tensor:
    if weights is None:
        return T.mean(T.mul(node, node))
    sq = T.mul(T.mul(node, node), T.constant(weights))
    total = float(weights.size)
    denom = float(weights.sum())
    return T.scale(T.mean(sq), total / denom)


def diffusion_train_loss(e, actions, valid, params: dict, name: str,
                         schedule: DiffusionSchedule, rng: T.Rng) -> T.Tensor:
    """Noise-prediction objective: sample k ~ U{1..K} and eps ~ N(0, I) per
    example, form x_k by forward noising, regress eps_theta onto eps.
    `valid` (B, C) masks padded chunk positions out of the loss."""
    a = np.asarray(actions, dtype=np.float64)
    b, chunk, action_dim = a.shape
    flat = a.reshape(b, chunk * action_dim)
    k = rng.integers(1, schedule.steps + 1, b)
    eps = rng.normal((b, chunk * action_dim))
    x_k = forward_noise(flat, k, eps, schedule)
    pred = denoise(params, name, x_k, e, k, schedule)
    diff = T.sub(pred, T.constant(eps))
    return _masked_mean_sq(diff, _chunk_weights(valid, chunk, action_dim))


def diffusion_sample(e, params: dict, name: str, chunk: int, action_dim: int,
                     schedule: DiffusionSchedule, rng: T.Rng,
                     deterministic: bool = False,
                     clip_intermediate: float = CLIP_INTERMEDIATE) -> np.ndarray:
    """Ancestral sampling: start from x_K ~ N(0, I), then K update steps
        x_{k-1} = alpha_coef[k] * (x_k - gamma[k] * eps_hat + sigma[k] * z).
    Intermediate iterates are clipped to +-clip_intermediate, the final
    output to [-1, 1]. deterministic=True zeroes every injected z (x_K is
    still drawn from rng)."""
    emb = np.atleast_2d(np.asarray(e.data if isinstance(e, T.Tensor) else e))
    b = emb.shape[0]
    ca = chunk * action_dim
    x = rng.normal((b, ca))
    for k in range(schedule.steps, 0, -1):
        eps_hat = denoise(params, name, x, emb, np.full(b, k), schedule).data
        if deterministic or schedule.sigma[k] == 0.0:
            z = 0.0
        else:
            z = schedule.sigma[k] * rng.normal((b, ca))
        x = schedule.alpha_coef[k] * (x - schedule.gamma[k] * eps_hat + z)
        if k > 1:
            x = np.clip(x, -clip_intermediate, clip_intermediate)
    return np.clip(x, -1.0, 1.0).reshape(b, chunk, action_dim)


# ---------------------------------------------------------------------------
# mse head
# ---------------------------------------------------------------------------

def init_mse_head(name: str, d_model: int, chunk: int, action_dim: int,
                  rng: T.Rng, init_std: float = 0.02) -> dict:
    pre = f"head.{name}"
    return {
        f"{pre}.w": T.parameter(rng.normal((d_model, chunk * action_dim)) * init_std, f"{pre}.w"),
        f"{pre}.b": T.parameter(np.zeros(chunk * action_dim), f"{pre}.b"),
    }


def mse_head(e, params: dict, name: str, chunk: int, action_dim: int) -> T.Tensor:
    """Single dense projection of the readout embedding, tanh-bounded."""
    pre = f"head.{name}"
    emb = e if isinstance(e, T.Tensor) else T.constant(e)
    out = T.tanh(T.add(T.matmul(emb, params[f"{pre}.w"]), params[f"{pre}.b"]))
    return T.reshape(out, (out.shape[0], chunk, action_dim))


def mse_head_loss(e, actions, valid, params: dict, name: str) -> T.Tensor:
    a = np.asarray(actions, dtype=np.float64)
    b, chunk, action_dim = a.shape
    pred = mse_head(e, params, name, chunk, action_dim)
    diff = T.sub(T.reshape(pred, (b, chunk * action_dim)),
                 T.constant(a.reshape(b, chunk * action_dim)))
    return _masked_mean_sq(diff, _chunk_weights(valid, chunk, action_dim))


def mse_head_predict(e, params: dict, name: str, chunk: int, action_dim: int) -> np.ndarray:
    return mse_head(e, params, name, chunk, action_dim).data


# ---------------------------------------------------------------------------
# discretized head
# ---------------------------------------------------------------------------

def encode_bins(actions, bins: int = BINS) -> np.ndarray:
    """Uniform binning of [-1, 1]: floor((a+1)/2 * bins), clamped to [0, bins-1]."""
    a = np.asarray(actions, dtype=np.float64)
    idx = np.floor((a + 1.0) / 2.0 * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def decode_bins(idx, bins: int = BINS) -> np.ndarray:
    """Bin index to bin center: -1 + (i + 0.5) * (2 / bins)."""
    return -1.0 + (np.asarray(idx, dtype=np.float64) + 0.5) * (2.0 / bins)


def init_discrete_head(name: str, d_model: int, chunk: int, action_dim: int,
                       rng: T.Rng, bins: int = BINS, init_std: float = 0.02) -> dict:
    pre = f"head.{name}"
    return {
        f"{pre}.w": T.parameter(rng.normal((d_model, chunk * action_dim * bins)) * init_std, f"{pre}.w"),
        f"{pre}.b": T.parameter(np.zeros(chunk * action_dim * bins), f"{pre}.b"),
    }


def discrete_head_logits(e, params: dict, name: str, chunk: int, action_dim: int,
                         bins: int = BINS) -> T.Tensor:
    pre = f"head.{name}"
    emb = e if isinstance(e, T.Tensor) else T.constant(e)
    out = T.add(T.matmul(emb, params[f"{pre}.w"]), params[f"{pre}.b"])
    return T.reshape(out, (out.shape[0], chunk, action_dim, bins))


def discrete_head_loss(e, actions, valid, params: dict, name: str, bins: int = BINS) -> T.Tensor:
    a = np.asarray(actions, dtype=np.float64)
    b, chunk, action_dim = a.shape
    logits = discrete_head_logits(e, params, name, chunk, action_dim, bins)
    labels = encode_bins(a, bins)
    weight = None
    if valid is not None:
        weight = np.repeat(np.asarray(valid, dtype=np.float64)[:, :, None], action_dim, axis=2)
    return T.cross_entropy_with_logits(logits, labels, weight=weight)


def discrete_head_predict(e, params: dict, name: str, chunk: int, action_dim: int,
                          bins: int = BINS) -> np.ndarray:
    logits = discrete_head_logits(e, params, name, chunk, action_dim, bins).data
    return decode_bins(np.argmax(logits, axis=-1), bins)


# ---------------------------------------------------------------------------
# receding-horizon chunk execution
# ---------------------------------------------------------------------------

class ChunkExecutor:
    """Query a chunk policy every `execute_n` steps and run the first
    `execute_n` actions of each fresh chunk (no temporal ensembling)."""

    def __init__(self, policy_fn, chunk: int, execute_n: int):
        if not 1 <= execute_n <= chunk:
            raise ValueError(f"execute_n {execute_n} must be in [1, chunk {chunk}]")
        self._policy = policy_fn
        self.chunk = chunk
        self.execute_n = execute_n
        self.policy_calls = 0
        self._buffer = None
        self._step = 0

    def reset(self) -> None:
        self._buffer = None
        self._step = 0
        self.policy_calls = 0

    def act(self, observation) -> np.ndarray:
        offset = self._step % self.execute_n
        if offset == 0:
            chunk = np.asarray(self._policy(observation))
            if chunk.shape[0] != self.chunk:
                raise ValueError(f"policy returned chunk of {chunk.shape[0]}, expected {self.chunk}")
            self._buffer = chunk
            self.policy_calls += 1
        self._step += 1
        return self._buffer[offset]
