"""Small fully connected VAE family (VAE, beta-VAE, beta-TCVAE) with manual backprop.

Everything runs in float64 numpy. Weights are stored as (fan_in, fan_out)
matrices so a layer computes ``x @ W + b`` on row-vector batches.

The beta-TCVAE terms follow the usual decomposition of the averaged KL:

    KL = MI + TC + DWKL
    MI   = E[log q(z|x) - log q(z)]
    TC   = E[log q(z) - sum_d log q(z_d)]
    DWKL = E[sum_d log q(z_d) - log p(z)]

with log q(z) and log q(z_d) estimated from the minibatch itself.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dataset import ImageDataset, ImageSample, minibatches
from .errors import (
    BadHeader,
    BatchTooSmall,
    DimensionMismatch,
    TruncatedPayload,
    VersionMismatch,
)

LOGVAR_CLAMP = 10.0
LOG_2PI = float(np.log(2.0 * np.pi))
VARIANTS = ("vae", "beta_vae", "beta_tcvae")
ESTIMATORS = ("mss", "mws")

PARAM_MAGIC = b"TVAEPRM"
PARAM_VERSION = b"1"


@dataclass
class VaeParameters:
    encoder_layers: list
    decoder_layers: list
    latent_dim: int
    input_dim: int

    def __post_init__(self):
        if self.encoder_layers[-1][0].shape[1] != 2 * self.latent_dim:
            raise DimensionMismatch("encoder must output 2 * latent_dim values")
        if self.encoder_layers[0][0].shape[0] != self.input_dim:
            raise DimensionMismatch("encoder input width must equal input_dim")
        if self.decoder_layers[0][0].shape[0] != self.latent_dim:
            raise DimensionMismatch("decoder input width must equal latent_dim")
        if self.decoder_layers[-1][0].shape[1] != self.input_dim:
            raise DimensionMismatch("decoder must output input_dim values")

    def arrays(self) -> list:
        """All parameter arrays in a fixed order (encoder then decoder, W before b)."""
        out = []
        for w, b in self.encoder_layers + self.decoder_layers:
            out.extend((w, b))
        return out

    def with_arrays(self, arrays) -> "VaeParameters":
        arrays = list(arrays)
        n_enc = len(self.encoder_layers)
        pairs = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(arrays) // 2)]
        return replace(self, encoder_layers=pairs[:n_enc], decoder_layers=pairs[n_enc:])

    def copy(self) -> "VaeParameters":
        return self.with_arrays(a.copy() for a in self.arrays())

    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        lv = np.asarray(self.log_variance, dtype=np.float64)
        if self.mean.shape != lv.shape:
            raise DimensionMismatch("mean and log_variance lengths differ")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(lv))):
            raise ValueError("posterior parameters must be finite")
        self.log_variance = np.clip(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP)


@dataclass
class TrainingConfig:
    variant: str = "vae"
    beta: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    hidden_sizes: list = field(default_factory=lambda: [256, 128])
    latent_dim: int = 6
    tc_estimator: str = "mss"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "vae":
            self.beta = 1.0
        if self.beta <= 0 or self.learning_rate <= 0:
            raise ValueError("beta and learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.tc_estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.tc_estimator!r}")


@dataclass
class LossTerms:
    reconstruction: float
    kl_analytic: float
    mutual_info_est: float
    total_correlation_est: float
    dimwise_kl_est: float

    def as_dict(self) -> dict:
        return {
            "reconstruction": self.reconstruction,
            "kl_analytic": self.kl_analytic,
            "mutual_info_est": self.mutual_info_est,
            "total_correlation_est": self.total_correlation_est,
            "dimwise_kl_est": self.dimwise_kl_est,
        }


# --- construction ------------------------------------------------------------

def init_params(input_dim: int, latent_dim: int = 6, hidden_sizes=(256, 128), seed: int = 0) -> VaeParameters:
    rng = np.random.default_rng(seed)

    def stack(sizes):
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            layers.append((w, np.zeros(fan_out)))
        return layers

    hidden = list(hidden_sizes)
    encoder = stack([input_dim] + hidden + [2 * latent_dim])
    decoder = stack([latent_dim] + hidden[::-1] + [input_dim])
    return VaeParameters(encoder, decoder, latent_dim, input_dim)


def zero_params(input_dim: int, latent_dim: int = 6, hidden_sizes=(256, 128)) -> VaeParameters:
    params = init_params(input_dim, latent_dim, hidden_sizes)
    return params.with_arrays(np.zeros_like(a) for a in params.arrays())


# --- forward passes ----------------------------------------------------------

def _mlp(layers, x):
    """Run tanh hidden layers and a linear output; return output and the cache for backprop."""
    inputs = []
    h = x
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.tanh(h)
    return h, inputs


def _mlp_backward(layers, inputs, grad_out):
    grads = [None] * len(layers)
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        x = inputs[i]
        grads[i] = (x.T @ g, g.sum(axis=0))
        if i > 0:
            # inputs[i] is tanh output of layer i-1
            g = (g @ w.T) * (1.0 - x * x)
    return grads, g @ layers[0][0].T


def _as_batch(x, width, what):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] != width:
        raise DimensionMismatch(f"{what} has width {arr.shape[1]}, expected {width}")
    return arr


def _image_vector(image) -> np.ndarray:
    if isinstance(image, ImageSample):
        return image.flat()
    return np.asarray(image, dtype=np.float64).reshape(-1)


def encode_batch(params: VaeParameters, x):
    x = _as_batch(x, params.input_dim, "input")
    out, _ = _mlp(params.encoder_layers, x)
    m = params.latent_dim
    return out[:, :m], np.clip(out[:, m:], -LOGVAR_CLAMP, LOGVAR_CLAMP)


def encode(params: VaeParameters, image) -> GaussianPosterior:
    vec = _image_vector(image)
    if vec.size != params.input_dim:
        raise DimensionMismatch(f"image has {vec.size} pixels, model expects {params.input_dim}")
    mean, log_var = encode_batch(params, vec)
    return GaussianPosterior(mean[0], log_var[0])


def reparameterize(posterior: GaussianPosterior, noise) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != posterior.mean.shape:
        raise DimensionMismatch("noise length must equal latent dimension")
    return posterior.mean + np.exp(0.5 * posterior.log_variance) * noise


def decode_batch(params: VaeParameters, z) -> np.ndarray:
    z = _as_batch(z, params.latent_dim, "latent")
    logits, _ = _mlp(params.decoder_layers, z)
    return 1.0 / (1.0 + np.exp(-logits))


def decode(params: VaeParameters, z, shape: Optional[tuple] = None) -> ImageSample:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.size != params.latent_dim:
        raise DimensionMismatch(f"latent has {z.size} values, model expects {params.latent_dim}")
    pixels = decode_batch(params, z)[0]
    if shape is None:
        side = int(round(np.sqrt(params.input_dim)))
        shape = (side, side) if side * side == params.input_dim else (1, params.input_dim)
    return ImageSample(pixels.reshape(shape))


def kl_diag_gaussian(posterior: GaussianPosterior) -> float:
    mu, lv = posterior.mean, posterior.log_variance
    return float(-0.5 * np.sum(1.0 + lv - mu * mu - np.exp(lv)))


# --- objective ---------------------------------------------------------------

def _log_weights(batch_size: int, dataset_size: int, estimator: str) -> np.ndarray:
    b, d = batch_size, dataset_size
    if estimator == "mws":
        return np.full((b, b), -np.log(b * d))
    if d < b:
        raise ValueError("dataset_size must be at least the batch size")
    w = np.full((b, b), np.log((d - 1) / (d * (b - 1))))
    np.fill_diagonal(w, -np.log(d))
    return w


def _logsumexp(a, axis):
    top = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(top, axis=axis) + np.log(np.sum(np.exp(a - top), axis=axis))


def _softmax(a, axis):
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _forward(params, x, noise, dataset_size, estimator):
    x = _as_batch(x, params.input_dim, "batch")
    n = x.shape[0]
    if n < 2:
        raise BatchTooSmall("decomposition estimates need at least 2 samples")
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (n, params.latent_dim):
        raise DimensionMismatch(f"noise shape {noise.shape} != {(n, params.latent_dim)}")
    m = params.latent_dim
    enc_out, enc_inputs = _mlp(params.encoder_layers, x)
    mu, lv_raw = enc_out[:, :m], enc_out[:, m:]
    lv = np.clip(lv_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP)
    std = np.exp(0.5 * lv)
    z = mu + std * noise
    logits, dec_inputs = _mlp(params.decoder_layers, z)

    recon = np.mean(np.sum(np.logaddexp(0.0, logits) - x * logits, axis=1))
    kl = np.mean(-0.5 * np.sum(1.0 + lv - mu * mu - np.exp(lv), axis=1))

    # log N(z_i,d ; mu_j,d, var_j,d) for every (i, j, d)
    diff = z[:, None, :] - mu[None, :, :]
    inv_var = np.exp(-lv)[None, :, :]
    log_n = -0.5 * (LOG_2PI + lv[None, :, :] + diff * diff * inv_var)
    log_w = _log_weights(n, dataset_size or n, estimator)
    joint = log_n.sum(axis=2) + log_w
    log_q_cond = np.einsum("iid->i", log_n)
    log_qz = _logsumexp(joint, axis=1)
    log_qz_marg = _logsumexp(log_n + log_w[:, :, None], axis=1).sum(axis=1)
    log_pz = -0.5 * np.sum(LOG_2PI + z * z, axis=1)

    terms = LossTerms(
        reconstruction=float(recon),
        kl_analytic=float(kl),
        mutual_info_est=float(np.mean(log_q_cond - log_qz)),
        total_correlation_est=float(np.mean(log_qz - log_qz_marg)),
        dimwise_kl_est=float(np.mean(log_qz_marg - log_pz)),
    )
    cache = dict(
        x=x, noise=noise, mu=mu, lv=lv, lv_raw=lv_raw, std=std, z=z, logits=logits,
        enc_inputs=enc_inputs, dec_inputs=dec_inputs, diff=diff, inv_var=inv_var,
        joint=joint, log_n=log_n, log_w=log_w,
    )
    return terms, cache


def loss(variant: str, terms: LossTerms, beta: float = 1.0) -> float:
    if variant == "vae":
        return terms.reconstruction + terms.kl_analytic
    if variant == "beta_vae":
        return terms.reconstruction + beta * terms.kl_analytic
    if variant == "beta_tcvae":
        return (terms.reconstruction + terms.mutual_info_est
                + beta * terms.total_correlation_est + terms.dimwise_kl_est)
    raise ValueError(f"unknown variant {variant!r}")


def _backward(params, cache, variant, beta):
    x, noise, mu, lv, std, z = (cache[k] for k in ("x", "noise", "mu", "lv", "std", "z"))
    n = x.shape[0]

    g_logits = (1.0 / (1.0 + np.exp(-cache["logits"])) - x) / n
    dec_grads, g_z = _mlp_backward(params.decoder_layers, cache["dec_inputs"], g_logits)

    if variant == "beta_tcvae":
        # latent part of the loss is mean_i[A_i - R_i] + (beta - 1) * mean_i[Q_i - P_i]
        # A: log q(z_i|x_i), Q: log q(z_i), P: sum_d log q(z_i,d), R: log p(z_i)
        s = _softmax(cache["joint"], axis=1)[:, :, None]
        t = _softmax(cache["log_n"] + cache["log_w"][:, :, None], axis=1)
        g_logn = (beta - 1.0) * (s - t)
        idx = np.arange(n)
        g_logn[idx, idx, :] += 1.0
        g_logn /= n
        diff, inv_var = cache["diff"], cache["inv_var"]
        scaled = g_logn * diff * inv_var
        g_z = g_z - scaled.sum(axis=1) + z / n
        g_mu = scaled.sum(axis=0)
        g_lv = (g_logn * (-0.5 + 0.5 * diff * diff * inv_var)).sum(axis=0)
    else:
        scale = beta if variant == "beta_vae" else 1.0
        g_mu = scale * mu / n
        g_lv = scale * 0.5 * (np.exp(lv) - 1.0) / n

    g_mu = g_mu + g_z
    g_lv = g_lv + g_z * noise * 0.5 * std
    raw = cache["lv_raw"]
    g_lv = g_lv * ((raw > -LOGVAR_CLAMP) & (raw < LOGVAR_CLAMP))
    enc_grads, _ = _mlp_backward(params.encoder_layers, cache["enc_inputs"], np.hstack([g_mu, g_lv]))
    return VaeParameters(enc_grads, dec_grads, params.latent_dim, params.input_dim)


def _draw_noise(seed, n, m):
    return np.random.default_rng(seed).standard_normal((n, m))


def decomposition_estimates(params: VaeParameters, batch, dataset_size: int, seed: int = 0,
                            estimator: str = "mss", draws: int = 1) -> LossTerms:
    """Loss terms for one batch, averaged over ``draws`` independent z samples per point.

    MI + TC + DWKL is a Monte Carlo estimate of the analytic KL; more draws
    shrink its variance without changing the expectation.
    """
    x = _as_batch(batch, params.input_dim, "batch")
    if x.shape[0] < 2:
        raise BatchTooSmall("decomposition estimates need at least 2 samples")
    noise = np.random.default_rng(seed).standard_normal((draws, x.shape[0], params.latent_dim))
    rows = [list(_forward(params, x, eps, dataset_size, estimator)[0].as_dict().values())
            for eps in noise]
    return LossTerms(*np.mean(rows, axis=0).tolist())


def loss_and_gradient(params: VaeParameters, batch, config: TrainingConfig, noise=None,
                      dataset_size: Optional[int] = None):
    """Return (LossTerms, scalar loss, gradient) for one minibatch.

    ``noise`` is the per-sample standard normal draw used for z; if omitted it
    is drawn from ``config.seed``.
    """
    x = _as_batch(batch, params.input_dim, "batch")
    if noise is None:
        noise = _draw_noise(config.seed, x.shape[0], params.latent_dim)
    terms, cache = _forward(params, x, noise, dataset_size, config.tc_estimator)
    grads = _backward(params, cache, config.variant, config.beta)
    return terms, loss(config.variant, terms, config.beta), grads


def gradient(params: VaeParameters, batch, config: TrainingConfig, noise=None,
             dataset_size: Optional[int] = None) -> VaeParameters:
    return loss_and_gradient(params, batch, config, noise, dataset_size)[2]


# --- training ----------------------------------------------------------------

class Adam:
    def __init__(self, arrays, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, arrays, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _epoch_batches(n, batch_size, seed):
    batches = minibatches(range(n), batch_size, seed)
    # estimators need pairs, so a trailing singleton joins the previous batch
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def train(dataset, config: TrainingConfig):
    """Fit a model; return (params, history) where history holds epoch-mean LossTerms."""
    x = dataset.as_matrix() if isinstance(dataset, ImageDataset) else np.asarray(dataset, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("dataset is empty")
    n = len(x)
    params = init_params(x.shape[1], config.latent_dim, config.hidden_sizes, config.seed)
    arrays = params.arrays()
    opt = Adam(arrays, lr=config.learning_rate)
    noise_rng = np.random.default_rng([config.seed, 1])
    history = []
    for epoch in range(config.epochs):
        sums = np.zeros(5)
        for idx in _epoch_batches(n, min(config.batch_size, n), [config.seed, 2, epoch]):
            noise = noise_rng.standard_normal((len(idx), config.latent_dim))
            terms, _, grads = loss_and_gradient(params, x[idx], config, noise, n)
            opt.step(arrays, grads.arrays())
            sums += len(idx) * np.array(list(terms.as_dict().values()))
        history.append(LossTerms(*(sums / n).tolist()))
    return params, history


# --- persistence -------------------------------------------------------------

def save_params(params: VaeParameters) -> bytes:
    """Binary layout: magic "TVAEPRM1", u32 layer count, then per layer u32 rows,
    u32 cols and rows*cols f64 values. Each stored matrix is the weight matrix
    with the bias appended as its last row, so rows = fan_in + 1."""
    layers = params.encoder_layers + params.decoder_layers
    buf = io.BytesIO()
    buf.write(PARAM_MAGIC + PARAM_VERSION)
    buf.write(struct.pack("<I", len(layers)))
    for w, b in layers:
        stacked = np.vstack([w, b[None, :]])
        buf.write(struct.pack("<II", *stacked.shape))
        buf.write(np.ascontiguousarray(stacked, dtype="<f8").tobytes())
    return buf.getvalue()


def _split_point(layers) -> int:
    """Index of the first decoder layer.

    Widths chain from layer to layer except at the latent bottleneck, where
    the encoder emits 2M values and the decoder takes M.
    """
    for i in range(len(layers) - 1):
        out_w, next_in = layers[i][0].shape[1], layers[i + 1][0].shape[0]
        if out_w != next_in:
            if out_w != 2 * next_in:
                raise BadHeader("layer widths do not form an encoder/decoder pair")
            return i + 1
    raise BadHeader("no latent bottleneck between layers")


def load_params(data: bytes) -> VaeParameters:
    if len(data) < 8 or data[:7] != PARAM_MAGIC:
        raise BadHeader("not a parameter file")
    if data[7:8] != PARAM_VERSION:
        raise VersionMismatch(f"unsupported parameter file version {data[7:8]!r}")
    pos = 8

    def take(size):
        nonlocal pos
        if pos + size > len(data):
            raise TruncatedPayload(f"needed {size} bytes at offset {pos}")
        chunk = data[pos:pos + size]
        pos += size
        return chunk

    (n_layers,) = struct.unpack("<I", take(4))
    if n_layers < 2:
        raise BadHeader("a model needs at least two layers")
    layers = []
    for _ in range(n_layers):
        rows, cols = struct.unpack("<II", take(8))
        if rows < 2 or cols < 1:
            raise BadHeader(f"invalid layer shape {rows}x{cols}")
        mat = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
        layers.append((mat[:-1].copy(), mat[-1].copy()))
    n_enc = _split_point(layers)
    enc, dec = layers[:n_enc], layers[n_enc:]
    return VaeParameters(enc, dec, dec[0][0].shape[0], enc[0][0].shape[0])
