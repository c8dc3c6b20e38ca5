"""Fully connected VAE written against numpy, with hand-coded
backpropagation and Adam, plus simplex crossover (SPX) in latent space.

Encoder: input -> hidden (ReLU) -> (mean, log-variance).
Decoder: latent -> hidden (ReLU) -> output (sigmoid).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .grid import DensityField, DomainMask

PARAM_NAMES = ("W1", "b1", "Wmu", "bmu", "Wlv", "blv", "W3", "b3", "W4", "b4")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch: int = 10
    learning_rate: float = 1e-3
    kl_weight: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"  # arithmetic precision of the training loop

    def __post_init__(self):
        if min(self.epochs, self.batch) < 1 or self.learning_rate <= 0 or self.kl_weight < 0:
            raise ValueError("training settings must be positive")


@dataclass(frozen=True)
class SpxConfig:
    parents: int = 9
    expansion: float = float(np.sqrt(10.0))
    offspring: int = 1

    def __post_init__(self):
        if self.parents < 2 or self.expansion <= 0:
            raise ValueError("SPX needs >= 2 parents and a positive expansion rate")


@dataclass(eq=False)
class VaeModel:
    params: dict
    mask: Optional[DomainMask] = None
    seed: Optional[int] = None
    loss_history: list = field(default_factory=list)

    @property
    def input_dim(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def latent_dim(self) -> int:
        return self.params["Wmu"].shape[1]

    def encoder_shape(self) -> list[int]:
        return [self.input_dim, self.hidden_dim, self.latent_dim]

    def decoder_shape(self) -> list[int]:
        return [self.latent_dim, self.params["W3"].shape[1], self.params["W4"].shape[1]]


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_model(input_dim: int, hidden: int = 512, latent: int = 8, rng=None, mask=None, seed=None) -> VaeModel:
    if rng is None:
        rng = np.random.default_rng(seed)
    p = {
        "W1": _glorot(rng, input_dim, hidden), "b1": np.zeros(hidden),
        "Wmu": _glorot(rng, hidden, latent), "bmu": np.zeros(latent),
        "Wlv": _glorot(rng, hidden, latent), "blv": np.zeros(latent),
        "W3": _glorot(rng, latent, hidden), "b3": np.zeros(hidden),
        "W4": _glorot(rng, hidden, input_dim), "b4": np.zeros(input_dim),
    }
    return VaeModel(p, mask, seed)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _as_batch(x, model: VaeModel) -> np.ndarray:
    if isinstance(x, DensityField):
        x = x.values
    elif isinstance(x, (list, tuple)) and x and isinstance(x[0], DensityField):
        x = np.stack([f.values for f in x])
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.input_dim:
        raise ValueError(f"input has {x.shape[1]} values, model expects {model.input_dim}")
    return x


def encode_batch(model: VaeModel, x) -> tuple[np.ndarray, np.ndarray]:
    p = model.params
    h = np.maximum(_as_batch(x, model) @ p["W1"] + p["b1"], 0.0)
    mu = h @ p["Wmu"] + p["bmu"]
    lv = h @ p["Wlv"] + p["blv"]
    return mu, np.exp(0.5 * lv)


def encode(model: VaeModel, field) -> tuple[np.ndarray, np.ndarray]:
    """Latent mean and standard deviation of one design."""
    mu, sigma = encode_batch(model, field)
    return mu[0], sigma[0]


def reparameterize(mu, sigma, rng) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    return mu + np.asarray(sigma, dtype=float) * rng.standard_normal(mu.shape)


def decode_values(model: VaeModel, z) -> np.ndarray:
    p = model.params
    z = np.atleast_2d(np.asarray(z, dtype=float))
    h = np.maximum(z @ p["W3"] + p["b3"], 0.0)
    return _sigmoid(h @ p["W4"] + p["b4"])


def decode(model: VaeModel, z, mask: Optional[DomainMask] = None) -> DensityField:
    mask = mask if mask is not None else model.mask
    if mask is None:
        raise ValueError("model has no mask; pass one explicitly")
    return DensityField(mask, decode_values(model, z)[0])


def kl_divergence(mu, logvar) -> np.ndarray:
    """Per-sample KL(N(mu, exp(logvar)) || N(0, I))."""
    mu, logvar = np.atleast_2d(mu), np.atleast_2d(logvar)
    return -0.5 * np.sum(1.0 + logvar - mu**2 - np.exp(logvar), axis=1)


def loss_and_grads(model: VaeModel, x: np.ndarray, eps: np.ndarray, kl_weight: float = 1e-3):
    """Batch loss ``mean(MSE) + kl_weight * mean(KL)`` and its gradients for
    a fixed noise draw ``eps``."""
    p = model.params
    b, d = x.shape
    a1 = x @ p["W1"] + p["b1"]
    h1 = np.maximum(a1, 0.0)
    mu = h1 @ p["Wmu"] + p["bmu"]
    lv = h1 @ p["Wlv"] + p["blv"]
    sigma = np.exp(0.5 * lv)
    z = mu + sigma * eps
    a3 = z @ p["W3"] + p["b3"]
    h3 = np.maximum(a3, 0.0)
    xh = _sigmoid(h3 @ p["W4"] + p["b4"])

    diff = xh - x
    mse = np.mean(diff**2)
    kl = kl_divergence(mu, lv)
    loss = mse + kl_weight * kl.mean()

    g = {}
    da4 = (2.0 / (b * d)) * diff * xh * (1.0 - xh)
    g["W4"] = h3.T @ da4
    g["b4"] = da4.sum(axis=0)
    da3 = (da4 @ p["W4"].T) * (a3 > 0)
    g["W3"] = z.T @ da3
    g["b3"] = da3.sum(axis=0)
    dz = da3 @ p["W3"].T
    c = kl_weight / b
    dmu = dz + c * mu
    dlv = dz * eps * 0.5 * sigma + c * 0.5 * (np.exp(lv) - 1.0)
    g["Wmu"] = h1.T @ dmu
    g["bmu"] = dmu.sum(axis=0)
    g["Wlv"] = h1.T @ dlv
    g["blv"] = dlv.sum(axis=0)
    da1 = (dmu @ p["Wmu"].T + dlv @ p["Wlv"].T) * (a1 > 0)
    g["W1"] = x.T @ da1
    g["b1"] = da1.sum(axis=0)
    return float(loss), g


def reconstruction_mse(model: VaeModel, data) -> float:
    """Mean squared error of decoding the latent means."""
    x = _as_batch(data, model)
    mu, _ = encode_batch(model, x)
    return float(np.mean((decode_values(model, mu) - x) ** 2))


_CHUNK = 32768


def _adam_step(p, g, m, v, t, b1, b2, lr, eps):
    """In-place Adam update; chunked so the working set stays in cache."""
    p, g, m, v, t = (a.reshape(-1) for a in (p, g, m, v, t))
    for s in range(0, p.size, _CHUNK):
        sl = slice(s, s + _CHUNK)
        mk, vk, tk, gk = m[sl], v[sl], t[sl], g[sl]
        mk *= b1
        np.multiply(gk, 1 - b1, out=tk)
        mk += tk
        vk *= b2
        np.multiply(gk, gk, out=tk)
        tk *= 1 - b2
        vk += tk
        np.sqrt(vk, out=tk)
        tk += eps
        np.divide(mk, tk, out=tk)
        tk *= lr
        p[sl] -= tk


def train_vae(data, cfg: TrainConfig = TrainConfig(), rng=None, hidden: int = 512, latent: int = 8,
              model: Optional[VaeModel] = None) -> VaeModel:
    """Train from a fresh Glorot initialisation (or continue ``model``).

    The returned model carries the per-epoch mean loss in ``loss_history``.
    """
    if rng is None:
        rng = np.random.default_rng()
    fields = list(data) if not isinstance(data, np.ndarray) else None
    if fields is not None and not fields:
        raise ValueError("no training data")
    mask = fields[0].mask if fields and isinstance(fields[0], DensityField) else None
    x_all = np.stack([f.values for f in fields]) if mask is not None else np.atleast_2d(np.asarray(data, float))
    if model is None:
        model = init_model(x_all.shape[1], hidden, latent, rng=rng, mask=mask)
    dt = np.dtype(cfg.dtype)
    p = model.params
    for k in PARAM_NAMES:
        p[k] = np.ascontiguousarray(p[k], dtype=dt)
    x_all = x_all.astype(dt)
    m = {k: np.zeros_like(val) for k, val in p.items()}
    v = {k: np.zeros_like(val) for k, val in p.items()}
    tmp = {k: np.empty_like(val) for k, val in p.items()}
    step = 0
    n = len(x_all)
    history = []
    b1, b2 = cfg.beta1, cfg.beta2
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = perm[start : start + cfg.batch]
            eps = rng.standard_normal((len(idx), model.latent_dim)).astype(dt)
            loss, g = loss_and_grads(model, x_all[idx], eps, cfg.kl_weight)
            total += loss * len(idx)
            step += 1
            lr_t = cfg.learning_rate * np.sqrt(1 - b2**step) / (1 - b1**step)
            for k in PARAM_NAMES:
                _adam_step(p[k], g[k], m[k], v[k], tmp[k], b1, b2, lr_t, cfg.eps)
        history.append(total / n)
    for k in PARAM_NAMES:
        p[k] = p[k].astype(np.float64)
    model.loss_history = list(model.loss_history) + history
    return model


def spx_sample(parents, cfg: SpxConfig = SpxConfig(), rng=None, n: Optional[int] = None) -> np.ndarray:
    """Simplex crossover: uniform samples from the simplex spanned by the
    parents after expanding it about their centroid by ``cfg.expansion``.

    Returns an ``(n, dim)`` array (``n`` defaults to ``cfg.offspring``).
    """
    if rng is None:
        rng = np.random.default_rng()
    x = np.atleast_2d(np.asarray(parents, dtype=float))
    k = len(x)
    if k != cfg.parents:
        raise ValueError(f"SPX configured for {cfg.parents} parents, got {k}")
    n = cfg.offspring if n is None else n
    g = x.mean(axis=0)
    y = g + cfg.expansion * (x - g)
    out = np.empty((n, x.shape[1]))
    for s in range(n):
        c = np.zeros(x.shape[1])
        for j in range(1, k):
            r = rng.random() ** (1.0 / j)
            c = r * (y[j - 1] - y[j] + c)
        out[s] = y[-1] + c
    return out


def crossover(fields: Sequence[DensityField], n_vae: int, train_cfg: TrainConfig = TrainConfig(),
              spx_cfg: SpxConfig = SpxConfig(), rng=None, threshold: float = 0.5,
              hidden: int = 512, latent: int = 8, return_model: bool = False):
    """Train a VAE on ``fields`` and decode ``n_vae`` SPX offspring.

    Offspring whose binarized design has no solid element are resampled,
    up to ``10 * n_vae`` draws in total.
    """
    fields = [getattr(f, "field", f) for f in getattr(fields, "members", fields)]
    if rng is None:
        rng = np.random.default_rng()
    model = train_vae(fields, train_cfg, rng, hidden, latent)
    mu, _ = encode_batch(model, fields)
    n_par = spx_cfg.parents
    out: list[DensityField] = []
    attempts = 0
    while len(out) < n_vae:
        replace = len(fields) < n_par
        pick = rng.choice(len(fields), size=n_par, replace=replace)
        z = spx_sample(mu[pick], spx_cfg, rng, n=1)
        child = decode(model, z, fields[0].mask)
        attempts += 1
        if np.any(child.values >= threshold) or attempts >= 10 * n_vae:
            out.append(child)
    return (out, model) if return_model else out


# --- serialisation -----------------------------------------------------------

_MAGIC = "DDTD-VAE 1"


def save_model(model: VaeModel, path) -> Path:
    """Raw little-endian float64 weights after a two-line text header; the
    loss history goes to ``<path>.loss.csv``."""
    path = Path(path)
    header = {
        "shapes": {k: list(model.params[k].shape) for k in PARAM_NAMES},
        "seed": model.seed,
        "dtype": "<f8",
        "mask": None if model.mask is None else {
            "nx": model.mask.nx, "ny": model.mask.ny, "kind": model.mask.kind,
            "active": np.packbits(model.mask.active.ravel()).tobytes().hex(),
        },
    }
    with open(path, "wb") as fh:
        fh.write((_MAGIC + "\n" + json.dumps(header) + "\n").encode("ascii"))
        for k in PARAM_NAMES:
            fh.write(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())
    loss_path = path.with_name(path.name + ".loss.csv")
    with open(loss_path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, val in enumerate(model.loss_history, start=1):
            fh.write(f"{i},{val!r}\n")
    return path


def load_model(path) -> VaeModel:
    path = Path(path)
    raw = path.read_bytes()
    first = raw.index(b"\n")
    second = raw.index(b"\n", first + 1)
    if raw[:first].decode("ascii") != _MAGIC:
        raise ValueError(f"{path}: not a VAE weight file")
    header = json.loads(raw[first + 1 : second])
    pos = second + 1
    params = {}
    for k in PARAM_NAMES:
        shape = tuple(header["shapes"][k])
        count = int(np.prod(shape))
        params[k] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    mask = None
    if header.get("mask"):
        mh = header["mask"]
        bits = np.unpackbits(np.frombuffer(bytes.fromhex(mh["active"]), dtype=np.uint8))
        active = bits[: mh["nx"] * mh["ny"]].astype(bool).reshape(mh["ny"], mh["nx"])
        mask = DomainMask(mh["nx"], mh["ny"], active, kind=mh["kind"])
    history = []
    loss_path = path.with_name(path.name + ".loss.csv")
    if loss_path.exists():
        history = [float(line.split(",")[1]) for line in loss_path.read_text().splitlines()[1:] if line]
    return VaeModel(params, mask, header.get("seed"), history)
