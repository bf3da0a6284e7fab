"""Small float64 neural-network engine with hand-written reverse mode.

Layers cache what they need during ``forward`` and fill ``grads`` during
``backward``. Only the pieces the censoring models need are here: dense and
strided 1-D convolution layers, pooling, two losses, AdamW and spectral
normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import RngStream

ACTIVATIONS = ("relu", "identity")


class ShapeError(ValueError):
    pass


class BackwardError(RuntimeError):
    pass


def _check_activation(name: str) -> str:
    if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")
    return name


def _init_bound(fan_in: int, activation: str) -> float:
    gain = 6.0 if activation == "relu" else 3.0
    return float(np.sqrt(gain / fan_in))


# --------------------------------------------------------------------------- #
# spectral normalization


@dataclass
class SpectralNormState:
    u: np.ndarray
    n_power_iterations: int = 1

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        norm = np.linalg.norm(self.u)
        if norm == 0:
            raise ValueError("spectral-norm vector u must be nonzero")
        self.u = self.u / norm


def spectral_normalize(weights: np.ndarray, state: SpectralNormState, *, update: bool = True):
    """Divide ``weights`` by a power-iteration estimate of its top singular value.

    Returns ``(normalized, sigma, u, v)``. When ``update`` is true the
    persistent vector ``state.u`` is advanced by ``state.n_power_iterations``
    steps first; otherwise the stored vector is used as is.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"spectral_normalize expects a matrix, got shape {w.shape}")
    if not np.any(w):
        raise ValueError("cannot spectrally normalize a zero matrix")
    if state.u.shape != (w.shape[0],):
        raise ShapeError(f"u has shape {state.u.shape}, weights have {w.shape}")
    u = state.u
    n_iter = state.n_power_iterations if update else 0
    v = w.T @ u
    v /= np.linalg.norm(v)
    for _ in range(n_iter):
        u = w @ v
        u /= np.linalg.norm(u)
        v = w.T @ u
        v /= np.linalg.norm(v)
    if update:
        state.u = u
    sigma = float(u @ w @ v)
    return w / sigma, sigma, u, v


# --------------------------------------------------------------------------- #
# layers


class Layer:
    params: dict
    grads: dict

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def clear_cache(self):
        self._cache = None


class Dense(Layer):
    """Fully connected layer ``act(x W^T + b)`` with optional spectral norm."""

    def __init__(self, n_in: int, n_out: int, activation: str = "relu",
                 rng: RngStream | None = None, spectral: bool = False,
                 n_power_iterations: int = 1):
        self.activation = _check_activation(activation)
        rng = rng or RngStream(0)
        bound = _init_bound(n_in, activation)
        self.params = {
            "weight": rng.uniform(-bound, bound, size=(n_out, n_in)),
            "bias": np.zeros(n_out),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.sn = None
        if spectral:
            u = rng.normal(size=n_out)
            self.sn = SpectralNormState(u, n_power_iterations)
        # power iteration runs on forward only while this is set
        self.sn_update = True
        self._cache = None

    @property
    def n_in(self) -> int:
        return self.params["weight"].shape[1]

    @property
    def n_out(self) -> int:
        return self.params["weight"].shape[0]

    def effective_weight(self, update: bool = False) -> np.ndarray:
        w = self.params["weight"]
        if self.sn is None:
            return w
        return spectral_normalize(w, self.sn, update=update)[0]

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        w = self.params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"dense layer expects input (batch, {w.shape[1]}), got {x.shape}; "
                f"weight shape {w.shape}")
        sn_info = None
        if self.sn is not None:
            w_eff, sigma, u, v = spectral_normalize(w, self.sn, update=self.sn_update)
            sn_info = (w_eff, sigma, u, v)
        else:
            w_eff = w
        pre = x @ w_eff.T + self.params["bias"]
        if self.activation == "relu":
            mask = pre > 0
            out = pre * mask
        else:
            mask = None
            out = pre
        self._cache = (x, mask, sn_info)
        return out

    def backward(self, dy):
        if self._cache is None:
            raise BackwardError("Dense.backward called without a cached forward pass")
        x, mask, sn_info = self._cache
        if mask is not None:
            dy = dy * mask
        w_eff = sn_info[0] if sn_info is not None else self.params["weight"]
        dw = dy.T @ x
        if sn_info is not None:
            _, sigma, u, v = sn_info
            dw = (dw - np.sum(dw * w_eff) * np.outer(u, v)) / sigma
        self.grads["weight"] = dw
        self.grads["bias"] = dy.sum(axis=0)
        return dy @ w_eff


class Conv1D(Layer):
    """Valid (unpadded) strided 1-D convolution over ``(batch, channels, time)``."""

    def __init__(self, in_channels: int, out_channels: int, width: int, stride: int = 1,
                 activation: str = "relu", rng: RngStream | None = None):
        if width < 1 or stride < 1:
            raise ValueError("kernel width and stride must be >= 1")
        self.activation = _check_activation(activation)
        self.stride = int(stride)
        rng = rng or RngStream(0)
        bound = _init_bound(in_channels * width, activation)
        self.params = {
            "weight": rng.uniform(-bound, bound, size=(out_channels, in_channels, width)),
            "bias": np.zeros(out_channels),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    def output_length(self, length: int) -> int:
        width = self.params["weight"].shape[2]
        n = (length - width) // self.stride + 1
        if length < width or n < 1:
            raise ShapeError(f"input length {length} is shorter than kernel width {width}")
        return n

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        w = self.params["weight"]
        if x.ndim != 3 or x.shape[1] != w.shape[1]:
            raise ShapeError(
                f"conv1d expects input (batch, {w.shape[1]}, time), got {x.shape}; "
                f"kernel shape {w.shape}")
        n_out = self.output_length(x.shape[2])
        windows = sliding_window_view(x, w.shape[2], axis=2)[:, :, ::self.stride, :][:, :, :n_out, :]
        pre = np.einsum("nclk,ock->nol", windows, w, optimize=True) + self.params["bias"][:, None]
        if self.activation == "relu":
            mask = pre > 0
            out = pre * mask
        else:
            mask = None
            out = pre
        self._cache = (x.shape, windows, mask)
        return out

    def backward(self, dy):
        if self._cache is None:
            raise BackwardError("Conv1D.backward called without a cached forward pass")
        x_shape, windows, mask = self._cache
        if mask is not None:
            dy = dy * mask
        w = self.params["weight"]
        self.grads["weight"] = np.einsum("nol,nclk->ock", dy, windows, optimize=True)
        self.grads["bias"] = dy.sum(axis=(0, 2))
        dwin = np.einsum("nol,ock->nclk", dy, w, optimize=True)
        dx = np.zeros(x_shape)
        n_out = dy.shape[2]
        span = self.stride * (n_out - 1) + 1
        for k in range(w.shape[2]):
            dx[:, :, k:k + span:self.stride] += dwin[:, :, :, k]
        return dx


class GlobalAvgPool(Layer):
    """Mean over the time axis: ``(batch, channels, time) -> (batch, channels)``."""

    def __init__(self):
        self.params, self.grads = {}, {}
        self._cache = None

    def forward(self, x):
        if x.ndim != 3:
            raise ShapeError(f"pooling expects (batch, channels, time), got {x.shape}")
        self._cache = x.shape
        return x.mean(axis=2)

    def backward(self, dy):
        if self._cache is None:
            raise BackwardError("GlobalAvgPool.backward called without a cached forward pass")
        n, c, t = self._cache
        return np.broadcast_to(dy[:, :, None] / t, (n, c, t)).copy()


class Sequential:
    """An ordered stack of layers; an empty stack is the identity map."""

    def __init__(self, layers: Sequence[Layer] = ()):
        self.layers = list(layers)

    def __len__(self):
        return len(self.layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def named_parameters(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                yield f"{i}.{name}", p

    def named_grads(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.layers):
            for name, g in layer.grads.items():
                yield f"{i}.{name}", g

    def parameters(self) -> list[np.ndarray]:
        return [p for _, p in self.named_parameters()]

    def gradients(self) -> list[np.ndarray]:
        return [g for _, g in self.named_grads()]

    def spectral_layers(self) -> list[Dense]:
        return [l for l in self.layers if isinstance(l, Dense) and l.sn is not None]

    def set_spectral_update(self, flag: bool):
        for layer in self.spectral_layers():
            layer.sn_update = flag

    def clear_cache(self):
        for layer in self.layers:
            layer.clear_cache()


def mlp(sizes: Sequence[int], rng: RngStream, *, spectral: bool = False,
        final_activation: str = "identity") -> Sequential:
    """Dense stack through ``sizes`` with relu between layers."""
    if len(sizes) < 2:
        raise ValueError("an MLP needs at least input and output sizes")
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        act = final_activation if i == len(sizes) - 2 else "relu"
        layers.append(Dense(a, b, act, rng=rng, spectral=spectral))
    return Sequential(layers)


# --------------------------------------------------------------------------- #
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``.

    Returns the loss and its gradient with respect to ``logits``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ShapeError(f"logits must be a nonempty (batch, classes) matrix, got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def logistic_terms(logit, target_sign) -> tuple[float, np.ndarray]:
    """Mean of ``-log sigmoid(sign * logit)`` and its gradient in ``logit``."""
    logit = np.asarray(logit, dtype=np.float64)
    sign = np.broadcast_to(np.asarray(target_sign, dtype=np.float64), logit.shape)
    if not np.all(np.isfinite(logit)):
        raise FloatingPointError("non-finite logits")
    n = logit.size
    margin = sign * logit
    loss = softplus(-margin).mean()
    grad = -sign * sigmoid(-margin) / n
    return float(loss), grad


# --------------------------------------------------------------------------- #
# optimizer


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamWState":
        st = cls(**hyper)
        st.m = [np.zeros_like(p) for p in params]
        st.v = [np.zeros_like(p) for p in params]
        return st


def adamw_step(state: AdamWState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]):
    """One AdamW update, applied to ``params`` in place.

    Decay is decoupled: ``p <- p - lr*wd*p`` before the bias-corrected Adam step.
    """
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeError(
            f"got {len(params)} params, {len(grads)} grads, {len(state.m)} moment buffers")
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"parameter shape {p.shape} vs gradient shape {g.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class AdamW:
    """Binds an :class:`AdamWState` to a fixed parameter list."""

    def __init__(self, params: Sequence[np.ndarray], lr=1e-3, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.state = AdamWState.for_params(self.params, lr=lr, beta1=betas[0],
                                           beta2=betas[1], eps=eps,
                                           weight_decay=weight_decay)

    def step(self, grads: Sequence[np.ndarray]):
        adamw_step(self.state, self.params, grads)
