"""Dense numeric core: layers with hand-written forward/backward passes.

Only the fixed encoder/head stack needs gradients, so there is no general
autodiff: every layer caches what its own backward pass needs during a
training-mode forward, and backward calls run in reverse layer order.
Gradients accumulate into Param.grad (callers zero them first).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Param:
    """A named parameter tensor with an accumulated gradient."""

    __slots__ = ("name", "value", "grad", "decay", "unit_rows")

    def __init__(self, name: str, value: np.ndarray, *, decay: bool = True, unit_rows: bool = False):
        self.name = name
        self.value = value
        self.grad: np.ndarray | None = None
        self.decay = decay  # participates in weight decay
        self.unit_rows = unit_rows  # rows re-normalized after each optimizer step

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


def zero_grads(params: Sequence[Param]) -> None:
    for p in params:
        if p.grad is None or p.grad.shape != p.value.shape:
            p.grad = np.zeros_like(p.value)
        else:
            p.grad.fill(0)


class Layer:
    def params(self) -> list[Param]:
        return []

    def state(self) -> dict[str, np.ndarray]:
        """Non-trainable tensors (running statistics), by name."""
        return {}

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, gy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Linear(Layer):
    """Dense layer; bias=False for layers feeding straight into batch-norm
    (the normalization removes any constant shift, so such a bias would be a
    dead parameter with an exactly-zero gradient)."""

    def __init__(self, d_in: int, d_out: int, rng, dtype, name: str, bias: bool = True):
        bound = math.sqrt(6.0 / d_in)  # Kaiming-uniform
        w = rng.uniform(-bound, bound, (d_out, d_in)).astype(dtype)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(d_out, dtype=dtype)) if bias else None
        self._x = None

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def forward(self, x, train):
        if x.shape[1] != self.weight.value.shape[1]:
            raise ValueError(
                f"{self.weight.name}: expected {self.weight.value.shape[1]} inputs, got {x.shape[1]}"
            )
        if train:
            self._x = x
        y = x @ self.weight.value.T
        if self.bias is not None:
            y += self.bias.value
        return y

    def backward(self, gy):
        if self._x is None:
            raise RuntimeError(f"{self.weight.name}: backward without a cached forward")
        self.weight.grad += gy.T @ self._x
        if self.bias is not None:
            self.bias.grad += gy.sum(axis=0)
        return gy @ self.weight.value


class Conv1d(Layer):
    """Dilated 1-D convolution over (batch, time, channels), 'same' zero padding.

    Forward/backward reduce to single large GEMMs via a strided window view
    (im2col), which is what keeps training tolerable without a framework.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int, dilation: int, rng, dtype, name: str):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same-padding")
        bound = math.sqrt(6.0 / (c_in * kernel))
        w = rng.uniform(-bound, bound, (c_out, c_in, kernel)).astype(dtype)
        self.weight = Param(f"{name}.weight", w)
        self.bias = Param(f"{name}.bias", np.zeros(c_out, dtype=dtype))
        self.dilation = dilation
        self._pad = dilation * (kernel - 1) // 2
        self._cols = None

    def params(self):
        return [self.weight, self.bias]

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        """Materialize all dilated taps as one (B*T, C*k) matrix."""
        kernel = self.weight.value.shape[2]
        t = x.shape[1]
        xp = np.pad(x, ((0, 0), (self._pad, self._pad), (0, 0)))
        span = self.dilation * (kernel - 1) + 1
        win = np.lib.stride_tricks.sliding_window_view(xp, span, axis=1)
        win = win[:, :t, :, :: self.dilation]  # (B, T, C, k) view
        return np.ascontiguousarray(win).reshape(t * x.shape[0], -1)

    def forward(self, x, train):
        c_out, c_in, kernel = self.weight.value.shape
        if x.ndim != 3 or x.shape[2] != c_in:
            raise ValueError(f"{self.weight.name}: expected (B, T, {c_in}), got {x.shape}")
        b, t, _ = x.shape
        cols = self._im2col(x)
        if train:
            self._cols = cols
        y = cols @ self.weight.value.reshape(c_out, -1).T
        y = y.reshape(b, t, c_out)
        y += self.bias.value
        return y

    def backward(self, gy):
        if self._cols is None:
            raise RuntimeError(f"{self.weight.name}: backward without a cached forward")
        c_out, c_in, kernel = self.weight.value.shape
        b, t, _ = gy.shape
        self.bias.grad += gy.sum(axis=(0, 1))
        gy2d = gy.reshape(b * t, c_out)
        self.weight.grad += (gy2d.T @ self._cols).reshape(c_out, c_in, kernel)
        g_cols = (gy2d @ self.weight.value.reshape(c_out, -1)).reshape(b, t, c_in, kernel)
        gxp = np.zeros((b, t + 2 * self._pad, c_in), dtype=gy.dtype)
        for j in range(kernel):
            off = j * self.dilation
            gxp[:, off : off + t, :] += g_cols[:, :, :, j]
        if self._pad:
            return gxp[:, self._pad : -self._pad, :]
        return gxp


class BatchNorm(Layer):
    """Batch normalization; channels on the last axis, all others reduced."""

    def __init__(self, n_features: int, dtype, name: str, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Param(f"{name}.gamma", np.ones(n_features, dtype=dtype), decay=False)
        self.beta = Param(f"{name}.beta", np.zeros(n_features, dtype=dtype), decay=False)
        self.running_mean = np.zeros(n_features, dtype=dtype)
        self.running_var = np.ones(n_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._name = name
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def state(self):
        return {
            f"{self._name}.running_mean": self.running_mean,
            f"{self._name}.running_var": self.running_var,
        }

    def forward(self, x, train):
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            n = x.size // x.shape[-1]
            unbiased = var * (n / max(n - 1, 1))
            self.running_mean += self.momentum * (mean - self.running_mean)
            self.running_var += self.momentum * (unbiased - self.running_var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        if train:
            self._cache = (x_hat, inv_std)
        return self.gamma.value * x_hat + self.beta.value

    def backward(self, gy):
        if self._cache is None:
            raise RuntimeError(f"{self._name}: backward without a cached training forward")
        x_hat, inv_std = self._cache
        axes = tuple(range(gy.ndim - 1))
        n = gy.size // gy.shape[-1]
        self.gamma.grad += (gy * x_hat).sum(axis=axes)
        self.beta.grad += gy.sum(axis=axes)
        g_hat = gy * self.gamma.value
        sum_g = g_hat.sum(axis=axes, keepdims=True)
        sum_gx = (g_hat * x_hat).sum(axis=axes, keepdims=True)
        return (inv_std / n) * (n * g_hat - sum_g - x_hat * sum_gx)


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, train):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, gy):
        return gy * self._mask


class GELU(Layer):
    """Exact (erf-based) GELU."""

    def __init__(self):
        self._x = None

    def forward(self, x, train):
        if train:
            self._x = x
        return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))

    def backward(self, gy):
        x = self._x
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return gy * (cdf + x * pdf)


class StatsPool(Layer):
    """Per-channel mean and standard deviation over time: (B,T,C) -> (B,2C)."""

    def __init__(self, eps: float = 1e-8):
        self.eps = eps
        self._cache = None

    def forward(self, x, train):
        mean = x.mean(axis=1)
        var = x.var(axis=1)
        std = np.sqrt(var + self.eps)
        if train:
            self._cache = (x, mean, std)
        return np.concatenate([mean, std], axis=1)

    def backward(self, gy):
        x, mean, std = self._cache
        c = mean.shape[1]
        t = x.shape[1]
        g_mean = gy[:, :c]
        g_std = gy[:, c:]
        gx = np.empty_like(x)
        gx[:] = g_mean[:, None, :] / t
        gx += (g_std / (t * std))[:, None, :] * (x - mean[:, None, :])
        return gx


class L2Norm(Layer):
    """Row-wise x / (||x|| + 1e-12)."""

    EPS = 1e-12

    def __init__(self):
        self._cache = None

    def forward(self, x, train):
        norm = np.linalg.norm(x, axis=1, keepdims=True)
        y = x / (norm + self.EPS)
        if train:
            self._cache = (x, norm)
        return y

    def backward(self, gy):
        x, norm = self._cache
        n = norm + self.EPS
        n0 = np.maximum(norm, self.EPS)
        dot = (gy * x).sum(axis=1, keepdims=True)
        return gy / n - x * dot / (n * n * n0)


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (normalized rows, row norms); same convention as L2Norm."""
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / (norm + L2Norm.EPS), norm


def l2_normalize_backward(gy: np.ndarray, x: np.ndarray, norm: np.ndarray) -> np.ndarray:
    n = norm + L2Norm.EPS
    n0 = np.maximum(norm, L2Norm.EPS)
    dot = (gy * x).sum(axis=1, keepdims=True)
    return gy / n - x * dot / (n * n * n0)


@dataclass(frozen=True)
class ArchConfig:
    """Encoder/head/prototype dimensions."""

    n_mels: int = 80
    conv_channels: tuple[int, ...] = (128, 128, 128)
    conv_kernels: tuple[int, ...] = (5, 3, 3)
    conv_dilations: tuple[int, ...] = (1, 2, 3)
    embed_dim: int = 512
    head_hidden: int = 2048
    head_out: int = 256
    n_prototypes: int = 1024

    def __post_init__(self):
        if not (len(self.conv_channels) == len(self.conv_kernels) == len(self.conv_dilations)):
            raise ValueError("conv_channels/kernels/dilations must have equal length")
        if not self.conv_channels:
            raise ValueError("need at least one conv layer")


class Network:
    """One parameter copy: TDNN encoder + projection head.

    Encoder: [conv1d -> ReLU -> batch-norm] blocks, statistics pooling,
    linear to embed_dim. Head: linear -> BN -> GELU twice, linear to
    head_out, L2 normalization.
    """

    def __init__(self, arch: ArchConfig, rng, dtype=np.float32):
        self.arch = arch
        self.dtype = dtype
        enc: list[Layer] = []
        c_prev = arch.n_mels
        for i, (c, k, d) in enumerate(
            zip(arch.conv_channels, arch.conv_kernels, arch.conv_dilations)
        ):
            enc.append(Conv1d(c_prev, c, k, d, rng, dtype, name=f"encoder.conv{i}"))
            enc.append(ReLU())
            enc.append(BatchNorm(c, dtype, name=f"encoder.bn{i}"))
            c_prev = c
        enc.append(StatsPool())
        enc.append(Linear(2 * c_prev, arch.embed_dim, rng, dtype, name="encoder.embed"))
        self.encoder_layers = enc

        h = arch.head_hidden
        self.head_layers: list[Layer] = [
            Linear(arch.embed_dim, h, rng, dtype, name="head.fc1", bias=False),
            BatchNorm(h, dtype, name="head.bn1"),
            GELU(),
            Linear(h, h, rng, dtype, name="head.fc2", bias=False),
            BatchNorm(h, dtype, name="head.bn2"),
            GELU(),
            Linear(h, arch.head_out, rng, dtype, name="head.fc3"),
            L2Norm(),
        ]

    # -- parameter plumbing ------------------------------------------------

    def params(self) -> list[Param]:
        out = []
        for layer in self.encoder_layers + self.head_layers:
            out.extend(layer.params())
        return out

    def state(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.encoder_layers + self.head_layers:
            out.update(layer.state())
        return out

    def load_state(self, tensors: Mapping[str, np.ndarray]) -> None:
        for layer in self.encoder_layers + self.head_layers:
            for name, arr in layer.state().items():
                arr[...] = tensors[name]

    def copy_from(self, other: "Network") -> None:
        for mine, theirs in zip(self.params(), other.params(), strict=True):
            if mine.value.shape != theirs.value.shape:
                raise ValueError(f"shape mismatch for {mine.name}")
            mine.value[...] = theirs.value
        self.load_state(other.state())

    # -- forward / backward -------------------------------------------------

    def encoder_forward(self, feats: np.ndarray, train: bool) -> np.ndarray:
        """feats: (batch, frames, n_mels) -> (batch, embed_dim)."""
        x = np.ascontiguousarray(feats, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != self.arch.n_mels:
            raise ValueError(f"expected (batch, frames, {self.arch.n_mels}), got {x.shape}")
        for layer in self.encoder_layers:
            x = layer.forward(x, train)
        return x

    def encoder_backward(self, g_emb: np.ndarray) -> np.ndarray:
        g = g_emb
        for layer in reversed(self.encoder_layers):
            g = layer.backward(g)
        return g

    def head_forward(self, emb: np.ndarray, train: bool) -> np.ndarray:
        x = np.asarray(emb, dtype=self.dtype)
        for layer in self.head_layers:
            x = layer.forward(x, train)
        return x

    def head_backward(self, g_proj: np.ndarray) -> np.ndarray:
        g = g_proj
        for layer in reversed(self.head_layers):
            g = layer.backward(g)
        return g


def grad_check(
    params: Sequence[Param],
    loss_fn: Callable[[], tuple[float, Mapping[str, np.ndarray]]],
    n_probe: int = 32,
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> float:
    """Central finite-difference check of analytic gradients.

    loss_fn() recomputes the scalar loss and its gradient set from scratch
    under the current parameter values. n_probe scalar entries are drawn
    from `params` (weighted by tensor size); for each, the analytic entry is
    compared with (L(p+eps) - L(p-eps)) / (2 eps). Returns the worst relative
    error, with denominator max(|analytic|, |numeric|, 1e-8).

    Central differences are only meaningful where the loss is locally smooth
    and the difference rises above float rounding. For a smooth loss the
    central differences at eps and eps/2 agree to O(eps^2); when a kink (a
    ReLU boundary or a nearest-neighbor switch) sits inside the window they
    do not, so such probes are discarded and redrawn, as are probes whose
    magnitudes sit below the rounding floor of (eps_mach * |L| / eps).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    loss0, grads = loss_fn()
    # snapshot: later loss_fn calls may rewrite the same gradient buffers
    grads = {name: np.array(g, dtype=np.float64, copy=True) for name, g in grads.items()}
    candidates = [p for p in params if p.name in grads]
    if not candidates:
        raise ValueError("no parameters to probe (no matching gradient entries)")
    sizes = np.array([p.value.size for p in candidates], dtype=np.float64)
    probs = sizes / sizes.sum()
    noise_floor = 64.0 * np.finfo(np.float64).eps * max(abs(loss0), 1.0) / eps

    def loss_at(p, idx, value):
        orig = p.value.flat[idx]
        p.value.flat[idx] = value
        loss, _ = loss_fn()
        p.value.flat[idx] = orig
        return loss

    worst = 0.0
    kept = 0
    attempts = 0
    while kept < n_probe and attempts < 20 * n_probe:
        attempts += 1
        p = candidates[int(rng.choice(len(candidates), p=probs))]
        idx = int(rng.integers(0, p.value.size))
        analytic = float(np.asarray(grads[p.name]).flat[idx])
        orig = float(p.value.flat[idx])
        numeric = (loss_at(p, idx, orig + eps) - loss_at(p, idx, orig - eps)) / (2.0 * eps)
        half = (loss_at(p, idx, orig + eps / 2) - loss_at(p, idx, orig - eps / 2)) / eps
        if abs(numeric - half) > 5e-5 * max(abs(numeric), abs(half), 1e-8) + noise_floor:
            continue  # non-smooth inside the window: FD is not a valid oracle here
        if max(abs(analytic), abs(numeric)) < noise_floor:
            continue  # both sides vanish below what FD can resolve
        kept += 1
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    if kept == 0:
        raise RuntimeError("no smooth, measurable probe points found")
    return worst
