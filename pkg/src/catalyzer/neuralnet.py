"""Three-layer perceptron mapping vectors onto the unit sphere.

linear -> batchnorm -> relu -> linear -> batchnorm -> relu -> linear -> l2-normalize

Forward and backward passes are written out by hand; there is no autograd.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PARAM_NAMES",
    "STAT_NAMES",
    "Catalyzer",
    "OptimizerState",
    "sgd_step",
    "lr_schedule",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "crc64",
]

PARAM_NAMES = ("w1", "b1", "gamma1", "beta1", "w2", "b2", "gamma2", "beta2", "w3", "b3")
STAT_NAMES = ("mean1", "var1", "mean2", "var2")
CHECKPOINT_MAGIC = b"SPCAT1"


# -- layers -----------------------------------------------------------------

def linear_forward(x, w, b):
    return x @ w + b


def linear_backward(g, x, w):
    return g @ w.T, x.T @ g, g.sum(axis=0)


def batchnorm_forward(x, gamma, beta, eps):
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return gamma * xhat + beta, (xhat, inv_std, mean, var)


def batchnorm_backward(g, cache, gamma):
    xhat, inv_std = cache[0], cache[1]
    n = g.shape[0]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    dx = inv_std / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def relu_backward(g, pre):
    return g * (pre > 0)


def l2norm_forward(z, eps):
    norm = np.sqrt((z * z).sum(axis=1, keepdims=True) + eps)
    return z / norm, norm


def l2norm_backward(g, z, norm):
    # Jacobian (I - y y^T) / norm, with the same smoothed norm as the forward
    return g / norm - z * ((g * z).sum(axis=1, keepdims=True) / norm ** 3)


# -- model ------------------------------------------------------------------

class Catalyzer:
    """The catalyzer network.

    Parameters live in ``self.params`` (keyed by :data:`PARAM_NAMES`) and
    batch-norm running statistics in ``self.stats``.  Computation happens in
    ``dtype``; checkpoints always store float32.
    """

    bn_momentum = 0.9
    bn_eps = 1e-5
    norm_eps = 1e-12

    def __init__(self, d_in: int, d_out: int, d_hidden: int = 1024, seed: int = 0,
                 dtype=np.float32):
        self.d_in, self.d_hidden, self.d_out = d_in, d_hidden, d_out
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        def he_uniform(fan_in, fan_out):
            bound = np.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, (fan_in, fan_out))

        p = {
            "w1": he_uniform(d_in, d_hidden), "b1": np.zeros(d_hidden),
            "gamma1": np.ones(d_hidden), "beta1": np.zeros(d_hidden),
            "w2": he_uniform(d_hidden, d_hidden), "b2": np.zeros(d_hidden),
            "gamma2": np.ones(d_hidden), "beta2": np.zeros(d_hidden),
            "w3": he_uniform(d_hidden, d_out), "b3": np.zeros(d_out),
        }
        self.params = {k: p[k].astype(self.dtype) for k in PARAM_NAMES}
        self.stats = {
            "mean1": np.zeros(d_hidden, self.dtype), "var1": np.ones(d_hidden, self.dtype),
            "mean2": np.zeros(d_hidden, self.dtype), "var2": np.ones(d_hidden, self.dtype),
        }
        self._cache = None

    def __repr__(self):
        return f"Catalyzer(d_in={self.d_in}, d_hidden={self.d_hidden}, d_out={self.d_out}, dtype={self.dtype})"

    def astype(self, dtype) -> "Catalyzer":
        other = object.__new__(Catalyzer)
        other.d_in, other.d_hidden, other.d_out = self.d_in, self.d_hidden, self.d_out
        other.dtype = np.dtype(dtype)
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        other.stats = {k: v.astype(dtype) for k, v in self.stats.items()}
        other._cache = None
        return other

    def copy(self) -> "Catalyzer":
        return self.astype(self.dtype)

    def _hidden(self, h, layer, train):
        p = self.params
        gamma, beta = p[f"gamma{layer}"], p[f"beta{layer}"]
        if train:
            out, cache = batchnorm_forward(h, gamma, beta, self.bn_eps)
            m = self.bn_momentum
            self.stats[f"mean{layer}"] = (m * self.stats[f"mean{layer}"] + (1 - m) * cache[2]).astype(self.dtype)
            self.stats[f"var{layer}"] = (m * self.stats[f"var{layer}"] + (1 - m) * cache[3]).astype(self.dtype)
        else:
            mean, var = self.stats[f"mean{layer}"], self.stats[f"var{layer}"]
            out = gamma * (h - mean) / np.sqrt(var + self.bn_eps) + beta
            cache = None
        return out, cache

    def forward(self, x, train: bool = False, block: int | None = None) -> np.ndarray:
        """Map the rows of ``x`` to unit vectors of dimension ``d_out``.

        Training mode normalizes with batch statistics, updates the running
        statistics and keeps what :meth:`backward` needs.  Eval mode uses the
        running statistics and touches no state.
        """
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"expected input of shape (n, {self.d_in}), got {x.shape}")
        if train and x.shape[0] == 0:
            raise ValueError("empty batch: batch statistics are undefined in train mode")
        if not train and block and x.shape[0] > block:
            return np.concatenate([self.forward(x[i:i + block]) for i in range(0, len(x), block)])
        p = self.params
        x = x.astype(self.dtype, copy=False)
        a1 = linear_forward(x, p["w1"], p["b1"])
        n1, c1 = self._hidden(a1, 1, train)
        h1 = np.maximum(n1, 0)
        a2 = linear_forward(h1, p["w2"], p["b2"])
        n2, c2 = self._hidden(a2, 2, train)
        h2 = np.maximum(n2, 0)
        z = linear_forward(h2, p["w3"], p["b3"])
        y, norm = l2norm_forward(z, self.norm_eps)
        if train:
            self._cache = (x, c1, n1, h1, c2, n2, h2, z, norm)
        return y

    def backward(self, grad_out):
        """Gradients of a scalar loss given its gradient on the last train-mode
        outputs.  Returns ``(param_grads, input_grad)``."""
        if self._cache is None:
            raise RuntimeError("backward() needs a preceding forward(..., train=True)")
        x, c1, n1, h1, c2, n2, h2, z, norm = self._cache
        grad_out = np.asarray(grad_out, dtype=self.dtype)
        if grad_out.shape != z.shape:
            raise ValueError(f"gradient shape {grad_out.shape} does not match output {z.shape}")
        p = self.params
        g = {}
        gz = l2norm_backward(grad_out, z, norm)
        gh2, g["w3"], g["b3"] = linear_backward(gz, h2, p["w3"])
        gn2 = relu_backward(gh2, n2)
        ga2, g["gamma2"], g["beta2"] = batchnorm_backward(gn2, c2, p["gamma2"])
        gh1, g["w2"], g["b2"] = linear_backward(ga2, h1, p["w2"])
        gn1 = relu_backward(gh1, n1)
        ga1, g["gamma1"], g["beta1"] = batchnorm_backward(gn1, c1, p["gamma1"])
        gx, g["w1"], g["b1"] = linear_backward(ga1, x, p["w1"])
        return {k: g[k] for k in PARAM_NAMES}, gx


# -- optimizer --------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 0.1
    momentum: float = 0.9
    buffers: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """In-place SGD with momentum: ``v = momentum * v + g; p -= lr * v``.

    Refuses the whole step if any gradient is non-finite.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}; step refused")
    for name, g in grads.items():
        v = state.buffers.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        state.buffers[name] = v
        params[name] -= (state.lr * v).astype(params[name].dtype)


def lr_schedule(epoch: int, epochs: int = 300) -> float:
    """Step schedule: 0.1, then 0.05 from epoch 80, 0.01 from epoch 120.

    Milestones scale with ``epochs`` so shorter runs keep the same shape.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    scale = epochs / 300
    if epoch < 80 * scale:
        return 0.1
    if epoch < 120 * scale:
        return 0.05
    return 0.01


# -- checkpoints ------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def _crc64_table():
    poly = 0xC96C5795D7870F42
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ poly if c & 1 else c >> 1
        table.append(c)
    return table


_CRC_TABLE = _crc64_table()


def crc64(data: bytes) -> int:
    """CRC-64/XZ (ECMA-182 polynomial, reflected)."""
    crc = 0xFFFFFFFFFFFFFFFF
    t = _CRC_TABLE
    for b in data:
        crc = t[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


def save_checkpoint(model: Catalyzer, path) -> None:
    parts = [struct.pack("<III", model.d_in, model.d_hidden, model.d_out)]
    for name in PARAM_NAMES:
        parts.append(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    for name in STAT_NAMES:
        parts.append(np.ascontiguousarray(model.stats[name], dtype="<f4").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + payload + struct.pack("<Q", crc64(payload)))


def load_checkpoint(path, dtype=np.float32) -> Catalyzer:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:5] == CHECKPOINT_MAGIC[:5] and buf[5:6] != CHECKPOINT_MAGIC[5:]:
        raise CheckpointError(f"{path}: unsupported checkpoint version {buf[5:6]!r}")
    if buf[:6] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a catalyzer checkpoint (magic {buf[:6]!r})")
    if len(buf) < 6 + 12 + 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    payload, (crc,) = buf[6:-8], struct.unpack("<Q", buf[-8:])
    if crc64(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    d_in, d_hidden, d_out = struct.unpack("<III", payload[:12])
    model = Catalyzer(d_in, d_out, d_hidden, dtype=dtype)
    floats = np.frombuffer(payload, dtype="<f4", offset=12)
    shapes = [(k, model.params[k].shape) for k in PARAM_NAMES] + [(k, model.stats[k].shape) for k in STAT_NAMES]
    expected = sum(int(np.prod(s)) for _, s in shapes)
    if floats.size != expected:
        raise CheckpointError(f"{path}: payload holds {floats.size} floats, expected {expected}")
    pos = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        target = model.params if name in model.params else model.stats
        target[name] = floats[pos:pos + size].reshape(shape).astype(dtype)
        pos += size
    return model
