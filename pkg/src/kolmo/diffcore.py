"""Dense networks with hand-written reverse-mode gradients, and Adam.

Only the operations the models need are covered: affine layers, tanh,
inverted dropout and the stable softplus used on rate heads. Each forward
call can return a ``vjp`` closure that maps an output cotangent to an input
cotangent and accumulates parameter gradients into the owning buffers.
"""
from __future__ import annotations

import json
import struct
from typing import Callable, Sequence

import numpy as np


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    # derivative of softplus
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Mlp:
    """Feed-forward network ``layer_sizes[0] -> ... -> layer_sizes[-1]``.

    Hidden layers use tanh; the output layer is affine. Dropout (rate
    ``dropout``) follows each hidden activation in train mode only, with
    inverted scaling so eval mode needs no correction.
    """

    def __init__(self, layer_sizes: Sequence[int], rng: np.random.Generator | None = None,
                 dropout: float = 0.0):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if not 0.0 <= dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        rng = np.random.default_rng() if rng is None else rng
        self.layer_sizes = sizes
        self.dropout = float(dropout)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.grad_weights = [np.zeros_like(w) for w in self.weights]
        self.grad_biases = [np.zeros_like(b) for b in self.biases]

    @property
    def n_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_out(self) -> int:
        return self.layer_sizes[-1]

    def arrays(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def grad_arrays(self):
        for w, b in zip(self.grad_weights, self.grad_biases):
            yield w
            yield b

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                need_vjp: bool = False):
        """Evaluate on a batch ``x`` of shape (B, n_in) or a single vector.

        Returns ``out`` or, with ``need_vjp``, ``(out, vjp)``.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.n_in:
            raise ValueError(f"input dimension {x.shape[1]} != {self.n_in}")
        use_dropout = train and self.dropout > 0.0
        if use_dropout and rng is None:
            raise ValueError("train-mode dropout needs an rng")
        inputs, masks, tanhs = [], [], []
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            if k < last:
                h = np.tanh(z)
                tanhs.append(h)
                if use_dropout:
                    keep = 1.0 - self.dropout
                    mask = (rng.random(h.shape) < keep) / keep
                    h = h * mask
                    masks.append(mask)
                else:
                    masks.append(None)
            else:
                h = z
        out = h[0] if single else h
        if not need_vjp:
            return out

        def vjp(g_out):
            g = np.asarray(g_out, dtype=np.float64)
            if single:
                g = g[None, :]
            for k in range(last, -1, -1):
                self.grad_weights[k] += inputs[k].T @ g
                self.grad_biases[k] += g.sum(axis=0)
                g = g @ self.weights[k].T
                if k > 0:
                    if masks[k - 1] is not None:
                        g = g * masks[k - 1]
                    a = tanhs[k - 1]
                    g = g * (1.0 - a * a)
            return g[0] if single else g

        return out, vjp

    def zero_grad(self):
        for g in self.grad_arrays():
            g[...] = 0.0


class ParamVector:
    """Flat storage for the parameters of several networks plus Adam state.

    After construction every network's weight and gradient arrays are views
    into ``data`` and ``grad``, so optimizers and checkpoints work on one
    vector.
    """

    def __init__(self, nets: Sequence[Mlp]):
        self.nets = list(nets)
        arrays = [a for net in self.nets for a in net.arrays()]
        self.size = int(sum(a.size for a in arrays))
        self.data = np.empty(self.size)
        self.grad = np.zeros(self.size)
        offset = 0
        for net in self.nets:
            new_w, new_b, new_gw, new_gb = [], [], [], []
            for w, b in zip(net.weights, net.biases):
                for arr, dst, gdst in ((w, new_w, new_gw), (b, new_b, new_gb)):
                    view = self.data[offset:offset + arr.size].reshape(arr.shape)
                    view[...] = arr
                    dst.append(view)
                    gdst.append(self.grad[offset:offset + arr.size].reshape(arr.shape))
                    offset += arr.size
            net.weights, net.biases = new_w, new_b
            net.grad_weights, net.grad_biases = new_gw, new_gb
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)
        self.step = 0
        self.rejected = 0

    def zero_grad(self):
        self.grad[...] = 0.0

    def set(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {values.shape}")
        self.data[...] = values

    def copy(self) -> np.ndarray:
        return self.data.copy()


def adam_step(params: ParamVector, lr: float = 1e-3, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One Adam update with decoupled weight decay.

    The gradient buffer is read but not cleared. A non-finite gradient leaves
    the parameters and moments untouched, increments ``params.rejected`` and
    returns False.
    """
    g = params.grad
    if not np.all(np.isfinite(g)):
        params.rejected += 1
        return False
    params.step += 1
    t = params.step
    params.m *= beta1
    params.m += (1.0 - beta1) * g
    params.v *= beta2
    params.v += (1.0 - beta2) * (g * g)
    m_hat = params.m / (1.0 - beta1 ** t)
    v_hat = params.v / (1.0 - beta2 ** t)
    if weight_decay:
        params.data *= 1.0 - lr * weight_decay
    params.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return True


class TapeError(RuntimeError):
    pass


class Tape:
    """Records vjp closures of a chain of forward calls."""

    def __init__(self):
        self._vjps: list[Callable] = []
        self.consumed = False

    def record(self, vjp: Callable):
        if self.consumed:
            raise TapeError("tape already consumed; call reset() before recording")
        self._vjps.append(vjp)

    def reset(self):
        self._vjps.clear()
        self.consumed = False


def mlp_forward(net: Mlp, x, mode: str = "eval", tape: Tape | None = None,
                rng: np.random.Generator | None = None):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if tape is None:
        return net.forward(x, train=mode == "train", rng=rng)
    out, vjp = net.forward(x, train=mode == "train", rng=rng, need_vjp=True)
    tape.record(vjp)
    return out


def backward(tape: Tape, output_cotangent):
    """Propagate ``output_cotangent`` back through the recorded chain.

    Parameter gradients accumulate into the networks' buffers; the input
    cotangent is returned.
    """
    if tape.consumed:
        raise TapeError("tape consumed twice without reset")
    tape.consumed = True
    g = np.asarray(output_cotangent, dtype=np.float64)
    for vjp in reversed(tape._vjps):
        g = vjp(g)
    return g


# checkpoint layout: b"KOLMOCK1" | uint32 LE header length | UTF-8 JSON header
# | float64 LE parameters [| float64 LE adam m | float64 LE adam v]
_MAGIC = b"KOLMOCK1"


def write_checkpoint(path, header: dict, params: ParamVector, with_optimizer: bool = True):
    header = dict(header)
    header["n_params"] = params.size
    header["optimizer"] = {"step": params.step} if with_optimizer else None
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.data.astype("<f8").tobytes())
        if with_optimizer:
            fh.write(params.m.astype("<f8").tobytes())
            fh.write(params.v.astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, np.ndarray, dict | None]:
    """Return ``(header, params, optimizer_state_or_None)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a kolmo checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    body = np.frombuffer(raw[12 + n:], dtype="<f8").astype(np.float64)
    size = header["n_params"]
    params = body[:size]
    opt = None
    if header.get("optimizer") is not None and body.size >= 3 * size:
        opt = {"step": header["optimizer"]["step"], "m": body[size:2 * size], "v": body[2 * size:3 * size]}
    return header, params, opt
