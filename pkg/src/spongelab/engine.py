"""Dense CHW primitives with a reverse-mode tape.

Images and feature maps are plain ``float64`` numpy arrays laid out as
channels x height x width; there is no batch axis. A network is expressed
as a :class:`Program`, a straight-line list of :class:`Step` objects whose
outputs land in numbered registers (register 0 holds the input).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .validation import check_tensor


@dataclass(frozen=True, eq=False)
class BnParams:
    """Inference-time batch normalisation parameters for one site.

    ``sigma_hat`` is the running *variance*; ``eps`` is added under the
    square root.
    """

    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        arrays = {}
        for name in ("mu_hat", "sigma_hat", "gamma", "beta"):
            arr = np.array(getattr(self, name), dtype=np.float64).reshape(-1)
            arr.setflags(write=False)
            arrays[name] = arr
            object.__setattr__(self, name, arr)
        if len({a.shape for a in arrays.values()}) != 1:
            raise ShapeError("BnParams arrays must share one channel count")
        if np.any(arrays["sigma_hat"] < 0):
            raise ValueError("running variance must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    @property
    def channels(self):
        return self.mu_hat.shape[0]

    @property
    def scale(self):
        return self.gamma / np.sqrt(self.sigma_hat + self.eps)

    @classmethod
    def identity(cls, channels, eps=1e-5):
        return cls(
            np.zeros(channels), np.ones(channels), np.ones(channels), np.zeros(channels), eps
        )

    def replace(self, **changes):
        fields = dict(
            mu_hat=self.mu_hat,
            sigma_hat=self.sigma_hat,
            gamma=self.gamma,
            beta=self.beta,
            eps=self.eps,
        )
        fields.update(changes)
        return BnParams(**fields)

    def __eq__(self, other):
        if not isinstance(other, BnParams):
            return NotImplemented
        return self.eps == other.eps and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("mu_hat", "sigma_hat", "gamma", "beta")
        )


# -- forward primitives -------------------------------------------------------


def _out_extent(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo):
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def _conv_geometry(x, weight, stride, padding):
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects CHW input and OCKK weight, got {x.shape}, {weight.shape}")
    if x.shape[0] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[0]}, weight {weight.shape[1]}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d needs stride >= 1 and padding >= 0")
    ho = _out_extent(x.shape[1], weight.shape[2], stride, padding)
    wo = _out_extent(x.shape[2], weight.shape[3], stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output extent {ho}x{wo} is not positive")
    return ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Zero-padded cross-correlation, ``O x H' x W'`` output."""
    ho, wo = _conv_geometry(x, weight, stride, padding)
    o, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    out = weight.reshape(o, -1) @ _im2col(xp, kh, kw, stride, ho, wo)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d bias must have shape ({o},), got {bias.shape}")
        out += bias[:, None]
    return out.reshape(o, ho, wo)


def batchnorm_infer(z, p):
    if z.ndim < 1 or z.shape[0] != p.channels:
        raise ShapeError(f"batchnorm channel mismatch: input {z.shape}, params {p.channels}")
    tail = (1,) * (z.ndim - 1)
    denom = np.sqrt(p.sigma_hat + p.eps).reshape(-1, *tail)
    return (z - p.mu_hat.reshape(-1, *tail)) / denom * p.gamma.reshape(-1, *tail) + p.beta.reshape(
        -1, *tail
    )


def relu(x):
    return np.maximum(x, 0.0)


def _pool_windows(x, window, stride):
    if x.ndim != 3:
        raise ShapeError(f"pooling expects CHW input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ShapeError("pool window and stride must be >= 1")
    ho = _out_extent(x.shape[1], window, stride, 0)
    wo = _out_extent(x.shape[2], window, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {window} does not fit input {x.shape}")
    stack = np.empty((window * window, x.shape[0], ho, wo))
    for i in range(window):
        for j in range(window):
            stack[i * window + j] = x[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return stack


def maxpool2d(x, window, stride):
    return _pool_windows(x, window, stride).max(axis=0)


def avgpool2d(x, window, stride):
    return _pool_windows(x, window, stride).mean(axis=0)


def global_avg_pool(x):
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool expects CHW input, got {x.shape}")
    return x.reshape(x.shape[0], -1).mean(axis=1)


def linear(x, weight, bias=None):
    x = x.reshape(-1)
    if weight.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"linear weight {weight.shape} incompatible with input length {x.shape[0]}")
    out = weight @ x
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear bias must have shape ({weight.shape[0]},)")
        out = out + bias
    return out


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


# -- backward rules -----------------------------------------------------------


def conv2d_backward(dout, x, weight, stride, padding):
    """Return (dx, dweight, dbias) for :func:`conv2d`."""
    o, c, kh, kw = weight.shape
    _, ho, wo = dout.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    d2 = dout.reshape(o, -1)
    dweight = (d2 @ _im2col(xp, kh, kw, stride, ho, wo).T).reshape(weight.shape)
    dcols = (weight.reshape(o, -1).T @ d2).reshape(c, kh, kw, ho, wo)
    dxp = np.zeros(xp.shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    h, w = x.shape[1:]
    dx = dxp[:, padding : padding + h, padding : padding + w]
    return dx, dweight, d2.sum(axis=1)


def batchnorm_backward(dout, z, p):
    """Return (dz, dgamma, dbeta); running statistics are not differentiated."""
    tail = (1,) * (z.ndim - 1)
    inv = 1.0 / np.sqrt(p.sigma_hat + p.eps)
    xhat = (z - p.mu_hat.reshape(-1, *tail)) * inv.reshape(-1, *tail)
    axes = tuple(range(1, z.ndim))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    return dout * (p.gamma * inv).reshape(-1, *tail), dgamma, dbeta


def relu_backward(dout, x):
    # subgradient at 0 is 0
    return dout * (x > 0)


def maxpool2d_backward(dout, x, window, stride):
    stack = _pool_windows(x, window, stride)
    arg = stack.argmax(axis=0)
    _, ho, wo = dout.shape
    dx = np.zeros(x.shape)
    for i in range(window):
        for j in range(window):
            hit = arg == i * window + j
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dout * hit
    return dx


def avgpool2d_backward(dout, x, window, stride):
    _, ho, wo = dout.shape
    dx = np.zeros(x.shape)
    share = dout / (window * window)
    for i in range(window):
        for j in range(window):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += share
    return dx


def global_avg_pool_backward(dout, x):
    h, w = x.shape[1:]
    return np.broadcast_to((dout / (h * w))[:, None, None], x.shape).copy()


def linear_backward(dout, x, weight):
    flat = x.reshape(-1)
    return (weight.T @ dout).reshape(x.shape), np.outer(dout, flat), dout.copy()


# -- programs and tapes -------------------------------------------------------


@dataclass(frozen=True)
class Step:
    """One primitive application.

    ``params`` maps a role (``weight``, ``bias``, ``bn``) to a key of the
    owning :class:`Program`'s parameter dict; ``site`` names the probe site.
    """

    op: str
    inputs: tuple
    params: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)
    site: str = ""


@dataclass(frozen=True)
class Program:
    steps: tuple
    params: dict

    def __len__(self):
        return len(self.steps)

    @property
    def output_register(self):
        return len(self.steps)

    def registers(self, op):
        """Output registers of every step running ``op``."""
        return [i + 1 for i, s in enumerate(self.steps) if s.op == op]


def _param(program, step, role):
    key = step.params.get(role)
    return None if key is None else program.params[key]


def apply_step(program, step, values):
    args = [values[i] for i in step.inputs]
    a = step.attrs
    if step.op == "conv":
        return conv2d(
            args[0], _param(program, step, "weight"), _param(program, step, "bias"),
            a.get("stride", 1), a.get("padding", 0),
        )
    if step.op == "bn":
        return batchnorm_infer(args[0], _param(program, step, "bn"))
    if step.op == "relu":
        return relu(args[0])
    if step.op == "maxpool":
        return maxpool2d(args[0], a["window"], a["stride"])
    if step.op == "avgpool":
        return avgpool2d(args[0], a["window"], a["stride"])
    if step.op == "gap":
        return global_avg_pool(args[0])
    if step.op == "linear":
        return linear(args[0], _param(program, step, "weight"), _param(program, step, "bias"))
    if step.op == "add":
        return add(args[0], args[1])
    raise ValueError(f"unknown op {step.op!r}")


def run(program, x):
    """Plain forward pass; returns every register value (input first)."""
    values = [check_tensor(x, name="input")]
    for step in program.steps:
        values.append(apply_step(program, step, values))
    return values


@dataclass(frozen=True)
class Tape:
    """Executed program plus every intermediate it produced."""

    program: Program
    values: tuple

    def __len__(self):
        return len(self.program.steps)

    @property
    def output(self):
        return self.values[-1]

    def replay(self):
        """Re-execute the program from the recorded input."""
        return run(self.program, self.values[0])


def forward_taped(program, x):
    values = run(program, x)
    return values[-1], Tape(program, tuple(values))


def forward(program, x):
    return run(program, x)[-1]


def backward(tape, output_grad, return_param_grads=False):
    """Reverse sweep over ``tape``.

    ``output_grad`` is either the gradient w.r.t. the program output, or a
    dict mapping register index to the gradient seeded at that register.
    Returns the input gradient, and with ``return_param_grads`` also a dict
    of parameter gradients keyed like ``program.params`` (BN entries hold a
    ``{"gamma": ..., "beta": ...}`` dict).
    """
    program, values = tape.program, tape.values
    seeds = output_grad if isinstance(output_grad, dict) else {len(values) - 1: output_grad}
    grads = [None] * len(values)
    for reg, g in seeds.items():
        g = np.asarray(g, dtype=np.float64)
        if g.shape != values[reg].shape:
            raise ShapeError(
                f"gradient for register {reg} has shape {g.shape}, expected {values[reg].shape}"
            )
        grads[reg] = g.copy() if grads[reg] is None else grads[reg] + g
    pgrads = {}

    def accumulate(reg, g):
        grads[reg] = g if grads[reg] is None else grads[reg] + g

    def accumulate_param(key, g):
        if key is None or not return_param_grads:
            return
        pgrads[key] = g if key not in pgrads else pgrads[key] + g

    for idx in range(len(program.steps) - 1, -1, -1):
        step = program.steps[idx]
        dout = grads[idx + 1]
        if dout is None:
            continue
        a = step.attrs
        x = values[step.inputs[0]]
        if step.op == "conv":
            dx, dw, db = conv2d_backward(dout, x, _param(program, step, "weight"),
                                         a.get("stride", 1), a.get("padding", 0))
            accumulate_param(step.params.get("weight"), dw)
            accumulate_param(step.params.get("bias"), db)
        elif step.op == "bn":
            key = step.params["bn"]
            dx, dgamma, dbeta = batchnorm_backward(dout, x, program.params[key])
            if return_param_grads:
                prev = pgrads.get(key)
                pgrads[key] = (
                    {"gamma": dgamma, "beta": dbeta}
                    if prev is None
                    else {"gamma": prev["gamma"] + dgamma, "beta": prev["beta"] + dbeta}
                )
        elif step.op == "relu":
            dx = relu_backward(dout, x)
        elif step.op == "maxpool":
            dx = maxpool2d_backward(dout, x, a["window"], a["stride"])
        elif step.op == "avgpool":
            dx = avgpool2d_backward(dout, x, a["window"], a["stride"])
        elif step.op == "gap":
            dx = global_avg_pool_backward(dout, x)
        elif step.op == "linear":
            dx, dw, db = linear_backward(dout, x, _param(program, step, "weight"))
            accumulate_param(step.params.get("weight"), dw)
            accumulate_param(step.params.get("bias"), db)
        elif step.op == "add":
            accumulate(step.inputs[1], dout)
            dx = dout
        else:
            raise ValueError(f"unknown op {step.op!r}")
        accumulate(step.inputs[0], dx)
    dinput = grads[0] if grads[0] is not None else np.zeros(values[0].shape)
    if return_param_grads:
        return dinput, pgrads
    return dinput
