"""Architectures built from conv -> BN -> ReLU blocks, calibration, I/O and fine-tuning."""

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from . import engine
from .engine import BnParams, Program, Step
from .errors import ConfigError, DataError, FormatError, ShapeError, SpecError, StateError
from .probe import build_record
from .tensorio import dumps_tensor, read_tensor_from
from .validation import check_image, check_positive, check_tensor

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class CNR:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class ResidualBlock:
    """Two CNR sub-layers; the skip joins after the second BN, before its ReLU.

    A 1x1 conv + BN downsample path is inserted when the stride or channel
    count changes.
    """

    channels: int
    stride: int = 1


@dataclass(frozen=True)
class Pool:
    kind: str = "max"  # max | avg | global
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Classifier:
    num_classes: int


_BLOCK_TYPES = {cls.__name__: cls for cls in (CNR, ResidualBlock, Pool, Classifier)}


@dataclass(frozen=True)
class ArchSpec:
    input_shape: tuple
    blocks: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "blocks", tuple(self.blocks))

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "seed": int(self.seed),
            "blocks": [{"type": type(b).__name__, **asdict(b)} for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            blocks = []
            for raw in d["blocks"]:
                raw = dict(raw)
                kind = raw.pop("type")
                if kind not in _BLOCK_TYPES:
                    raise SpecError(f"unknown block type {kind!r}")
                blocks.append(_BLOCK_TYPES[kind](**raw))
            return cls(tuple(d["input_shape"]), tuple(blocks), int(d.get("seed", 0)))
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed architecture description: {exc}") from None

    def shapes(self):
        """Validate the block chain; return the output shape after each block."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input shape must be positive (C, H, W), got {self.input_shape}")
        if not 0 <= int(self.seed) < 2**64:
            raise SpecError("seed must fit in u64")
        if not any(isinstance(b, (CNR, ResidualBlock)) for b in self.blocks):
            raise SpecError("architecture needs at least one CNR block")
        shape = self.input_shape
        out = []
        for i, b in enumerate(self.blocks):
            if len(shape) == 1 and not isinstance(b, Classifier):
                raise SpecError(f"block {i} ({type(b).__name__}) follows a flattened tensor")
            if isinstance(b, CNR):
                if min(b.out_channels, b.kernel, b.stride) < 1 or b.padding < 0:
                    raise SpecError(f"block {i}: invalid CNR parameters {b}")
                h = (shape[1] + 2 * b.padding - b.kernel) // b.stride + 1
                w = (shape[2] + 2 * b.padding - b.kernel) // b.stride + 1
                shape = (b.out_channels, h, w)
            elif isinstance(b, ResidualBlock):
                if b.channels < 1 or b.stride < 1:
                    raise SpecError(f"block {i}: invalid residual parameters {b}")
                h = (shape[1] - 1) // b.stride + 1
                w = (shape[2] - 1) // b.stride + 1
                shape = (b.channels, h, w)
            elif isinstance(b, Pool):
                if b.kind == "global":
                    shape = (shape[0], 1, 1)
                elif b.kind in ("max", "avg"):
                    if b.window < 1 or b.stride < 1:
                        raise SpecError(f"block {i}: invalid pool parameters {b}")
                    h = (shape[1] - b.window) // b.stride + 1
                    w = (shape[2] - b.window) // b.stride + 1
                    shape = (shape[0], h, w)
                else:
                    raise SpecError(f"block {i}: unknown pool kind {b.kind!r}")
            elif isinstance(b, Classifier):
                if b.num_classes < 1:
                    raise SpecError(f"block {i}: num_classes must be >= 1")
                if i != len(self.blocks) - 1:
                    raise SpecError("Classifier must be the last block")
                shape = (b.num_classes,)
            else:
                raise SpecError(f"block {i}: unsupported block {b!r}")
            if min(shape) < 1:
                raise SpecError(f"block {i} produces empty shape {shape}")
            out.append(shape)
        return out

    @property
    def num_classes(self):
        last = self.blocks[-1] if self.blocks else None
        return last.num_classes if isinstance(last, Classifier) else None


def desknet(seed=0):
    """The 3x32x32 desk-scale test network."""
    return ArchSpec(
        (3, 32, 32),
        (
            CNR(16, 3, 1, 1),
            ResidualBlock(16),
            Pool("max", 2, 2),
            CNR(32, 3, 1, 1),
            ResidualBlock(32),
            Pool("global"),
            Classifier(10),
        ),
        seed,
    )


PRESETS = {"desknet": desknet}


@dataclass(frozen=True)
class Site:
    """A probe point: ``kind`` is relu, bn, conv or linear; registers index the program."""

    name: str
    kind: str
    input_register: int
    output_register: int
    step_index: int


class _Compiler:
    def __init__(self, arch):
        self.arch = arch
        self.steps = []
        self.keys = []  # (key, kind, shape) in creation order

    def emit(self, op, inputs, site, params=None, **attrs):
        self.steps.append(Step(op, tuple(inputs), params or {}, attrs, site))
        return len(self.steps)

    def cnr(self, name, x, in_ch, out_ch, kernel, stride, padding, with_relu=True):
        wkey, bkey = f"{name}.conv.weight", f"{name}.bn"
        self.keys += [(wkey, "conv", (out_ch, in_ch, kernel, kernel)), (bkey, "bn", out_ch)]
        r = self.emit("conv", [x], f"{name}.conv", {"weight": wkey}, stride=stride, padding=padding)
        r = self.emit("bn", [r], f"{name}.bn", {"bn": bkey})
        if with_relu:
            r = self.emit("relu", [r], f"{name}.relu")
        return r

    def compile(self):
        shapes = self.arch.shapes()
        reg, shape = 0, self.arch.input_shape
        for i, (b, out_shape) in enumerate(zip(self.arch.blocks, shapes)):
            name = f"b{i}"
            if isinstance(b, CNR):
                reg = self.cnr(name, reg, shape[0], b.out_channels, b.kernel, b.stride, b.padding)
            elif isinstance(b, ResidualBlock):
                x = reg
                h = self.cnr(f"{name}.a", x, shape[0], b.channels, 3, b.stride, 1)
                h = self.cnr(f"{name}.b", h, b.channels, b.channels, 3, 1, 1, with_relu=False)
                skip = x
                if b.stride != 1 or shape[0] != b.channels:
                    skip = self.cnr(f"{name}.down", x, shape[0], b.channels, 1, b.stride, 0,
                                    with_relu=False)
                reg = self.emit("add", [h, skip], f"{name}.add")
                reg = self.emit("relu", [reg], f"{name}.relu")
            elif isinstance(b, Pool):
                if b.kind == "global":
                    reg = self.emit("gap", [reg], f"{name}.pool")
                else:
                    reg = self.emit(f"{b.kind}pool", [reg], f"{name}.pool",
                                    window=b.window, stride=b.stride)
            elif isinstance(b, Classifier):
                fan_in = int(np.prod(shape))
                wkey, bkey = f"{name}.fc.weight", f"{name}.fc.bias"
                self.keys += [(wkey, "linear", (b.num_classes, fan_in)), (bkey, "bias", b.num_classes)]
                reg = self.emit("linear", [reg], f"{name}.fc", {"weight": wkey, "bias": bkey})
            shape = out_shape
        return self.steps, self.keys


def _init_params(arch):
    _, keys = _Compiler(arch).compile()
    rng = np.random.default_rng(int(arch.seed))
    params = {}
    for key, kind, shape in keys:
        if kind == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            params[key] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif kind == "linear":
            params[key] = rng.standard_normal(shape) * np.sqrt(1.0 / shape[1])
        elif kind == "bias":
            params[key] = np.zeros(shape)
        else:
            params[key] = BnParams.identity(shape, DEFAULT_EPS)
    return params


@dataclass(frozen=True, eq=False)
class Model:
    arch: ArchSpec
    params: dict
    calibrated: bool = False

    @cached_property
    def program(self):
        steps, _ = _Compiler(self.arch).compile()
        return Program(tuple(steps), self.params)

    @cached_property
    def sites(self):
        out = []
        for idx, step in enumerate(self.program.steps):
            if step.op in ("relu", "bn", "conv", "linear"):
                out.append(Site(step.site, step.op, step.inputs[0], idx + 1, idx))
        return tuple(out)

    def sites_of(self, kind):
        return [s for s in self.sites if s.kind == kind]

    def bn_params(self):
        """BN parameters keyed by site name, in forward order."""
        return {s.name: self.params[self.program.steps[s.step_index].params["bn"]]
                for s in self.sites_of("bn")}

    def replace(self, params=None, calibrated=None):
        return Model(
            self.arch,
            dict(self.params if params is None else params),
            self.calibrated if calibrated is None else calibrated,
        )

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        if self.arch != other.arch or self.calibrated != other.calibrated:
            return False
        if self.params.keys() != other.params.keys():
            return False
        for k, v in self.params.items():
            w = other.params[k]
            if isinstance(v, BnParams):
                if v != w:
                    return False
            elif not (isinstance(w, np.ndarray) and v.shape == w.shape
                      and v.tobytes() == w.tobytes()):
                return False
        return True

    def digest(self):
        return hashlib.sha256(dumps_model(self)).hexdigest()


def build(arch):
    arch.shapes()
    return Model(arch, _init_params(arch), calibrated=False)


def _check_input(m, x):
    x = check_tensor(x, ndim=3, name="input")
    if x.shape != m.arch.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match model input {m.arch.input_shape}")
    return check_image(x)


def forward(m, x, probe=False, retain=False):
    """Run ``m`` on one image. Returns ``(logits, record)``; record is None unless probing."""
    if not m.calibrated:
        raise StateError("model must be calibrated before inference")
    values = engine.run(m.program, _check_input(m, x))
    record = build_record(m, values, retain=retain) if probe else None
    return values[-1], record


def _channel_stats(z):
    flat = z.reshape(z.shape[0], -1)
    mean = flat.mean(axis=1)
    var = ((flat - mean[:, None]) ** 2).mean(axis=1)
    return mean, var


def _ema_update(p, z, momentum):
    """Fold one image's pre-BN statistics into the running estimates.

    The variance update adds the squared drift of the image mean from the
    new running mean so the estimate tracks the pooled (not per-image)
    variance of the data stream.
    """
    mean, var = _channel_stats(z)
    mu = (1.0 - momentum) * p.mu_hat + momentum * mean
    sig = (1.0 - momentum) * p.sigma_hat + momentum * (var + (mean - mu) ** 2)
    return p.replace(mu_hat=mu, sigma_hat=sig)


def _run_updating_bn(program, params, x, momentum):
    """Forward pass that refreshes each BN site from its own input before applying it."""
    values = [x]
    for step in program.steps:
        if step.op == "bn":
            key = step.params["bn"]
            params[key] = _ema_update(params[key], values[step.inputs[0]], momentum)
            values.append(engine.batchnorm_infer(values[step.inputs[0]], params[key]))
        else:
            values.append(engine.apply_step(program, step, values))
    return values


def _images(data):
    out = []
    for item in data:
        img = item[0] if isinstance(item, tuple) else item
        out.append(np.asarray(img, dtype=np.float64))
    return out


def calibrate(m, data, momentum=0.1, passes=3):
    """Estimate BN running statistics from ``data`` with batch-of-one EMA updates."""
    if not 0 < momentum <= 1:
        raise ConfigError(f"momentum must lie in (0, 1], got {momentum}")
    check_positive(passes, "passes", integer=True)
    images = _images(data)
    if not images:
        raise DataError("calibration dataset is empty")
    params = dict(m.params)
    program = Program(m.program.steps, params)
    for _ in range(passes):
        for img in images:
            _run_updating_bn(program, params, _check_input(m, img), momentum)
    return m.replace(params=params, calibrated=True)


def _softmax_xent_grad(logits, label):
    z = logits - logits.max()
    p = np.exp(z)
    p /= p.sum()
    loss = -np.log(p[label])
    g = p.copy()
    g[label] -= 1.0
    return loss, g


def fine_tune(m, data, lr, steps, freeze_bn_stats=False, momentum=0.1, seed=None, history=None):
    """Plain per-sample SGD on cross-entropy.

    Samples are visited cyclically in ``data`` order; with ``seed`` set, each
    epoch is a seeded permutation instead. Conv/linear weights and BN
    gamma/beta are trained; running statistics are refreshed by EMA from each
    training image unless ``freeze_bn_stats``. ``lr == 0`` returns ``m``
    unchanged. When ``history`` is a list, per-step losses are appended.
    """
    if not m.calibrated:
        raise StateError("fine_tune needs a calibrated model")
    if not np.isfinite(lr) or lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    check_positive(steps, "steps", integer=True)
    samples = [(np.asarray(x, dtype=np.float64), int(y)) for x, y in data]
    if not samples:
        raise DataError("fine-tuning dataset is empty")
    n_classes = m.arch.num_classes
    for _, y in samples:
        if n_classes is None or not 0 <= y < n_classes:
            raise DataError(f"label {y} outside [0, {n_classes})")
    if lr == 0:
        return m
    rng = np.random.default_rng(seed) if seed is not None else None
    params = dict(m.params)
    program = Program(m.program.steps, params)
    order = np.arange(len(samples))
    for t in range(steps):
        if t % len(samples) == 0 and rng is not None:
            order = rng.permutation(len(samples))
        x, y = samples[order[t % len(samples)]]
        x = _check_input(m, x)
        if freeze_bn_stats:
            values = engine.run(program, x)
        else:
            values = _run_updating_bn(program, params, x, momentum)
        tape = engine.Tape(program, tuple(values))
        loss, g = _softmax_xent_grad(values[-1], y)
        if history is not None:
            history.append(float(loss))
        _, pgrads = engine.backward(tape, g, return_param_grads=True)
        for key, grad in pgrads.items():
            cur = params[key]
            if isinstance(cur, BnParams):
                params[key] = cur.replace(gamma=cur.gamma - lr * grad["gamma"],
                                          beta=cur.beta - lr * grad["beta"])
            else:
                params[key] = cur - lr * grad
    return m.replace(params=params)


def loss(m, data):
    """Mean cross-entropy of ``m`` over labelled ``data``."""
    total = 0.0
    for x, y in data:
        logits, _ = forward(m, x)
        total += _softmax_xent_grad(logits, int(y))[0]
    return total / len(data)


# -- serialisation ------------------------------------------------------------

MODEL_MAGIC = b"SPMD"
MODEL_VERSION = 1


def dumps_model(m):
    meta = {
        "arch": m.arch.to_dict(),
        "calibrated": bool(m.calibrated),
        "params": [
            {"key": k, "kind": "bn", "eps": v.eps} if isinstance(v, BnParams) else {"key": k, "kind": "array"}
            for k, v in m.params.items()
        ],
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    out = [MODEL_MAGIC, struct.pack("<BI", MODEL_VERSION, len(blob)), blob]
    for v in m.params.values():
        if isinstance(v, BnParams):
            out += [dumps_tensor(a) for a in (v.mu_hat, v.sigma_hat, v.gamma, v.beta)]
        else:
            out.append(dumps_tensor(v))
    return b"".join(out)


def loads_model(buf, path=None):
    stream = io.BytesIO(buf)
    if stream.read(4) != MODEL_MAGIC:
        raise FormatError("bad model magic", path, 0)
    head = stream.read(5)
    if len(head) != 5:
        raise FormatError("truncated model header", path, 4 + len(head))
    version, size = struct.unpack("<BI", head)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}", path, 4)
    blob = stream.read(size)
    if len(blob) != size:
        raise FormatError("truncated model metadata", path, 9 + len(blob))
    try:
        meta = json.loads(blob)
        arch = ArchSpec.from_dict(meta["arch"])
        entries = meta["params"]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"corrupt model metadata ({exc})", path, 9) from None
    params = {}
    for e in entries:
        if e["kind"] == "bn":
            arrays = [read_tensor_from(stream, path) for _ in range(4)]
            try:
                params[e["key"]] = BnParams(*arrays, eps=e["eps"])
            except ValueError as exc:
                raise FormatError(f"invalid BN parameters for {e['key']}: {exc}", path) from None
        else:
            params[e["key"]] = read_tensor_from(stream, path)
    if stream.read(1):
        raise FormatError("trailing bytes after model payload", path, stream.tell() - 1)
    _, keys = _Compiler(arch).compile()
    for key, kind, shape in keys:
        got = params.get(key)
        if kind == "bn":
            ok = isinstance(got, BnParams) and got.channels == shape
        else:
            ok = isinstance(got, np.ndarray) and got.shape == (shape if kind != "bias" else (shape,))
        if not ok:
            raise FormatError(f"parameter {key} missing or mis-shaped", path)
    return Model(arch, params, bool(meta["calibrated"]))


def save(m, path):
    Path(path).write_bytes(dumps_model(m))


def load(path):
    return loads_model(Path(path).read_bytes(), path=str(path))


def reference_desknet(seed=0, train=None, steps=3000, lr=0.03, calib_size=200, passes=2):
    """DeskNet as used by the experiments: build, calibrate, then brief SGD training.

    Random weights with identity BN affine terms put every zero threshold at
    the running mean, which hides the BN-shift effect; a few thousand SGD
    steps on the labelled synthetic data give the BN layers learned shifts.
    """
    from .analysis import synth_dataset

    if train is None:
        train = synth_dataset(1000, seed=100)
    m = calibrate(build(desknet(seed)), train[:calib_size], passes=passes)
    if steps:
        m = fine_tune(m, train, lr=lr, steps=steps, seed=seed)
    return m
