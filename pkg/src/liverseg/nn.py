"""Encoder-decoder segmentation networks, the overlap-based training loss,
and binary checkpoint serialization.

A model is a symmetric stack: per resolution level the encoder applies
convolution blocks (conv + batchnorm + relu) and halves the grid with max
pooling; the decoder mirrors it with nearest-neighbour upsampling followed by
transposed-convolution blocks, and a 1x1 convolution + sigmoid produces one
foreground probability per pixel.  Dropout (p=0.5) sits at the end of the
encoder and immediately before the last transposed convolution.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .autograd import (
    Adam,
    BatchNormState,
    Tensor,
    batchnorm2d,
    conv2d,
    dropout,
    maxpool2x,
    relu,
    sigmoid,
    transposed_conv2d,
    upsample_nearest2x,
)

__all__ = [
    "LevelSpec",
    "ModelConfig",
    "CDNNModel",
    "get_preset",
    "build_cdnn",
    "param_count",
    "jaccard_loss",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

DROPOUT_SITES = ("encoder_end", "before_last_deconv")


class LevelSpec(NamedTuple):
    width: int
    kernel: int
    convs: int


@dataclass(frozen=True)
class ModelConfig:
    name: str
    input_channels: int
    levels: tuple[LevelSpec, ...]
    dropout_p: float = 0.5
    output_channels: int = 1

    def __post_init__(self):
        if not self.levels:
            raise ValueError("model needs at least one level")
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be positive, got {self.input_channels}")
        if self.output_channels != 1:
            raise ValueError("only single-channel probability output is supported")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        for lv in self.levels:
            if lv.width < 1 or lv.convs < 1:
                raise ValueError(f"bad level spec {lv}")
            if lv.kernel < 1 or lv.kernel % 2 == 0:
                raise ValueError(f"kernels must be odd for size-preserving blocks, got {lv.kernel}")

    @property
    def size_multiple(self) -> int:
        """Input H and W must divide by this (one pooling per non-deepest level)."""
        return 2 ** (len(self.levels) - 1)

    def to_text(self) -> str:
        levels = ",".join(f"{w}x{k}x{c}" for w, k, c in self.levels)
        return (
            f"name={self.name}\n"
            f"input_channels={self.input_channels}\n"
            f"levels={levels}\n"
            f"dropout_p={self.dropout_p}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        fields: dict[str, str] = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad model config line: {line!r}")
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        try:
            levels = tuple(
                LevelSpec(*(int(p) for p in part.split("x")))
                for part in fields["levels"].split(",")
            )
            return cls(
                name=fields["name"],
                input_channels=int(fields["input_channels"]),
                levels=levels,
                dropout_p=float(fields["dropout_p"]),
            )
        except KeyError as e:
            raise ValueError(f"model config missing key {e.args[0]!r}") from None


# Full-size presets are the production network shapes; the "mini" presets
# are two-level desk-scale models for fast experiments and tests.
_PRESETS: dict[str, tuple[tuple[int, int, int], ...]] = {
    "cdnn-i": ((21, 5, 1), (42, 5, 1), (84, 5, 1)),
    "cdnn-ii": ((42, 3, 3), (84, 3, 3), (168, 3, 3), (336, 3, 3)),
    "mini-i": ((8, 3, 1), (16, 3, 1)),
    "mini-ii": ((6, 3, 1), (12, 3, 1)),
}


def get_preset(name: str, input_channels: int = 3) -> ModelConfig:
    if name not in _PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(_PRESETS)}")
    levels = tuple(LevelSpec(*lv) for lv in _PRESETS[name])
    return ModelConfig(name=name, input_channels=input_channels, levels=levels)


class CDNNModel:
    """A built network: an ordered layer plan plus named parameter tensors
    and batchnorm running statistics."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 bn_states: dict[str, BatchNormState], plan: list[tuple]):
        self.config = config
        self.params = params
        self.bn_states = bn_states
        self.plan = plan

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def forward(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        if x.data.ndim != 4:
            raise ValueError(f"expected NCHW input, got shape {x.data.shape}")
        N, C, H, W = x.data.shape
        if C != self.config.input_channels:
            raise ValueError(f"model expects {self.config.input_channels} channels, got {C}")
        mult = self.config.size_multiple
        if H % mult or W % mult:
            raise ValueError(f"input {H}x{W} not divisible by {mult} (model has "
                             f"{len(self.config.levels)} levels)")
        if training and rng is None and self.config.dropout_p > 0:
            raise ValueError("training-mode forward needs an rng for dropout")

        h = x
        for step in self.plan:
            kind = step[0]
            if kind == "conv":
                _, pname, bnname, pad = step
                h = conv2d(h, self.params[pname + ".kernel"], self.params[pname + ".bias"], pad)
                h = batchnorm2d(h, self.params[bnname + ".gamma"], self.params[bnname + ".beta"],
                                self.bn_states[bnname], training)
                h = relu(h)
            elif kind == "deconv":
                _, pname, bnname, pad = step
                h = transposed_conv2d(h, self.params[pname + ".kernel"],
                                      self.params[pname + ".bias"], pad)
                h = batchnorm2d(h, self.params[bnname + ".gamma"], self.params[bnname + ".beta"],
                                self.bn_states[bnname], training)
                h = relu(h)
            elif kind == "pool":
                h = maxpool2x(h)
            elif kind == "upsample":
                h = upsample_nearest2x(h)
            elif kind == "dropout":
                h = dropout(h, self.config.dropout_p, training, rng)
            elif kind == "outconv":
                _, pname = step
                h = conv2d(h, self.params[pname + ".kernel"], self.params[pname + ".bias"], 0)
                h = sigmoid(h)
            else:  # pragma: no cover - plan is built locally
                raise RuntimeError(f"unknown plan step {kind}")
        return h

    def predict(self, x) -> np.ndarray:
        """Eval-mode probabilities as a plain array, graph discarded."""
        return self.forward(x, training=False).data


def _uniform_fan(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_cdnn(config: ModelConfig, rng: np.random.Generator) -> CDNNModel:
    """Materialize a network from its config.

    Kernels draw from uniform(+-sqrt(6/(fan_in+fan_out))); biases and
    batchnorm shifts start at zero, batchnorm scales at one.
    """
    params: dict[str, Tensor] = {}
    bn_states: dict[str, BatchNormState] = {}
    plan: list[tuple] = []
    L = len(config.levels)

    def add_conv(pname: str, cin: int, cout: int, k: int, transposed: bool) -> None:
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        fan_in, fan_out = cin * k * k, cout * k * k
        params[pname + ".kernel"] = Tensor(_uniform_fan(rng, shape, fan_in, fan_out),
                                           requires_grad=True)
        params[pname + ".bias"] = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def add_bn(bnname: str, channels: int) -> None:
        params[bnname + ".gamma"] = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
        params[bnname + ".beta"] = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        bn_states[bnname] = BatchNormState(channels)

    prev = config.input_channels
    for li, (width, kernel, convs) in enumerate(config.levels):
        for ci in range(convs):
            pname, bnname = f"enc{li}.conv{ci}", f"enc{li}.bn{ci}"
            add_conv(pname, prev, width, kernel, transposed=False)
            add_bn(bnname, width)
            plan.append(("conv", pname, bnname, (kernel - 1) // 2))
            prev = width
        if li < L - 1:
            plan.append(("pool",))
    plan.append(("dropout",))  # encoder end

    deconv_steps: list[tuple] = []
    for li in range(L - 2, -1, -1):
        width, kernel, convs = config.levels[li]
        deconv_steps.append(("upsample",))
        for ci in range(convs):
            pname, bnname = f"dec{li}.deconv{ci}", f"dec{li}.bn{ci}"
            add_conv(pname, prev, width, kernel, transposed=True)
            add_bn(bnname, width)
            deconv_steps.append(("deconv", pname, bnname, (kernel - 1) // 2))
            prev = width
    if deconv_steps:
        # second dropout sits right before the final transposed convolution
        last = max(i for i, s in enumerate(deconv_steps) if s[0] == "deconv")
        deconv_steps.insert(last, ("dropout",))
    plan.extend(deconv_steps)

    pname = "out.conv"
    add_conv(pname, prev, config.output_channels, 1, transposed=False)
    plan.append(("outconv", pname))
    return CDNNModel(config, params, bn_states, plan)


def param_count(model: CDNNModel) -> int:
    return model.param_count()


def jaccard_loss(pred: Tensor, target) -> Tensor:
    """Differentiable overlap loss: 1 - sum(t*p) / (sum(t^2) + sum(p^2) - sum(t*p)).

    Computed per sample over all its pixels and averaged over the batch.
    Targets must be binary.  A sample whose prediction and target are both
    all-zero contributes loss 0 and gradient 0 (perfect-match convention),
    so no smoothing constant is needed.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    t = t.astype(pred.dtype, copy=False)
    if t.shape != pred.data.shape:
        raise ValueError(f"target shape {t.shape} != prediction shape {pred.data.shape}")
    if t.size == 0:
        raise ValueError("empty prediction batch")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be binary (0/1)")

    n = pred.data.shape[0]
    p2 = pred.data.reshape(n, -1)
    t2 = t.reshape(n, -1)
    inter = (t2 * p2).sum(axis=1)
    union = (t2 * t2).sum(axis=1) + (p2 * p2).sum(axis=1) - inter
    # != rather than > so a non-finite union propagates instead of being
    # silently scored as a perfect empty match
    safe = union != 0
    per_sample = np.zeros(n, dtype=pred.dtype)
    per_sample[safe] = 1.0 - inter[safe] / union[safe]
    loss_value = per_sample.mean()

    if not pred._needs_backprop():
        return Tensor(np.asarray(loss_value, dtype=pred.dtype))

    def backprop(g):
        dp = np.zeros_like(p2)
        u = union[safe][:, None]
        i = inter[safe][:, None]
        ts, ps = t2[safe], p2[safe]
        dp[safe] = -(ts * u - i * (2.0 * ps - ts)) / (u * u)
        pred._accumulate((g.item() / n) * dp.reshape(pred.data.shape))

    return Tensor(np.asarray(loss_value, dtype=pred.dtype), _parents=(pred,), _backprop=backprop)


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or truncated."""


_MAGIC = b"CDNN"
_VERSION = 1


def _checkpoint_entries(model: CDNNModel):
    for name, p in model.params.items():
        yield name, p.data
    for bnname, st in model.bn_states.items():
        yield f"{bnname}.running_mean", st.running_mean
        yield f"{bnname}.running_var", st.running_var


def save_checkpoint(model: CDNNModel, path) -> None:
    """Write config text, parameters and batchnorm running statistics as
    little-endian binary: magic, version, config blob, then named float32
    tensors (u16 name length, name, u8 rank, u32 dims, raw data)."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    blob = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    entries = list(_checkpoint_entries(model))
    buf.write(struct.pack("<I", len(entries)))
    for name, data in entries:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what} "
                              f"(wanted {n} bytes, got {len(raw)})")
    return raw


def load_checkpoint(path) -> CDNNModel:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != _MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        config = ModelConfig.from_text(_read_exact(f, blob_len, "config blob").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))

        tensors: dict[str, np.ndarray] = {}
        for i in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, f"tensor {i} name length"))
            name = _read_exact(f, name_len, f"tensor {i} name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, f"{name} rank"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, f"{name} dim {d}"))[0]
                for d in range(rank)
            )
            n_items = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(f, 4 * n_items, f"{name} data")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after final tensor")

    model = build_cdnn(config, np.random.default_rng(0))
    expected = dict(_checkpoint_entries(model))
    missing = sorted(set(expected) - set(tensors))
    unknown = sorted(set(tensors) - set(expected))
    if missing or unknown:
        raise CheckpointError(f"tensor set mismatch: missing {missing}, unknown {unknown}")
    for name, data in tensors.items():
        if expected[name].shape != data.shape:
            raise CheckpointError(
                f"tensor {name} has shape {data.shape}, model wants {expected[name].shape}"
            )
    for name, p in model.params.items():
        p.data = tensors[name].astype(np.float32)
        p.zero_grad()
    for bnname, st in model.bn_states.items():
        st.running_mean = tensors[f"{bnname}.running_mean"].astype(np.float32)
        st.running_var = tensors[f"{bnname}.running_var"].astype(np.float32)
    return model
