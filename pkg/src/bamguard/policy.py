"""Convolutional actor-critic policies with an optional BAM layer.

Layers are numbered 1..N in forward order. With the default BAM placement the
chain is ``conv1, bam, conv2, conv3, fc, policy``; the value head hangs off
``fc`` and is not part of the numbered chain.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .bam import BamParams, bam_forward, bam_param_count, check_bam_geometry, init_bam_params
from .init import orthogonal

CHECKPOINT_MAGIC = b"BARL"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ArchitectureConfig:
    input_shape: tuple = (4, 32, 32)
    convs: tuple = (ConvSpec(8, 5, 2, 1), ConvSpec(16, 3, 2), ConvSpec(16, 3, 1))
    bam_index: int | None = 2
    bam_reduction: int = 4
    bam_dilation: int = 2
    hidden: int | None = 128
    n_actions: int | None = 3
    value_head: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "convs", tuple(
            c if isinstance(c, ConvSpec) else ConvSpec(**c) if isinstance(c, dict) else ConvSpec(*c)
            for c in self.convs))

    @classmethod
    def nature_lite(cls, bam=True, **overrides):
        return cls(bam_index=2 if bam else None, **overrides)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["convs"] = tuple(ConvSpec(**c) for c in d.get("convs", ()))
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @property
    def has_bam(self):
        return self.bam_index is not None

    def layer_shapes(self):
        """Validate the layer chain; returns ``[(name, kind, in_shape, out_shape), ...]``."""
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be (k, H, W) with positive entries, got {self.input_shape}")
        if self.n_actions is not None and self.n_actions < 1:
            raise ConfigError("n_actions must be positive")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError("hidden width must be positive")
        n_conv = len(self.convs)
        if self.has_bam and not 2 <= self.bam_index <= n_conv:
            raise ConfigError(
                f"bam_index {self.bam_index} must sit strictly between two conv layers "
                f"(2..{n_conv} for {n_conv} convs)")
        shape = self.input_shape
        layers = []
        for i, spec in enumerate(self.convs):
            if min(spec.out_channels, spec.kernel, spec.stride) < 1 or spec.padding < 0:
                raise ConfigError(f"invalid conv spec {spec}")
            c, h, w = shape
            oh = T.conv_output_size(h, spec.kernel, spec.stride, spec.padding, 1)
            ow = T.conv_output_size(w, spec.kernel, spec.stride, spec.padding, 1)
            if oh < 1 or ow < 1:
                raise ConfigError(f"conv{i + 1} leaves no spatial extent for input {shape}")
            out = (spec.out_channels, oh, ow)
            layers.append((f"conv{i + 1}", "conv", shape, out))
            shape = out
            if self.has_bam and len(layers) == self.bam_index - 1:
                try:
                    check_bam_geometry(shape[0], self.bam_reduction, self.bam_dilation)
                except ValueError as exc:
                    raise ConfigError(str(exc)) from None
                layers.append(("bam", "bam", shape, shape))
        flat = int(np.prod(shape))
        if self.hidden is not None:
            layers.append(("fc", "dense", shape, (self.hidden,)))
            flat = self.hidden
            shape = (self.hidden,)
        if self.n_actions is not None:
            layers.append(("policy", "head", shape, (self.n_actions,)))
        return layers


def count_parameters(config):
    """Weights plus biases implied by ``config``, computed from the layer formulas alone."""
    total = 0
    layers = config.layer_shapes()
    for name, kind, in_shape, out_shape in layers:
        if kind == "conv":
            spec = config.convs[int(name[4:]) - 1]
            total += (spec.kernel * spec.kernel * in_shape[0] + 1) * spec.out_channels
        elif kind == "bam":
            total += bam_param_count(in_shape[0], config.bam_reduction, config.bam_dilation)
        else:
            total += (int(np.prod(in_shape)) + 1) * out_shape[0]
    if config.value_head:
        if not layers:
            trunk = config.input_shape
        else:
            trunk = layers[-1][2] if layers[-1][1] == "head" else layers[-1][3]
        total += int(np.prod(trunk)) + 1
    return total


@dataclass
class ActionDistribution:
    logits: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_logits(cls, logits):
        logits = np.asarray(logits, dtype=np.float64)
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return cls(logits, e / e.sum(axis=-1, keepdims=True))

    @property
    def argmax(self):
        # np.argmax returns the first maximal index: lowest index wins ties
        return np.argmax(self.probs, axis=-1)

    def top2(self):
        order = np.argsort(-self.probs, axis=-1, kind="stable")
        return order[..., :2]

    def __len__(self):
        return self.probs.shape[0]


@dataclass
class Layer:
    name: str
    kind: str
    input_shape: tuple
    output_shape: tuple
    params: dict = field(default_factory=dict)
    stride: int = 1
    padding: int = 0
    bam: BamParams | None = None

    def __call__(self, x):
        p = self.params
        if self.kind == "conv":
            return T.relu(T.conv2d(x, p["weight"], p["bias"], self.stride, self.padding))
        if self.kind == "bam":
            return bam_forward(x, self.bam)
        if x.ndim != 2:
            x = T.flatten(x)
        out = T.dense(x, p["weight"], p["bias"])
        return T.relu(out) if self.kind == "dense" else out


class PolicyNetwork:
    def __init__(self, config, seed=0, dtype=None, zero=False):
        if config.n_actions is None:
            raise ConfigError("a policy network needs n_actions")
        self.config = config
        rng = np.random.default_rng(seed)
        self.layers = []
        for name, kind, in_shape, out_shape in config.layer_shapes():
            layer = Layer(name, kind, in_shape, out_shape)
            if kind == "conv":
                spec = config.convs[int(name[4:]) - 1]
                layer.stride, layer.padding = spec.stride, spec.padding
                w = orthogonal((spec.out_channels, in_shape[0], spec.kernel, spec.kernel),
                               gain=np.sqrt(2), rng=rng)
                layer.params = {"weight": w, "bias": np.zeros(spec.out_channels)}
            elif kind == "bam":
                layer.bam = init_bam_params(in_shape[0], config.bam_reduction, config.bam_dilation,
                                            rng=rng, dtype=dtype, zero=zero)
                layer.params = {}
            else:
                fan_in = int(np.prod(in_shape))
                # zero policy head: the initial policy is uniform
                gain = np.sqrt(2) if kind == "dense" else 0.0
                layer.params = {"weight": orthogonal((out_shape[0], fan_in), gain=gain, rng=rng),
                                "bias": np.zeros(out_shape[0])}
            for k, v in layer.params.items():
                layer.params[k] = T.Tensor(np.zeros_like(v) if zero else v, requires_grad=True, dtype=dtype)
            self.layers.append(layer)
        self.value_params = {}
        if config.value_head:
            trunk = int(np.prod(self.layers[-1].input_shape))
            w = orthogonal((1, trunk), gain=1.0, rng=rng)
            self.value_params = {
                "weight": T.Tensor(np.zeros_like(w) if zero else w, requires_grad=True, dtype=dtype),
                "bias": T.Tensor(np.zeros(1), requires_grad=True, dtype=dtype),
            }

    # ------------------------------------------------------------ parameters

    def named_parameters(self):
        out = {}
        for layer in self.layers:
            if layer.bam is not None:
                for k, v in layer.bam.tensors.items():
                    out[f"{layer.name}.{k}"] = v
            for k, v in layer.params.items():
                out[f"{layer.name}.{k}"] = v
        for k, v in self.value_params.items():
            out[f"value.{k}"] = v
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def bam_index(self):
        return self.config.bam_index

    @property
    def bam_layer(self):
        if not self.config.has_bam:
            raise ConfigError("network has no BAM layer")
        return self.layers[self.config.bam_index - 1]

    @property
    def dtype(self):
        return self.layers[0].params["weight"].dtype

    # --------------------------------------------------------------- forward

    def _as_input(self, s):
        x = s if isinstance(s, T.Tensor) else T.Tensor(s, dtype=self.dtype)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1:] != self.config.input_shape:
            raise T.DimensionError(
                f"observation shape {x.shape[1:]} != configured input {self.config.input_shape}")
        if not np.all(np.isfinite(x.data)):
            raise ValueError("observation contains non-finite values")
        return x

    def forward_prefix(self, s, start, stop, inject=None):
        """Run layers ``start..stop`` (1-based, inclusive).

        With ``inject`` the observation is ignored and ``inject`` is fed to layer
        ``start`` directly.
        """
        if not 1 <= start <= stop <= self.n_layers:
            raise IndexError(f"layer slice [{start}:{stop}] outside 1..{self.n_layers}")
        if inject is not None:
            x = T.as_tensor(inject)
            want = self.layers[start - 1].input_shape
            if x.shape[1:] != want:
                raise T.DimensionError(
                    f"injected tensor shape {x.shape[1:]} != input of layer {start} {want}")
        else:
            if start != 1:
                raise ValueError("an observation can only enter at layer 1; pass inject=")
            x = self._as_input(s)
        for layer in self.layers[start - 1:stop]:
            x = layer(x)
        return x

    def logits_and_value(self, s):
        """Graph-recording pass returning ``(logits, value)`` tensors."""
        x = self._as_input(s)
        for layer in self.layers[:-1]:
            x = layer(x)
        logits = self.layers[-1](x)
        value = None
        if self.value_params:
            flat = x if x.ndim == 2 else T.flatten(x)
            value = T.reshape(T.dense(flat, self.value_params["weight"], self.value_params["bias"]), (-1,))
        return logits, value

    def forward(self, s):
        """Action distribution and value estimate(s) for one or a batch of observations."""
        with T.no_grad():
            logits, value = self.logits_and_value(s)
        return ActionDistribution.from_logits(logits.data), (None if value is None else value.data)

    def act(self, s):
        """Greedy actions (lowest index on ties)."""
        return self.forward(s)[0].argmax

    # ------------------------------------------------------------ persistence

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        if set(state) != set(params):
            raise CheckpointError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, v in state.items():
            if params[k].shape != v.shape:
                raise CheckpointError(f"{k}: checkpoint shape {v.shape} != model shape {params[k].shape}")
            params[k].data = np.ascontiguousarray(v, dtype=params[k].dtype)


def save_checkpoint(net, path):
    params = net.named_parameters()
    manifest = [{"name": k, "shape": list(v.shape), "dtype": "<f8" if v.dtype == np.float64 else "<f4"}
                for k, v in params.items()]
    meta = json.dumps({"config": net.config.to_dict(), "tensors": manifest},
                      sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
        f.write(meta)
        for entry, v in zip(manifest, params.values()):
            f.write(np.ascontiguousarray(v.data, dtype=entry["dtype"]).tobytes())


def load_checkpoint(path, expected_config=None):
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    version, meta_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    if len(raw) < 12 + meta_len:
        raise CheckpointError(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[12:12 + meta_len].decode("utf-8"))
        config = ArchitectureConfig.from_dict(meta["config"])
        manifest = meta["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from None
    if expected_config is not None and config != expected_config:
        raise CheckpointError(f"{path}: checkpoint architecture {config} does not match expected {expected_config}")
    offset = 12 + meta_len
    state = {}
    for entry in manifest:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"]))
        end = offset + count * dt.itemsize
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated payload at tensor {entry['name']}")
        state[entry["name"]] = np.frombuffer(raw[offset:end], dtype=dt).reshape(entry["shape"])
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    dtype = np.float64 if manifest and manifest[0]["dtype"] == "<f8" else np.float32
    try:
        net = PolicyNetwork(config, dtype=dtype, zero=True)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid stored config ({exc})") from None
    net.load_state_dict(state)
    return net
