"""Encoder / ASPP / decoder segmentation network and its checkpoint format.

The network mirrors the standard DeepLabv3+ layout at desk scale: a small
stride-16 encoder with a stride-4 low-level tap, an atrous-spatial-pyramid
block over the encoder output, and a bilinear decoder that fuses projected
low-level features before classifying per pixel.

Forward/backward over the whole graph is hand-wired (no autodiff tape);
train-mode forward retains per-layer caches, backward walks them in reverse
and produces one gradient per named parameter.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .ops import ConvSpec

__all__ = [
    "AsppConfig",
    "NetworkConfig",
    "Network",
    "build_network",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"DLFN"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class AsppConfig:
    """Parallel-branch pooling block settings.

    The block always carries a 1x1 branch and an image-pooling branch in
    addition to one 3x3 dilated branch per rate.
    """

    rates: tuple[int, ...] = (6, 12, 18)
    branch_channels: int = 256
    out_channels: int = 256

    def validate(self):
        if len(self.rates) == 0:
            raise ValueError("aspp rates must not be empty")
        if any(r < 2 for r in self.rates):
            raise ValueError(f"aspp rates must all be >= 2, got {self.rates}")
        if len(set(self.rates)) != len(self.rates):
            raise ValueError(f"aspp rates must be distinct, got {self.rates}")
        if self.branch_channels < 1 or self.out_channels < 1:
            raise ValueError("aspp channel counts must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "AsppConfig":
        d = dict(d)
        if "rates" in d:
            d["rates"] = tuple(d["rates"])
        return cls(**d)


@dataclass(frozen=True)
class NetworkConfig:
    """Topology settings for the whole segmentation network."""

    input_channels: int = 1
    num_classes: int = 2
    output_stride: int = 16
    low_level_stride: int = 4
    encoder_widths: tuple[int, ...] = (32, 64, 128, 256)
    aspp: AsppConfig = field(default_factory=AsppConfig)
    decoder_channels: int = 256
    low_level_projection_channels: int = 48
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1

    def validate(self):
        if self.output_stride != 16:
            raise ValueError(f"output_stride must be 16, got {self.output_stride}")
        if self.low_level_stride != 4:
            raise ValueError(
                f"low_level_stride must be 4, got {self.low_level_stride}"
            )
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be >= 1, got {self.input_channels}")
        if len(self.encoder_widths) != 4:
            raise ValueError(
                f"encoder_widths must have 4 stages, got {self.encoder_widths}"
            )
        if any(w < 1 for w in self.encoder_widths):
            raise ValueError(f"encoder widths must be >= 1, got {self.encoder_widths}")
        if self.decoder_channels < 1 or self.low_level_projection_channels < 1:
            raise ValueError("decoder channel counts must be >= 1")
        if self.bn_epsilon <= 0:
            raise ValueError(f"bn_epsilon must be > 0, got {self.bn_epsilon}")
        self.aspp.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["aspp"] = {
            "rates": list(self.aspp.rates),
            "branch_channels": self.aspp.branch_channels,
            "out_channels": self.aspp.out_channels,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        if "encoder_widths" in d:
            d["encoder_widths"] = tuple(d["encoder_widths"])
        if "aspp" in d and isinstance(d["aspp"], dict):
            d["aspp"] = AsppConfig.from_dict(d["aspp"])
        return cls(**d)


# ---------------------------------------------------------------------------
# layers

class Conv2dLayer:
    """Convolution with He-initialized weights and a zero bias."""

    def __init__(self, name, spec: ConvSpec, rng, dtype):
        self.name = name
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
        self.weight = rng.normal(
            0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape
        ).astype(dtype)
        self.bias = np.zeros(spec.out_channels, dtype=dtype)
        self._cache = None

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def load_parameters(self, table):
        self.weight = table[f"{self.name}.weight"]
        self.bias = table[f"{self.name}.bias"]

    def forward(self, x, retain):
        y, cache = ops.conv2d(x, self.spec, self.weight, self.bias)
        self._cache = cache if retain else None
        return y

    def backward(self, gy, grads):
        gx, gw, gb = ops.conv2d_backward(gy, self._cache)
        grads[f"{self.name}.weight"] = gw
        grads[f"{self.name}.bias"] = gb
        return gx


class BatchNorm2dLayer:
    """Per-channel batch norm owning its running statistics."""

    def __init__(self, name, channels, epsilon, momentum, dtype):
        self.name = name
        self.epsilon = epsilon
        self.momentum = momentum
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.num_batches = 0
        self._cache = None

    def parameters(self):
        return {f"{self.name}.gamma": self.gamma, f"{self.name}.beta": self.beta}

    def buffers(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }

    def load_parameters(self, table):
        self.gamma = table[f"{self.name}.gamma"]
        self.beta = table[f"{self.name}.beta"]
        self.running_mean = table[f"{self.name}.running_mean"]
        self.running_var = table[f"{self.name}.running_var"]

    def forward(self, x, mode, retain):
        if mode == "eval" and self.num_batches == 0:
            raise RuntimeError(
                f"{self.name}: eval-mode forward before any running statistics exist"
            )
        y, cache = ops.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            mode,
            epsilon=self.epsilon,
            momentum=self.momentum,
        )
        if mode == "train":
            self.num_batches += 1
        self._cache = cache if retain else None
        return y

    def backward(self, gy, grads):
        gx, ggamma, gbeta = ops.batch_norm_backward(gy, self._cache)
        grads[f"{self.name}.gamma"] = ggamma
        grads[f"{self.name}.beta"] = gbeta
        return gx


class ConvBNReLU:
    """conv -> batch norm -> ReLU, the basic block everywhere in the net."""

    def __init__(self, name, in_ch, out_ch, kernel, rng, dtype, config,
                 stride=1, dilation=1, padding=0):
        spec = ConvSpec(
            in_ch, out_ch, kernel, stride=stride, dilation=dilation, padding=padding
        )
        self.conv = Conv2dLayer(f"{name}.conv", spec, rng, dtype)
        self.bn = BatchNorm2dLayer(
            f"{name}.bn", out_ch, config.bn_epsilon, config.bn_momentum, dtype
        )
        self._relu_cache = None

    def parameters(self):
        return {**self.conv.parameters(), **self.bn.parameters()}

    def buffers(self):
        return self.bn.buffers()

    def load_parameters(self, table):
        self.conv.load_parameters(table)
        self.bn.load_parameters(table)

    def bn_layers(self):
        return [self.bn]

    def forward(self, x, mode, retain):
        t = self.conv.forward(x, retain)
        t = self.bn.forward(t, mode, retain)
        y, cache = ops.relu(t)
        self._relu_cache = cache if retain else None
        return y

    def backward(self, gy, grads):
        g = ops.relu_backward(gy, self._relu_cache)
        g = self.bn.backward(g, grads)
        return self.conv.backward(g, grads)


class AsppBlock:
    """Parallel context block: 1x1 conv, 3x3 dilated convs at each rate with
    rate-matched padding, and a pooled image-level branch resized back, all
    concatenated and fused by a 1x1 projection.  Every branch is
    conv -> batch norm -> ReLU."""

    def __init__(self, name, in_channels, config: AsppConfig, rng, dtype, net_config):
        bc = config.branch_channels
        self.config = config
        self.pointwise = ConvBNReLU(
            f"{name}.branch1x1", in_channels, bc, (1, 1), rng, dtype, net_config
        )
        self.rate_branches = [
            ConvBNReLU(
                f"{name}.rate{r}", in_channels, bc, (3, 3), rng, dtype, net_config,
                dilation=r, padding=r,
            )
            for r in config.rates
        ]
        self.image = ConvBNReLU(
            f"{name}.image", in_channels, bc, (1, 1), rng, dtype, net_config
        )
        self.project = ConvBNReLU(
            f"{name}.project", (2 + len(config.rates)) * bc, config.out_channels,
            (1, 1), rng, dtype, net_config,
        )
        self._pool_cache = None
        self._resize_cache = None

    def _blocks(self):
        return [self.pointwise, *self.rate_branches, self.image, self.project]

    def parameters(self):
        out = {}
        for b in self._blocks():
            out.update(b.parameters())
        return out

    def buffers(self):
        out = {}
        for b in self._blocks():
            out.update(b.buffers())
        return out

    def load_parameters(self, table):
        for b in self._blocks():
            b.load_parameters(table)

    def bn_layers(self):
        return [bn for b in self._blocks() for bn in b.bn_layers()]

    def forward(self, x, mode, retain=False):
        if x.shape[2] < 1 or x.shape[3] < 1:
            raise ValueError(f"feature map too small for ASPP: {x.shape}")
        h, w = x.shape[2], x.shape[3]
        branches = [self.pointwise.forward(x, mode, retain)]
        for block in self.rate_branches:
            branches.append(block.forward(x, mode, retain))
        pooled, pool_cache = ops.global_avg_pool(x)
        img = self.image.forward(pooled, mode, retain)
        img_up, resize_cache = ops.bilinear_resize(img, h, w)
        branches.append(img_up)
        if retain:
            self._pool_cache = pool_cache
            self._resize_cache = resize_cache
        cat = np.concatenate(branches, axis=1)
        return self.project.forward(cat, mode, retain)

    def backward(self, gy, grads):
        gcat = self.project.backward(gy, grads)
        bc = self.config.branch_channels
        gx = self.pointwise.backward(gcat[:, :bc], grads)
        for i, block in enumerate(self.rate_branches):
            gx = gx + block.backward(gcat[:, (i + 1) * bc : (i + 2) * bc], grads)
        g_img = ops.bilinear_resize_backward(gcat[:, -bc:], self._resize_cache)
        g_pooled = self.image.backward(g_img, grads)
        gx = gx + ops.global_avg_pool_backward(g_pooled, self._pool_cache)
        return gx


# ---------------------------------------------------------------------------
# the full network

# per-stage strides; the stride-1 stage is where the low-level tap is taken
# (cumulative stride 4 after the stem), and the final stage runs dilated.
_STAGE_STRIDES = (2, 1, 2, 2)
_LAST_STAGE_DILATION = 2


class Network:
    """The assembled segmentation network.

    Eval-mode forward is pure and repeatable; train-mode forward retains the
    per-layer caches that :meth:`backward` consumes, so one training step at
    a time per instance.
    """

    def __init__(self, config: NetworkConfig, seed, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        widths = config.encoder_widths

        self.stem = ConvBNReLU(
            "encoder.stem", config.input_channels, widths[0], (3, 3), rng, dtype,
            config, stride=2, padding=1,
        )
        self.stages = []
        in_ch = widths[0]
        for i, (width, stride) in enumerate(zip(widths, _STAGE_STRIDES)):
            dilation = _LAST_STAGE_DILATION if i == len(widths) - 1 else 1
            blocks = [
                ConvBNReLU(
                    f"encoder.stage{i}.block0", in_ch, width, (3, 3), rng, dtype,
                    config, stride=stride, dilation=dilation, padding=dilation,
                ),
                ConvBNReLU(
                    f"encoder.stage{i}.block1", width, width, (3, 3), rng, dtype,
                    config, dilation=dilation, padding=dilation,
                ),
            ]
            self.stages.append(blocks)
            in_ch = width

        self.aspp = AsppBlock("aspp", widths[-1], config.aspp, rng, dtype, config)
        self.low_proj = ConvBNReLU(
            "decoder.low_projection", widths[1],
            config.low_level_projection_channels, (1, 1), rng, dtype, config,
        )
        refine_in = config.aspp.out_channels + config.low_level_projection_channels
        self.refine = [
            ConvBNReLU(
                "decoder.refine0", refine_in, config.decoder_channels, (3, 3), rng,
                dtype, config, padding=1,
            ),
            ConvBNReLU(
                "decoder.refine1", config.decoder_channels, config.decoder_channels,
                (3, 3), rng, dtype, config, padding=1,
            ),
        ]
        self.classifier = Conv2dLayer(
            "decoder.classifier",
            ConvSpec(config.decoder_channels, config.num_classes, (1, 1)),
            rng,
            dtype,
        )
        self._ready = False
        self._up_caches = None

    # -- parameter bookkeeping -------------------------------------------

    def _layers(self):
        yield self.stem
        for blocks in self.stages:
            yield from blocks
        yield self.aspp
        yield self.low_proj
        yield from self.refine
        yield self.classifier

    def parameters(self) -> dict[str, np.ndarray]:
        """Named parameter tensors in stable construction order."""
        out = {}
        for layer in self._layers():
            out.update(layer.parameters())
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._layers():
            if hasattr(layer, "buffers"):
                out.update(layer.buffers())
        return out

    def bn_layers(self):
        out = []
        for layer in self._layers():
            if hasattr(layer, "bn_layers"):
                out.extend(layer.bn_layers())
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def load_parameters(self, table):
        for layer in self._layers():
            layer.load_parameters(table)

    # -- forward / backward ----------------------------------------------

    def encode(self, x, mode, retain=False):
        """Run the encoder; returns (stride-16 features, stride-4 tap)."""
        t = self.stem.forward(x, mode, retain)
        low = None
        for i, blocks in enumerate(self.stages):
            for block in blocks:
                t = block.forward(t, mode, retain)
            if i == 1:
                low = t
        return t, low

    def forward(self, x, mode):
        """Full forward pass to per-pixel class logits at input resolution."""
        x = np.asarray(x)
        if x.ndim != 4:
            raise ValueError(f"batch must be 4-D (n, c, h, w), got {x.shape}")
        n, c, h, w = x.shape
        if c != self.config.input_channels:
            raise ValueError(
                f"batch has {c} channels, network expects {self.config.input_channels}"
            )
        stride = self.config.output_stride
        if h % stride != 0 or w % stride != 0:
            raise ValueError(
                f"input size {h}x{w} not divisible by output stride {stride}"
            )
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        retain = mode == "train"

        feats, low = self.encode(x, mode, retain)
        z = self.aspp.forward(feats, mode, retain)
        z_up, up1 = ops.bilinear_resize(z, low.shape[2], low.shape[3])
        low_p = self.low_proj.forward(low, mode, retain)
        t = np.concatenate([z_up, low_p], axis=1)
        for block in self.refine:
            t = block.forward(t, mode, retain)
        logits_small = self.classifier.forward(t, retain)
        logits, up2 = ops.bilinear_resize(logits_small, h, w)
        if retain:
            self._up_caches = (up1, up2)
            self._ready = True
        else:
            self._ready = False
        return logits

    def backward(self, logit_grads) -> dict[str, np.ndarray]:
        """Exact adjoint of the last train-mode forward.

        Returns one gradient array per named parameter.
        """
        if not self._ready:
            raise RuntimeError("backward requires a preceding train-mode forward")
        up1, up2 = self._up_caches
        grads: dict[str, np.ndarray] = {}
        g = ops.bilinear_resize_backward(np.asarray(logit_grads), up2)
        g = self.classifier.backward(g, grads)
        for block in reversed(self.refine):
            g = block.backward(g, grads)
        split = self.config.aspp.out_channels
        g_low = self.low_proj.backward(g[:, split:], grads)
        g_aspp = ops.bilinear_resize_backward(g[:, :split], up1)
        g_enc = self.aspp.backward(g_aspp, grads)
        for i in reversed(range(len(self.stages))):
            if i == 1:
                g_enc = g_enc + g_low  # the tap branches off stage 1's output
            for block in reversed(self.stages[i]):
                g_enc = block.backward(g_enc, grads)
        self.stem.backward(g_enc, grads)
        return grads


def build_network(config: NetworkConfig, seed, dtype=np.float32) -> Network:
    """Deterministic build: same (config, seed) gives identical parameters."""
    return Network(config, seed, dtype=dtype)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic "DLFN" | u32 LE version | u32 LE header length | JSON header
# | raw little-endian float32 blocks in header order.  The header carries the
# network config, a name/shape/offset table, and metadata.

def save_checkpoint(net: Network, path, metadata=None):
    table = {**net.parameters(), **net.buffers()}
    entries = []
    blob = bytearray()
    offset = 0
    for name, arr in table.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob.extend(raw)
        offset += len(raw)
    meta = dict(metadata or {})
    meta["bn_batches"] = {bn.name: bn.num_batches for bn in net.bn_layers()}
    meta.setdefault("seed", net.seed)
    header = {
        "config": net.config.to_dict(),
        "params": entries,
        "metadata": meta,
    }
    header_bytes = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(blob))


def _checkpoint_error(path, why):
    return ValueError(f"invalid checkpoint {path}: {why}")


def load_checkpoint(path):
    """Rebuild a network from a checkpoint; returns (net, metadata)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise _checkpoint_error(path, f"bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise _checkpoint_error(path, "truncated before header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise _checkpoint_error(path, f"unsupported format version {version}")
    (header_len,) = struct.unpack_from("<I", blob, 8)
    header_end = 12 + header_len
    if len(blob) < header_end:
        raise _checkpoint_error(path, "truncated JSON header")
    try:
        header = json.loads(blob[12:header_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise _checkpoint_error(path, f"corrupt JSON header ({exc})")
    try:
        config = NetworkConfig.from_dict(header["config"])
        entries = header["params"]
        metadata = header.get("metadata", {})
    except (KeyError, TypeError) as exc:
        raise _checkpoint_error(path, f"malformed header ({exc})")

    seed = metadata.get("seed", 0)
    net = build_network(config, seed)
    expected = {**net.parameters(), **net.buffers()}
    if len(entries) != len(expected):
        raise _checkpoint_error(
            path,
            f"parameter table has {len(entries)} entries, config implies "
            f"{len(expected)}",
        )
    data = blob[header_end:]
    table = {}
    for entry in entries:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in expected:
            raise _checkpoint_error(path, f"unknown parameter {name!r}")
        if shape != expected[name].shape:
            raise _checkpoint_error(
                path,
                f"parameter {name!r} has shape {shape}, embedded config implies "
                f"{expected[name].shape}",
            )
        start = entry["offset"]
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = start + 4 * count
        if end > len(data):
            raise _checkpoint_error(path, f"truncated data block for {name!r}")
        table[name] = (
            np.frombuffer(data[start:end], dtype="<f4").reshape(shape).copy()
        )
    net.load_parameters(table)
    for bn in net.bn_layers():
        bn.num_batches = int(metadata.get("bn_batches", {}).get(bn.name, 0))
    return net, metadata
