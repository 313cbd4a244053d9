"""Two-class U-Net built from :mod:`octaquant.neural` layers, plus the OCTW weight file."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import neural as nn
from .neural import Tensor

MAGIC = b"OCTW"
VERSION = 1


class WeightFileError(ValueError):
    """Raised for a corrupt or incompatible weight file; ``field`` names the offending part."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class InputShapeError(ValueError):
    pass


@dataclass(frozen=True)
class UnetConfig:
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 1
    out_classes: int = 2
    dropout_p: float = 0.5
    kernel_size: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_classes < 2:
            raise ValueError("invalid channel configuration")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")

    @property
    def divisor(self) -> int:
        return 2 ** (self.depth - 1)

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


def _layer_specs(cfg: UnetConfig):
    """Yield ``(block_name, in_ch, out_ch, kernel)`` for every conv layer in order."""
    k = cfg.kernel_size
    prev = cfg.in_channels
    for lvl in range(cfg.depth):
        ch = cfg.channels(lvl)
        yield f"enc{lvl}.conv1", prev, ch, k
        yield f"enc{lvl}.conv2", ch, ch, k
        prev = ch
    for lvl in range(cfg.depth - 2, -1, -1):
        ch = cfg.channels(lvl)
        yield f"dec{lvl}.up", cfg.channels(lvl + 1), ch, k
        yield f"dec{lvl}.conv1", 2 * ch, ch, k
        yield f"dec{lvl}.conv2", ch, ch, k
    yield "head", cfg.base_channels, cfg.out_classes, 1


def expected_shapes(cfg: UnetConfig) -> tuple[dict, dict]:
    params, buffers = {}, {}
    for name, cin, cout, k in _layer_specs(cfg):
        params[f"{name}.weight"] = (cout, cin, k, k)
        if name == "head":
            params[f"{name}.bias"] = (cout,)
        else:
            params[f"{name}.bn.gamma"] = (cout,)
            params[f"{name}.bn.beta"] = (cout,)
            buffers[f"{name}.bn.running_mean"] = (cout,)
            buffers[f"{name}.bn.running_var"] = (cout,)
    return params, buffers


def parameter_count(cfg: UnetConfig) -> int:
    params, _ = expected_shapes(cfg)
    return int(sum(np.prod(s) for s in params.values()))


@dataclass
class ModelWeights:
    config: UnetConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()},
                            {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.astype(dtype) for k, v in self.params.items()},
                            {k: v.astype(dtype) for k, v in self.buffers.items()})

    def arrays(self):
        """All named arrays in file order: parameters then batch-norm statistics."""
        yield from self.params.items()
        yield from self.buffers.items()

    def equals(self, other: "ModelWeights") -> bool:
        if self.config != other.config:
            return False
        mine, theirs = dict(self.arrays()), dict(other.arrays())
        if list(mine) != list(theirs):
            return False
        return all(np.array_equal(mine[k], theirs[k]) for k in mine)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def validate(self):
        params, buffers = expected_shapes(self.config)
        for expect, have in ((params, self.params), (buffers, self.buffers)):
            for name, shape in expect.items():
                if name not in have:
                    raise WeightFileError(name, "missing layer")
                if tuple(have[name].shape) != tuple(shape):
                    raise WeightFileError(name, f"shape {tuple(have[name].shape)} != expected {tuple(shape)}")
            extra = set(have) - set(expect)
            if extra:
                raise WeightFileError(sorted(extra)[0], "unexpected layer")


def build(config: UnetConfig, seed: int = 0) -> ModelWeights:
    """Fresh weights with He fan-in normal initialization."""
    rng = np.random.default_rng(seed)
    params, buffers = expected_shapes(config)
    w = ModelWeights(config)
    for name, shape in params.items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            w.params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        elif name.endswith(".gamma"):
            w.params[name] = np.ones(shape, np.float32)
        else:
            w.params[name] = np.zeros(shape, np.float32)
    for name, shape in buffers.items():
        fill = 1.0 if name.endswith("running_var") else 0.0
        w.buffers[name] = np.full(shape, fill, np.float32)
    return w


# --------------------------------------------------------------------------
# forward


def check_extents(config: UnetConfig, h: int, w: int):
    d = config.divisor
    if h % d or w % d:
        raise InputShapeError(
            f"image extents {h}x{w} are not divisible by {d} (depth {config.depth}); "
            "tile or pad the image first")


def forward_logits(weights: ModelWeights, x, training: bool, rng=None, params: dict | None = None,
                   update_stats: bool = False) -> Tensor:
    """Run the network on a (N, C, H, W) batch and return class logits.

    ``params`` optionally maps parameter names to Tensors (for training); by
    default constant Tensors wrapping ``weights.params`` are used.
    """
    cfg = weights.config
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise InputShapeError(f"expected input of shape (N, {cfg.in_channels}, H, W), got {x.shape}")
    check_extents(cfg, x.shape[2], x.shape[3])
    if training and cfg.dropout_p > 0 and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    if params is None:
        params = {k: Tensor(v) for k, v in weights.params.items()}
    pad = cfg.kernel_size // 2

    def block(name, h):
        h = nn.conv2d(h, params[f"{name}.weight"], None, pad)
        h = nn.batchnorm(h, params[f"{name}.bn.gamma"], params[f"{name}.bn.beta"],
                         weights.buffers[f"{name}.bn.running_mean"], weights.buffers[f"{name}.bn.running_var"],
                         training=training, update_stats=update_stats)
        h = nn.relu6(h)
        return nn.dropout(h, cfg.dropout_p, rng, training)

    skips = []
    h = x
    for lvl in range(cfg.depth):
        h = block(f"enc{lvl}.conv1", h)
        h = block(f"enc{lvl}.conv2", h)
        if lvl < cfg.depth - 1:
            skips.append(h)
            h, _ = nn.maxpool2(h)
    for lvl in range(cfg.depth - 2, -1, -1):
        h = block(f"dec{lvl}.up", nn.upsample_nearest2(h))
        h = nn.concat([skips[lvl], h], axis=1)
        h = block(f"dec{lvl}.conv1", h)
        h = block(f"dec{lvl}.conv2", h)
    return nn.conv2d(h, params["head.weight"], params["head.bias"], 0)


def to_input(image) -> np.ndarray:
    """Scale an 8-bit image (H,W) or stack (N,H,W) to a float32 (N,1,H,W) batch in [0,1]."""
    a = np.asarray(image)
    scale = 255.0 if a.dtype == np.uint8 else 1.0
    a = a.astype(np.float32) / np.float32(scale)
    if a.ndim == 2:
        a = a[None]
    return a[:, None]


def forward(weights: ModelWeights, image, mode: str = "infer", seed: int = 0, return_all: bool = False):
    """Per-pixel vessel probability for an image (H,W) or stack (N,H,W).

    uint8 input is scaled by 1/255; float input must already lie in [0,1].
    Train mode enables dropout (seeded) and batch statistics but never
    modifies ``weights``. With ``return_all`` the full class-probability
    array (N, classes, H, W) is returned instead.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    a = np.asarray(image)
    single = a.ndim == 2
    x = to_input(a)
    logits = forward_logits(weights, x, training=(mode == "train"), rng=seed).data
    if not np.all(np.isfinite(logits)):
        raise nn.NonFiniteError("network produced non-finite logits")
    prob = nn.softmax(logits, axis=1)
    if return_all:
        return prob[0] if single else prob
    vessel = prob[:, 1]
    return vessel[0] if single else vessel


# --------------------------------------------------------------------------
# weight file

_CONFIG_STRUCT = struct.Struct("<HHHHdH")


def dumps(weights: ModelWeights) -> bytes:
    cfg = weights.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(_CONFIG_STRUCT.pack(cfg.depth, cfg.base_channels, cfg.in_channels, cfg.out_classes,
                                  cfg.dropout_p, cfg.kernel_size))
    entries = list(weights.arrays())
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes, expect_config: UnetConfig | None = None) -> ModelWeights:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise WeightFileError(what, f"file truncated at byte {pos} (needed {n} more bytes, "
                                        f"{len(data) - pos} available); shape-consistency check failed")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise WeightFileError("magic", "not an OCTW weight file")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise WeightFileError("version", f"unsupported version {version}")
    fields = _CONFIG_STRUCT.unpack(take(_CONFIG_STRUCT.size, "config"))
    try:
        cfg = UnetConfig(depth=fields[0], base_channels=fields[1], in_channels=fields[2], out_classes=fields[3],
                         dropout_p=fields[4], kernel_size=fields[5])
    except ValueError as exc:
        raise WeightFileError("config", str(exc)) from None
    if expect_config is not None:
        check_compatible(cfg, expect_config)
    (count,) = struct.unpack("<I", take(4, "layer count"))
    param_shapes, buffer_shapes = expected_shapes(cfg)
    w = ModelWeights(cfg)
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"layer {i} name length"))
        name = take(nlen, f"layer {i} name").decode("utf-8", errors="replace")
        (rank,) = struct.unpack("<B", take(1, f"{name} rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} extents"))
        n = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(4 * n, name), dtype="<f4").astype(np.float32).reshape(shape)
        if name in param_shapes:
            target = w.params
        elif name in buffer_shapes:
            target = w.buffers
        else:
            raise WeightFileError(name, "layer not part of the configured network")
        if name in w.params or name in w.buffers:
            raise WeightFileError(name, "duplicate layer name")
        target[name] = values
    if pos != len(data):
        raise WeightFileError("trailer", f"{len(data) - pos} unexpected bytes after last layer")
    w.validate()
    # keep canonical ordering regardless of file order
    w.params = {k: w.params[k] for k in param_shapes}
    w.buffers = {k: w.buffers[k] for k in buffer_shapes}
    return w


def check_compatible(have: UnetConfig, want: UnetConfig):
    """Raise naming the first layer whose shape differs between two configs."""
    if have == want:
        return
    hp, hb = expected_shapes(have)
    wp, wb = expected_shapes(want)
    hall, wall = {**hp, **hb}, {**wp, **wb}
    for name in wall:
        if name not in hall:
            raise WeightFileError(name, "layer missing from weight file")
        if hall[name] != wall[name]:
            raise WeightFileError(name, f"shape {hall[name]} in file != {wall[name]} in requested config")
    for name in hall:
        if name not in wall:
            raise WeightFileError(name, "extra layer in weight file")
    if replace(have, dropout_p=want.dropout_p) != want:
        raise WeightFileError("config", f"{have} != {want}")


def save_weights(weights: ModelWeights, path) -> None:
    from .imageio import atomic_write_bytes
    atomic_write_bytes(Path(path), dumps(weights))


def load_weights(path, expect_config: UnetConfig | None = None) -> ModelWeights:
    return loads(Path(path).read_bytes(), expect_config)
