"""The density estimator and the domain discriminator.

The estimator is a U-Net-style encoder-decoder: per level two 3x3
convolutions with ReLU then a 2x2 max-pool on the way down, and
nearest-neighbor 2x upsampling, a 3x3 convolution, and a skip concatenation
with the same-scale encoder features on the way up. A 1x1 head with a final
ReLU produces one non-negative density channel at the input resolution, and
the predicted count is the sum of that map.

The discriminator is fully convolutional: five 4x4 stride-2 convolutions
with channels 64, 128, 256, 512, 1, leaky ReLU (0.2) after each hidden
layer, and a sigmoid on the single-channel output. Each output cell is the
probability that its receptive field came from the source domain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (ModelParams, Tensor, concat_channels, conv2d, leaky_relu,
                       max_pool2d, relu, sigmoid, upsample_nearest2x)
from .errors import CheckpointError, ConfigError

CHECKPOINT_MAGIC = "CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class EstimatorConfig:
    in_channels: int = 3
    depth: int = 4
    base_channels: int = 16

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"estimator depth must be >= 1, got {self.depth}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ConfigError("estimator channels must be >= 1")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth


@dataclass(frozen=True)
class DiscriminatorConfig:
    in_channels: int = 1
    channels: tuple = (64, 128, 256, 512, 1)
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    leaky_slope: float = 0.2

    @property
    def divisor(self) -> int:
        return self.stride ** len(self.channels)


def _level_channels(cfg: EstimatorConfig, level: int) -> int:
    return cfg.base_channels * (2 ** level)


def expected_estimator_names(cfg: EstimatorConfig) -> list[str]:
    names = []
    for i in range(cfg.depth):
        names += [f"enc{i}.conv1.weight", f"enc{i}.conv1.bias",
                  f"enc{i}.conv2.weight", f"enc{i}.conv2.bias"]
    for i in reversed(range(cfg.depth)):
        names += [f"dec{i}.up.weight", f"dec{i}.up.bias",
                  f"dec{i}.conv1.weight", f"dec{i}.conv1.bias",
                  f"dec{i}.conv2.weight", f"dec{i}.conv2.bias"]
    names += ["head.weight", "head.bias"]
    return names


def expected_discriminator_names(cfg: DiscriminatorConfig | None = None) -> list[str]:
    cfg = cfg or DiscriminatorConfig()
    names = []
    for i in range(1, len(cfg.channels) + 1):
        names += [f"layer{i}.weight", f"layer{i}.bias"]
    return names


def _uniform_weight(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def init_params(config, rng_seed: int, dtype=np.float32) -> ModelParams:
    """Fresh parameters: weights uniform in +-sqrt(6/fan_in), biases zero.

    Deterministic in rng_seed; tensors are drawn in the fixed name order that
    checkpoints and the optimizer also use.
    """
    rng = np.random.default_rng(rng_seed)
    params = ModelParams()

    def add_conv(name, c_out, c_in, k):
        params.add(f"{name}.weight", _uniform_weight(rng, (c_out, c_in, k, k), dtype))
        params.add(f"{name}.bias", Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))

    if isinstance(config, EstimatorConfig):
        for i in range(config.depth):
            c_in = config.in_channels if i == 0 else _level_channels(config, i - 1)
            c = _level_channels(config, i)
            add_conv(f"enc{i}.conv1", c, c_in, 3)
            add_conv(f"enc{i}.conv2", c, c, 3)
        for i in reversed(range(config.depth)):
            c = _level_channels(config, i)
            up_in = _level_channels(config, min(i + 1, config.depth - 1))
            add_conv(f"dec{i}.up", c, up_in, 3)
            add_conv(f"dec{i}.conv1", c, 2 * c, 3)
            add_conv(f"dec{i}.conv2", c, c, 3)
        add_conv("head", 1, config.base_channels, 1)
        return params
    if isinstance(config, DiscriminatorConfig):
        c_in = config.in_channels
        for i, c_out in enumerate(config.channels, start=1):
            add_conv(f"layer{i}", c_out, c_in, config.kernel)
            c_in = c_out
        return params
    raise ConfigError(f"init_params got unsupported config type {type(config).__name__}")


def estimator_config_from_params(params: ModelParams) -> EstimatorConfig:
    """Recover depth / base_channels / in_channels from parameter names and shapes."""
    if "enc0.conv1.weight" not in params or "head.weight" not in params:
        raise CheckpointError(
            f"parameters do not describe a density estimator (names: {params.names()[:4]}...)")
    depth = 0
    while f"enc{depth}.conv1.weight" in params:
        depth += 1
    w0 = params["enc0.conv1.weight"]
    cfg = EstimatorConfig(in_channels=w0.shape[1], depth=depth, base_channels=w0.shape[0])
    expected = expected_estimator_names(cfg)
    if params.names() != expected:
        raise CheckpointError("parameter names do not match the estimator layout")
    return cfg


def _check_names(params: ModelParams, expected: list[str], what: str):
    if params.names() != expected:
        missing = [n for n in expected if n not in params]
        extra = [n for n in params.names() if n not in set(expected)]
        raise CheckpointError(
            f"parameter names do not match {what}: missing {missing[:3]}, unexpected {extra[:3]}")


def estimator_forward(params: ModelParams, image: Tensor) -> Tensor:
    """Map a (C, H, W) image to a non-negative (H, W) density prediction.

    A batch (N, C, H, W) maps to (N, H, W); the batched form exists because
    it turns every convolution into a single large matmul.
    """
    cfg = estimator_config_from_params(params)
    if image.data.ndim not in (3, 4):
        raise ConfigError(f"estimator input must be (C,H,W) or (N,C,H,W), got shape {image.shape}")
    batched = image.data.ndim == 4
    c, h, w = image.shape[-3:]
    if c != cfg.in_channels:
        raise ConfigError(f"estimator expects {cfg.in_channels} input channels, got {c}")
    if h % cfg.divisor or w % cfg.divisor:
        raise ConfigError(
            f"estimator with depth {cfg.depth} needs H, W divisible by {cfg.divisor}, got {h}x{w}")

    def block(x, prefix):
        return conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], stride=1, padding=1)

    x = image
    skips = []
    for i in range(cfg.depth):
        x = relu(block(x, f"enc{i}.conv1"))
        x = relu(block(x, f"enc{i}.conv2"))
        skips.append(x)
        x = max_pool2d(x, 2, 2)
    for i in reversed(range(cfg.depth)):
        x = upsample_nearest2x(x)
        x = block(x, f"dec{i}.up")
        x = concat_channels(x, skips[i])
        x = relu(block(x, f"dec{i}.conv1"))
        x = relu(block(x, f"dec{i}.conv2"))
    x = conv2d(x, params["head.weight"], params["head.bias"], stride=1, padding=0)
    out_shape = (image.shape[0], h, w) if batched else (h, w)
    return relu(x).reshape(out_shape)


def discriminator_forward(params: ModelParams, density: Tensor,
                          cfg: DiscriminatorConfig | None = None) -> Tensor:
    """Map a (1, H, W) density map to a (1, H/32, W/32) grid of P(source).

    A batch (N, 1, H, W) maps to (N, 1, H/32, W/32).
    """
    cfg = cfg or DiscriminatorConfig()
    _check_names(params, expected_discriminator_names(cfg), "the discriminator layout")
    if density.data.ndim not in (3, 4) or density.shape[-3] != cfg.in_channels:
        raise ConfigError(
            f"discriminator input must be (1,H,W) or (N,1,H,W), got shape {density.shape}")
    h, w = density.shape[-2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise ConfigError(
            f"discriminator needs H, W divisible by {cfg.divisor}, got {h}x{w}")
    x = density
    last = len(cfg.channels)
    for i in range(1, last + 1):
        x = conv2d(x, params[f"layer{i}.weight"], params[f"layer{i}.bias"],
                   stride=cfg.stride, padding=cfg.padding)
        if i < last:
            x = leaky_relu(x, cfg.leaky_slope)
    return sigmoid(x)


def predict_count(density) -> float:
    """Count readout: the sum of all density values."""
    grid = density.data if isinstance(density, Tensor) else density.grid.data
    return float(grid.sum())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, with_moments: bool = False) -> None:
    """Binary checkpoint: ASCII 'CKPT 1 <n_params> <moments flag>' header, then
    per parameter a name line, a shape line, and raw little-endian float32 data.
    With the flag set, a MOMENTS section carrying the Adam state follows."""
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {len(params)} {int(with_moments)}\n".encode())
        for name, t in params.items():
            f.write(f"{name}\n".encode())
            f.write((" ".join(str(d) for d in t.shape) + "\n").encode())
            f.write(t.data.astype("<f4").tobytes())
        if with_moments:
            f.write(f"MOMENTS {params.step_count}\n".encode())
            for name, t in params.items():
                m, v = params.moments(name)
                f.write(f"{name}\n".encode())
                f.write(m.astype("<f4").tobytes())
                f.write(v.astype("<f4").tobytes())


def _read_exact(f, n, path):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"{path}: truncated checkpoint (wanted {n} bytes, got {len(buf)})")
    return buf


def load_checkpoint(path, expected_names: list[str] | None = None) -> ModelParams:
    """Read a checkpoint back into a ModelParams (strict name check optional)."""
    params = ModelParams()
    with open(path, "rb") as f:
        header = f.readline().decode("ascii", errors="replace").split()
        if len(header) != 4 or header[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (header {header})")
        if int(header[1]) != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {header[1]}")
        n_params, has_moments = int(header[2]), bool(int(header[3]))
        for _ in range(n_params):
            name = f.readline().decode("ascii").strip()
            shape_line = f.readline().decode("ascii").split()
            if not name or not shape_line:
                raise CheckpointError(f"{path}: truncated checkpoint (missing parameter header)")
            shape = tuple(int(s) for s in shape_line)
            count = int(np.prod(shape))
            data = np.frombuffer(_read_exact(f, count * 4, path), dtype="<f4").reshape(shape)
            params.add(name, Tensor(data.copy(), requires_grad=True))
        if has_moments:
            moments_header = f.readline().decode("ascii").split()
            if len(moments_header) != 2 or moments_header[0] != "MOMENTS":
                raise CheckpointError(f"{path}: corrupt moments section")
            params.step_count = int(moments_header[1])
            for _ in range(n_params):
                name = f.readline().decode("ascii").strip()
                if name not in params:
                    raise CheckpointError(f"{path}: moments for unknown parameter '{name}'")
                shape = params[name].shape
                count = int(np.prod(shape))
                m = np.frombuffer(_read_exact(f, count * 4, path), dtype="<f4").reshape(shape)
                v = np.frombuffer(_read_exact(f, count * 4, path), dtype="<f4").reshape(shape)
                params.set_moments(name, m.copy(), v.copy())
    if expected_names is not None:
        _check_names(params, list(expected_names), "the expected model")
    return params
