"""The fully-local detector network: 8 unpadded stride-1 convolutions, one
stride-2 max pool, per-location segmentation heads and a GAP image head."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError
from .tensor import (
    BatchNormState,
    Tensor,
    affine,
    batchnorm2d,
    conv2d_valid,
    global_avg_pool,
    maxpool2d,
    pool_output_size,
    relu,
)

REQUIRED_RF = 33
CHECKPOINT_MAGIC = "localforensics-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ArchConfig:
    input_size: int = 128
    conv_kernels: tuple[int, ...] = (3, 3, 3, 3, 3, 3, 3, 3)
    conv_channels: tuple[int, ...] = (32, 64, 96, 96, 128, 128, 160, 160)
    # number of conv layers that precede the pool
    pool_position: int = 1
    pool_kernel: int = 3
    pool_stride: int = 2
    num_seg_heads: int = 1
    num_classes: int = 2
    in_channels: int = 3
    allow_rf_override: bool = False

    def __post_init__(self):
        self.conv_kernels = tuple(int(k) for k in self.conv_kernels)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)

    def validate(self) -> None:
        if len(self.conv_kernels) != 8 or len(self.conv_channels) != 8:
            raise ConfigError(
                f"need exactly 8 conv layers, got {len(self.conv_kernels)} kernels / {len(self.conv_channels)} channel counts"
            )
        if not 0 <= self.pool_position <= 8:
            raise ConfigError(f"pool_position must be in [0, 8], got {self.pool_position}")
        if self.pool_stride != 2:
            raise ConfigError(f"pool stride is fixed at 2, got {self.pool_stride}")
        if any(k < 1 for k in self.conv_kernels) or self.pool_kernel < 1:
            raise ConfigError("kernel sizes must be positive")
        if any(c < 1 for c in self.conv_channels):
            raise ConfigError("channel counts must be positive")
        if self.num_seg_heads < 0:
            raise ConfigError("num_seg_heads must be >= 0")
        if self.num_classes != 2:
            raise ConfigError("the detector is binary: num_classes must be 2")
        rf = receptive_field(self).rf
        if rf != REQUIRED_RF and not self.allow_rf_override:
            raise ConfigError(f"final receptive field is {rf}, required {REQUIRED_RF} (set allow_rf_override to bypass)")

    def layers(self) -> list[tuple[str, int, int]]:
        """(kind, kernel, stride) for every spatial layer in order."""
        out: list[tuple[str, int, int]] = []
        for i, k in enumerate(self.conv_kernels):
            if i == self.pool_position:
                out.append(("pool", self.pool_kernel, self.pool_stride))
            out.append(("conv", k, 1))
        if self.pool_position == len(self.conv_kernels):
            out.append(("pool", self.pool_kernel, self.pool_stride))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_kernels"] = list(self.conv_kernels)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown arch config keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerRF:
    kind: str
    kernel: int
    stride: int
    rf: int
    jump: int
    center: float


@dataclass(frozen=True)
class ReceptiveFieldInfo:
    layers: tuple[LayerRF, ...]

    @property
    def rf(self) -> int:
        return self.layers[-1].rf if self.layers else 1

    @property
    def jump(self) -> int:
        return self.layers[-1].jump if self.layers else 1

    @property
    def center_offset(self) -> float:
        return self.layers[-1].center if self.layers else 0.0

    def center_of(self, i: int) -> float:
        """Input coordinate of the receptive-field center of output index ``i``."""
        return self.center_offset + self.jump * i

    def span(self, i: int) -> tuple[int, int]:
        """Inclusive input-coordinate range seen by output index ``i``."""
        half = (self.rf - 1) / 2
        c = self.center_of(i)
        return int(np.floor(c - half)), int(np.ceil(c + half))


def receptive_field(config: ArchConfig) -> ReceptiveFieldInfo:
    rf, jump, center = 1, 1, 0.0
    rows = []
    for kind, k, s in config.layers():
        rf = rf + (k - 1) * jump
        center = center + (k - 1) / 2 * jump
        jump = jump * s
        rows.append(LayerRF(kind, k, s, rf, jump, int(center) if float(center).is_integer() else center))
    return ReceptiveFieldInfo(tuple(rows))


def output_grid(config: ArchConfig, input_size: int | tuple[int, int]) -> tuple[int, int]:
    hw = (input_size, input_size) if isinstance(input_size, int) else tuple(input_size)
    dims = []
    for extent in hw:
        e = int(extent)
        for kind, k, s in config.layers():
            if e < k:
                e = 0
                break
            e = e - k + 1 if kind == "conv" else pool_output_size(e, k, s)
        if e < 1:
            raise DimensionError(
                f"input extent {extent} is too small for this network (minimum {receptive_field(config).rf})"
            )
        dims.append(e)
    return dims[0], dims[1]


@dataclass
class ForwardOutput:
    seg_logits: list[Tensor]
    image_logits: Tensor
    grid: tuple[int, int]
    features: Tensor | None = None


@dataclass
class Model:
    config: ArchConfig
    rf: ReceptiveFieldInfo
    conv_weights: list[Tensor]
    conv_biases: list[Tensor]
    bn: list[BatchNormState]
    seg_weights: list[Tensor] = field(default_factory=list)
    seg_biases: list[Tensor] = field(default_factory=list)
    cls_weight: Tensor | None = None
    cls_bias: Tensor | None = None

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for w, b, bn in zip(self.conv_weights, self.conv_biases, self.bn):
            params += [w, b, bn.gamma, bn.beta]
        for w, b in zip(self.seg_weights, self.seg_biases):
            params += [w, b]
        params += [self.cls_weight, self.cls_bias]
        return params

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every array a checkpoint must hold, in a fixed order."""
        out = []
        for i, (w, b, bn) in enumerate(zip(self.conv_weights, self.conv_biases, self.bn)):
            out += [
                (f"conv{i + 1}.weight", w.data),
                (f"conv{i + 1}.bias", b.data),
                (f"bn{i + 1}.gamma", bn.gamma.data),
                (f"bn{i + 1}.beta", bn.beta.data),
                (f"bn{i + 1}.running_mean", bn.running_mean),
                (f"bn{i + 1}.running_var", bn.running_var),
            ]
        for h, (w, b) in enumerate(zip(self.seg_weights, self.seg_biases)):
            out += [(f"seg{h}.weight", w.data), (f"seg{h}.bias", b.data)]
        out += [("cls.weight", self.cls_weight.data), ("cls.bias", self.cls_bias.data)]
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Model":
        """Deep copy with every parameter and running statistic cast to ``dtype``."""

        def t(x: Tensor) -> Tensor:
            return Tensor(x.data.astype(dtype, copy=True), requires_grad=x.requires_grad, name=x.name)

        bns = [
            BatchNormState(t(s.gamma), t(s.beta), s.running_mean.astype(dtype, copy=True),
                           s.running_var.astype(dtype, copy=True), s.eps, s.momentum)
            for s in self.bn
        ]
        return Model(
            self.config, self.rf,
            [t(w) for w in self.conv_weights], [t(b) for b in self.conv_biases], bns,
            [t(w) for w in self.seg_weights], [t(b) for b in self.seg_biases],
            t(self.cls_weight), t(self.cls_bias),
        )


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build(config: ArchConfig, seed: int = 0) -> Model:
    config.validate()
    rng = np.random.default_rng(seed)
    convs_w, convs_b, bns = [], [], []
    cin = config.in_channels
    for i, (k, cout) in enumerate(zip(config.conv_kernels, config.conv_channels)):
        convs_w.append(Tensor(_he_uniform(rng, (cout, cin, k, k), cin * k * k), True, f"conv{i + 1}.weight"))
        convs_b.append(Tensor(np.zeros(cout, np.float32), True, f"conv{i + 1}.bias"))
        bns.append(BatchNormState.create(cout, name=f"bn{i + 1}"))
        cin = cout
    nc = config.num_classes
    seg_w = [Tensor(_he_uniform(rng, (nc, cin, 1, 1), cin), True, f"seg{h}.weight") for h in range(config.num_seg_heads)]
    seg_b = [Tensor(np.zeros(nc, np.float32), True, f"seg{h}.bias") for h in range(config.num_seg_heads)]
    cls_w = Tensor(_he_uniform(rng, (nc, cin), cin), True, "cls.weight")
    cls_b = Tensor(np.zeros(nc, np.float32), True, "cls.bias")
    return Model(config, receptive_field(config), convs_w, convs_b, bns, seg_w, seg_b, cls_w, cls_b)


def forward(model: Model, images, mode: str = "eval", keep_features: bool = False) -> ForwardOutput:
    x = images if isinstance(images, Tensor) else Tensor(images)
    cfg = model.config
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected N x {cfg.in_channels} x H x W images, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if mode == "train" and (h != cfg.input_size or w != cfg.input_size):
        raise DimensionError(f"train-mode input must be {cfg.input_size}x{cfg.input_size}, got {h}x{w}")
    grid = output_grid(cfg, (h, w))

    conv_i = 0
    for kind, k, s in cfg.layers():
        if kind == "pool":
            x = maxpool2d(x, k, s)
            continue
        x = conv2d_valid(x, model.conv_weights[conv_i], model.conv_biases[conv_i])
        x = relu(x)
        x = batchnorm2d(x, model.bn[conv_i], mode)
        conv_i += 1

    segs = [conv2d_valid(x, w_, b_) for w_, b_ in zip(model.seg_weights, model.seg_biases)]
    logits = affine(global_avg_pool(x), model.cls_weight, model.cls_bias)
    return ForwardOutput(segs, logits, grid, x if keep_features else None)


def count_parameters(tensors) -> int:
    return int(sum(t.size for t in tensors))


def param_count(model: Model) -> int:
    """Learnable scalars: conv/affine weights and biases plus BN gamma/beta."""
    return count_parameters(model.parameters())


# ------------------------------------------------------------- checkpoints


def save_checkpoint(model: Model, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, offset = [], 0
    with open(path / "weights.bin", "wb") as fh:
        for name, arr in model.state_arrays():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(buf)
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += len(buf)
    manifest = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "arch": model.config.to_dict(),
        "tensors": index,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path) -> Model:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "weights.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint at {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (format={manifest.get('format')!r})")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('version')!r}")
    try:
        config = ArchConfig.from_dict(manifest["arch"])
    except ConfigError as exc:
        raise FormatError(str(exc)) from exc
    model = build(config, seed=0)
    expected = model.state_arrays()
    entries = manifest["tensors"]
    if [e["name"] for e in entries] != [n for n, _ in expected]:
        raise FormatError(f"{path}: tensor index does not match the embedded arch config")
    for entry, (name, target) in zip(entries, expected):
        if tuple(entry["shape"]) != target.shape:
            raise FormatError(f"{path}: {name} has shape {tuple(entry['shape'])}, config implies {target.shape}")
        nbytes = target.size * 4
        start = entry["offset"]
        if start + nbytes > len(blob):
            raise FormatError(f"{path}: weights.bin truncated at {name}")
        target[...] = np.frombuffer(blob, dtype="<f4", count=target.size, offset=start).reshape(target.shape)
    if entries and entries[-1]["offset"] + expected[-1][1].size * 4 != len(blob):
        raise FormatError(f"{path}: weights.bin has trailing bytes")
    return model
