"""Desk-scale CLASS network and its checkpoint format.

A four-level plain convolutional encoder stands in for a pretrained
backbone: level l produces features at 1/2^(l-1) of the input side
(F_2 .. F_5 at 1/2 .. 1/16).  Lateral 1x1 blocks bring F_2..F_4 to the
common width C, the bridge turns F_5 into the high-level feature, three
cross-level attention modules pair it with each low level, and three fusion
stages decode deepest-first.  Four heads produce full-resolution maps,
ordered final prediction first.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .attention import AttentionMaps, CrossLevelAttention
from .errors import CheckpointError, ConfigError, DimensionError
from .fusion import FeatureFusion, Head, SumFusion
from .nn import ConvBNReLU, Module
from .tensor import BN_EPS, Tensor

FUSIONS = ("ffm", "sum")


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 16
    input_size: int = 64
    levels: int = 4
    norm_epsilon: float = BN_EPS
    init_seed: int = 0
    use_cla_position: bool = True
    use_cla_channel: bool = True
    fusion: str = "ffm"
    ffm_residual: bool = False

    def __post_init__(self):
        c = self.base_channels
        if c < 4 or c % 2:
            raise ConfigError(f"base_channels must be even and >= 4, got {c}")
        if self.input_size < 16 or self.input_size % 16:
            raise ConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.levels != 4:
            raise ConfigError(f"levels is fixed at 4, got {self.levels}")
        if self.norm_epsilon <= 0:
            raise ConfigError(f"norm_epsilon must be positive, got {self.norm_epsilon}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")

    @property
    def encoder_widths(self) -> tuple[int, int, int, int]:
        c = self.base_channels
        return (c, 2 * c, 2 * c, 4 * c)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


class EncoderBlock(Module):
    """Stride-2 3x3 block followed by a stride-1 3x3 block."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, eps: float):
        self.down = ConvBNReLU(cin, cout, 3, rng, stride=2, eps=eps)
        self.conv = ConvBNReLU(cout, cout, 3, rng, eps=eps)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(self.down(x))


class ClassMini(Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        c, eps = config.base_channels, config.norm_epsilon
        w2, w3, w4, w5 = config.encoder_widths

        self.e2 = EncoderBlock(3, w2, rng, eps)
        self.e3 = EncoderBlock(w2, w3, rng, eps)
        self.e4 = EncoderBlock(w3, w4, rng, eps)
        self.e5 = EncoderBlock(w4, w5, rng, eps)

        self.lateral2 = ConvBNReLU(w2, c, 1, rng, eps=eps)
        self.lateral3 = ConvBNReLU(w3, c, 1, rng, eps=eps)
        self.lateral4 = ConvBNReLU(w4, c, 1, rng, eps=eps)

        self.bridge_compress = ConvBNReLU(w5, c, 1, rng, eps=eps)
        self.bridge_transfer = ConvBNReLU(c, c, 3, rng, eps=eps)

        use_cla = config.use_cla_position or config.use_cla_channel
        for level in (2, 3, 4):
            cla = CrossLevelAttention(c, rng, config.use_cla_position, config.use_cla_channel) if use_cla else None
            setattr(self, f"cla{level}", cla)

        for level in (4, 3, 2):
            if config.fusion == "ffm":
                stage = FeatureFusion(c, rng, residual=config.ffm_residual)
            else:
                stage = SumFusion(c, rng)
            setattr(self, f"dec{level}", stage)

        self.head2 = Head(c, rng)
        self.head3 = Head(c, rng)
        self.head4 = Head(c, rng)
        self.head_bridge = Head(c, rng)

    # prediction order of forward(): final first
    HEADS = ("head2", "head3", "head4", "head_bridge")

    @staticmethod
    def is_backbone(name: str) -> bool:
        return name.split(".", 1)[0] in ("e2", "e3", "e4", "e5")

    def forward(self, x: Tensor, bypass_cla: bool = False, diagnostics: bool = False):
        """Return ``(predictions, features)``.

        ``predictions`` holds four (N, 1, H, W) maps: decoder stage 2 (final),
        stage 3, stage 4, bridge.  ``features`` is ``None`` unless
        ``diagnostics`` is set, in which case it maps names to intermediate
        tensors and per-level :class:`AttentionMaps`.
        """
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected a (N, 3, H, W) batch, got {x.shape}")
        h, w = x.shape[2:]
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise DimensionError(f"input extents must be multiples of 16, got {h}x{w}")

        f2 = self.e2(x)
        f3 = self.e3(f2)
        f4 = self.e4(f3)
        f5 = self.e5(f4)
        lows = {2: self.lateral2(f2), 3: self.lateral3(f3), 4: self.lateral4(f4)}
        f_high = self.bridge_transfer(self.bridge_compress(f5))

        attended = {}
        for level, low in lows.items():
            cla = getattr(self, f"cla{level}")
            if cla is None or bypass_cla:
                attended[level] = (f_high, low, AttentionMaps(None, None))
            else:
                attended[level] = cla(f_high, low)

        d4 = self.dec4(attended[4][1], attended[4][0], f_high)
        d3 = self.dec3(attended[3][1], attended[3][0], d4)
        d2 = self.dec2(attended[2][1], attended[2][0], d3)

        preds = [self.head2(d2, h, w), self.head3(d3, h, w), self.head4(d4, h, w),
                 self.head_bridge(f_high, h, w)]
        features = None
        if diagnostics:
            features = {"F_2": f2, "F_3": f3, "F_4": f4, "F_5": f5, "F_h": f_high,
                        "D_2": d2, "D_3": d3, "D_4": d4,
                        "maps": {level: attended[level][2] for level in (2, 3, 4)}}
        return preds, features

    # -- state ------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_arrays()
        missing = set(own) - set(arrays)
        if strict and missing:
            raise CheckpointError(f"checkpoint lacks {sorted(missing)[:5]}")
        for name, target in own.items():
            if name not in arrays:
                continue
            src = arrays[name]
            if src.shape != target.shape:
                raise CheckpointError(f"{name}: shape {src.shape} does not match model {target.shape}")
            target[...] = src


def build(config: ModelConfig = ModelConfig()) -> ClassMini:
    return ClassMini(config)


# ---------------------------------------------------------------------------
# checkpoint file
#
#   b"CLSK" | u32 version | u32 len + config json | u32 len + state json
#   | u32 count | count x (u16 len + name | u8 ndim | ndim x u32 | f64 LE data)
# ---------------------------------------------------------------------------

MAGIC = b"CLSK"
FORMAT_VERSION = 1


def save_checkpoint(path, model: ClassMini, state: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    arrays = dict(model.state_arrays())
    for name, arr in (extra or {}).items():
        arrays[f"extra/{name}"] = arr
    config_bytes = model.config.to_json().encode()
    state_bytes = json.dumps(state or {}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION),
              struct.pack("<I", len(config_bytes)), config_bytes,
              struct.pack("<I", len(state_bytes)), state_bytes,
              struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode()
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def read_checkpoint(path) -> tuple[ModelConfig, dict, dict[str, np.ndarray]]:
    """Return ``(config, state, arrays)``; raises :class:`CheckpointError` on malformed input."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a classkit checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_dict(json.loads(take(n)))
    (n,) = struct.unpack("<I", take(4))
    state = json.loads(take(n))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return config, state, arrays


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[ClassMini, dict, dict[str, np.ndarray]]:
    """Rebuild the model from a checkpoint; returns ``(model, state, extra arrays)``."""
    config, state, arrays = read_checkpoint(path)
    if expected is not None and expected != config:
        raise CheckpointError(f"{path}: checkpoint config {config} does not match expected {expected}")
    model = ClassMini(config)
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("extra/")})
    extra = {k[len("extra/"):]: v for k, v in arrays.items() if k.startswith("extra/")}
    return model, state, extra
