"""CapsAttn and its three ablation variants.

    CapsAttn  conv -> primary caps -> routing -> BiLSTM -> attention -> dense x2
    CapsLSTM  CapsAttn without attention
    CNNAttn   conv -> spatial max-pool -> BiLSTM -> attention -> dense x2
    CNNLSTM   CNNAttn without attention
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import layers as L
from . import tensor as tc
from .tensor import DimensionError, Tensor

VARIANTS = ("CapsAttn", "CapsLSTM", "CNNAttn", "CNNLSTM")
_ALIASES = {"CNN-LSTM": "CNNLSTM", "cnn-lstm": "CNNLSTM"}
_ALIASES.update({v.lower(): v for v in VARIANTS})

MAGIC = b"CAPSATTN"
FORMAT_VERSION = 1

# fixed per-layer seed slots; a layer keeps its slot whatever else is built
_SEED_SLOTS = {
    "conv": 0,
    "primary": 1,
    "routing": 2,
    "lstm_fwd": 3,
    "lstm_bwd": 4,
    "attention": 5,
    "dense1": 6,
    "dense2": 7,
}


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


def canonical_variant(name: str) -> str:
    if name in VARIANTS:
        return name
    try:
        return _ALIASES[name] if name in _ALIASES else _ALIASES[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose one of {', '.join(VARIANTS)}") from None


@dataclass(frozen=True)
class ModelConfig:
    T: int = 26
    patch_h: int = 3
    patch_w: int = 3
    bands: int = 6
    conv_channels: int = 128
    num_primary: int = 1280
    caps_dim: int = 10
    num_out_caps: int = 23
    lstm_units: int = 240
    attn_dim: int = 480
    dense_hidden: int = 512
    num_classes: int = 23
    routing_iters: int = 3
    variant: str = "CapsAttn"
    seed: int = 0
    pool_window: int = 3

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))

    def validate(self) -> "ModelConfig":
        for f in fields(self):
            if f.name in ("variant", "seed"):
                continue
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.attn_dim != 2 * self.lstm_units:
            raise ConfigError(f"attn_dim ({self.attn_dim}) must equal 2 * lstm_units ({2 * self.lstm_units})")
        if self.pool_window > min(self.patch_h, self.patch_w):
            raise ConfigError(f"pool_window {self.pool_window} exceeds the patch size")
        return self

    @property
    def uses_capsules(self) -> bool:
        return self.variant.startswith("Caps")

    @property
    def uses_attention(self) -> bool:
        return self.variant.endswith("Attn")

    @property
    def pooled_cells(self) -> int:
        ho = (self.patch_h - self.pool_window) // self.pool_window + 1
        wo = (self.patch_w - self.pool_window) // self.pool_window + 1
        return ho * wo

    @property
    def lstm_input_dim(self) -> int:
        if self.uses_capsules:
            return self.num_out_caps * self.caps_dim
        return self.conv_channels * self.pooled_cells

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            if k not in kinds:
                raise ConfigError(f"unknown model config key {k!r}")
            out[k] = v if k == "variant" else int(v)
        return cls(**out)


PRESETS = {
    "full": ModelConfig(),
    # desk-scale model that trains in seconds per epoch on one CPU core
    "desk": ModelConfig(conv_channels=32, num_primary=32, caps_dim=8, lstm_units=32, attn_dim=64, dense_hidden=64),
    # the gradient-check miniature: T=3, K=2, 4 primary capsules
    "mini": ModelConfig(
        T=3, conv_channels=4, num_primary=4, caps_dim=3, num_out_caps=2, lstm_units=3, attn_dim=6,
        dense_hidden=5, num_classes=2,
    ),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}")
    return replace(PRESETS[name], **overrides).validate()


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar parameters for ``cfg``."""
    C, D, H, K, U = cfg.conv_channels, cfg.attn_dim, cfg.dense_hidden, cfg.num_classes, cfg.lstm_units
    n = cfg.bands * C + C
    if cfg.uses_capsules:
        pc = cfg.num_primary * cfg.caps_dim
        n += cfg.patch_h * cfg.patch_w * C * pc + pc
        n += cfg.num_primary * cfg.num_out_caps * cfg.caps_dim * cfg.caps_dim
    n += 2 * (4 * U * cfg.lstm_input_dim + 4 * U * U + 4 * U)
    if cfg.uses_attention:
        n += cfg.T * (D * D + 2 * D)
    n += D * H + H + H * K + K
    return n


@dataclass
class ModelState:
    config: ModelConfig
    conv: L.ConvBlockParams
    lstm_fwd: L.LSTMParams
    lstm_bwd: L.LSTMParams
    dense1: L.DenseParams
    dense2: L.DenseParams
    primary: L.PrimaryCapsParams | None = None
    routing: L.CapsuleLayerParams | None = None
    attention: L.AttentionParams | None = None

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        """All parameter tensors in build order."""
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name in ("conv", "primary", "routing", "lstm_fwd", "lstm_bwd", "attention", "dense1", "dense2"):
            block = getattr(self, name)
            if block is None:
                continue
            for k, t in block.tensors().items():
                out[f"{name}.{k}"] = t
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def copy_values(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters().items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, t in self.named_parameters().items():
            t.data = values[k].copy()


def _layer_rng(seed: int, layer: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _SEED_SLOTS[layer]]))


def build(config: ModelConfig, dtype=None) -> ModelState:
    cfg = config.validate()
    r = lambda name: _layer_rng(cfg.seed, name)  # noqa: E731
    D = cfg.attn_dim
    state = ModelState(
        config=cfg,
        conv=L.ConvBlockParams.init(r("conv"), cfg.bands, cfg.conv_channels, dtype),
        lstm_fwd=L.LSTMParams.init(r("lstm_fwd"), cfg.lstm_input_dim, cfg.lstm_units, dtype),
        lstm_bwd=L.LSTMParams.init(r("lstm_bwd"), cfg.lstm_input_dim, cfg.lstm_units, dtype),
        dense1=L.DenseParams.init(r("dense1"), D, cfg.dense_hidden, dtype),
        dense2=L.DenseParams.init(r("dense2"), cfg.dense_hidden, cfg.num_classes, dtype),
    )
    if cfg.uses_capsules:
        state.primary = L.PrimaryCapsParams.init(
            r("primary"), cfg.patch_h, cfg.patch_w, cfg.conv_channels, cfg.num_primary, cfg.caps_dim, dtype
        )
        state.routing = L.CapsuleLayerParams.init(
            r("routing"), cfg.num_primary, cfg.num_out_caps, cfg.caps_dim, cfg.caps_dim, cfg.routing_iters, dtype
        )
    if cfg.uses_attention:
        state.attention = L.AttentionParams.init(r("attention"), cfg.T, D, dtype)
    return state


@dataclass
class ForwardTrace:
    """Per-stage activations of one forward pass (batch axis included)."""

    activations: "OrderedDict[str, Tensor]"
    couplings: np.ndarray | None = None  # final routing coupling, [B*T, Np, No]
    routing: L.RoutingTrace | None = None
    alpha: Tensor | None = None

    def shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        """Per-sample shapes (batch axis dropped)."""
        return OrderedDict((k, tuple(v.shape[1:])) for k, v in self.activations.items())


def _check_input(m: ModelState, x) -> Tensor:
    x = x if isinstance(x, Tensor) else tc.tensor(x)
    c = m.config
    want = (c.T, c.patch_h, c.patch_w, c.bands)
    if x.ndim == 4:
        x = tc.reshape(x, (1, *x.shape))
    if x.ndim != 5 or tuple(x.shape[1:]) != want:
        raise DimensionError(f"model expects input [B, {', '.join(map(str, want))}], got {x.shape}")
    return x


def forward(m: ModelState, x, couplings: np.ndarray | None = None, with_trace: bool = False):
    """Class probabilities ``[B, T, K]`` for a batch of patch sequences.

    ``couplings`` pins the final routing coupling coefficients (see
    :func:`layers.dynamic_routing`). With ``with_trace`` a
    :class:`ForwardTrace` is returned alongside the probabilities.
    """
    cfg = m.config
    x = _check_input(m, x)
    B, T = x.shape[:2]
    acts: OrderedDict[str, Tensor] = OrderedDict()
    trace = ForwardTrace(acts)

    h = L.conv_block_forward(x, m.conv)
    acts["conv"] = h
    if cfg.uses_capsules:
        pc = L.primary_caps_forward(h, m.primary)
        acts["primary_caps"] = pc
        caps, rt = L.dynamic_routing(pc, m.routing, couplings=couplings)
        acts["capsules"] = caps
        trace.routing = rt
        trace.couplings = rt.couplings[-1]
        feats = tc.reshape(caps, (B, T, cfg.num_out_caps * cfg.caps_dim))
    else:
        pooled = tc.max_pool2d(h, cfg.pool_window)
        acts["pool"] = pooled
        feats = tc.reshape(pooled, (B, T, cfg.lstm_input_dim))
    seq = L.bilstm_forward(feats, m.lstm_fwd, m.lstm_bwd)
    acts["bilstm"] = seq
    if cfg.uses_attention:
        seq, alpha = L.attention_forward(seq, m.attention)
        acts["attention"] = seq
        trace.alpha = alpha
    hidden = L.dense_forward(seq, m.dense1, "relu")
    acts["dense"] = hidden
    probs = L.dense_forward(hidden, m.dense2, "softmax")
    acts["softmax"] = probs
    return (probs, trace) if with_trace else probs


def loss(m: ModelState, x, labels, weights, couplings=None) -> Tensor:
    return L.cross_entropy_loss(forward(m, x, couplings=couplings), labels, weights)


def predict_from_probs(probs: np.ndarray) -> np.ndarray:
    """Argmax of the time-averaged distribution; ties go to the lowest id."""
    return np.asarray(probs, dtype=np.float64).mean(axis=1).argmax(axis=1)


def predict(m: ModelState, x, batch_size: int = 256) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim == 4:
        x = x[None]
    out = []
    with tc.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(predict_from_probs(forward(m, x[i:i + batch_size]).data))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# -------------------------------------------------------------- serialization

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def _config_block(cfg: ModelConfig) -> bytes:
    return "\n".join(f"{k}={v}" for k, v in cfg.to_dict().items()).encode("utf-8")


def dumps(m: ModelState) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", FORMAT_VERSION))
    block = _config_block(m.config)
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    params = m.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = t.data.astype(t.data.dtype.newbyteorder("<"), copy=False)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated model file (need {n} bytes at offset {self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> ModelState:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a model file (bad magic)")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    (blen,) = r.unpack("<I")
    try:
        pairs = dict(line.split("=", 1) for line in r.take(blen).decode("utf-8").splitlines())
        cfg = ModelConfig.from_dict(pairs)
    except (ValueError, ConfigError) as e:
        raise FormatError(f"bad config block: {e}") from None
    (count,) = r.unpack("<I")
    values: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        values[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after parameters")

    state = build(cfg)
    expected = state.named_parameters()
    if set(values) != set(expected):
        raise FormatError(f"parameter set mismatch: {sorted(set(values) ^ set(expected))}")
    for name, t in expected.items():
        if values[name].shape != t.shape:
            raise FormatError(f"{name}: stored shape {values[name].shape} != expected {t.shape}")
    for name, t in expected.items():
        t.data = values[name]
    return state


def save(m: ModelState, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(m))
    tmp.replace(path)


def load(path) -> ModelState:
    return loads(Path(path).read_bytes())
