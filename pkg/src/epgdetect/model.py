"""Residual 1D CNN over 5 s single-channel segments.

Layer schedule (default config, 15 blocks)::

    conv0 (32 x 1, 16 filters) -> BN -> ReLU
    15 x pre-activation block:
        [BN -> ReLU ->] conv(stride s) -> BN -> ReLU -> dropout -> conv(stride 1)
        + maxpool(width s, stride s) shortcut, zero-padded when filters double
    BN -> ReLU -> flatten -> dense(2) -> softmax

Block 0 skips the leading BN -> ReLU since conv0's output is already
activated.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .eeg_io import atomic_write_text


def default_strides(n_blocks: int) -> list[int]:
    return [1 if b % 2 == 0 else 2 for b in range(n_blocks)]


def default_factors(n_blocks: int) -> list[int]:
    return [b // 4 for b in range(n_blocks)]


@dataclass
class NetConfig:
    input_len: int = 2560
    filter_width: int = 32
    base_filters: int = 16
    n_blocks: int = 15
    dropout_rate: float = 0.25
    block_strides: list[int] = field(default_factory=lambda: default_strides(15))
    block_factor_i: list[int] = field(default_factory=lambda: default_factors(15))
    n_classes: int = 2
    use_batchnorm: bool = True

    @classmethod
    def toy(cls, n_blocks=5, base_filters=8, **overrides) -> "NetConfig":
        """Desk-scale preset: first ``n_blocks`` rows of the full schedule."""
        return cls(
            n_blocks=n_blocks,
            base_filters=base_filters,
            block_strides=default_strides(n_blocks),
            block_factor_i=default_factors(n_blocks),
            **overrides,
        )

    @classmethod
    def preset(cls, name: str) -> "NetConfig":
        if name == "full":
            return cls()
        if name == "toy":
            return cls.toy()
        raise ValueError(f"unknown net preset {name!r} (expected 'full' or 'toy')")

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    def filters(self, block: int) -> int:
        return self.base_filters * 2 ** self.block_factor_i[block]

    def validate(self) -> None:
        if self.n_blocks < 0:
            raise ValueError(f"n_blocks must be >= 0, got {self.n_blocks}")
        if len(self.block_strides) != self.n_blocks:
            raise ValueError(f"block_strides has {len(self.block_strides)} rows, expected {self.n_blocks}")
        if len(self.block_factor_i) != self.n_blocks:
            raise ValueError(f"block_factor_i has {len(self.block_factor_i)} rows, expected {self.n_blocks}")
        for b, s in enumerate(self.block_strides):
            if s not in (1, 2):
                raise ValueError(f"ResBlock {b}: stride {s} not in {{1, 2}}")
        for b, f in enumerate(self.block_factor_i):
            if b > 0 and f < self.block_factor_i[b - 1]:
                raise ValueError(
                    f"ResBlock {b}: factor_i decreases ({self.block_factor_i[b - 1]} -> {f})"
                )
            if f != b // 4:
                raise ValueError(
                    f"ResBlock {b}: factor_i={f}, but filters double every four blocks (expected {b // 4})"
                )
        if self.filter_width < 1 or self.base_filters < 1 or self.input_len < 1:
            raise ValueError("filter_width, base_filters and input_len must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        down = int(np.prod(self.block_strides, dtype=np.int64)) if self.n_blocks else 1
        if self.input_len % down:
            raise ValueError(
                f"input_len {self.input_len} not divisible by total stride {down}; "
                "stride product x final length must equal input_len"
            )

    @property
    def downsampling(self) -> int:
        return int(np.prod(self.block_strides, dtype=np.int64)) if self.n_blocks else 1

    @property
    def final_len(self) -> int:
        return self.input_len // self.downsampling

    @property
    def final_channels(self) -> int:
        return self.filters(self.n_blocks - 1) if self.n_blocks else self.base_filters


class Model:
    def __init__(self, config: NetConfig, params: dict[str, ad.Param], seed: int = 0):
        self.config = config
        self.params = params
        self.mode = "eval"
        self.seed = seed
        self.step = 0

    # -- parameters -----------------------------------------------------------

    def trainable(self) -> list[ad.Param]:
        return [p for p in self.params.values() if p.trainable]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.value.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.value.shape}")
            p.value = arr.astype(p.value.dtype, copy=True)

    def astype(self, dtype) -> "Model":
        for p in self.params.values():
            p.astype(dtype)
        return self

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self.trainable())

    # -- forward --------------------------------------------------------------

    def _bn(self, x, name, training):
        p = self.params
        if not self.config.use_batchnorm:
            return x
        return ad.batchnorm(
            x, p[f"{name}.gamma"], p[f"{name}.beta"], p[f"{name}.running_mean"], p[f"{name}.running_var"], training
        )

    def _conv(self, x, name, stride):
        return ad.conv1d(x, self.params[f"{name}.kernel"], self.params[f"{name}.bias"], stride)

    def logits(self, batch, training: bool = False, trace: list | None = None) -> ad.Node:
        """Build the graph for ``batch`` ([B, L] or [B, L, 1]) and return logits."""
        cfg = self.config
        x = np.asarray(batch)
        if x.ndim == 2:
            x = x[:, :, None]
        if x.ndim != 3 or x.shape[1] != cfg.input_len or x.shape[2] != 1:
            raise ValueError(f"expected batch of shape [B, {cfg.input_len}, 1], got {x.shape}")
        x = ad.Node(x.astype(self.dtype, copy=False))

        h = self._conv(x, "conv0", 1)
        h = ad.relu(self._bn(h, "conv0.bn", training))
        if trace is not None:
            trace.append(("Conv layer 0", h.shape))
        channels = cfg.base_filters
        for b in range(cfg.n_blocks):
            stride = cfg.block_strides[b]
            out_ch = cfg.filters(b)
            name = f"block{b}"
            y = h if b == 0 else ad.relu(self._bn(h, f"{name}.bn1", training))
            y = self._conv(y, f"{name}.conv1", stride)
            y = ad.relu(self._bn(y, f"{name}.bn2", training))
            rng = ad.dropout_rng(self.seed, self.step, b) if training and cfg.dropout_rate > 0 else None
            y = ad.dropout(y, cfg.dropout_rate, training, rng)
            y = self._conv(y, f"{name}.conv2", 1)
            shortcut = ad.maxpool1d(h, stride, stride) if stride > 1 else h
            shortcut = ad.pad_channels(shortcut, out_ch)
            h = ad.add(y, shortcut)
            channels = out_ch
            if trace is not None:
                trace.append((f"ResBlock {b}", h.shape))
        h = ad.relu(self._bn(h, "head.bn", training))
        h = ad.flatten(h)
        out = ad.dense(h, self.params["dense.weights"], self.params["dense.bias"])
        if trace is not None:
            trace.append(("Dense", out.shape))
        assert channels == cfg.final_channels
        return out

    def forward(self, batch, mode: str | None = None) -> np.ndarray:
        """Class probabilities ``[B, n_classes]``; eval mode is deterministic."""
        mode = mode or self.mode
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        with ad.no_grad():
            logits = self.logits(batch, training=(mode == "train"))
        return ad.softmax(logits.value.astype(np.float64))

    def predict(self, segments: np.ndarray, batch_size: int = 128) -> np.ndarray:
        out = []
        for start in range(0, len(segments), batch_size):
            out.append(self.forward(segments[start : start + batch_size], "eval"))
        if not out:
            return np.zeros((0, self.config.n_classes))
        return np.concatenate(out)

    # -- introspection --------------------------------------------------------

    def describe(self) -> list[dict]:
        """Table-1 style rows from an actual forward pass on one zero segment."""
        cfg = self.config
        trace = []
        with ad.no_grad():
            self.logits(np.zeros((1, cfg.input_len, 1), dtype=self.dtype), training=False, trace=trace)
        rows = []
        for name, shape in trace:
            if name == "Dense":
                rows.append({"name": name, "config": str(cfg.n_classes), "stride": None,
                             "factor_i": None, "output_shape": [int(shape[1])]})
                continue
            if name == "Conv layer 0":
                stride, factor, n_convs = 1, 0, 1
            else:
                b = int(name.split()[-1])
                stride, factor, n_convs = cfg.block_strides[b], cfg.block_factor_i[b], 2
            rows.append(
                {
                    "name": name,
                    "config": "; ".join([f"{cfg.filter_width}x1, {int(shape[2])}"] * n_convs),
                    "stride": stride,
                    "factor_i": factor,
                    "output_shape": [int(shape[1]), 1, int(shape[2])],
                }
            )
        return rows


def count_conv_layers(model_or_config) -> int:
    cfg = model_or_config.config if isinstance(model_or_config, Model) else model_or_config
    return 1 + 2 * cfg.n_blocks


def build(config: NetConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Allocate parameters for ``config``.

    Conv kernels are He-normal; biases and the dense head start at zero.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, ad.Param] = {}
    w = config.filter_width

    def conv(name, c_in, c_out):
        std = np.sqrt(2.0 / (w * c_in))
        params[f"{name}.kernel"] = ad.Param(rng.normal(0, std, (w, c_in, c_out)).astype(dtype), f"{name}.kernel")
        params[f"{name}.bias"] = ad.Param(np.zeros(c_out, dtype), f"{name}.bias")

    def bn(name, c):
        if not config.use_batchnorm:
            return
        params[f"{name}.gamma"] = ad.Param(np.ones(c, dtype), f"{name}.gamma")
        params[f"{name}.beta"] = ad.Param(np.zeros(c, dtype), f"{name}.beta")
        params[f"{name}.running_mean"] = ad.Param(np.zeros(c, dtype), f"{name}.running_mean", trainable=False)
        params[f"{name}.running_var"] = ad.Param(np.ones(c, dtype), f"{name}.running_var", trainable=False)

    conv("conv0", 1, config.base_filters)
    bn("conv0.bn", config.base_filters)
    channels = config.base_filters
    for b in range(config.n_blocks):
        out_ch = config.filters(b)
        if b > 0:
            bn(f"block{b}.bn1", channels)
        conv(f"block{b}.conv1", channels, out_ch)
        bn(f"block{b}.bn2", out_ch)
        conv(f"block{b}.conv2", out_ch, out_ch)
        channels = out_ch
    bn("head.bn", channels)
    features = config.final_len * channels
    # zero head: an untrained net scores every segment (0.5, 0.5)
    params["dense.weights"] = ad.Param(np.zeros((features, config.n_classes), dtype), "dense.weights")
    params["dense.bias"] = ad.Param(np.zeros(config.n_classes, dtype), "dense.bias")
    return Model(config, params, seed=seed)


def save_model(model: Model, path) -> None:
    ad.save_checkpoint(path, model.state_dict())
    meta = {"net_config": asdict(model.config), "seed": model.seed}
    atomic_write_text(str(path) + ".json", json.dumps(meta, indent=2) + "\n")


def load_model(path, config: NetConfig | None = None) -> Model:
    """Rebuild a model from a checkpoint; the config defaults to its sidecar JSON."""
    if config is None:
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        config = NetConfig.from_dict(meta["net_config"])
        seed = meta.get("seed", 0)
    else:
        seed = 0
    model = build(config, seed=seed)
    model.load_state_dict(ad.load_checkpoint(path))
    return model
