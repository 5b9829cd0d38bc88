"""Residual CNN over channel-stacked image pairs, SGD training and checkpoints."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BINARY = "binary"
MULTICLASS = "multiclass"
TASK_CLASSES = {BINARY: 2, MULTICLASS: 7}
INPUT_FILTERS = ("local_mean", "none")


def local_mean_filter(x: np.ndarray) -> np.ndarray:
    """``x`` minus its 3x3 box mean per channel (NHWC); borders average in-bounds pixels only."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    total = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            total += xp[:, i : i + h, j : j + w, :]
    rows = np.full(h, 3.0)
    rows[0] = rows[-1] = 2.0
    cols = np.full(w, 3.0)
    cols[0] = cols[-1] = 2.0
    if h == 1:
        rows[:] = 1.0
    if w == 1:
        cols[:] = 1.0
    count = (rows[:, None] * cols[None, :]).astype(x.dtype)
    return x - total / count[None, :, :, None]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    Input filter -> stem conv (stride 2) -> one stage per entry of
    ``widths``, each opening with a stride-2 block -> global average pool ->
    linear head.

    ``input_filter="local_mean"`` subtracts each pixel's 3x3 neighbourhood
    mean before the stem, so the first layer sees shading edges rather than
    flat colour. It has no parameters.
    """

    task: str = BINARY
    in_channels: int = 6
    stem_width: int = 16
    stem_kernel: int = 3
    widths: tuple[int, ...] = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    norm: str = "batch"
    groups: int = 4
    dtype: str = "float32"
    input_filter: str = "local_mean"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.task not in TASK_CLASSES:
            raise ValueError(f"task must be one of {tuple(TASK_CLASSES)}")
        if self.norm not in ("batch", "group", "none"):
            raise ValueError("norm must be 'batch', 'group' or 'none'")
        if self.in_channels != 6:
            raise ValueError("the classifier takes 6-channel image pairs")
        if not self.widths or self.blocks_per_stage < 1:
            raise ValueError("need at least one stage with one block")
        if self.stem_kernel % 2 == 0:
            raise ValueError("stem kernel size must be odd")
        if self.input_filter not in INPUT_FILTERS:
            raise ValueError(f"input_filter must be one of {INPUT_FILTERS}")

    @property
    def num_classes(self) -> int:
        return TASK_CLASSES[self.task]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "widths": tuple(d["widths"])})


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 8
    epochs: int = 10
    momentum: float = 0.9
    seed: int = 0
    #: flip each training pair left-right and (independently) top-bottom with probability 1/2
    mirror: bool = True
    #: decay of the weight average that is validated and returned; 0 disables it
    ema_decay: float = 0.99

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")

    @classmethod
    def for_task(cls, task: str, **overrides) -> "TrainConfig":
        return cls(**{"epochs": 100 if task == MULTICLASS else 10, **overrides})


def _block_layout(cfg: ModelConfig):
    """Yield ``(prefix, in_ch, out_ch, stride)`` for each residual block."""
    c = cfg.stem_width
    i = 0
    for w in cfg.widths:
        for b in range(cfg.blocks_per_stage):
            yield f"blocks.{i}", c, w, 2 if b == 0 else 1
            c = w
            i += 1


class Model:
    """Parameters, normalisation buffers and the forward graph."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.bn_momentum = 0.1
        self._init(np.random.default_rng(seed))

    # -- construction --------------------------------------------------------

    def _conv(self, rng, name, cin, cout, k):
        fan_in = cin * k * k
        self.params[name + ".weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, k, k))
        self.params[name + ".bias"] = np.zeros(cout)

    def _norm(self, name, ch):
        if self.config.norm == "none":
            return
        self.params[name + ".gamma"] = np.ones(ch)
        self.params[name + ".beta"] = np.zeros(ch)
        if self.config.norm == "batch":
            self.buffers[name + ".running_mean"] = np.zeros(ch)
            self.buffers[name + ".running_var"] = np.ones(ch)

    def _init(self, rng):
        cfg = self.config
        self._conv(rng, "stem", cfg.in_channels, cfg.stem_width, cfg.stem_kernel)
        self._norm("stem.norm", cfg.stem_width)
        c = cfg.stem_width
        for prefix, cin, cout, _ in _block_layout(cfg):
            self._conv(rng, prefix + ".conv1", cin, cout, 3)
            self._norm(prefix + ".norm1", cout)
            self._conv(rng, prefix + ".conv2", cout, cout, 3)
            self._norm(prefix + ".norm2", cout)
            c = cout
        self.params["head.weight"] = rng.normal(0.0, np.sqrt(1.0 / c), (cfg.num_classes, c))
        self.params["head.bias"] = np.zeros(cfg.num_classes)
        dt = np.dtype(cfg.dtype)
        self.params = {k: v.astype(dt) for k, v in self.params.items()}
        self.buffers = {k: v.astype(dt) for k, v in self.buffers.items()}

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def copy(self) -> "Model":
        other = Model.__new__(Model)
        other.config = self.config
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other.bn_momentum = self.bn_momentum
        return other

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- forward -------------------------------------------------------------

    def _apply_norm(self, name, x, leaves, training):
        cfg = self.config
        if cfg.norm == "none":
            return x
        g, b = leaves[name + ".gamma"], leaves[name + ".beta"]
        if cfg.norm == "group":
            return ad.group_norm(x, g, b, min(cfg.groups, x.shape[-1]))
        return ad.batch_norm(
            x, g, b, self.buffers[name + ".running_mean"], self.buffers[name + ".running_var"], training,
            momentum=self.bn_momentum,
        )

    def graph(self, x_nhwc: np.ndarray, training: bool = False, requires_grad: bool = False):
        """Build the forward graph; returns ``(logits, leaves)``."""
        cfg = self.config
        if x_nhwc.ndim != 4 or x_nhwc.shape[-1] != cfg.in_channels:
            raise ValueError(f"expected (B, H, W, {cfg.in_channels}) input, got {x_nhwc.shape}")
        leaves = {k: Tensor(v, requires_grad=requires_grad) for k, v in self.params.items()}
        x = np.asarray(x_nhwc, dtype=self.dtype)
        if cfg.input_filter == "local_mean":
            x = local_mean_filter(x)
        x = Tensor(x)
        pad = cfg.stem_kernel // 2
        h = ad.conv2d(x, leaves["stem.weight"], leaves["stem.bias"], stride=2, padding=pad)
        h = ad.relu(self._apply_norm("stem.norm", h, leaves, training))
        for prefix, _, cout, stride in _block_layout(cfg):
            y = ad.conv2d(h, leaves[prefix + ".conv1.weight"], leaves[prefix + ".conv1.bias"], stride=stride, padding=1)
            y = ad.relu(self._apply_norm(prefix + ".norm1", y, leaves, training))
            y = ad.conv2d(y, leaves[prefix + ".conv2.weight"], leaves[prefix + ".conv2.bias"], stride=1, padding=1)
            y = self._apply_norm(prefix + ".norm2", y, leaves, training)
            h = ad.relu(ad.add(y, ad.shortcut(h, stride, cout)))
        pooled = ad.global_avg_pool(h)
        return ad.linear(pooled, leaves["head.weight"], leaves["head.bias"]), leaves

    def recalibrate(self, batches) -> None:
        """Replace the running normalisation statistics by their average over ``batches``.

        Training updates the buffers with an exponential average that lags
        the weights; averaging fresh batch statistics under the final weights
        gives inference the statistics it will actually meet.
        """
        if self.config.norm != "batch":
            return
        saved = {k: v.copy() for k, v in self.buffers.items()}
        seen = 0
        try:
            for xb in batches:
                if len(xb) < 2:
                    continue
                self.bn_momentum = 1.0 / (seen + 1)
                self.graph(xb, training=True)
                seen += 1
        finally:
            self.bn_momentum = 0.1
        if seen == 0:
            self.buffers.update(saved)

    def logits_nhwc(self, x_nhwc: np.ndarray, training: bool = False) -> np.ndarray:
        return self.graph(x_nhwc, training)[0].data

    def predict_nhwc(self, x_nhwc: np.ndarray, chunk: int = 64) -> np.ndarray:
        out = [self.logits_nhwc(x_nhwc[s : s + chunk]).argmax(axis=1) for s in range(0, len(x_nhwc), chunk)]
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def forward(model: Model, batch: np.ndarray, training: bool = False) -> np.ndarray:
    """Class logits for a ``(B, 6, H, W)`` batch."""
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] != model.config.in_channels:
        raise ValueError(f"expected (B, {model.config.in_channels}, H, W) input, got {batch.shape}")
    return model.logits_nhwc(batch.transpose(0, 2, 3, 1), training)


def loss(logits: np.ndarray, labels) -> float:
    """Mean softmax cross-entropy."""
    return float(ad.cross_entropy(Tensor(np.asarray(logits, dtype=np.float64)), labels).data)


def gradients(model: Model, batch_nhwc: np.ndarray, labels, training: bool = True) -> tuple[float, dict]:
    """Loss and exact gradient for every parameter."""
    logits, leaves = model.graph(batch_nhwc, training=training, requires_grad=True)
    value = ad.cross_entropy(logits, labels)
    value.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    return float(value.data), grads


@dataclass
class SGD:
    """Momentum SGD: ``v <- momentum * v - lr * g``; ``w <- w + v``."""

    learning_rate: float
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        for k in sorted(params):
            g = grads[k]
            v = self.velocity.get(k)
            v = -self.learning_rate * g if v is None else self.momentum * v - self.learning_rate * g
            self.velocity[k] = v.astype(params[k].dtype, copy=False)
            params[k] += self.velocity[k]


def backward_and_step(model: Model, batch_nhwc: np.ndarray, labels, cfg: TrainConfig, optimizer: SGD | None = None) -> tuple[float, np.ndarray]:
    """One SGD step on ``batch``; returns the pre-step loss and logits.

    Raises ``FloatingPointError`` (leaving parameters untouched) when the
    loss is not finite.
    """
    optimizer = optimizer or SGD(cfg.learning_rate, cfg.momentum)
    saved = {k: v.copy() for k, v in model.buffers.items()}
    logits, leaves = model.graph(batch_nhwc, training=True, requires_grad=True)
    value = ad.cross_entropy(logits, labels)
    if not np.isfinite(value.data):
        model.buffers.update(saved)
        raise FloatingPointError(
            f"non-finite loss {float(value.data)} (lr={cfg.learning_rate}, batch={len(labels)}); step aborted"
        )
    value.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
    optimizer.step(model.params, grads)
    return float(value.data), logits.data


# ---------------------------------------------------------------------------
# transfer from a 3-channel stem


def adapt_first_layer(pretrained: np.ndarray, target_channels: int = 6) -> np.ndarray:
    """Duplicate a ``(C0, 3, k, k)`` kernel across ``target_channels`` input channels.

    Copies are scaled so that feeding the same image into every 3-channel
    slot reproduces the original activation.
    """
    w = np.asarray(pretrained)
    if w.ndim != 4 or w.shape[1] != 3:
        raise ValueError(f"pretrained stem must have 3 input channels, got shape {w.shape}")
    if target_channels % 3:
        raise ValueError("target channel count must be a multiple of 3")
    copies = target_channels // 3
    return np.concatenate([w / copies] * copies, axis=1)


def load_pretrained_stem(model: Model, weight: np.ndarray, bias: np.ndarray | None = None) -> None:
    """Install an adapted 3-channel stem into ``model``."""
    adapted = adapt_first_layer(weight, model.config.in_channels)
    if adapted.shape != model.params["stem.weight"].shape:
        raise ValueError(f"stem shape {adapted.shape} does not match model {model.params['stem.weight'].shape}")
    model.params["stem.weight"] = adapted.astype(model.dtype)
    if bias is not None:
        model.params["stem.bias"] = np.asarray(bias, dtype=model.dtype).reshape(-1)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC | u32 version | u64 header length | JSON header | raw blobs
# The header lists every tensor's name, kind, dtype, shape, offset and size
# relative to the start of the blob section. Blobs are little-endian.

MAGIC = b"LODCKPT\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(model: Model, path: str | os.PathLike, extra: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for kind, store in (("param", model.params), ("buffer", model.buffers)):
        for name in sorted(store):
            arr = np.ascontiguousarray(store[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes()
            entries.append({
                "name": name, "kind": kind, "dtype": arr.dtype.str, "shape": list(arr.shape),
                "offset": offset, "nbytes": len(raw),
            })
            blobs.append(raw)
            offset += len(raw)
    header = {
        "format": "lodcheck-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "tensors": entries,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint_header(buf: bytes) -> tuple[dict, int]:
    if len(buf) < len(MAGIC) + 12 or buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a lodcheck checkpoint (bad magic or truncated)")
    version, hlen = struct.unpack_from("<IQ", buf, len(MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + 12
    if len(buf) < start + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(buf[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    return header, start + hlen


def load_params(path: str | os.PathLike, task: str | None = None) -> tuple[Model, dict]:
    """Load a checkpoint; ``task`` (when given) must match the stored head."""
    with open(path, "rb") as fh:
        buf = fh.read()
    header, base = read_checkpoint_header(buf)
    config = ModelConfig.from_dict(header["config"])
    if task is not None and task != config.task:
        raise CheckpointError(f"checkpoint holds a {config.task} head, not {task}")
    model = Model.__new__(Model)
    model.config = config
    model.params, model.buffers = {}, {}
    model.bn_momentum = 0.1
    expected = Model(replace(config), seed=0)
    for e in header["tensors"]:
        lo = base + e["offset"]
        raw = buf[lo : lo + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"truncated checkpoint: tensor {e['name']} is incomplete")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arr = arr.astype(arr.dtype.newbyteorder("="))
        store = model.params if e["kind"] == "param" else model.buffers
        store[e["name"]] = arr
    end = base + sum(e["nbytes"] for e in header["tensors"])
    if len(buf) != end:
        raise CheckpointError(f"checkpoint size mismatch: {len(buf)} bytes, expected {end}")
    for store, ref in ((model.params, expected.params), (model.buffers, expected.buffers)):
        if set(store) != set(ref):
            raise CheckpointError("checkpoint tensors do not match the architecture")
        for k, v in ref.items():
            if store[k].shape != v.shape:
                raise CheckpointError(f"{k}: shape {store[k].shape} does not match architecture {v.shape}")
    return model, header.get("extra", {})
