"""Transposed-convolution reconstruction network, training loop and model files.

The network maps the ``(m, n)`` capacitance matrix, reshaped to a
``(m*n, 1, 1)`` feature map, through five up-sampling blocks to a
``(1, 100, 200)`` permittivity image.  Each block is

    transposed conv -> [batch norm] -> + residual -> ReLU (sigmoid in the last block)

where the residual is a 1x1 convolution of the block input, nearest-neighbour
up-sampled to the block's output size.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .forward import measurement_mask
from .metrics import iou, pearson_cc

log = logging.getLogger(__name__)

MODEL_MAGIC = b"ECTM"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]
    output_padding: tuple[int, int]
    batch_norm: bool = True


def default_blocks() -> tuple[BlockSpec, ...]:
    return (
        BlockSpec(64, (7, 13), (1, 1), (0, 0), (0, 0)),
        BlockSpec(32, (3, 3), (2, 2), (1, 1), (0, 0)),
        BlockSpec(16, (3, 3), (2, 2), (1, 1), (0, 1)),
        BlockSpec(8, (3, 3), (2, 2), (1, 1), (1, 1)),
        BlockSpec(1, (3, 3), (2, 2), (1, 1), (1, 1), batch_norm=False),
    )


@dataclass(frozen=True)
class NetworkConfig:
    m: int = 5
    n: int = 20
    out_size: tuple[int, int] = (100, 200)
    blocks: tuple[BlockSpec, ...] = field(default_factory=default_blocks)

    def __post_init__(self):
        sizes = self.sizes()
        if sizes[-1] != tuple(self.out_size):
            raise ValueError(f"block schedule ends at {sizes[-1]}, expected {self.out_size}")
        if self.blocks[-1].out_channels != 1:
            raise ValueError("last block must produce a single channel")

    @property
    def in_channels(self) -> int:
        return self.m * self.n

    def sizes(self) -> list[tuple[int, int]]:
        """Spatial size after each block, starting from the 1x1 input."""
        h, w = 1, 1
        out = [(h, w)]
        for b in self.blocks:
            h = ad.conv_transpose_output_size(h, b.kernel[0], b.stride[0], b.padding[0], b.output_padding[0])
            w = ad.conv_transpose_output_size(w, b.kernel[1], b.stride[1], b.padding[1], b.output_padding[1])
            out.append((h, w))
        return out

    def to_dict(self) -> dict:
        return {"m": self.m, "n": self.n, "out_size": list(self.out_size),
                "blocks": [{k: list(v) if isinstance(v, tuple) else v
                            for k, v in asdict(b).items()} for b in self.blocks]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        blocks = tuple(BlockSpec(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in b.items()}) for b in d["blocks"])
        return cls(m=d["m"], n=d["n"], out_size=tuple(d["out_size"]), blocks=blocks)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    noise_std: float = 0.03
    seed: int = 0
    terms: tuple[str, ...] = losses.TERMS
    smooth_l1_beta: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.75
    dice_smooth: float = 1.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.noise_std < 0:
            raise ValueError("epochs, batch size and learning rate must be positive")
        self.terms = tuple(self.terms)


class ReconstructionNet:
    """Parameters and forward pass of the up-sampling network."""

    def __init__(self, config: NetworkConfig | None = None, seed: int = 0, dtype="float32"):
        self.config = config or NetworkConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, ad.Tensor] = {}
        self.bn: dict[int, ad.BatchNormState] = {}
        cin = self.config.in_channels
        for k, b in enumerate(self.config.blocks):
            kh, kw = b.kernel
            # effective fan-in of one output pixel of a strided transposed conv
            fan_in = cin * kh * kw / (b.stride[0] * b.stride[1])
            self._param(f"block{k}.convT.weight",
                        rng.normal(0.0, np.sqrt(2.0 / fan_in), (cin, b.out_channels, kh, kw)))
            self._param(f"block{k}.convT.bias", np.zeros(b.out_channels))
            if b.batch_norm:
                self._param(f"block{k}.bn.gamma", np.ones(b.out_channels))
                self._param(f"block{k}.bn.beta", np.zeros(b.out_channels))
                self.bn[k] = ad.BatchNormState.fresh(b.out_channels, self.dtype)
            self._param(f"block{k}.res.weight",
                        rng.normal(0.0, np.sqrt(1.0 / cin), (b.out_channels, cin)))
            self._param(f"block{k}.res.bias", np.zeros(b.out_channels))
            cin = b.out_channels
        self._param("loss.raw_weights", np.full(len(losses.TERMS), losses.SOFTPLUS_ONE))

    def _param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = ad.Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)

    @property
    def loss_raw(self) -> ad.Tensor:
        return self.params["loss.raw_weights"]

    def network_params(self) -> dict[str, ad.Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("loss.")}

    def forward(self, x: ad.Tensor, train: bool = False) -> ad.Tensor:
        if x.shape[1:] != (self.config.in_channels, 1, 1):
            raise ad.ShapeError(f"input must be (batch, {self.config.in_channels}, 1, 1), got {x.shape}")
        p = self.params
        last = len(self.config.blocks) - 1
        for k, b in enumerate(self.config.blocks):
            h = ad.conv_transpose2d(x, p[f"block{k}.convT.weight"], p[f"block{k}.convT.bias"],
                                    b.stride, b.padding, b.output_padding)
            if b.batch_norm:
                h = ad.batch_norm2d(h, p[f"block{k}.bn.gamma"], p[f"block{k}.bn.beta"],
                                    self.bn[k], train)
            r = ad.conv2d_1x1(x, p[f"block{k}.res.weight"], p[f"block{k}.res.bias"])
            r = ad.nearest_upsample(r, h.shape[2], h.shape[3])
            h = ad.add(h, r)
            x = ad.sigmoid(h) if k == last else ad.relu(h)
        return x

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every persistent array: parameters and batch-norm running statistics."""
        out = {k: v.data for k, v in self.params.items()}
        for k, st in self.bn.items():
            out[f"block{k}.bn.running_mean"] = st.running_mean
            out[f"block{k}.bn.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = {k: v.shape for k, v in self.state_arrays().items()}
        if set(arrays) != set(expected):
            missing = set(expected) ^ set(arrays)
            raise ModelFormatError(f"parameter names do not match the architecture: {sorted(missing)}")
        for name, shape in expected.items():
            if tuple(arrays[name].shape) != tuple(shape):
                raise ModelFormatError(f"{name}: shape {arrays[name].shape} != {shape}")
        for k, v in arrays.items():
            v = np.array(v, dtype=self.dtype)
            if k.endswith("running_mean"):
                self.bn[int(k[5:k.index(".")])].running_mean = v
            elif k.endswith("running_var"):
                self.bn[int(k[5:k.index(".")])].running_var = v
            else:
                self.params[k].data = v


@dataclass
class TrainedModel:
    net: ReconstructionNet
    metadata: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @property
    def config(self) -> NetworkConfig:
        return self.net.config

    @property
    def loss_weights(self) -> np.ndarray:
        return losses.loss_weights(self.net.loss_raw)


def reshape_input(c: np.ndarray, config: NetworkConfig | None = None, dtype=np.float32) -> np.ndarray:
    """``(m, n)`` or ``(B, m, n)`` capacitances to a ``(B, m*n, 1, 1)`` array.

    Entry ``(d, i)`` lands on channel ``d * n + i``.
    """
    c = np.asarray(c)
    if c.ndim == 2:
        c = c[None]
    if config is not None and c.shape[1:] != (config.m, config.n):
        raise ad.ShapeError(f"capacitance matrix must be ({config.m}, {config.n}), got {c.shape[1:]}")
    return c.reshape(c.shape[0], -1, 1, 1).astype(dtype)


def predict(model, c: np.ndarray) -> np.ndarray:
    """Eval-mode reconstruction; ``(100, 200)`` for one matrix, ``(B, 100, 200)`` for a stack."""
    net = model.net if isinstance(model, TrainedModel) else model
    single = np.asarray(c).ndim == 2
    x = ad.Tensor(reshape_input(c, net.config, net.dtype))
    out = net.forward(x, train=False).data[:, 0].astype(np.float64)
    return out[0] if single else out


def _compound(net: ReconstructionNet, pred: ad.Tensor, target: np.ndarray, cfg: TrainConfig) -> ad.Tensor:
    return losses.compound(pred, target, net.loss_raw, cfg.terms, beta=cfg.smooth_l1_beta,
                           gamma=cfg.focal_gamma, alpha=cfg.focal_alpha, smooth=cfg.dice_smooth)


def validation_scores(net: ReconstructionNet, dataset, batch: int = 64) -> tuple[float, float]:
    """Mean CC and IoU of eval-mode predictions on clean capacitances."""
    ccs, ious = [], []
    for start in range(0, len(dataset), batch):
        preds = predict(net, dataset.capacitances[start:start + batch])
        for p, y in zip(preds, dataset.images[start:start + batch]):
            ccs.append(pearson_cc(p, y))
            ious.append(iou(p, y))
    return float(np.mean(ccs)), float(np.mean(ious))


def train(train_set, val_set, net_config: NetworkConfig | None = None,
          train_config: TrainConfig | None = None, progress=None) -> TrainedModel:
    """Mini-batch Adam training with fresh input noise every epoch.

    The parameters with the best validation CC are kept.  ``progress`` is an
    optional callable receiving each epoch's history row.
    """
    cfg = train_config or TrainConfig()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    net_config = net_config or NetworkConfig(m=train_set.capacitances.shape[1],
                                             n=train_set.capacitances.shape[2])
    rng = np.random.default_rng(cfg.seed)
    net = ReconstructionNet(net_config, seed=int(rng.integers(2 ** 31)), dtype=cfg.dtype)
    opt = ad.Adam(net.params, lr=cfg.lr)
    mask = measurement_mask(net_config.m, net_config.n)
    caps = np.asarray(train_set.capacitances, dtype=net.dtype)
    imgs = np.asarray(train_set.images, dtype=net.dtype)
    history = []
    best_cc, best_state = -np.inf, None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_set))
        total, batches = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            c = caps[idx].copy()
            if cfg.noise_std > 0:
                c[:, mask] += rng.normal(0.0, cfg.noise_std, (len(idx), int(mask.sum()))).astype(net.dtype)
            x = ad.Tensor(reshape_input(c, net_config, net.dtype))
            y = imgs[idx][:, None]
            ad.zero_grad(net.params.values())
            pred = net.forward(x, train=True)
            loss = _compound(net, pred, y, cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b}; "
                    f"loss weights {losses.loss_weights(net.loss_raw).tolist()}")
            ad.backward(loss)
            opt.step()
            total += value
            batches += 1
        val_cc, val_iou = validation_scores(net, val_set)
        row = {"epoch": epoch + 1, "train_loss": total / batches, "val_cc": val_cc,
               "val_iou": val_iou, "lambda": losses.loss_weights(net.loss_raw).tolist()}
        history.append(row)
        log.info("epoch %d loss %.4f val cc %.4f iou %.4f", epoch + 1, row["train_loss"], val_cc, val_iou)
        if progress is not None:
            progress(row)
        if val_cc > best_cc:
            best_cc = val_cc
            best_state = {k: v.copy() for k, v in net.state_arrays().items()}
    net.load_state_arrays(best_state)
    metadata = {"seed": cfg.seed, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
                "lr": cfg.lr, "noise_std": cfg.noise_std, "terms": list(cfg.terms),
                "best_val_cc": best_cc,
                "best_epoch": 1 + int(np.argmax([r["val_cc"] for r in history]))}
    return TrainedModel(net, metadata, history)


def write_history(history, path) -> None:
    """One JSON object per line, one line per epoch."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def save_model(model: TrainedModel, path) -> None:
    net = model.net
    header = json.dumps({"config": net.config.to_dict(), "metadata": model.metadata},
                        sort_keys=True).encode("utf-8")
    arrays = net.state_arrays()
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<I", len(header)) + header)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype="<f4")
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)) + key)
            fh.write(struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_model(path, expected_config: NetworkConfig | None = None) -> TrainedModel:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise ModelFormatError(f"truncated model file at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MODEL_MAGIC:
        raise ModelFormatError("bad magic: not a model file")
    (version,) = struct.unpack("<I", take(4))
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(hlen).decode("utf-8"))
        config = NetworkConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed config block: {exc}") from exc
    if expected_config is not None and config != expected_config:
        raise ModelFormatError("model architecture does not match the expected configuration")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack("<I", take(4))
        name = take(klen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
    if pos != len(raw):
        raise ModelFormatError(f"{len(raw) - pos} trailing bytes after last record")
    net = ReconstructionNet(config, dtype="float32")
    net.load_state_arrays(arrays)
    return TrainedModel(net, header.get("metadata", {}))
