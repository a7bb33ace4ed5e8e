"""SmallCNN classifier, parameter groups, source training and the model file format."""

from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable

import numpy as np

from . import ops
from .optim import SGD
from .seeding import rng
from .tensor import DimensionError, Tape, Tensor, active_counters, backward, no_grad

if TYPE_CHECKING:
    from .data import LabeledDataset

log = logging.getLogger(__name__)

GROUPS = ("norm_affine", "norm_stats", "feature_weights", "classifier_head")
FORWARD_MODES = {
    "eval": "use-running-stats",
    "adapt": "use-batch-stats",
    "batch": "use-batch-stats",   # batch statistics, running buffers untouched
    "instance": "instance-aware",
}
BN_MOMENTUM = 0.1

MAGIC = b"BOTA"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    pass


@dataclass
class ForwardOutput:
    logits: Tensor
    embeddings: Tensor


def _smallcnn_layers(class_count: int) -> list[dict]:
    layers: list[dict] = []
    c_in = 3
    for i, c_out in enumerate((32, 64, 128), start=1):
        layers += [
            {"kind": "conv2d", "name": f"conv{i}", "in": c_in, "out": c_out, "kernel": 3, "stride": 1, "padding": 1},
            {"kind": "batch_norm", "name": f"bn{i}", "channels": c_out},
            {"kind": "relu"},
            {"kind": "max_pool", "size": 2},
        ]
        c_in = c_out
    layers += [
        {"kind": "global_avg_pool"},
        {"kind": "linear", "name": "head", "in": c_in, "out": class_count},
    ]
    return layers


ARCHS: dict[str, Callable[[int], list[dict]]] = {"smallcnn-32": _smallcnn_layers}
INPUT_SHAPES = {"smallcnn-32": (3, 32, 32)}


@dataclass
class Model:
    arch_id: str
    class_count: int
    layers: list[dict]
    params: dict[str, Tensor]
    groups: dict[str, list[str]] = field(default_factory=dict)

    # --- structure -----------------------------------------------------------

    def group_params(self, *names: str) -> list[Tensor]:
        return [self.params[p] for g in names for p in self.groups[g]]

    def param_group(self, name: str) -> str:
        for g, members in self.groups.items():
            if name in members:
                return g
        raise KeyError(name)

    def set_trainable(self, *groups: str) -> None:
        """Mark exactly the parameters of ``groups`` as requiring gradients."""
        allowed = {p for g in groups for p in self.groups[g]}
        if "norm_stats" in groups:
            raise ValueError("norm_stats are buffers, not trainable parameters")
        for name, t in self.params.items():
            t.requires_grad = name in allowed
            t.grad = None

    @property
    def embedding_dim(self) -> int:
        return self.params["head.weight"].shape[0]

    def copy(self) -> "Model":
        params = {k: Tensor(v.data) for k, v in self.params.items()}
        return Model(self.arch_id, self.class_count, copy.deepcopy(self.layers), params, copy.deepcopy(self.groups))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.params[k].data[...] = v

    def digest(self) -> str:
        return hashlib.sha256(serialize(self)).hexdigest()

    # --- forward ---------------------------------------------------------------

    def forward(self, batch, mode: str = "eval", *, momentum: float = BN_MOMENTUM, alpha: float = 4.0) -> ForwardOutput:
        """Run the network on ``batch`` (B x 3 x 32 x 32).

        ``eval`` is frozen inference. ``adapt`` normalizes with the batch
        moments and folds them into the running buffers with ``momentum``.
        ``batch`` uses batch moments without touching the buffers and
        ``instance`` applies instance-aware normalization (inference only).
        """
        if mode not in FORWARD_MODES:
            raise ValueError(f"unknown forward mode {mode!r}")
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        expected = INPUT_SHAPES[self.arch_id]
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"forward: batch must be B x {' x '.join(map(str, expected))}, got {x.shape}")
        counters = active_counters()
        if counters is not None:
            counters.model_forwards += 1
            counters.batch_sizes.append(x.shape[0])
        bn_mode = FORWARD_MODES[mode]
        bn_momentum = momentum if mode == "adapt" else 0.0
        p = self.params
        h = x
        emb = None
        for layer in self.layers:
            kind = layer["kind"]
            if kind == "conv2d":
                h = ops.conv2d(h, p[f"{layer['name']}.weight"], stride=layer["stride"], padding=layer["padding"])
            elif kind == "batch_norm":
                n = layer["name"]
                h = ops.batch_norm(
                    h, p[f"{n}.weight"], p[f"{n}.bias"], p[f"{n}.running_mean"], p[f"{n}.running_var"],
                    mode=bn_mode, momentum=bn_momentum, alpha=alpha,
                )
            elif kind == "relu":
                h = ops.relu(h)
            elif kind == "max_pool":
                h = ops.max_pool(h, layer["size"])
            elif kind == "global_avg_pool":
                h = ops.global_avg_pool(h)
            elif kind == "linear":
                emb = h
                h = ops.linear_bias_add(ops.matmul(h, p[f"{layer['name']}.weight"]), p[f"{layer['name']}.bias"])
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return ForwardOutput(logits=h, embeddings=emb)

    def predict_logits(self, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
        with no_grad():
            return np.concatenate(
                [self.forward(images[i:i + batch_size], "eval").logits.data for i in range(0, len(images), batch_size)]
            ) if len(images) else np.zeros((0, self.class_count), dtype=np.float32)


def build_model(arch_id: str, class_count: int, seed: int) -> Model:
    if arch_id not in ARCHS:
        raise ValueError(f"unknown arch_id {arch_id!r}; known: {sorted(ARCHS)}")
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    layers = ARCHS[arch_id](class_count)
    params: dict[str, Tensor] = {}
    groups: dict[str, list[str]] = {g: [] for g in GROUPS}
    for layer in layers:
        if layer["kind"] == "conv2d":
            fan_in = layer["in"] * layer["kernel"] ** 2
            bound = math.sqrt(6.0 / fan_in)
            shape = (layer["out"], layer["in"], layer["kernel"], layer["kernel"])
            name = f"{layer['name']}.weight"
            params[name] = Tensor(rng(seed, "init", name).uniform(-bound, bound, shape))
            groups["feature_weights"].append(name)
        elif layer["kind"] == "batch_norm":
            n, c = layer["name"], layer["channels"]
            params[f"{n}.weight"] = Tensor(np.ones(c))
            params[f"{n}.bias"] = Tensor(np.zeros(c))
            params[f"{n}.running_mean"] = Tensor(np.zeros(c))
            params[f"{n}.running_var"] = Tensor(np.ones(c))
            groups["norm_affine"] += [f"{n}.weight", f"{n}.bias"]
            groups["norm_stats"] += [f"{n}.running_mean", f"{n}.running_var"]
        elif layer["kind"] == "linear":
            bound = 1.0 / math.sqrt(layer["in"])
            n = layer["name"]
            params[f"{n}.weight"] = Tensor(rng(seed, "init", f"{n}.weight").uniform(-bound, bound, (layer["in"], layer["out"])))
            params[f"{n}.bias"] = Tensor(rng(seed, "init", f"{n}.bias").uniform(-bound, bound, layer["out"]))
            groups["classifier_head"] += [f"{n}.weight", f"{n}.bias"]
    return Model(arch_id, class_count, layers, params, groups)


# --- source training ----------------------------------------------------------------

def pretrain_source(
    model: Model,
    train: "LabeledDataset",
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
    momentum: float = 0.9,
    history: list[float] | None = None,
) -> Model:
    """Cross-entropy SGD on clean data. Returns a trained copy; epoch losses go to ``history``."""
    model = model.copy()
    if epochs <= 0:
        return model
    model.set_trainable("norm_affine", "feature_weights", "classifier_head")
    trainable = [t for t in model.params.values() if t.requires_grad]
    opt = SGD(trainable, lr=lr, momentum=momentum)
    n = len(train)
    for epoch in range(epochs):
        order = rng(seed, "pretrain", epoch).permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            with Tape() as tape:
                out = model.forward(train.images[idx], "adapt")
                loss = ops.cross_entropy(out.logits, train.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}, batch offset {start}: {value}")
            backward(loss, tape)
            opt.step()
            total += value * len(idx)
        mean_loss = total / n
        log.info("pretrain epoch %d loss %.4f", epoch, mean_loss)
        if history is not None:
            history.append(mean_loss)
    model.set_trainable()
    return model


# --- serialization ---------------------------------------------------------------------

def serialize(model: Model) -> bytes:
    names = list(model.params)
    header = {
        "arch_id": model.arch_id,
        "class_count": model.class_count,
        "layers": model.layers,
        "groups": model.groups,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for n in names:
        buf.write(model.params[n].data.astype("<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(blob: bytes) -> Model:
    if len(blob) < 14 or blob[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version} (expected {FORMAT_VERSION})")
    if zlib.crc32(body) != crc:
        raise ModelFormatError("checksum mismatch: model file is corrupt or truncated")
    try:
        header = json.loads(body[10:10 + hlen])
    except ValueError as exc:
        raise ModelFormatError(f"unreadable header: {exc}") from None
    offset = 10 + hlen
    params: dict[str, Tensor] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        chunk = body[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise ModelFormatError("truncated payload")
        params[entry["name"]] = Tensor(np.frombuffer(chunk, dtype="<f4").reshape(shape))
        offset += 4 * count
    if offset != len(body):
        raise ModelFormatError("trailing bytes after payload")
    return Model(header["arch_id"], header["class_count"], header["layers"], params, header["groups"])


def save_model(model: Model, path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(serialize(model))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return path


def load_model(path) -> Model:
    return deserialize(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parameter_diff(a: Model, b: Model) -> set[str]:
    """Names of tensors that are not bit-identical between ``a`` and ``b``."""
    return {k for k in a.params if not np.array_equal(a.params[k].data, b.params[k].data)}


def count_scalars(tensors: Iterable[Tensor]) -> int:
    return sum(t.size for t in tensors)
