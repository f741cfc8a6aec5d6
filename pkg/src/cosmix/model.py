"""The acoustic encoder, classifier head, and contrastive projector.

The reference "tinyconv" encoder is four 3x3 stride-2 conv blocks
(channels 32-64-64-128) with relu and a global average pool, sized to
roughly 0.13M inference parameters. The projector maps the embedding
into the 128-dimensional space where the contrastive loss lives; by
default it is dense -> relu -> dense so its output is not relu-clipped,
with a single dense+relu variant behind ``proj_two_layer=False``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ShapeError

N_CLASSES = 10
PROJ_DIM = 128
FEAT_SHAPE = (98, 64)

CHECKPOINT_MAGIC = b"CMX1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple = (32, 64, 64, 128)
    kernel_size: int = 3
    stride: int = 2
    proj_hidden: int = 128
    proj_two_layer: bool = True
    n_classes: int = N_CLASSES
    proj_dim: int = PROJ_DIM
    init_seed: int = 0

    def __post_init__(self):
        if self.proj_dim != PROJ_DIM:
            raise ValueError(f"proj_dim must be {PROJ_DIM}")
        if self.n_classes != N_CLASSES:
            raise ValueError(f"n_classes must be {N_CLASSES}")
        if len(self.channels) < 1:
            raise ValueError("need at least one conv block")
        # the reference stack is 3x3 stride-2 blocks; other geometries are
        # not wired through the forward pass
        if self.kernel_size != 3 or self.stride != 2:
            raise ValueError("reference encoder uses 3x3 kernels with stride 2")

    @property
    def embed_dim(self):
        return self.channels[-1]

    def to_text(self):
        """Canonical key = value text, one field per line."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        casts = {"channels": lambda s: tuple(int(x) for x in s.split(",")),
                 "proj_two_layer": lambda s: s == "True"}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key in casts:
                kwargs[key] = casts[key](value)
            else:
                kwargs[key] = int(value)
        return cls(**kwargs)


def init_params(config, dtype=np.float32):
    """Fan-in-scaled uniform weights, zero biases; deterministic per seed."""
    rng = np.random.default_rng(config.init_seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    params = ad.ParameterSet()
    c_in = 1
    k = config.kernel_size
    for i, c_out in enumerate(config.channels):
        params.add(f"enc{i}.w", uniform((c_out, c_in, k, k), c_in * k * k), dtype=dtype)
        params.add(f"enc{i}.b", np.zeros(c_out), dtype=dtype)
        c_in = c_out
    d = config.embed_dim
    params.add("cls.w", uniform((d, config.n_classes), d), dtype=dtype)
    params.add("cls.b", np.zeros(config.n_classes), dtype=dtype)
    if config.proj_two_layer:
        params.add("proj.w1", uniform((d, config.proj_hidden), d), dtype=dtype)
        params.add("proj.b1", np.zeros(config.proj_hidden), dtype=dtype)
        params.add("proj.w2", uniform((config.proj_hidden, config.proj_dim),
                                      config.proj_hidden), dtype=dtype)
        params.add("proj.b2", np.zeros(config.proj_dim), dtype=dtype)
    else:
        params.add("proj.w1", uniform((d, config.proj_dim), d), dtype=dtype)
        params.add("proj.b1", np.zeros(config.proj_dim), dtype=dtype)
    return params


def count_params(params, prefix=None):
    return sum(t.values.size for name, t in params.items()
               if prefix is None or name.startswith(prefix))


def inference_param_count(params):
    """Encoder + classifier sizes; the projector is train-time only."""
    return count_params(params, "enc") + count_params(params, "cls")


def n_blocks(params):
    i = 0
    while f"enc{i}.w" in params:
        i += 1
    return i


def encoder_forward(feats, params, stride=2, padding=1):
    """[B, 98, 64] features -> [B, D] embeddings through the conv stack."""
    feats = ad.as_tensor(feats)
    if feats.values.ndim != 3 or feats.values.shape[1:] != FEAT_SHAPE:
        raise ShapeError(f"encoder expects [B, 98, 64], got {feats.values.shape}")
    b = feats.values.shape[0]
    x = ad.reshape(feats, (b, 1) + FEAT_SHAPE)
    for i in range(n_blocks(params)):
        x = ad.conv2d(x, params[f"enc{i}.w"], stride=stride, padding=padding)
        x = ad.channel_bias_add(x, params[f"enc{i}.b"])
        x = ad.relu(x)
    return ad.global_avg_pool(x)


def classifier_forward(embedding, params):
    """[B, D] -> [B, 10] logits through the dense head."""
    return ad.dense(embedding, params["cls.w"], params["cls.b"])


def projector_forward(embedding, params):
    """[B, D] -> [B, 128] projection for the contrastive loss."""
    h = ad.relu(ad.dense(embedding, params["proj.w1"], params["proj.b1"]))
    if "proj.w2" in params:
        return ad.dense(h, params["proj.w2"], params["proj.b2"])
    return h


# ---------------------------------------------------------------------------
# checkpoint file: CMX1, version, config text, run state, parameter records

@dataclass(frozen=True)
class Checkpoint:
    config: ModelConfig
    parameters: dict  # name -> float32 ndarray (model and optimizer state)
    epoch: int
    rng_state: bytes
    metrics_tail: dict


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n):
        if self.off + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def string(self):
        return self.take(self.u32()).decode("utf-8")


def save_checkpoint(path, ckpt):
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    chunks.append(_pack_str(ckpt.config.to_text()))
    chunks.append(struct.pack("<I", ckpt.epoch))
    chunks.append(struct.pack("<I", len(ckpt.rng_state)))
    chunks.append(ckpt.rng_state)
    chunks.append(_pack_str(json.dumps(ckpt.metrics_tail, sort_keys=True)))
    chunks.append(struct.pack("<I", len(ckpt.parameters)))
    for name, values in ckpt.parameters.items():
        arr = np.asarray(values, dtype="<f4")
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config = ModelConfig.from_text(r.string())
    epoch = r.u32()
    rng_state = r.take(r.u32())
    metrics_tail = json.loads(r.string())
    n_records = r.u32()
    parameters = {}
    for _ in range(n_records):
        name = r.string()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape)
        parameters[name] = values.astype(np.float32)
    if r.off != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.off} trailing bytes")
    return Checkpoint(config=config, parameters=parameters, epoch=epoch,
                      rng_state=rng_state, metrics_tail=metrics_tail)
