"""Residual encoder, deconvolution decoder and classifier head.

The encoder downsamples by 32 (stride-2 stem plus four stride-2 stages), the
decoder upsamples by 8 with three 4x4/stride-2 deconvolutions, so heatmaps
come out at 1/4 of the input resolution.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import diffcore as dc
from .diffcore import BatchNormState, Tensor, tensorio

ARTIFACTS = frozenset({"heatmaps", "embedding", "logits", "activation"})
FREEZE_POLICIES = ("FE", "FTP", "FT")
CHECKPOINT_FORMAT = "rtlmark-checkpoint"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    H: int = 64
    W: int = 64
    stage_widths: tuple = (16, 32, 64, 128)
    blocks_per_stage: tuple = (1, 1, 1, 1)
    m: Optional[int] = None
    C: int = 8
    K: int = 14
    deconv_channels: int = 256
    skip_connections: bool = False
    classifier: bool = True
    attention_source: str = "stage4"
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if self.m is None:
            self.m = self.stage_widths[-1] if self.stage_widths else None

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def validate(self) -> None:
        if self.H % 32 or self.W % 32 or self.H <= 0 or self.W <= 0:
            raise ConfigError(f"input {self.H}x{self.W} must be a positive multiple of 32")
        if len(self.stage_widths) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("exactly four encoder stages are required")
        if min(self.stage_widths) < 1 or min(self.blocks_per_stage) < 1:
            raise ConfigError("stage widths and block counts must be positive")
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ConfigError("stage widths must be non-decreasing")
        if self.m != self.stage_widths[-1]:
            raise ConfigError(f"m={self.m} must equal the last stage width {self.stage_widths[-1]}")
        if self.C < 2 or self.K < 1 or self.deconv_channels < 1:
            raise ConfigError("need C >= 2, K >= 1, deconv_channels >= 1")
        if self.attention_source not in ("stage3", "stage4"):
            raise ConfigError(f"unknown attention_source {self.attention_source!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardArtifacts:
    heatmaps: Optional[Tensor] = None
    embedding: Optional[Tensor] = None
    logits: Optional[Tensor] = None
    activation: Optional[Tensor] = None


@dataclass
class Model:
    config: ModelConfig
    params: dict
    bn: dict
    frozen: set = field(default_factory=set)
    is_teacher: bool = False

    def names(self, prefix: str) -> list:
        return [n for n in self.params if n.startswith(prefix)]

    @property
    def encoder_names(self) -> list:
        return self.names("encoder.")

    @property
    def decoder_names(self) -> list:
        return self.names("decoder.")

    @property
    def classifier_names(self) -> list:
        return self.names("classifier.")

    def trainable(self) -> dict:
        return {n: p for n, p in self.params.items() if n not in self.frozen}

    def set_frozen(self, names: Iterable[str]) -> None:
        self.frozen = set(names)
        for n, p in self.params.items():
            p.requires_grad = n not in self.frozen

    def freeze_all(self) -> None:
        self.set_frozen(self.params)
        self.is_teacher = True

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def state_arrays(self) -> dict:
        """Every parameter and batchnorm buffer as a flat name -> ndarray map."""
        out = {n: p.data for n, p in self.params.items()}
        for n, s in self.bn.items():
            out[f"{n}.running_mean"] = s.mean
            out[f"{n}.running_var"] = s.var
        return out


# ---------------------------------------------------------------- build

def _encoder_layout(cfg: ModelConfig):
    """Yield (block_name, in_width, out_width, stride) for every residual block."""
    cin = cfg.stage_widths[0]
    for s, (width, nblocks) in enumerate(zip(cfg.stage_widths, cfg.blocks_per_stage), start=1):
        for b in range(nblocks):
            yield f"encoder.stage{s}.block{b}", cin, width, 2 if b == 0 else 1
            cin = width


def _decoder_inputs(cfg: ModelConfig) -> list:
    d = cfg.deconv_channels
    ins = [cfg.stage_widths[3], d, d]
    if cfg.skip_connections:
        ins[1] += cfg.stage_widths[2]
        ins[2] += cfg.stage_widths[1]
    return ins


def build(config: ModelConfig) -> Model:
    config.validate()
    dt = config.dtype
    rng = np.random.default_rng(config.seed)
    params: dict = {}
    bn: dict = {}

    def he(name, shape, fan_in):
        limit = np.sqrt(6.0 / fan_in)
        params[name] = Tensor(rng.uniform(-limit, limit, size=shape).astype(dt), requires_grad=True, name=name)

    def norm(prefix, c):
        params[f"{prefix}.gamma"] = Tensor(np.ones(c, dtype=dt), requires_grad=True, name=f"{prefix}.gamma")
        params[f"{prefix}.beta"] = Tensor(np.zeros(c, dtype=dt), requires_grad=True, name=f"{prefix}.beta")
        bn[prefix] = BatchNormState.fresh(c, dt)

    w0 = config.stage_widths[0]
    he("encoder.stem.conv", (3, 3, 3, w0), 27)
    norm("encoder.stem.bn", w0)
    for name, cin, cout, _ in _encoder_layout(config):
        he(f"{name}.conv1", (3, 3, cin, cout), 9 * cin)
        norm(f"{name}.bn1", cout)
        he(f"{name}.conv2", (3, 3, cout, cout), 9 * cout)
        norm(f"{name}.bn2", cout)

    d = config.deconv_channels
    for i, cin in enumerate(_decoder_inputs(config), start=1):
        # each output pixel of a 4x4/stride-2 deconv sees 2x2 taps per input channel
        he(f"decoder.deconv{i}.kernel", (4, 4, d, cin), 4 * cin)
        norm(f"decoder.deconv{i}.bn", d)
    he("decoder.head.kernel", (1, 1, d, config.K), d)
    params["decoder.head.bias"] = Tensor(np.zeros(config.K, dtype=dt), requires_grad=True,
                                         name="decoder.head.bias")

    if config.classifier:
        he("classifier.weight", (config.m, config.C), config.m)
        params["classifier.bias"] = Tensor(np.zeros(config.C, dtype=dt), requires_grad=True,
                                           name="classifier.bias")
    return Model(config=config, params=params, bn=bn)


# ---------------------------------------------------------------- forward

class _Runner:
    def __init__(self, model: Model, train: bool):
        self.p = model.params
        self.bn_state = model.bn
        self.frozen = model.frozen
        self.train = train

    def bn(self, x, prefix):
        update = self.train and f"{prefix}.gamma" not in self.frozen
        return dc.batchnorm(x, self.p[f"{prefix}.gamma"], self.p[f"{prefix}.beta"],
                            self.bn_state[prefix], train=self.train, update_stats=update)

    def block(self, x, name, cin, cout, stride):
        out = dc.relu(self.bn(dc.conv2d(x, self.p[f"{name}.conv1"], stride, 1), f"{name}.bn1"))
        out = self.bn(dc.conv2d(out, self.p[f"{name}.conv2"], 1, 1), f"{name}.bn2")
        shortcut = x
        if stride != 1:
            shortcut = shortcut[:, ::stride, ::stride, :]
        if cout != cin:
            n, h, w, _ = shortcut.shape
            pad = Tensor(np.zeros((n, h, w, cout - cin), dtype=x.dtype))
            shortcut = dc.concat([shortcut, pad], axis=-1)
        return dc.relu(dc.add(out, shortcut))


def _check_images(model: Model, images) -> Tensor:
    cfg = model.config
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=cfg.dtype))
    if x.ndim != 4 or x.shape[1:] != (cfg.H, cfg.W, 3):
        raise dc.DimensionError(f"expected images (N, {cfg.H}, {cfg.W}, 3), got {x.shape}")
    if x.dtype != cfg.dtype:
        x = Tensor(x.data.astype(cfg.dtype))
    return x


def forward(model: Model, images, need: Iterable[str] = ARTIFACTS, train: bool = False) -> ForwardArtifacts:
    """Run the shared encoder once and compute the requested artifacts.

    ``train`` selects batch statistics in batchnorm (and running-stat updates
    for unfrozen layers). A teacher forward never records on the tape.
    """
    need = set(need)
    if need - ARTIFACTS:
        raise ValueError(f"unknown artifacts {sorted(need - ARTIFACTS)}")
    cfg = model.config
    if "logits" in need and not cfg.classifier:
        raise ConfigError("model was built without a classifier branch")
    if model.is_teacher:
        with dc.no_grad():
            return _forward(model, images, need, train=False)
    return _forward(model, images, need, train)


def _forward(model, images, need, train):
    cfg = model.config
    r = _Runner(model, train)
    x = _check_images(model, images)
    p = model.params
    h = dc.relu(r.bn(dc.conv2d(x, p["encoder.stem.conv"], 2, 1), "encoder.stem.bn"))
    stage_out = {}
    for name, cin, cout, stride in _encoder_layout(cfg):
        h = r.block(h, name, cin, cout, stride)
        stage_out[name.split(".")[1]] = h
    E = stage_out["stage4"]
    art = ForwardArtifacts()
    if "activation" in need:
        art.activation = stage_out[cfg.attention_source]
    if need & {"embedding", "logits"}:
        art.embedding = dc.global_avgpool(E)
        if "logits" in need:
            art.logits = dc.linear(art.embedding, p["classifier.weight"], p["classifier.bias"])
    if "heatmaps" in need:
        d = E
        skips = {2: stage_out["stage3"], 3: stage_out["stage2"]}
        for i in (1, 2, 3):
            if cfg.skip_connections and i in skips:
                d = dc.concat([d, skips[i]], axis=-1)
            d = dc.relu(r.bn(dc.deconv2d(d, p[f"decoder.deconv{i}.kernel"], 2, 1), f"decoder.deconv{i}.bn"))
        art.heatmaps = dc.add(dc.conv2d(d, p["decoder.head.kernel"], 1, 0), p["decoder.head.bias"])
    return art


# ---------------------------------------------------------------- transfer helpers

def apply_freeze(model: Model, policy: str) -> Model:
    """FE freezes the encoder, FTP all but its final stage, FT nothing."""
    if policy == "FE":
        frozen = model.encoder_names
    elif policy == "FTP":
        frozen = [n for n in model.encoder_names if not n.startswith("encoder.stage4.")]
    elif policy == "FT":
        frozen = []
    else:
        raise ConfigError(f"unknown freeze policy {policy!r}")
    model.set_frozen(frozen)
    return model


def student_from_teacher(teacher: Model, config: Optional[ModelConfig] = None, seed: int = 0) -> Model:
    """Copy encoder and classifier from ``teacher``; the decoder is freshly drawn from ``seed``."""
    cfg = copy.deepcopy(config or teacher.config)
    cfg.seed = seed
    student = build(cfg)
    for name in teacher.encoder_names + teacher.classifier_names:
        if name not in student.params or student.params[name].shape != teacher.params[name].shape:
            raise ConfigError(f"teacher parameter {name} does not fit the student architecture")
        student.params[name].data[...] = teacher.params[name].data
    for name, st in teacher.bn.items():
        if name.startswith("encoder."):
            student.bn[name] = BatchNormState(st.mean.copy(), st.var.copy(), st.momentum, st.eps)
    student.set_frozen([])
    return student


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> None:
    """JSON header line (config, frozen set, offset table) followed by raw tensor records."""
    blobs, table, offset = [], [], 0
    for name, arr in model.state_arrays().items():
        b = tensorio.to_bytes(arr)
        table.append({"name": name, "offset": offset, "length": len(b)})
        blobs.append(b)
        offset += len(b)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "config": model.config.to_dict(),
        "frozen": sorted(model.frozen),
        "teacher": model.is_teacher,
        "tensors": table,
    }
    if extra:
        header["extra"] = extra
    line = json.dumps(header, sort_keys=True).encode() + b"\n"
    Path(path).write_bytes(line + b"".join(blobs))


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint")
    body = raw[nl + 1:]
    model = build(ModelConfig.from_dict(header["config"]))
    for entry in header["tensors"]:
        arr = tensorio.from_bytes(body[entry["offset"]:entry["offset"] + entry["length"]])
        name = entry["name"]
        for suffix, attr in ((".running_mean", "mean"), (".running_var", "var")):
            if name.endswith(suffix):
                setattr(model.bn[name[:-len(suffix)]], attr, arr)
                break
        else:
            if model.params[name].shape != arr.shape:
                raise ValueError(f"{path}: shape mismatch for {name}")
            model.params[name].data = arr
    model.set_frozen(header["frozen"])
    model.is_teacher = bool(header.get("teacher"))
    return model


def checkpoint_extra(path) -> dict:
    raw = Path(path).read_bytes()
    return json.loads(raw[:raw.index(b"\n")]).get("extra", {})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
