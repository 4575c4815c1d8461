"""The fall-detection network: joint/motion fusion, graph and separable temporal blocks.

Layer order for one forward pass::

    fuse -> sgcn1 -> sgcn2 -> septcn1 -> septcn2 -> global avg pool -> linear

Masking layers follow each of the four backbone blocks during training.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from . import nn
from .errors import CheckpointError, ConfigError, ShapeError
from .graph import SkeletonGraph, build_body25_graph, build_graph
from .nn import BatchNorm, Param, Tensor

FUSION_MODES = ("joint", "motion", "early_fused")
MASKING_MODES = ("random", "block", "none")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    in_channels: int = 3
    channel_plan: tuple[int, int, int] = (64, 128, 256)
    tcn_kernels: tuple[int, int] = (3, 5)
    tcn_strides: tuple[int, int] = (1, 2)
    num_classes: int = 2
    p_joint: float = 0.05
    p_frame: float = 0.05
    use_learnable_adjacency: bool = True
    adjacency_gate: str = "matrix"  # or "scalar": one learnable gain per layer
    adjacency_norm: str = "row"  # or "symmetric"
    fusion: str = "early_fused"
    masking: str = "random"  # "block" reproduces the block-drop ablation
    drop_block_size: int = 5
    target_length: int = 300

    def __post_init__(self):
        self.channel_plan = tuple(int(c) for c in self.channel_plan)
        self.tcn_kernels = tuple(int(k) for k in self.tcn_kernels)
        self.tcn_strides = tuple(int(s) for s in self.tcn_strides)

    def validate(self) -> None:
        if self.in_channels < 1:
            raise ConfigError("in_channels must be positive")
        if len(self.channel_plan) != 3 or any(c <= 0 for c in self.channel_plan):
            raise ConfigError(f"channel_plan must be three positive ints, got {self.channel_plan}")
        if len(self.tcn_kernels) != 2 or any(k < 1 or k % 2 == 0 for k in self.tcn_kernels):
            raise ConfigError(f"tcn_kernels must be two odd ints, got {self.tcn_kernels}")
        if len(self.tcn_strides) != 2 or any(s not in (1, 2) for s in self.tcn_strides):
            raise ConfigError(f"tcn_strides must be two values in {{1, 2}}, got {self.tcn_strides}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        for name in ("p_joint", "p_frame"):
            p = getattr(self, name)
            if not 0.0 <= p < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {p}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.masking not in MASKING_MODES:
            raise ConfigError(f"masking must be one of {MASKING_MODES}, got {self.masking!r}")
        if self.adjacency_gate not in ("matrix", "scalar"):
            raise ConfigError(f"adjacency_gate must be 'matrix' or 'scalar', got {self.adjacency_gate!r}")
        if self.adjacency_norm not in ("row", "symmetric"):
            raise ConfigError(f"adjacency_norm must be 'row' or 'symmetric', got {self.adjacency_norm!r}")
        if self.drop_block_size < 1:
            raise ConfigError("drop_block_size must be >= 1")
        if self.target_length < 2:
            raise ConfigError("target_length must be >= 2")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Encoder:
    bn: BatchNorm
    W: Param
    b: Param


@dataclass
class SgcnBlock:
    W: Param  # (Cout, Cin)
    M: Param | None  # (V, V) or (1, 1); None when the adjacency is fixed
    bn: BatchNorm
    proj_W: Param | None = None  # residual channel matching, (Cout, Cin)
    proj_b: Param | None = None
    use_residual: bool = True


@dataclass
class SepTcnBlock:
    dw: Param  # (C, K)
    pw: Param  # (Cout, C)
    bn: BatchNorm
    stride: int
    proj_W: Param | None = None
    proj_b: Param | None = None


@dataclass
class SdfaModel:
    config: ModelConfig
    graph: SkeletonGraph
    joint_encoder: Encoder | None
    motion_encoder: Encoder | None
    sgcn1: SgcnBlock
    sgcn2: SgcnBlock
    septcn1: SepTcnBlock
    septcn2: SepTcnBlock
    head_W: Param
    head_b: Param
    dtype: Any = np.float32

    def named_params(self) -> Iterator[tuple[str, Param]]:
        for prefix, obj in self._modules():
            for fname, value in vars(obj).items():
                if isinstance(value, Param):
                    yield f"{prefix}.{fname}", value
                elif isinstance(value, BatchNorm):
                    yield f"{prefix}.{fname}.gamma", value.gamma
                    yield f"{prefix}.{fname}.beta", value.beta
        yield "head.W", self.head_W
        yield "head.b", self.head_b

    def params(self) -> list[Param]:
        return [p for _, p in self.named_params()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, obj in self._modules():
            for fname, value in vars(obj).items():
                if isinstance(value, BatchNorm):
                    yield f"{prefix}.{fname}.running_mean", value.running_mean
                    yield f"{prefix}.{fname}.running_var", value.running_var

    def state(self) -> list[tuple[str, np.ndarray]]:
        """Every tensor a checkpoint holds, in a fixed order."""
        return [(n, p.data) for n, p in self.named_params()] + list(self.named_buffers())

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def _modules(self):
        mods = [
            ("joint_encoder", self.joint_encoder),
            ("motion_encoder", self.motion_encoder),
            ("sgcn1", self.sgcn1),
            ("sgcn2", self.sgcn2),
            ("septcn1", self.septcn1),
            ("septcn2", self.septcn2),
        ]
        return [(n, m) for n, m in mods if m is not None]


# ---------------------------------------------------------------------------
# Construction


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype, name: str) -> Param:
    bound = np.sqrt(1.0 / fan_in)
    return Param(rng.uniform(-bound, bound, size=shape).astype(dtype), name)


def _encoder(rng, cin, cout, dtype, name) -> Encoder:
    return Encoder(
        bn=BatchNorm.create(cin, dtype, f"{name}.bn"),
        W=_uniform(rng, (cout, cin), cin, dtype, f"{name}.W"),
        b=_uniform(rng, (cout,), cin, dtype, f"{name}.b"),
    )


def build_model(config: ModelConfig | None = None, seed: int = 0,
                graph: SkeletonGraph | None = None, dtype=np.float32) -> SdfaModel:
    """Deterministically initialise every parameter from ``seed``.

    Weights are uniform in ``+-sqrt(1/fan_in)``, adjacency modulation starts at
    ones and batch-norm at the identity.
    """
    config = config or ModelConfig()
    config.validate()
    if graph is None:
        graph = build_body25_graph(config.adjacency_norm)
    rng = np.random.default_rng(seed)
    c1, c2, c3 = config.channel_plan
    V = graph.num_joints
    cin = config.in_channels

    joint_enc = _encoder(rng, cin, c1, dtype, "joint_encoder") if config.fusion != "motion" else None
    motion_enc = _encoder(rng, cin, c1, dtype, "motion_encoder") if config.fusion != "joint" else None

    def sgcn(ci, co, name):
        M = None
        if config.use_learnable_adjacency:
            mshape = (V, V) if config.adjacency_gate == "matrix" else (1, 1)
            M = Param(np.ones(mshape, dtype=dtype), f"{name}.M")
        block = SgcnBlock(
            W=_uniform(rng, (co, ci), ci, dtype, f"{name}.W"),
            M=M,
            bn=BatchNorm.create(co, dtype, f"{name}.bn"),
        )
        if ci != co:
            block.proj_W = _uniform(rng, (co, ci), ci, dtype, f"{name}.proj_W")
            block.proj_b = _uniform(rng, (co,), ci, dtype, f"{name}.proj_b")
        return block

    def septcn(c, k, stride, name):
        return SepTcnBlock(
            dw=_uniform(rng, (c, k), k, dtype, f"{name}.dw"),
            pw=_uniform(rng, (c, c), c, dtype, f"{name}.pw"),
            bn=BatchNorm.create(c, dtype, f"{name}.bn"),
            stride=stride,
        )

    sgcn1 = sgcn(c1, c2, "sgcn1")
    sgcn2 = sgcn(c2, c3, "sgcn2")
    septcn1 = septcn(c3, config.tcn_kernels[0], config.tcn_strides[0], "septcn1")
    septcn2 = septcn(c3, config.tcn_kernels[1], config.tcn_strides[1], "septcn2")
    head_W = _uniform(rng, (config.num_classes, c3), c3, dtype, "head.W")
    head_b = _uniform(rng, (config.num_classes,), c3, dtype, "head.b")
    return SdfaModel(config, graph, joint_enc, motion_enc, sgcn1, sgcn2, septcn1, septcn2,
                     head_W, head_b, dtype=np.dtype(dtype).type)


# ---------------------------------------------------------------------------
# Forward pass


def _mask(x: Tensor, config: ModelConfig, training: bool, rng) -> Tensor:
    if not training or config.masking == "none":
        return x
    if config.masking == "block":
        return nn.block_temporal_drop(x, config.p_frame, config.drop_block_size, training, rng)
    return nn.random_st_mask(x, config.p_joint, config.p_frame, training, rng)


def _encode(x: Tensor, enc: Encoder, training: bool) -> Tensor:
    return nn.conv1x1(nn.batchnorm(x, enc.bn, training), enc.W, enc.b)


def fuse_streams(xj: Tensor, model: SdfaModel, training: bool = False) -> Tensor:
    """Project joint and motion streams to ``c1`` channels and sum them."""
    out = None
    if model.joint_encoder is not None:
        out = _encode(xj, model.joint_encoder, training)
    if model.motion_encoder is not None:
        motion = _encode(nn.temporal_diff(xj), model.motion_encoder, training)
        out = motion if out is None else nn.add(out, motion)
    return out


def sgcn_block(x: Tensor, block: SgcnBlock, graph: SkeletonGraph, training: bool = False) -> Tensor:
    """Graph convolution with learnable adjacency and a spatial-max residual.

    ``h = (A_hat * M) aggregated over joints of (W x)``. Both maps are linear
    and act on different axes, so the joints are aggregated first, on the
    narrower input channels. The residual is the per-frame max over joints
    of the projected input (the input itself when widths agree), broadcast
    back over the joint axis.
    """
    if x.shape[3] != graph.num_joints:
        raise ShapeError(f"input has {x.shape[3]} joints, graph has {graph.num_joints}")
    A = nn.modulate(graph.A_hat, block.M) if block.M is not None else Tensor(graph.A_hat.astype(x.dtype))
    h = nn.conv1x1(nn.graph_aggregate(x, A), block.W)
    if not block.use_residual:
        return nn.relu(nn.batchnorm(h, block.bn, training))
    if block.proj_W is not None:
        r = nn.project_spatial_max(x, block.proj_W, block.proj_b)
    else:
        r = nn.pool(x, "spatial_max")
    return nn.batchnorm_add_relu(h, block.bn, r, training)


def sep_tcn_block(x: Tensor, block: SepTcnBlock, training: bool = False) -> Tensor:
    """Separable temporal convolution with a temporal-max residual."""
    y = nn.sep_temporal_conv(x, block.dw, block.pw, block.stride)
    r = nn.pool(x, "temporal_max", block.stride)
    if block.proj_W is not None:
        r = nn.conv1x1(r, block.proj_W, block.proj_b)
    return nn.batchnorm_add_relu(y, block.bn, r, training)


def forward(model: SdfaModel, xj, training: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Logits ``(N, num_classes)`` for an ``(N, C, T, V)`` input."""
    x = xj if isinstance(xj, Tensor) else Tensor(np.asarray(xj, dtype=model.dtype))
    if x.data.ndim != 4 or x.shape[1] != model.config.in_channels:
        raise ShapeError(f"expected (N, {model.config.in_channels}, T, V) input, got {x.shape}")
    if training and rng is None:
        rng = np.random.default_rng(0)
    cfg = model.config
    h = fuse_streams(x, model, training)
    h = _mask(sgcn_block(h, model.sgcn1, model.graph, training), cfg, training, rng)
    h = _mask(sgcn_block(h, model.sgcn2, model.graph, training), cfg, training, rng)
    h = _mask(sep_tcn_block(h, model.septcn1, training), cfg, training, rng)
    h = _mask(sep_tcn_block(h, model.septcn2, training), cfg, training, rng)
    return nn.linear(nn.pool(h, "global_avg"), model.head_W, model.head_b)


def predict_proba(model: SdfaModel, X: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Eval-mode class probabilities, ``(N, num_classes)``."""
    out = []
    for i in range(0, len(X), batch_size):
        logits = forward(model, X[i:i + batch_size], training=False)
        out.append(nn.softmax(logits.data.astype(np.float64)))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Complexity


def count_params(model: SdfaModel) -> int:
    return int(sum(p.data.size for p in model.params()))


def count_flops(model: SdfaModel, input_shape: tuple[int, int, int]) -> int:
    """Multiply-accumulates for one ``(C, T, V)`` sample.

    Counted: 1x1 convolutions, the joint aggregation, depthwise taps and the
    classifier; normalisation, activations and pooling are free.
    """
    cfg = model.config
    C, T, V = input_shape
    c1, c2, c3 = cfg.channel_plan
    branches = (model.joint_encoder is not None) + (model.motion_encoder is not None)
    macs = branches * c1 * C * T * V
    for block, ci, co in ((model.sgcn1, c1, c2), (model.sgcn2, c2, c3)):
        macs += co * ci * T * V  # channel transform
        macs += V * V * ci * T  # adjacency product, taken on the input channels
        if block.use_residual and block.proj_W is not None:
            macs += co * ci * T * V  # residual projection ahead of the joint max
    for block in (model.septcn1, model.septcn2):
        c, k = block.dw.shape
        T = nn.temporal_out_len(T, block.stride)
        macs += c * k * T * V
        macs += block.pw.shape[0] * c * T * V
        if block.proj_W is not None:
            macs += block.proj_W.size * T * V
    macs += cfg.num_classes * c3
    return int(macs)


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout: one UTF-8 JSON manifest line, then the raw little-endian float32
# arrays back to back in manifest order. Offsets are relative to the first
# byte after the manifest line.


def save_checkpoint(model: SdfaModel, path: str | Path, extra: dict | None = None) -> None:
    tensors, blobs, offset = [], [], 0
    for name, arr in model.state():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "graph": {"num_joints": model.graph.num_joints, "edges": [list(e) for e in model.graph.edges]},
        "tensors": tensors,
    }
    if extra:
        manifest["extra"] = extra
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for blob in blobs:
            fh.write(blob)


def read_checkpoint_manifest(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise CheckpointError(f"{path}: missing manifest line")
    try:
        manifest = json.loads(head)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: unreadable manifest") from None
    return manifest, body


def load_checkpoint(path: str | Path, dtype=np.float32) -> SdfaModel:
    manifest, body = read_checkpoint_manifest(path)
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format {version} unsupported (expected {CHECKPOINT_VERSION})")
    config = ModelConfig.from_dict(manifest["config"])
    g = manifest.get("graph")
    graph = None
    if g and g["num_joints"] != 25:
        graph = build_graph(g["num_joints"], [tuple(e) for e in g["edges"]], config.adjacency_norm)
    model = build_model(config, seed=0, graph=graph, dtype=dtype)
    expected = model.state()
    entries = manifest.get("tensors", [])
    if [e["name"] for e in entries] != [n for n, _ in expected]:
        raise CheckpointError("checkpoint tensor names do not match the model layout")
    for entry, (name, arr) in zip(entries, expected):
        if tuple(entry["shape"]) != arr.shape:
            raise CheckpointError(f"{name}: shape {tuple(entry['shape'])} != expected {arr.shape}")
        n = arr.size * 4
        start = entry["offset"]
        if start + n > len(body):
            raise CheckpointError(f"{name}: truncated data")
        arr[...] = np.frombuffer(body, dtype="<f4", count=arr.size, offset=start).reshape(arr.shape)
    return model
