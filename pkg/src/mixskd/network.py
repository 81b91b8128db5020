"""Multi-branch training graph and its pruned inference counterpart.

The backbone is ``stem -> stage_1 -> ... -> stage_K -> GAP -> fc``.  After
stage ``k < K`` an auxiliary branch re-applies fresh copies of stages
``k+1..K`` (the alignment stack) so every branch ends with the same spatial
size and channel count as the backbone, then pools and classifies.  A
self-teacher classifies the channel-concatenation of all K aligned feature
maps, and one small MLP discriminator per stage scores feature maps.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .autodiff.serialize import read_tensor, tensor_to_bytes
from .errors import FormatError, InvalidConfigError, InvalidShapeError


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    blocks: int = 1
    downsample: bool = False


@dataclass
class NetworkConfig:
    stages: tuple[StageSpec, ...]
    num_classes: int
    input_size: tuple[int, int] = (16, 16)
    in_channels: int = 3
    disc_hidden: int = 128
    residual: bool = False
    input_mean: float = 0.5
    input_std: float = 0.25

    @property
    def K(self) -> int:
        return len(self.stages)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        d["input_size"] = tuple(d["input_size"])
        return cls(**d)


@dataclass
class Layer:
    """One conv3x3 + ReLU block in an execution plan."""
    prefix: str
    in_channels: int
    out_channels: int
    stride: int


@dataclass
class BranchOutputs:
    branch_logits: list[Tensor]
    backbone_logits: Tensor
    features: list[Tensor]


@dataclass
class NetworkGraph:
    config: NetworkConfig
    params: dict[str, Tensor]
    stage_plans: list[list[Layer]] = field(repr=False)
    branch_plans: list[list[Layer]] = field(repr=False)
    feature_shape: tuple[int, int, int] = (0, 0, 0)  # C_last, H, W

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def group(self, name: str) -> dict[str, Tensor]:
        """Parameters of one group: backbone, branch, teacher or disc."""
        return {k: v for k, v in self.params.items() if param_group(k) == name}

    def num_parameters(self, group: str | None = None) -> int:
        ps = self.params.values() if group is None else self.group(group).values()
        return int(sum(p.data.size for p in ps))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def param_group(name: str) -> str:
    if name.startswith("branch"):
        return "branch"
    if name.startswith("teacher."):
        return "teacher"
    if name.startswith("disc"):
        return "disc"
    return "backbone"


def _plan(cfg: NetworkConfig):
    if cfg.K < 2:
        raise InvalidConfigError(f"need at least 2 stages, got {cfg.K}")
    if cfg.num_classes < 2:
        raise InvalidConfigError("num_classes must be >= 2")
    stem_ch = cfg.stages[0].out_channels
    stage_plans: list[list[Layer]] = []
    ch = stem_ch
    for k, spec in enumerate(cfg.stages, start=1):
        if spec.out_channels < 1 or spec.blocks < 1:
            raise InvalidConfigError(f"stage {k}: {spec}")
        layers = []
        for b in range(spec.blocks):
            stride = 2 if (spec.downsample and b == 0) else 1
            layers.append(Layer(f"stage{k}.block{b}", ch, spec.out_channels, stride))
            ch = spec.out_channels
        stage_plans.append(layers)

    branch_plans: list[list[Layer]] = []
    for k in range(1, cfg.K):
        layers = []
        for j in range(k + 1, cfg.K + 1):
            for lay in stage_plans[j - 1]:
                layers.append(Layer(f"branch{k}.{lay.prefix}", lay.in_channels, lay.out_channels, lay.stride))
        branch_plans.append(layers)

    h, w = cfg.input_size
    for layers in stage_plans:
        for lay in layers:
            if lay.stride == 2:
                h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
    if h < 1 or w < 1:
        raise InvalidConfigError("stage layout shrinks the input below 1x1")
    return stem_ch, stage_plans, branch_plans, (ch, h, w)


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 2.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * np.sqrt(gain / fan_in), requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def build_network(
    spec: Sequence[StageSpec],
    num_classes: int,
    disc_hidden: int = 128,
    seed: int = 0,
    input_size: tuple[int, int] = (16, 16),
    in_channels: int = 3,
    residual: bool = False,
) -> NetworkGraph:
    cfg = NetworkConfig(tuple(spec), num_classes, tuple(input_size), in_channels, disc_hidden, residual)
    return build_from_config(cfg, seed)


def build_from_config(cfg: NetworkConfig, seed: int = 0) -> NetworkGraph:
    stem_ch, stage_plans, branch_plans, feat = _plan(cfg)
    c_last, fh, fw = feat
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}

    def conv(prefix, cin, cout, k=3):
        p[f"{prefix}.w"] = _he(rng, (cout, cin, k, k), cin * k * k)
        p[f"{prefix}.b"] = _zeros(cout)

    def fc(prefix, cin, cout):
        # Unit gain keeps initial logits near zero so the summed losses start calm.
        p[f"{prefix}.w"] = _he(rng, (cout, cin), cin, gain=1.0)
        p[f"{prefix}.b"] = _zeros(cout)

    conv("stem", cfg.in_channels, stem_ch)
    for layers in stage_plans:
        for lay in layers:
            conv(lay.prefix, lay.in_channels, lay.out_channels)
    fc("fc", c_last, cfg.num_classes)
    for k, layers in enumerate(branch_plans, start=1):
        for lay in layers:
            conv(lay.prefix, lay.in_channels, lay.out_channels)
        fc(f"branch{k}.fc", c_last, cfg.num_classes)
    conv("teacher.conv", cfg.K * c_last, c_last, k=1)
    fc("teacher.fc", c_last, cfg.num_classes)
    for k in range(1, cfg.K + 1):
        fc(f"disc{k}.fc1", c_last * fh * fw, cfg.disc_hidden)
        fc(f"disc{k}.fc2", cfg.disc_hidden, 1)
    return NetworkGraph(cfg, p, stage_plans, branch_plans, feat)


def _block(params, lay: Layer, x: Tensor, residual: bool) -> Tensor:
    y = ad.conv2d(x, params[f"{lay.prefix}.w"], params[f"{lay.prefix}.b"], stride=lay.stride, padding=1)
    if residual and y.shape == x.shape:
        y = y + x
    return ad.relu(y)


def _head(params, prefix: str, feature: Tensor) -> Tensor:
    return ad.linear(ad.global_avg_pool(feature), params[f"{prefix}.w"], params[f"{prefix}.b"])


def _check_input(cfg: NetworkConfig, x: Tensor) -> None:
    want = (cfg.in_channels, *cfg.input_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != want:
        raise InvalidShapeError(f"expected input [N, {want[0]}, {want[1]}, {want[2]}], got {x.shape}")


def _backbone_stages(cfg: NetworkConfig, params, stage_plans, x: Tensor) -> list[Tensor]:
    """Outputs of stage 1..K (shared prefix for every branch)."""
    x = ad.mul(ad.sub(x, cfg.input_mean), 1.0 / cfg.input_std)
    h = ad.relu(ad.conv2d(x, params["stem.w"], params["stem.b"], stride=1, padding=1))
    outs = []
    for layers in stage_plans:
        for lay in layers:
            h = _block(params, lay, h, cfg.residual)
        outs.append(h)
    return outs


def forward_train(net: NetworkGraph, x: Tensor) -> BranchOutputs:
    x = ad.as_tensor(x)
    _check_input(net.config, x)
    stage_out = _backbone_stages(net.config, net.params, net.stage_plans, x)
    features, branch_logits = [], []
    for k, layers in enumerate(net.branch_plans, start=1):
        h = stage_out[k - 1]
        for lay in layers:
            h = _block(net.params, lay, h, net.config.residual)
        features.append(h)
        branch_logits.append(_head(net.params, f"branch{k}.fc", h))
    features.append(stage_out[-1])
    backbone_logits = _head(net.params, "fc", stage_out[-1])
    return BranchOutputs(branch_logits, backbone_logits, features)


def forward_teacher(net: NetworkGraph, features: Sequence[Tensor]) -> Tensor:
    """Self-teacher logits: linear(GAP(relu(conv1x1(concat(features)))))."""
    if len(features) != net.K:
        raise InvalidConfigError(f"teacher needs {net.K} feature maps, got {len(features)}")
    want = net.feature_shape
    for f in features:
        if tuple(f.shape[1:]) != want:
            raise InvalidShapeError(f"teacher feature {f.shape} does not match [N, {want}]")
    h = ad.relu(ad.conv2d(ad.concat(list(features), axis=1), net.params["teacher.conv.w"],
                          net.params["teacher.conv.b"]))
    return _head(net.params, "teacher.fc", h)


def forward_discriminator(net: NetworkGraph, k: int, feature: Tensor, frozen: bool = False) -> Tensor:
    """Probability in (0, 1), one per sample, that ``feature`` is an interpolation.

    With ``frozen=True`` the discriminator's own parameters enter as constants,
    so no gradient reaches them.
    """
    if not 1 <= k <= net.K:
        raise InvalidConfigError(f"discriminator index {k} outside 1..{net.K}")
    w1, b1, w2, b2 = (net.params[f"disc{k}.{n}"] for n in ("fc1.w", "fc1.b", "fc2.w", "fc2.b"))
    if frozen:
        w1, b1, w2, b2 = (ad.detach(t) for t in (w1, b1, w2, b2))
    h = ad.relu(ad.linear(ad.flatten(feature), w1, b1))
    z = ad.linear(h, w2, b2)
    return ad.sigmoid(ad.reshape(z, (z.shape[0],)))


def downsample_counts(net: NetworkGraph) -> dict[str, int]:
    """Stride-2 convolutions on the path from input to each classifier."""
    stage_ds = [sum(lay.stride == 2 for lay in layers) for layers in net.stage_plans]
    out = {"backbone": sum(stage_ds)}
    for k, layers in enumerate(net.branch_plans, start=1):
        out[f"branch{k}"] = sum(stage_ds[:k]) + sum(lay.stride == 2 for lay in layers)
    return out


@dataclass
class InferenceNet:
    """Backbone-only network used at test time."""

    config: NetworkConfig
    params: dict[str, Tensor]
    stage_plans: list[list[Layer]] = field(repr=False)

    def forward(self, x: Tensor) -> Tensor:
        x = ad.as_tensor(x)
        _check_input(self.config, x)
        feats = _backbone_stages(self.config, self.params, self.stage_plans, x)
        return _head(self.params, "fc", feats[-1])

    __call__ = forward

    def infer(self, x: np.ndarray) -> np.ndarray:
        return self.forward(Tensor(x)).data

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


def prune_for_inference(net: NetworkGraph) -> InferenceNet:
    """Drop branches, teacher and discriminators; keep stem, stages and fc."""
    return InferenceNet(net.config, dict(net.group("backbone")), net.stage_plans)


# -- checkpoints ---------------------------------------------------------------
#
# Text header, then tensor blobs in the binary tensor format:
#
#   MSKD-CHECKPOINT 1
#   meta <single-line JSON>
#   tensors <count>
#   <name> <byte offset> <extents joined by 'x'>     (one line per tensor)
#   end
#
# Offsets count from the first byte after the "end" line.

CKPT_MAGIC = "MSKD-CHECKPOINT"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, Tensor | np.ndarray], meta: dict) -> None:
    blobs, lines, offset = [], [], 0
    for name, t in params.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        blob = tensor_to_bytes(arr)
        dims = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"{name} {offset} {dims}")
        blobs.append(blob)
        offset += len(blob)
    header = "\n".join([
        f"{CKPT_MAGIC} {CKPT_VERSION}",
        "meta " + json.dumps(meta, sort_keys=True),
        f"tensors {len(lines)}",
        *lines,
        "end",
    ]) + "\n"
    Path(path).write_bytes(header.encode("utf-8") + b"".join(blobs))


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    fh = io.BytesIO(raw)

    def line() -> str:
        s = fh.readline()
        if not s.endswith(b"\n"):
            raise FormatError(f"{path}: truncated checkpoint header")
        return s.decode("utf-8").rstrip("\n")

    first = line().split()
    if len(first) != 2 or first[0] != CKPT_MAGIC or first[1] != str(CKPT_VERSION):
        raise FormatError(f"{path}: not a checkpoint (header {first!r})")
    meta_line = line()
    if not meta_line.startswith("meta "):
        raise FormatError(f"{path}: missing meta line")
    try:
        meta = json.loads(meta_line[5:])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad meta JSON ({exc})") from None
    count_line = line().split()
    if len(count_line) != 2 or count_line[0] != "tensors" or not count_line[1].isdigit():
        raise FormatError(f"{path}: missing tensor count")
    manifest = []
    for _ in range(int(count_line[1])):
        entry = line()
        try:
            name, off, dims = entry.split()
            shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
            manifest.append((name, int(off), shape))
        except ValueError:
            raise FormatError(f"{path}: bad manifest line {entry!r}") from None
    if line() != "end":
        raise FormatError(f"{path}: manifest not terminated by 'end'")
    base = fh.tell()
    out = {}
    for name, off, shape in manifest:
        fh.seek(base + off)
        arr = read_tensor(fh)
        if arr.shape != shape:
            raise FormatError(f"{path}: tensor {name} has shape {arr.shape}, manifest says {shape}")
        out[name] = arr
    return out, meta


def save_network(path: str | Path, net: NetworkGraph | InferenceNet, extra_meta: dict | None = None) -> None:
    meta = {"network": net.config.to_dict(), "pruned": isinstance(net, InferenceNet)}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, net.params, meta)


def load_network(path: str | Path) -> tuple[NetworkGraph | InferenceNet, dict]:
    arrays, meta = read_checkpoint(path)
    if "network" not in meta:
        raise FormatError(f"{path}: checkpoint meta lacks a network description")
    cfg = NetworkConfig.from_dict(meta["network"])
    net = build_from_config(cfg, seed=0)
    wanted = net.group("backbone") if meta.get("pruned") else net.params
    if set(arrays) != set(wanted):
        missing = sorted(set(wanted) - set(arrays))
        extra = sorted(set(arrays) - set(wanted))
        raise FormatError(f"{path}: parameter mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
    for name, t in wanted.items():
        if arrays[name].shape != t.shape:
            raise FormatError(f"{path}: {name} shape {arrays[name].shape} != {t.shape}")
        t.data = arrays[name].astype(t.dtype)
    if meta.get("pruned"):
        return InferenceNet(cfg, dict(wanted), net.stage_plans), meta
    return net, meta


def parameters(net: NetworkGraph, groups: Iterable[str]) -> dict[str, Tensor]:
    groups = set(groups)
    return {k: v for k, v in net.params.items() if param_group(k) in groups}
