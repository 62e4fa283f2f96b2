"""Declarative network specs and the PRPE-block convolutional model.

A network is described by an ``ArchSpec``: an input shape, a linear stack of
layers, and optional long-range additive skip edges between layer boundaries.
The building blocks are deliberately light-weight: standard / pointwise /
depthwise convolutions, PRPE blocks (projection, replicated depthwise
transforms, projection, expansion - each stage followed by a nonlinearity),
pooling, and dense layers. A sigmoid-activated single-logit head is always
appended after the last declared layer.

Spatial convention: "same" padding, so a stride-s layer maps H to ceil(H/s).
Skip edges carry a learned 1x1 channel adapter whenever the source and
destination channel counts differ; spatial sizes must already match.

Specs serialize to YAML and are fingerprinted by a sha256 over the canonical
form; checkpoints embed the spec plus that hash so weights can never be
loaded into a mismatched graph.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
import yaml
from torch import nn

CHECKPOINT_FORMAT_VERSION = 1


class SpecError(ValueError):
    """A network description that cannot be realized."""


class LayerKind(str, Enum):
    CONV_STANDARD = "conv_standard"
    CONV_POINTWISE = "conv_pointwise"
    CONV_DEPTHWISE = "conv_depthwise"
    PRPE_BLOCK = "prpe_block"
    POOL = "pool"
    GLOBAL_POOL = "global_pool"
    DENSE = "dense"
    ACTIVATION = "activation"


# Shapes are ("map", channels, height, width) or ("vec", features).
Shape = tuple


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kernel < 1 or self.stride < 1:
            raise SpecError(f"kernel and stride must be >= 1 (kernel={self.kernel}, stride={self.stride})")
        if self.kind is LayerKind.CONV_POINTWISE and self.kernel != 1:
            raise SpecError(f"pointwise convolution requires kernel 1, got {self.kernel}")
        if self.kind is LayerKind.PRPE_BLOCK and self.stride != 1:
            raise SpecError("prpe_block preserves spatial size; stride must be 1")


@dataclass(frozen=True)
class PRPEBlockSpec:
    """Resolved PRPE stage sizes: in -> internal -> internal -> expand."""

    in_channels: int
    project_ratio: float
    replicas: int
    expand_channels: int
    combine: str = "sum"
    activation: str = "relu"

    def __post_init__(self) -> None:
        if self.in_channels < 1:
            raise SpecError(f"prpe in_channels must be >= 1, got {self.in_channels}")
        if self.project_ratio <= 0.0:
            raise SpecError(f"project_ratio must be > 0, got {self.project_ratio}")
        if self.replicas < 1:
            raise SpecError(f"replicas must be >= 1, got {self.replicas}")
        if self.combine not in ("sum", "concat"):
            raise SpecError(f"combine must be 'sum' or 'concat', got {self.combine!r}")
        if self.activation not in _ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.expand_channels < self.internal_channels:
            raise SpecError(
                f"expand_channels ({self.expand_channels}) must be >= internal width ({self.internal_channels})"
            )

    @property
    def internal_channels(self) -> int:
        return max(1, round(self.in_channels * self.project_ratio))

    @property
    def merge_channels(self) -> int:
        """Channel count entering the second projection."""
        if self.combine == "concat":
            return self.internal_channels * self.replicas
        return self.internal_channels

    @classmethod
    def from_layer(cls, layer: LayerSpec) -> "PRPEBlockSpec":
        p = layer.params
        spec = cls(
            in_channels=layer.in_channels,
            project_ratio=float(p.get("project_ratio", 0.5)),
            replicas=int(p.get("replicas", 2)),
            expand_channels=layer.out_channels,
            combine=str(p.get("combine", "sum")),
            activation=str(p.get("activation", "relu")),
        )
        return spec


def prpe_layer(
    in_channels: int,
    expand_channels: int,
    project_ratio: float = 0.5,
    replicas: int = 2,
    kernel: int = 3,
    combine: str = "sum",
    activation: str = "relu",
) -> LayerSpec:
    layer = LayerSpec(
        kind=LayerKind.PRPE_BLOCK,
        in_channels=in_channels,
        out_channels=expand_channels,
        kernel=kernel,
        params={
            "project_ratio": project_ratio,
            "replicas": replicas,
            "combine": combine,
            "activation": activation,
        },
    )
    PRPEBlockSpec.from_layer(layer)  # validate eagerly
    return layer


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple[int, int, int]  # (channels, height, width)
    layers: tuple[LayerSpec, ...]
    long_range_edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(
            self, "long_range_edges", tuple((int(a), int(b)) for a, b in self.long_range_edges)
        )
        if len(self.input_shape) != 3 or any(v < 1 for v in self.input_shape):
            raise SpecError(f"input_shape must be (channels, height, width) >= 1, got {self.input_shape}")
        if not self.layers:
            raise SpecError("spec must declare at least one layer")
        propagate_shapes(self)


def _same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size and (leading, trailing) pad for the "same" convention."""
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def propagate_shapes(spec: ArchSpec) -> list[Shape]:
    """Output shape of every layer; raises SpecError naming the first bad layer."""
    shapes: list[Shape] = []
    current: Shape = ("map",) + spec.input_shape
    for i, layer in enumerate(spec.layers):
        current = _layer_output_shape(layer, current, i)
        if current[0] == "map" and (current[2] < 1 or current[3] < 1):
            raise SpecError(f"layer {i} ({layer.kind.value}): spatial size collapsed to {current[2]}x{current[3]}")
        shapes.append(current)
    if shapes[-1][0] != "vec":
        raise SpecError(
            f"layer {len(spec.layers) - 1} ({spec.layers[-1].kind.value}): final output must be a feature "
            "vector (end with global_pool or dense)"
        )
    _validate_edges(spec, shapes)
    return shapes


def _layer_output_shape(layer: LayerSpec, incoming: Shape, index: int) -> Shape:
    kind = layer.kind

    def fail(msg: str) -> SpecError:
        return SpecError(f"layer {index} ({kind.value}): {msg}")

    if kind is LayerKind.DENSE:
        if incoming[0] != "vec":
            raise fail(f"dense needs a feature vector input, got {incoming}")
        if layer.in_channels != incoming[1]:
            raise fail(f"declares {layer.in_channels} input features but receives {incoming[1]}")
        if layer.out_channels < 1:
            raise fail("out_channels must be >= 1")
        return ("vec", layer.out_channels)

    if kind is LayerKind.ACTIVATION:
        fn = str(layer.params.get("fn", "relu"))
        if fn not in _ACTIVATIONS:
            raise fail(f"unknown activation {fn!r}")
        return incoming

    if incoming[0] != "map":
        raise fail(f"needs a feature-map input, got {incoming}")
    _, c, h, w = incoming

    if kind is LayerKind.GLOBAL_POOL:
        return ("vec", c)

    if kind is LayerKind.POOL:
        op = str(layer.params.get("op", "max"))
        if op not in ("max", "avg"):
            raise fail(f"pool op must be 'max' or 'avg', got {op!r}")
        oh, _, _ = _same_padding(h, layer.kernel, layer.stride)
        ow, _, _ = _same_padding(w, layer.kernel, layer.stride)
        return ("map", c, oh, ow)

    if layer.in_channels != c:
        raise fail(f"declares {layer.in_channels} input channels but receives {c}")

    if kind is LayerKind.CONV_DEPTHWISE:
        mult = int(layer.params.get("multiplier", 1))
        if mult < 1:
            raise fail(f"multiplier must be >= 1, got {mult}")
        if layer.out_channels != c * mult:
            raise fail(f"depthwise out_channels must be in_channels * multiplier = {c * mult}, got {layer.out_channels}")
    elif layer.out_channels < 1:
        raise fail("out_channels must be >= 1")

    if kind is LayerKind.PRPE_BLOCK:
        PRPEBlockSpec.from_layer(layer)  # validates stage sizes
        return ("map", layer.out_channels, h, w)

    oh, _, _ = _same_padding(h, layer.kernel, layer.stride)
    ow, _, _ = _same_padding(w, layer.kernel, layer.stride)
    return ("map", layer.out_channels, oh, ow)


def _validate_edges(spec: ArchSpec, shapes: list[Shape]) -> None:
    seen: set[tuple[int, int]] = set()
    for src, dst in spec.long_range_edges:
        if not (0 <= src < dst < len(spec.layers)):
            raise SpecError(f"edge {src}->{dst}: requires 0 <= source < destination < {len(spec.layers)}")
        if (src, dst) in seen:
            raise SpecError(f"edge {src}->{dst} declared twice")
        seen.add((src, dst))
        src_shape = shapes[src]
        dst_shape = shapes[dst - 1]
        if src_shape[0] != "map" or dst_shape[0] != "map":
            raise SpecError(f"edge {src}->{dst}: both endpoints must be feature maps ({src_shape} -> {dst_shape})")
        if src_shape[2:] != dst_shape[2:]:
            raise SpecError(
                f"edge {src}->{dst}: spatial mismatch {src_shape[2]}x{src_shape[3]} vs {dst_shape[2]}x{dst_shape[3]}"
            )


def head_features(spec: ArchSpec) -> int:
    """Width of the feature vector entering the sigmoid head."""
    return propagate_shapes(spec)[-1][1]


# ---------------------------------------------------------------------------
# Serialization


def spec_to_dict(spec: ArchSpec) -> dict:
    return {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "layers": [
            {
                "kind": layer.kind.value,
                "in_channels": layer.in_channels,
                "out_channels": layer.out_channels,
                "kernel": layer.kernel,
                "stride": layer.stride,
                "params": dict(layer.params),
            }
            for layer in spec.layers
        ],
        "long_range_edges": [list(edge) for edge in spec.long_range_edges],
    }


def spec_from_dict(raw: Mapping[str, Any]) -> ArchSpec:
    try:
        layers = tuple(
            LayerSpec(
                kind=LayerKind(entry["kind"]),
                in_channels=int(entry.get("in_channels", 0)),
                out_channels=int(entry.get("out_channels", 0)),
                kernel=int(entry.get("kernel", 1)),
                stride=int(entry.get("stride", 1)),
                params=dict(entry.get("params", {})),
            )
            for entry in raw["layers"]
        )
        return ArchSpec(
            name=str(raw["name"]),
            input_shape=tuple(raw["input_shape"]),
            layers=layers,
            long_range_edges=tuple(tuple(edge) for edge in raw.get("long_range_edges", [])),
        )
    except (KeyError, TypeError) as exc:
        raise SpecError(f"malformed spec document: {exc}") from exc


def save_spec(spec: ArchSpec, path: Path | str) -> None:
    with Path(path).open("w") as fh:
        yaml.safe_dump(spec_to_dict(spec), fh, sort_keys=True)


def load_spec(path: Path | str) -> ArchSpec:
    with Path(path).open() as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, Mapping):
        raise SpecError(f"{path}: expected a mapping at the top level")
    return spec_from_dict(raw)


def spec_hash(spec: ArchSpec) -> str:
    canonical = json.dumps(spec_to_dict(spec), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# torch realization

_ACTIVATIONS = {"relu", "identity"}


def _act(name: str) -> nn.Module:
    return nn.ReLU() if name == "relu" else nn.Identity()


class SamePad2d(nn.Module):
    """Explicit asymmetric padding for the ceil(H/s) spatial convention."""

    def __init__(self, kernel: int, stride: int, value: float = 0.0):
        super().__init__()
        self.kernel = kernel
        self.stride = stride
        self.value = value

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2], x.shape[-1]
        _, top, bottom = _same_padding(h, self.kernel, self.stride)
        _, left, right = _same_padding(w, self.kernel, self.stride)
        if top or bottom or left or right:
            x = nn.functional.pad(x, (left, right, top, bottom), value=self.value)
        return x


class PRPEBlock(nn.Module):
    """Project, run replicated depthwise transforms, project, expand."""

    def __init__(self, block: PRPEBlockSpec, kernel: int = 3):
        super().__init__()
        self.block = block
        inner = block.internal_channels
        self.project_in = nn.Conv2d(block.in_channels, inner, 1)
        self.branches = nn.ModuleList(
            nn.Conv2d(inner, inner, kernel, padding=kernel // 2, groups=inner)
            for _ in range(block.replicas)
        )
        self.project_mid = nn.Conv2d(block.merge_channels, inner, 1)
        self.expand = nn.Conv2d(inner, block.expand_channels, 1)
        self.act = _act(block.activation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.act(self.project_in(x))
        outs = [branch(y) for branch in self.branches]
        if self.block.combine == "concat":
            merged = torch.cat(outs, dim=1)
        else:
            merged = outs[0]
            for extra in outs[1:]:
                merged = merged + extra
        y = self.act(merged)
        y = self.act(self.project_mid(y))
        return self.act(self.expand(y))


def _build_layer(layer: LayerSpec) -> nn.Module:
    kind = layer.kind
    if kind is LayerKind.CONV_STANDARD:
        return nn.Sequential(
            SamePad2d(layer.kernel, layer.stride),
            nn.Conv2d(layer.in_channels, layer.out_channels, layer.kernel, stride=layer.stride),
        )
    if kind is LayerKind.CONV_POINTWISE:
        return nn.Conv2d(layer.in_channels, layer.out_channels, 1, stride=layer.stride)
    if kind is LayerKind.CONV_DEPTHWISE:
        mult = int(layer.params.get("multiplier", 1))
        return nn.Sequential(
            SamePad2d(layer.kernel, layer.stride),
            nn.Conv2d(
                layer.in_channels,
                layer.in_channels * mult,
                layer.kernel,
                stride=layer.stride,
                groups=layer.in_channels,
            ),
        )
    if kind is LayerKind.PRPE_BLOCK:
        return PRPEBlock(PRPEBlockSpec.from_layer(layer), kernel=layer.kernel)
    if kind is LayerKind.POOL:
        op = str(layer.params.get("op", "max"))
        if op == "max":
            return nn.Sequential(
                SamePad2d(layer.kernel, layer.stride, value=float("-inf")),
                nn.MaxPool2d(layer.kernel, layer.stride),
            )
        return nn.Sequential(
            SamePad2d(layer.kernel, layer.stride, value=0.0),
            nn.AvgPool2d(layer.kernel, layer.stride),
        )
    if kind is LayerKind.GLOBAL_POOL:
        return nn.AdaptiveAvgPool2d(1)
    if kind is LayerKind.DENSE:
        return nn.Linear(layer.in_channels, layer.out_channels)
    if kind is LayerKind.ACTIVATION:
        return _act(str(layer.params.get("fn", "relu")))
    raise SpecError(f"unsupported layer kind {kind}")


class ConvNet(nn.Module):
    """Executable realization of an ArchSpec with a sigmoid screening head."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        self.spec = spec
        self.shapes = propagate_shapes(spec)
        self.stages = nn.ModuleList(_build_layer(layer) for layer in spec.layers)
        self.head = nn.Linear(head_features(spec), 1)
        # 1x1 adapters for skip edges whose endpoint channel counts differ.
        self.adapters = nn.ModuleDict()
        self._incoming: dict[int, list[int]] = {}
        for src, dst in spec.long_range_edges:
            self._incoming.setdefault(dst, []).append(src)
            src_c = self.shapes[src][1]
            dst_c = self.shapes[dst - 1][1]
            if src_c != dst_c:
                self.adapters[f"{src}_{dst}"] = nn.Conv2d(src_c, dst_c, 1)

    def _check_input(self, x: torch.Tensor) -> torch.Tensor:
        c, h, w = self.spec.input_shape
        if x.dim() == 3 and c == 1:
            x = x.unsqueeze(1)
        if x.dim() != 4 or tuple(x.shape[1:]) != (c, h, w):
            raise ValueError(f"expected input batch of shape (N, {c}, {h}, {w}), got {tuple(x.shape)}")
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        probs, _ = self.forward_with_intermediates(x)
        return probs

    def forward_with_intermediates(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Positive-class probabilities (N,) plus every stage output, in order."""
        x = self._check_input(x)
        outputs: list[torch.Tensor] = []
        current = x
        needed = {src for srcs in self._incoming.values() for src in srcs}
        saved: dict[int, torch.Tensor] = {}
        for i, stage in enumerate(self.stages):
            for src in self._incoming.get(i, ()):
                skip = saved[src]
                key = f"{src}_{i}"
                if key in self.adapters:
                    skip = self.adapters[key](skip)
                current = current + skip
            current = stage(current)
            if self.shapes[i][0] == "vec" and current.dim() == 4:
                current = torch.flatten(current, 1)
            if i in needed:
                saved[i] = current
            outputs.append(current)
        logits = self.head(current).squeeze(1)
        return torch.sigmoid(logits), outputs


def build_model(spec: ArchSpec, seed: int = 0) -> ConvNet:
    """Instantiate a spec with fan-in-scaled uniform init under a fixed seed."""
    torch.manual_seed(seed)
    return ConvNet(spec)


def forward(model: ConvNet, batch: np.ndarray | torch.Tensor) -> np.ndarray:
    """Probabilities for a batch of images, order preserved, no gradients."""
    if isinstance(batch, np.ndarray):
        tensor = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
    else:
        tensor = batch.to(torch.float32)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            probs = model(tensor)
    finally:
        model.train(was_training)
    out = probs.numpy().astype(np.float64)
    if not np.isfinite(out).all():
        raise RuntimeError("model produced non-finite probabilities")
    return out


def bce_loss(probabilities: torch.Tensor, labels: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Mean binary cross-entropy on probabilities, clamped away from {0, 1}."""
    if probabilities.shape != labels.shape:
        raise ValueError(f"shape mismatch: probabilities {tuple(probabilities.shape)} vs labels {tuple(labels.shape)}")
    p = probabilities.clamp(eps, 1.0 - eps)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path: Path | str, model: ConvNet, extra: Mapping[str, Any] | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "spec": spec_to_dict(model.spec),
        "spec_hash": spec_hash(model.spec),
        "state_dict": model.state_dict(),
        "extra": dict(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path | str) -> tuple[ConvNet, dict]:
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "state_dict" not in payload or "spec" not in payload:
        raise ValueError(f"{path}: missing checkpoint fields")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {version!r}")
    spec = spec_from_dict(payload["spec"])
    recorded = payload.get("spec_hash")
    if recorded != spec_hash(spec):
        raise ValueError(f"{path}: embedded spec does not match its recorded hash; refusing to load")
    model = ConvNet(spec)
    model.load_state_dict(payload["state_dict"], strict=True)
    model.eval()
    return model, dict(payload.get("extra", {}))


# ---------------------------------------------------------------------------
# Built-in reference specs


def cxr2_tiny() -> ArchSpec:
    """Desk-scale screening network: ~46K parameters, ~5.9M MACs at 480x480."""
    conv = LayerKind.CONV_STANDARD
    pw = LayerKind.CONV_POINTWISE
    dw = LayerKind.CONV_DEPTHWISE
    act = LayerSpec(LayerKind.ACTIVATION)
    pool = LayerSpec(LayerKind.POOL, kernel=2, stride=2, params={"op": "max"})
    layers = (
        LayerSpec(conv, 1, 8, kernel=5, stride=4),          # 0: 8 x 120 x 120
        act,                                                # 1
        pool,                                               # 2: 8 x 60 x 60
        prpe_layer(8, 16, project_ratio=0.5, replicas=2),   # 3: 16 x 60 x 60
        pool,                                               # 4: 16 x 30 x 30
        prpe_layer(16, 32, project_ratio=0.5, replicas=2),  # 5: 32 x 30 x 30
        pool,                                               # 6: 32 x 15 x 15
        LayerSpec(dw, 32, 32, kernel=3),                    # 7
        act,                                                # 8
        LayerSpec(pw, 32, 64),                              # 9: 64 x 15 x 15
        act,                                                # 10
        pool,                                               # 11: 64 x 8 x 8
        prpe_layer(64, 96, project_ratio=0.25, replicas=3), # 12: 96 x 8 x 8
        pool,                                               # 13: 96 x 4 x 4
        LayerSpec(pw, 96, 160),                             # 14
        act,                                                # 15
        LayerSpec(LayerKind.GLOBAL_POOL),                   # 16: vec 160
        LayerSpec(LayerKind.DENSE, 160, 96),                # 17
        act,                                                # 18
    )
    return ArchSpec(
        name="cxr2-tiny",
        input_shape=(1, 480, 480),
        layers=layers,
        long_range_edges=((7, 10), (11, 13)),
    )


BUILTIN_SPECS = {"cxr2-tiny": cxr2_tiny}


def resolve_spec(name_or_path: str) -> ArchSpec:
    """Look up a built-in spec by name, or load a YAML spec file."""
    if name_or_path in BUILTIN_SPECS:
        return BUILTIN_SPECS[name_or_path]()
    path = Path(name_or_path)
    if path.exists():
        return load_spec(path)
    raise SpecError(f"unknown spec {name_or_path!r} (not a built-in name or a readable file)")
