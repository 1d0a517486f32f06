"""Declarative model builders: the VGG-style backbone, the four
aggregation topologies (hed, casenet, dsfpn, upinet), forward evaluation,
parameter/MAC accounting and checkpoint IO.

The upinet wiring: optional coordinate augmentation at the input, global
context blocks in-line after the last convolution of the first
``gc_stages`` stages, group-wise enhancement blocks after the last
``cge_stages`` stages, every refined stage feature linearly mapped to
``fusion_channels`` channels, upsampled, concatenated and fused to a
single map; a supervised side output taps the refined conv-5 feature.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .blocks import CGEBlock, GCBlock, coordconv_augment, init_he_

# (convolutions per stage, output channels); 3x3 stride-1 pad-1 convs with
# ReLU, 2x2 stride-2 max-pool between consecutive stages.
BACKBONE_STAGES = ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512))

TOPOLOGIES = ("hed", "casenet", "dsfpn", "upinet")

DSFPN_LATERAL_WIDTH = 128
GC_REDUCTION = 16
STRIDE_DIVISIBILITY = 16

CHECKPOINT_MAGIC = b"CNTL0001"

# Documented MAC-equivalent costs for non-convolution work.
UPSAMPLE_MACS_PER_ELEMENT = 4   # four bilinear taps per output element
SOFTMAX_OPS_PER_ELEMENT = 3     # subtract max, exp, normalize
GROUPNORM_OPS_PER_ELEMENT = 5   # mean, variance, center, scale, shift
LAYERNORM_OPS_PER_ELEMENT = 4


class CheckpointError(RuntimeError):
    """Raised on malformed checkpoints or layer-shape mismatches."""


@dataclass(frozen=True)
class ArchitectureSpec:
    """Declarative description of one detector variant.

    ``gc_stages``/``cge_stages`` place context blocks on the first m and
    last n backbone stages (upinet only). ``width_divisor`` shrinks every
    stage width by an integer factor for desk-scale runs; 1 reproduces
    the published widths.
    """

    topology: str = "upinet"
    gc_stages: int = 3
    cge_stages: int = 2
    num_groups: int = 16
    fusion_channels: int = 32
    use_coordconv: bool = True
    use_side_output: bool = True
    input_channels: int = 1
    width_divisor: int = 1

    @classmethod
    def default(cls, topology: str = "upinet", **overrides) -> "ArchitectureSpec":
        """Canonical configuration per topology; upinet gets 3G-2C with
        16 groups, 32 fusion channels, coordinate channels and the side
        output, baselines get a bare backbone."""
        if topology == "upinet":
            base = cls()
        else:
            base = cls(topology=topology, gc_stages=0, cge_stages=0, use_coordconv=False)
        return replace(base, **overrides) if overrides else base

    def stage_channels(self) -> tuple:
        return tuple(w // self.width_divisor for _, w in BACKBONE_STAGES)

    def gated_stages(self) -> tuple:
        """1-based indices of stages carrying a group-enhancement block."""
        return tuple(range(6 - self.cge_stages, 6))

    def gc_stage_indices(self) -> tuple:
        return tuple(range(1, self.gc_stages + 1))

    def validate(self) -> None:
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}; valid: {', '.join(TOPOLOGIES)}")
        if self.input_channels not in (1, 3):
            raise ValueError("input_channels must be 1 (grayscale) or 3")
        if not (0 <= self.gc_stages <= 5 and 0 <= self.cge_stages <= 5):
            raise ValueError("gc_stages and cge_stages must lie in 0..5")
        if self.gc_stages + self.cge_stages > 5:
            raise ValueError(f"gc_stages + cge_stages = {self.gc_stages + self.cge_stages} "
                             "overlaps: at most 5 stages exist")
        if self.topology != "upinet" and (self.gc_stages or self.cge_stages):
            raise ValueError(f"topology {self.topology!r} takes no context blocks (gc_stages=cge_stages=0)")
        if self.topology in ("hed", "dsfpn") and not self.use_side_output:
            raise ValueError(f"side outputs are structural for {self.topology!r} and cannot be disabled")
        if self.num_groups < 1 or self.fusion_channels < 1:
            raise ValueError("num_groups and fusion_channels must be positive")
        if self.width_divisor < 1 or any(w % self.width_divisor for _, w in BACKBONE_STAGES):
            raise ValueError(f"width_divisor {self.width_divisor} must divide every stage width")
        widths = self.stage_channels()
        for s in self.gated_stages() if self.cge_stages else ():
            if widths[s - 1] % self.num_groups:
                raise ValueError(f"num_groups={self.num_groups} does not divide "
                                 f"stage-{s} channel count {widths[s - 1]}")

    def to_text(self) -> str:
        """Canonical one-line form used in checkpoint headers."""
        return (f"topology={self.topology} gc_stages={self.gc_stages} "
                f"cge_stages={self.cge_stages} num_groups={self.num_groups} "
                f"fusion_channels={self.fusion_channels} "
                f"coordconv={int(self.use_coordconv)} side_output={int(self.use_side_output)} "
                f"input_channels={self.input_channels} width_divisor={self.width_divisor}")

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        fields = dict(tok.split("=", 1) for tok in text.split())
        spec = cls(
            topology=fields["topology"],
            gc_stages=int(fields["gc_stages"]),
            cge_stages=int(fields["cge_stages"]),
            num_groups=int(fields["num_groups"]),
            fusion_channels=int(fields["fusion_channels"]),
            use_coordconv=bool(int(fields["coordconv"])),
            use_side_output=bool(int(fields["side_output"])),
            input_channels=int(fields["input_channels"]),
            width_divisor=int(fields["width_divisor"]),
        )
        spec.validate()
        return spec


@dataclass
class ModelOutputs:
    """Named pre-activation output maps at input resolution."""

    side: list
    fused: Tensor
    side_names: tuple

    def items(self):
        yield from zip(self.side_names, self.side)
        yield "fused", self.fused


def _check_spatial(h: int, w: int) -> None:
    if h % STRIDE_DIVISIBILITY:
        raise ValueError(f"input height {h} not divisible by {STRIDE_DIVISIBILITY}")
    if w % STRIDE_DIVISIBILITY:
        raise ValueError(f"input width {w} not divisible by {STRIDE_DIVISIBILITY}")


def _upsample(x: Tensor, size) -> Tensor:
    if x.shape[2:] == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ContourNet(nn.Module):
    """One detector instance built from an :class:`ArchitectureSpec`."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.seed = 0
        widths = spec.stage_channels()
        in_ch = spec.input_channels + (2 if spec.use_coordconv else 0)

        stages = []
        c = in_ch
        for n_convs, width in zip((n for n, _ in BACKBONE_STAGES), widths):
            layers = []
            for _ in range(n_convs):
                layers += [nn.Conv2d(c, width, kernel_size=3, padding=1), nn.ReLU()]
                c = width
            stages.append(nn.Sequential(*layers))
        self.stages = nn.ModuleList(stages)
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)

        self.gc_blocks = nn.ModuleDict(
            {str(s): GCBlock(widths[s - 1], reduction=GC_REDUCTION) for s in spec.gc_stage_indices()})
        self.cge_blocks = nn.ModuleDict(
            {str(s): CGEBlock(widths[s - 1], spec.num_groups)
             for s in (spec.gated_stages() if spec.cge_stages else ())})

        if spec.topology in ("upinet", "casenet"):
            nc = spec.fusion_channels
            self.feature_convs = nn.ModuleList(
                [nn.Conv2d(w, nc, kernel_size=1) for w in widths])
            self.fuse_conv = nn.Conv2d(5 * nc, 1, kernel_size=1)
            self.side_conv = nn.Conv2d(widths[4], 1, kernel_size=1) if spec.use_side_output else None
        elif spec.topology == "hed":
            self.side_convs = nn.ModuleList(
                [nn.Conv2d(w, 1, kernel_size=1) for w in widths])
            self.fuse_conv = nn.Conv2d(5, 1, kernel_size=1)
        elif spec.topology == "dsfpn":
            lat = max(1, DSFPN_LATERAL_WIDTH // spec.width_divisor)
            self.lateral_convs = nn.ModuleList(
                [nn.Conv2d(w, lat, kernel_size=1) for w in widths])
            lateral_widths = {conv.out_channels for conv in self.lateral_convs}
            if len(lateral_widths) != 1:
                raise ValueError(f"lateral projections must share one width, got {sorted(lateral_widths)}")
            self.head_convs = nn.ModuleList(
                [nn.Conv2d(lat, 1, kernel_size=1) for _ in widths])
            self.fuse_conv = nn.Conv2d(5, 1, kernel_size=1)

    def _stage_features(self, x: Tensor, gates: dict | None = None) -> list:
        feats = []
        h = x
        for i, stage in enumerate(self.stages, start=1):
            if i > 1:
                h = self.pool(h)
            h = stage(h)
            key = str(i)
            if key in self.gc_blocks:
                h = self.gc_blocks[key](h)
            if key in self.cge_blocks:
                if gates is not None:
                    gates[i] = self.cge_blocks[key].importance_maps(h)
                h = self.cge_blocks[key](h)
            feats.append(h)
        return feats

    def forward(self, x: Tensor) -> ModelOutputs:
        if x.dim() != 4:
            raise ValueError(f"expected B x C x H x W input, got {tuple(x.shape)}")
        if x.shape[1] != self.spec.input_channels:
            raise ValueError(f"model expects {self.spec.input_channels} input channels, got {x.shape[1]}")
        h, w = int(x.shape[2]), int(x.shape[3])
        _check_spatial(h, w)
        if self.spec.use_coordconv:
            x = coordconv_augment(x)
        feats = self._stage_features(x)
        size = (h, w)

        if self.spec.topology in ("upinet", "casenet"):
            fused_in = [_upsample(conv(f), size) for conv, f in zip(self.feature_convs, feats)]
            fused = self.fuse_conv(torch.cat(fused_in, dim=1))
            if self.side_conv is not None:
                side = [_upsample(self.side_conv(feats[4]), size)]
                return ModelOutputs(side=side, fused=fused, side_names=("side5",))
            return ModelOutputs(side=[], fused=fused, side_names=())

        if self.spec.topology == "hed":
            sides = [_upsample(conv(f), size) for conv, f in zip(self.side_convs, feats)]
            fused = self.fuse_conv(torch.cat(sides, dim=1))
            return ModelOutputs(side=sides, fused=fused,
                                side_names=tuple(f"side{i}" for i in range(1, 6)))

        # dsfpn: top-down pyramid with elementwise lateral additions
        laterals = [conv(f) for conv, f in zip(self.lateral_convs, feats)]
        pyramid = [None] * 5
        pyramid[4] = laterals[4]
        for i in range(3, -1, -1):
            pyramid[i] = laterals[i] + _upsample(pyramid[i + 1], laterals[i].shape[2:])
        sides = [_upsample(conv(p), size) for conv, p in zip(self.head_convs, pyramid)]
        fused = self.fuse_conv(torch.cat(sides, dim=1))
        return ModelOutputs(side=sides, fused=fused,
                            side_names=tuple(f"side{i}" for i in range(1, 6)))

    def cge_importance_maps(self, x: Tensor, stage: int) -> Tensor:
        """Gate maps of the enhancement block on ``stage``, B x N_G x h x w."""
        if str(stage) not in self.cge_blocks:
            raise ValueError(f"stage {stage} carries no group-enhancement block "
                             f"(gated stages: {list(self.spec.gated_stages()) if self.spec.cge_stages else []})")
        if self.spec.use_coordconv:
            x = coordconv_augment(x)
        gates: dict = {}
        self._stage_features(x, gates=gates)
        return gates[stage]


def build_model(spec: ArchitectureSpec, seed: int) -> ContourNet:
    """Construct a model with every free parameter drawn from the
    fan-in-scaled Gaussian scheme, deterministically in ``seed``."""
    model = ContourNet(spec)
    gen = torch.Generator().manual_seed(int(seed))
    init_he_(model, gen)
    model.seed = int(seed)
    return model


def count_params(model: ContourNet) -> int:
    """Exact number of scalar learnable parameters."""
    return sum(p.numel() for p in model.parameters())


def export_activation_maps(model: ContourNet, x: Tensor, stage: int) -> list:
    """The ``num_groups`` importance maps of the block on ``stage`` for the
    first batch item, each a 2D tensor with values strictly inside (0, 1)."""
    with torch.no_grad():
        gates = model.cge_importance_maps(x, stage)
    return [gates[0, g] for g in range(gates.shape[1])]


# ---------------------------------------------------------------------------
# MAC accounting


def mac_breakdown(spec: ArchitectureSpec, input_h: int, input_w: int) -> dict:
    """Multiply-accumulate counts by category at the given input size.

    Convolutions count out_c * in_c/groups * k^2 * out_h * out_w. Bilinear
    upsampling counts 4 MACs per output element; softmax/normalization and
    other elementwise work count the documented per-element op costs.
    Max-pooling and ReLU comparisons are not counted.
    """
    spec.validate()
    _check_spatial(input_h, input_w)
    widths = spec.stage_channels()
    conv = ups = attn = elem = 0

    def dims(stage):  # 1-based
        return input_h >> (stage - 1), input_w >> (stage - 1)

    c_in = spec.input_channels + (2 if spec.use_coordconv else 0)
    for s, (n_convs, _) in enumerate(BACKBONE_STAGES, start=1):
        h, w = dims(s)
        width = widths[s - 1]
        cin = c_in if s == 1 else widths[s - 2]
        for j in range(n_convs):
            conv += (cin if j == 0 else width) * width * 9 * h * w
    for s in spec.gc_stage_indices():
        h, w = dims(s)
        c = widths[s - 1]
        hidden = math.ceil(c / GC_REDUCTION)
        conv += c * 1 * h * w              # key projection
        attn += SOFTMAX_OPS_PER_ELEMENT * h * w
        attn += c * h * w                  # attention pooling
        conv += c * hidden + hidden * c    # bottleneck on a 1x1 context
        elem += LAYERNORM_OPS_PER_ELEMENT * hidden + hidden
        elem += c * h * w                  # broadcast addition
    for s in (spec.gated_stages() if spec.cge_stages else ()):
        h, w = dims(s)
        c = widths[s - 1]
        conv += spec.num_groups * (c // spec.num_groups) * h * w
        elem += GROUPNORM_OPS_PER_ELEMENT * spec.num_groups * h * w
        elem += spec.num_groups * h * w    # sigmoid gate
        elem += c * h * w                  # broadcast multiplication

    full = input_h * input_w
    if spec.topology in ("upinet", "casenet"):
        nc = spec.fusion_channels
        for s in range(1, 6):
            h, w = dims(s)
            conv += widths[s - 1] * nc * h * w
            if s > 1:
                ups += UPSAMPLE_MACS_PER_ELEMENT * nc * full
        conv += 5 * nc * full              # fusion projection
        if spec.use_side_output:
            h5, w5 = dims(5)
            conv += widths[4] * h5 * w5
            ups += UPSAMPLE_MACS_PER_ELEMENT * full
    elif spec.topology == "hed":
        for s in range(1, 6):
            h, w = dims(s)
            conv += widths[s - 1] * h * w
            if s > 1:
                ups += UPSAMPLE_MACS_PER_ELEMENT * full
        conv += 5 * full
    else:  # dsfpn
        lat = max(1, DSFPN_LATERAL_WIDTH // spec.width_divisor)
        for s in range(1, 6):
            h, w = dims(s)
            conv += widths[s - 1] * lat * h * w
        for s in range(1, 5):              # top-down refinement into stage s
            h, w = dims(s)
            ups += UPSAMPLE_MACS_PER_ELEMENT * lat * h * w
            elem += lat * h * w
        for s in range(1, 6):
            h, w = dims(s)
            conv += lat * h * w
            if s > 1:
                ups += UPSAMPLE_MACS_PER_ELEMENT * full
        conv += 5 * full
    return {"conv": conv, "upsample": ups, "attention": attn, "elementwise": elem,
            "total": conv + ups + attn + elem}


def count_flops(model: ContourNet, input_h: int, input_w: int) -> int:
    """Total multiply-accumulate count for one forward pass."""
    return mac_breakdown(model.spec, input_h, input_w)["total"]


# ---------------------------------------------------------------------------
# Backbone weight archives (npz with stage{i}_conv{j}_{weight,bias} arrays)


def _backbone_convs(model: ContourNet):
    for s, stage in enumerate(model.stages, start=1):
        j = 0
        for layer in stage:
            if isinstance(layer, nn.Conv2d):
                j += 1
                yield f"stage{s}_conv{j}", layer


def export_backbone_weights(model: ContourNet) -> dict:
    """Backbone convolution tensors as float32 arrays, keyed by layer."""
    out = {}
    for name, conv in _backbone_convs(model):
        out[f"{name}_weight"] = conv.weight.detach().cpu().numpy().astype(np.float32)
        out[f"{name}_bias"] = conv.bias.detach().cpu().numpy().astype(np.float32)
    return out


def load_backbone_weights(model: ContourNet, source) -> dict:
    """Load backbone convolution weights from an archive.

    ``source`` is a mapping of arrays or a path to an ``.npz`` file. Only
    layers present in the archive are replaced; the report lists loaded
    and skipped layers. A shape mismatch aborts before touching anything.
    """
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with np.load(source) as archive:
            arrays = {k: archive[k] for k in archive.files}
    else:
        arrays = dict(source)
    convs = dict(_backbone_convs(model))
    plan = []
    for name, conv in convs.items():
        wkey, bkey = f"{name}_weight", f"{name}_bias"
        if wkey not in arrays and bkey not in arrays:
            continue
        if wkey not in arrays or bkey not in arrays:
            raise CheckpointError(f"archive holds a partial tensor pair for layer {name}")
        want_w, want_b = tuple(conv.weight.shape), tuple(conv.bias.shape)
        got_w, got_b = arrays[wkey].shape, arrays[bkey].shape
        if got_w != want_w or got_b != want_b:
            raise CheckpointError(f"layer {name}: archive shapes {got_w}/{got_b} "
                                  f"do not match model {want_w}/{want_b}")
        plan.append((name, conv, arrays[wkey], arrays[bkey]))
    known = {f"{n}_{suffix}" for n in convs for suffix in ("weight", "bias")}
    unknown = sorted(set(arrays) - known)
    if unknown:
        raise CheckpointError(f"archive holds unknown layers: {', '.join(unknown)}")
    with torch.no_grad():
        for _, conv, wa, ba in plan:
            conv.weight.copy_(torch.from_numpy(np.ascontiguousarray(wa)))
            conv.bias.copy_(torch.from_numpy(np.ascontiguousarray(ba)))
    loaded = [name for name, *_ in plan]
    skipped = sorted(set(convs) - set(loaded))
    return {"loaded": loaded, "skipped": skipped}


# ---------------------------------------------------------------------------
# Checkpoints: magic, u64-le header length, JSON header, raw <f4 data


def save_checkpoint(path, model: ContourNet, epoch: int = 0) -> None:
    """Versioned binary checkpoint; parameters stored as little-endian
    float32 in manifest order. Save/load round-trips are bitwise stable."""
    manifest = [[name, list(p.shape)] for name, p in model.named_parameters()]
    header = {"spec": model.spec.to_text(), "seed": model.seed,
              "epoch": int(epoch), "manifest": manifest}
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for _, p in model.named_parameters():
        buf.write(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    """Parse a checkpoint into (spec, seed, epoch, {name: float32 array})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {raw[:8]!r}, expected {CHECKPOINT_MAGIC!r}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    spec = ArchitectureSpec.from_text(header["spec"])
    offset = 16 + hlen
    params = {}
    for name, shape in header["manifest"]:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 4 * n
        if end > len(raw):
            raise CheckpointError(f"truncated data for parameter {name}")
        params[name] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{len(raw) - offset} trailing bytes after manifest data")
    return spec, int(header["seed"]), int(header["epoch"]), params


def load_checkpoint(path):
    """Rebuild the model a checkpoint describes and load its weights.

    Returns (model, epoch). Manifest names and shapes must match the
    model built from the header spec exactly.
    """
    spec, seed, epoch, params = read_checkpoint(path)
    model = build_model(spec, seed)
    own = dict(model.named_parameters())
    if set(own) != set(params):
        missing = sorted(set(own) - set(params))
        extra = sorted(set(params) - set(own))
        raise CheckpointError(f"manifest mismatch; missing {missing}, unexpected {extra}")
    with torch.no_grad():
        for name, p in own.items():
            arr = params[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"parameter {name}: checkpoint shape {tuple(arr.shape)} "
                                      f"does not match model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    return model, epoch
