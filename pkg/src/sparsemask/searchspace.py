"""Fully Dense Network: encoder stages, densely connected gated decoder, prediction head."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .autodiff import ops
from .autodiff.nn import BatchNorm2d, Conv2d, ConvBNAct, Module, ResidualBlock, activate
from .autodiff.tensor import Tensor, add, scale, sigmoid
from .errors import ArchitectureError, ShapeError

KINDS = ("E", "D", "G")
GATE_PARAMS = ("sigmoid", "direct")


@dataclass(frozen=True)
class EncoderSpec:
    """Encoder stages as ``(out_channels, stride_to_input)`` pairs, shallow to deep."""

    stages: tuple[tuple[int, int], ...]
    name: str = "encoder"
    has_global_pool: bool = True

    def __post_init__(self):
        stages = tuple((int(c), int(s)) for c, s in self.stages)
        object.__setattr__(self, "stages", stages)
        self.validate()

    def validate(self) -> None:
        if len(self.stages) < 2:
            raise ArchitectureError(f"encoder {self.name!r} needs at least 2 stages, got {len(self.stages)}")
        if not self.has_global_pool:
            raise ArchitectureError("encoder must end with global average pooling")
        prev = 1
        for i, (c, s) in enumerate(self.stages, start=1):
            if c < 1:
                raise ArchitectureError(f"stage {i} has non-positive channel count {c}")
            if s < 1 or s & (s - 1):
                raise ArchitectureError(f"stage {i} stride {s} is not a power of two")
            if s < prev:
                raise ArchitectureError(f"stage {i} stride {s} decreases from {prev}")
            prev = s

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def max_stride(self) -> int:
        return self.stages[-1][1]

    def channels(self, l: int) -> int:
        return self.stages[l - 1][0]

    def stride(self, l: int) -> int:
        return self.stages[l - 1][1]

    def to_dict(self) -> dict:
        return {"name": self.name, "stages": [{"channels": c, "stride": s} for c, s in self.stages]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderSpec":
        return cls(stages=tuple((st["channels"], st["stride"]) for st in d["stages"]),
                   name=d.get("name", "encoder"))


@dataclass(frozen=True, order=True)
class FeatureRef:
    """Address of a decoder input: encoder stage ``E_l``, decoder stage ``D_l`` or pooled ``G``."""

    kind: str
    index: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "G" and self.index != 0:
            raise ValueError("the pooled feature G has index 0")
        if self.kind != "G" and self.index < 1:
            raise ValueError(f"stage index must be >= 1, got {self.index}")

    def __str__(self) -> str:
        return "G" if self.kind == "G" else f"{self.kind}{self.index}"

    def channels(self, spec: EncoderSpec, decoder_channels: int) -> int:
        if self.kind == "E":
            return spec.channels(self.index)
        if self.kind == "D":
            return decoder_channels
        return spec.channels(spec.num_stages)

    def stride(self, spec: EncoderSpec) -> int | None:
        """Resolution ratio to the input; ``None`` for the 1x1 pooled feature."""
        return None if self.kind == "G" else spec.stride(self.index)


def E(l: int) -> FeatureRef:
    return FeatureRef("E", l)


def D(l: int) -> FeatureRef:
    return FeatureRef("D", l)


G = FeatureRef("G", 0)

_KIND_ORDER = {"E": 0, "D": 1, "G": 2}


def source_sort_key(ref: FeatureRef) -> tuple[int, int]:
    return _KIND_ORDER[ref.kind], ref.index


@dataclass(frozen=True)
class CandidateSet:
    stage: int
    sources: tuple[FeatureRef, ...]


def candidate_set(l: int, num_stages: int) -> CandidateSet:
    """Inputs allowed for decoder stage ``l``: deeper-or-equal encoder stages, deeper decoder stages, G."""
    if not 1 <= l <= num_stages:
        raise ValueError(f"stage {l} outside 1..{num_stages}")
    srcs = [E(i) for i in range(l, num_stages + 1)]
    srcs += [D(i) for i in range(l + 1, num_stages + 1)]
    srcs.append(G)
    return CandidateSet(l, tuple(srcs))


def candidate_sets(num_stages: int) -> list[CandidateSet]:
    return [candidate_set(l, num_stages) for l in range(1, num_stages + 1)]


@dataclass
class GateMatrix:
    """Connection weights keyed by ``(stage, source)``."""

    values: dict[tuple[int, FeatureRef], float] = field(default_factory=dict)

    def stages(self) -> list[int]:
        return sorted({l for l, _ in self.values})

    def sources(self, l: int) -> list[FeatureRef]:
        return sorted((t for s, t in self.values if s == l), key=source_sort_key)

    def items(self) -> list[tuple[int, FeatureRef, float]]:
        return [(l, t, self.values[(l, t)]) for l in self.stages() for t in self.sources(l)]

    def vector(self, l: int) -> np.ndarray:
        return np.array([self.values[(l, t)] for t in self.sources(l)])

    def __len__(self) -> int:
        return len(self.values)

    @classmethod
    def full(cls, num_stages: int, value: float) -> "GateMatrix":
        return cls({(cs.stage, t): value for cs in candidate_sets(num_stages) for t in cs.sources})


def export_gate_csv(gm: GateMatrix, path: str | Path, digest: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if digest:
            fh.write(f"# config_digest={digest}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["stage", "source_kind", "source_index", "gate_value"])
        for l, t, w in gm.items():
            writer.writerow([l, t.kind, t.index, repr(float(w))])


def import_gate_csv(path: str | Path) -> GateMatrix:
    values = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            ref = FeatureRef(row["source_kind"], int(row["source_index"]))
            values[(int(row["stage"]), ref)] = float(row["gate_value"])
    return GateMatrix(values)


# -- network ---------------------------------------------------------------
class EncoderStage(Module):
    """Strided 3x3 conv + BN + activation followed by one residual block."""

    def __init__(self, rng, c_in: int, c_out: int, stride: int, dtype=np.float32):
        self.down = ConvBNAct(rng, c_in, c_out, 3, stride, dtype=dtype)
        self.block = ResidualBlock(rng, c_out, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.block(self.down(x, training), training)


class Encoder(Module):
    def __init__(self, rng, spec: EncoderSpec, in_channels: int = 3, dtype=np.float32):
        self._spec = spec
        stages = []
        c_prev, s_prev = in_channels, 1
        for c, s in spec.stages:
            stages.append(EncoderStage(rng, c_prev, c, s // s_prev, dtype))
            c_prev, s_prev = c, s
        self.stages = stages

    def __call__(self, image: Tensor, training: bool) -> dict[FeatureRef, Tensor]:
        feats: dict[FeatureRef, Tensor] = {}
        x = image
        for l, stage in enumerate(self.stages, start=1):
            x = stage(x, training)
            feats[E(l)] = x
        feats[G] = ops.global_avg_pool(x)
        return feats


class Branch(Module):
    """One connection ``source -> stage``: conv, optional BN and optional gate."""

    def __init__(self, rng, source: FeatureRef, c_in: int, c_out: int, kernel: int, gated: bool,
                 gate_param: str = "sigmoid", dtype=np.float32):
        self._source = source
        self._gate_param = gate_param
        self.conv = Conv2d(rng, c_in, c_out, kernel, bias=not gated, dtype=dtype)
        if gated:
            if gate_param not in GATE_PARAMS:
                raise ValueError(f"unknown gate parameterization {gate_param!r}")
            self.bn = BatchNorm2d(c_out, dtype)
            init = 0.0 if gate_param == "sigmoid" else 0.5
            self.gate_raw = Tensor(np.full((), init, dtype=dtype), requires_grad=True)
        else:
            self.bn = None
            self.gate_raw = None

    @property
    def source(self) -> FeatureRef:
        return self._source

    @property
    def gated(self) -> bool:
        return self.gate_raw is not None

    def gate(self) -> Tensor:
        return sigmoid(self.gate_raw) if self._gate_param == "sigmoid" else self.gate_raw

    def gate_value(self) -> float:
        return float(sigmoid(Tensor(np.float64(self.gate_raw.data))).data) \
            if self._gate_param == "sigmoid" else float(self.gate_raw.data)

    def project_gate(self, eps: float) -> None:
        """Keep a directly parameterized gate inside ``[eps, 1 - eps]``."""
        if self.gate_raw is not None and self._gate_param == "direct":
            np.clip(self.gate_raw.data, eps, 1 - eps, out=self.gate_raw.data)

    def transform(self, x: Tensor, training: bool) -> Tensor:
        y = self.conv(x)
        return self.bn(y, training) if self.bn is not None else y


class Decoder(Module):
    """Decoder stages evaluated deepest first; each sums its (gated) branches.

    ``stages`` maps stage index to its ordered source list. With ``gated`` the
    branch form is ``w * up(bn(conv(t)))``, otherwise ``up(conv(t))``.
    """

    def __init__(self, rng, spec: EncoderSpec, decoder_channels: int,
                 stages: Mapping[int, Iterable[FeatureRef]], gated: bool, kernel: int = 3,
                 activation: str = "relu", gate_param: str = "sigmoid", dtype=np.float32):
        if decoder_channels < 1:
            raise ArchitectureError("decoder_channels must be >= 1")
        self._spec = spec
        self._channels = decoder_channels
        self._activation = activation
        self._order = sorted(stages, reverse=True)
        branches: dict[str, list[Branch]] = {}
        for l in self._order:
            row = []
            for t in stages[l]:
                c_in = t.channels(spec, decoder_channels)
                row.append(Branch(rng, t, c_in, decoder_channels, kernel, gated, gate_param, dtype))
            branches[str(l)] = row
        self.branches = branches

    @property
    def stage_order(self) -> list[int]:
        return list(self._order)

    def stage_branches(self, l: int) -> list[Branch]:
        return self.branches[str(l)]

    def stage_forward(self, l: int, features: Mapping[FeatureRef, Tensor], training: bool,
                      gates: Mapping[FeatureRef, float] | None = None) -> Tensor:
        """Weighted sum of branch outputs at the resolution of ``E_l`` (no activation)."""
        if str(l) not in self.branches:
            raise KeyError(f"decoder has no stage {l}")
        target = features.get(E(l))
        if target is None:
            raise KeyError(f"stage {l}: encoder feature E{l} missing (sets output resolution)")
        out_h, out_w = target.shape[2:]
        total = None
        for br in self.branches[str(l)]:
            src = features.get(br.source)
            if src is None:
                raise KeyError(f"stage {l}: missing input feature {br.source}")
            y = br.transform(src, training)
            y = ops.bilinear_upsample(y, out_h, out_w)
            if gates is not None and br.source in gates:
                y = y * float(gates[br.source])
            elif br.gated:
                y = scale(br.gate(), y)
            total = y if total is None else add(total, y)
        return total

    def __call__(self, features: dict[FeatureRef, Tensor], training: bool) -> dict[FeatureRef, Tensor]:
        for l in self._order:
            features[D(l)] = activate(self.stage_forward(l, features, training), self._activation)
        return features


class DenseNet(Module):
    """Encoder + decoder + pointwise classifier on the output stage, upsampled to the input size."""

    def __init__(self, rng, spec: EncoderSpec, decoder_channels: int, num_classes: int,
                 stages: Mapping[int, Iterable[FeatureRef]], output_stage: int, gated: bool,
                 in_channels: int = 3, kernel: int = 3, activation: str = "relu",
                 gate_param: str = "sigmoid", dtype=np.float32):
        self._spec = spec
        self._output_stage = output_stage
        self._num_classes = num_classes
        self._decoder_channels = decoder_channels
        self.encoder = Encoder(rng, spec, in_channels, dtype)
        self.decoder = Decoder(rng, spec, decoder_channels, stages, gated, kernel, activation,
                               gate_param, dtype)
        self.head = Conv2d(rng, decoder_channels, num_classes, 1, bias=True, dtype=dtype)

    @property
    def spec(self) -> EncoderSpec:
        return self._spec

    @property
    def output_stage(self) -> int:
        return self._output_stage

    @property
    def num_classes(self) -> int:
        return self._num_classes

    @property
    def decoder_channels(self) -> int:
        return self._decoder_channels

    def check_input(self, image: Tensor) -> None:
        if image.ndim != 4:
            raise ShapeError(f"image must be (N, C, H, W), got {image.shape}")
        h, w = image.shape[2:]
        m = self._spec.max_stride
        if h % m or w % m:
            raise ShapeError(f"input size {h}x{w} must be a multiple of {m}")

    def features(self, image: Tensor, training: bool) -> dict[FeatureRef, Tensor]:
        self.check_input(image)
        return self.decoder(self.encoder(image, training), training)

    def __call__(self, image: Tensor, training: bool) -> Tensor:
        feats = self.features(image, training)
        logits = self.head(feats[D(self._output_stage)])
        # pointwise head commutes with bilinear upsampling, so classify at low resolution
        return ops.bilinear_upsample(logits, *image.shape[2:])


class FDN(DenseNet):
    """Fully connected, gated search network."""

    def __init__(self, rng, spec: EncoderSpec, decoder_channels: int, num_classes: int,
                 pointwise: bool = False, **kw):
        stages = {cs.stage: cs.sources for cs in candidate_sets(spec.num_stages)}
        super().__init__(rng, spec, decoder_channels, num_classes, stages, 1, gated=True,
                         kernel=1 if pointwise else 3, **kw)

    def branches(self) -> list[tuple[int, Branch]]:
        return [(l, br) for l in range(1, self._spec.num_stages + 1)
                for br in self.decoder.stage_branches(l)]

    def gate_tensors(self) -> dict[int, list[Tensor]]:
        out: dict[int, list[Tensor]] = {}
        for l, br in self.branches():
            out.setdefault(l, []).append(br.gate())
        return out

    def gate_parameters(self) -> list[Tensor]:
        return [br.gate_raw for _, br in self.branches()]

    def project_gates(self, eps: float) -> None:
        for _, br in self.branches():
            br.project_gate(eps)


def build_fdn(spec: EncoderSpec, decoder_channels: int, seed: int, num_classes: int = 2,
              in_channels: int = 3, pointwise: bool = False, activation: str = "relu",
              gate_param: str = "sigmoid", dtype=np.float32) -> FDN:
    """Fresh FDN; every gate starts at 0.5 and weights are drawn from ``seed``."""
    spec.validate()
    if decoder_channels < 1:
        raise ArchitectureError("decoder_channels must be >= 1")
    rng = np.random.default_rng(seed)
    return FDN(rng, spec, decoder_channels, num_classes, pointwise=pointwise,
               in_channels=in_channels, activation=activation, gate_param=gate_param, dtype=dtype)


def decoder_stage_forward(fdn: DenseNet, l: int, features: Mapping[FeatureRef, Tensor], training: bool,
                          gates: Mapping[FeatureRef, float] | None = None) -> Tensor:
    return fdn.decoder.stage_forward(l, features, training, gates)


def forward(fdn: DenseNet, image: Tensor, training: bool) -> Tensor:
    return fdn(image, training)


def read_gates(fdn: FDN) -> GateMatrix:
    return GateMatrix({(l, br.source): br.gate_value() for l, br in fdn.branches()})


def total_gate_count(num_stages: int) -> int:
    return sum(len(cs.sources) for cs in candidate_sets(num_stages))
