"""Turn learned gates into a sparse decoder architecture.

Pruning rules, applied to a gate matrix:

1. drop every connection whose gate is below ``sigma`` (a gate equal to
   ``sigma`` is kept);
2. drop every decoder stage left without an input;
3. drop every decoder stage whose output nothing consumes. The network
   output consumes the output stage (``D_1`` unless the fallback moved it).

Rules 2 and 3 repeat until nothing changes, since removing one stage can
orphan another.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ArchitectureError, SchemaError
from .searchspace import (
    D,
    DenseNet,
    EncoderSpec,
    FeatureRef,
    GateMatrix,
    candidate_sets,
    source_sort_key,
)

DEFAULT_SIGMA = 0.001


@dataclass
class ConnectivityGraph:
    """Decoder edges ``source -> stage`` with weights; the output edge leaves ``output_stage``."""

    num_stages: int
    edges: dict[tuple[int, FeatureRef], float]
    output_stage: int = 1

    @classmethod
    def from_gates(cls, gm: GateMatrix, num_stages: int | None = None) -> "ConnectivityGraph":
        n = num_stages or max(gm.stages())
        return cls(n, dict(gm.values))

    def stages(self) -> list[int]:
        return sorted({l for l, _ in self.edges})

    def inputs(self, l: int) -> list[FeatureRef]:
        return sorted((t for s, t in self.edges if s == l), key=source_sort_key)


@dataclass
class PrunedArchitecture:
    encoder_spec: EncoderSpec
    decoder_channels: int
    stages: dict[int, list[FeatureRef]]
    output_stage: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.stages = {int(l): sorted(srcs, key=source_sort_key) for l, srcs in sorted(self.stages.items())}

    @property
    def kept_stages(self) -> list[int]:
        return sorted(self.stages)

    @property
    def kept_edges(self) -> set[tuple[int, FeatureRef]]:
        return {(l, t) for l, srcs in self.stages.items() for t in srcs}

    @property
    def num_edges(self) -> int:
        return sum(len(s) for s in self.stages.values())

    def validate(self) -> None:
        """Raise :class:`ArchitectureError` if any structural invariant fails."""
        n = self.encoder_spec.num_stages
        if self.decoder_channels < 1:
            raise ArchitectureError("decoder_channels must be >= 1")
        if not self.stages:
            raise ArchitectureError("architecture has no decoder stages")
        if self.output_stage not in self.stages:
            raise ArchitectureError(f"output stage {self.output_stage} is not a kept stage")
        consumed = {self.output_stage}
        for l, srcs in self.stages.items():
            if not 1 <= l <= n:
                raise ArchitectureError(f"stage {l} outside 1..{n}")
            if not srcs:
                raise ArchitectureError(f"stage {l} has no inputs")
            if len(set(srcs)) != len(srcs):
                raise ArchitectureError(f"stage {l} lists an input twice")
            for t in srcs:
                if t.kind == "E" and not l <= t.index <= n:
                    raise ArchitectureError(f"stage {l} input E{t.index} is not a valid encoder feature")
                if t.kind == "D":
                    if t.index <= l:
                        raise ArchitectureError(f"stage {l} input D{t.index} is not a deeper stage")
                    if t.index not in self.stages:
                        raise ArchitectureError(f"stage {l} input D{t.index} references a missing stage")
                    consumed.add(t.index)
        unused = set(self.stages) - consumed
        if unused:
            raise ArchitectureError(f"stages {sorted(unused)} produce outputs nobody consumes")

    def gate_matrix(self) -> GateMatrix:
        """Kept edges at weight 1, every other candidate at 0."""
        kept = self.kept_edges
        return GateMatrix({(cs.stage, t): (1.0 if (cs.stage, t) in kept else 0.0)
                           for cs in candidate_sets(self.encoder_spec.num_stages) for t in cs.sources})

    # -- JSON ---------------------------------------------------------------
    def to_dict(self) -> dict:
        meta = {"sigma": float(self.meta.get("sigma", DEFAULT_SIGMA)), "seed": int(self.meta.get("seed", 0))}
        if "config_digest" in self.meta:
            meta["config_digest"] = str(self.meta["config_digest"])
        return {
            "encoder": self.encoder_spec.to_dict(),
            "decoder_channels": int(self.decoder_channels),
            "stages": [
                {"l": l, "inputs": [{"kind": t.kind, "index": t.index} for t in srcs]}
                for l, srcs in sorted(self.stages.items())
            ],
            "output_stage": int(self.output_stage),
            "meta": meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, doc) -> "PrunedArchitecture":
        return _parse_architecture(doc)


# -- rule application -----------------------------------------------------
def prune_edges(edges: Mapping[int, list[FeatureRef]], num_stages: int, output_stage: int = 1,
                output_fallback: bool = False) -> tuple[dict[int, list[FeatureRef]], int | None]:
    """Apply rules 2 and 3 to a thresholded edge set until a fixpoint.

    Returns the surviving stages and the output stage (``None`` when nothing
    survives). With ``output_fallback`` a removed output stage hands its role to
    the lowest-indexed surviving stage; otherwise the whole decoder collapses.
    """
    live = {l: set(srcs) for l, srcs in edges.items() if srcs}
    # every stage from 1..L is a candidate; those without edges are dead already
    out = output_stage
    while True:
        changed = False
        # rule 2: stages without a live input (decoder inputs must come from live stages)
        for l in sorted(live, reverse=True):
            srcs = {t for t in live[l] if t.kind != "D" or t.index in live}
            if srcs != live[l]:
                live[l] = srcs
                changed = True
            if not srcs:
                del live[l]
                changed = True
        if out not in live:
            if output_fallback and live:
                out = min(live)
            else:
                live = {}
                out = None
        if not live:
            return {}, None
        # rule 3: stages nobody consumes
        consumers: Counter[int] = Counter()
        for l, srcs in live.items():
            for t in srcs:
                if t.kind == "D":
                    consumers[t.index] += 1
        for l in sorted(live):
            if l != out and consumers[l] == 0:
                del live[l]
                changed = True
        if not changed:
            break
    return {l: sorted(s, key=source_sort_key) for l, s in live.items()}, out


def gate_histogram(gm: GateMatrix, bins: int = 10) -> str:
    vals = np.array(list(gm.values.values()))
    counts, edges = np.histogram(vals, bins=bins, range=(0.0, 1.0))
    return ", ".join(f"[{edges[i]:.1f},{edges[i + 1]:.1f}):{c}" for i, c in enumerate(counts))


def prune(gm: GateMatrix, sigma: float = DEFAULT_SIGMA, encoder_spec: EncoderSpec | None = None,
          decoder_channels: int = 32, meta: dict | None = None,
          output_fallback: bool = False) -> PrunedArchitecture:
    if not 0 < sigma < 1:
        raise ValueError(f"sigma must lie in (0, 1), got {sigma}")
    num_stages = encoder_spec.num_stages if encoder_spec is not None else max(gm.stages())
    if encoder_spec is None:
        encoder_spec = EncoderSpec(tuple((1, 2 ** l) for l in range(1, num_stages + 1)), name="unspecified")
    thresholded: dict[int, list[FeatureRef]] = {}
    for (l, t), w in gm.values.items():
        if w >= sigma:
            thresholded.setdefault(l, []).append(t)
    stages, out = prune_edges(thresholded, num_stages, 1, output_fallback)
    if out is None:
        raise ArchitectureError(f"empty architecture at sigma={sigma}; gate histogram: {gate_histogram(gm)}")
    m = {"sigma": float(sigma), "seed": 0}
    m.update(meta or {})
    arch = PrunedArchitecture(encoder_spec, decoder_channels, stages, out, m)
    arch.validate()
    return arch


def instantiate(arch: PrunedArchitecture, seed: int, num_classes: int = 2, in_channels: int = 3,
                activation: str = "relu", kernel: int = 3, dtype=np.float32) -> DenseNet:
    """Sparse decoder network with plain conv branches (no gates, no branch BN)."""
    arch.validate()
    rng = np.random.default_rng(seed)
    return DenseNet(rng, arch.encoder_spec, arch.decoder_channels, num_classes, arch.stages,
                    arch.output_stage, gated=False, in_channels=in_channels, kernel=kernel,
                    activation=activation, dtype=dtype)


def full_architecture(spec: EncoderSpec, decoder_channels: int, meta: dict | None = None) -> PrunedArchitecture:
    """The unpruned FDN topology expressed as an architecture."""
    stages = {cs.stage: list(cs.sources) for cs in candidate_sets(spec.num_stages)}
    return PrunedArchitecture(spec, decoder_channels, stages, 1, dict(meta or {}))


# -- JSON import/export ----------------------------------------------------
_TOP_KEYS = ["encoder", "decoder_channels", "stages", "output_stage", "meta"]
_META_REQUIRED = {"sigma", "seed"}
_META_OPTIONAL = {"config_digest"}


def _require_keys(obj, path: str, required: list[str] | set[str], optional: set[str] = frozenset()):
    if not isinstance(obj, dict):
        raise SchemaError(path, f"expected an object, got {type(obj).__name__}")
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        raise SchemaError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    for key in required:
        if key not in obj:
            raise SchemaError(f"{path}.{key}", "missing required field")


def _int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(path, f"expected an integer, got {value!r}")
    return value


def _parse_architecture(doc) -> PrunedArchitecture:
    _require_keys(doc, "$", _TOP_KEYS)
    enc = doc["encoder"]
    _require_keys(enc, "$.encoder", ["name", "stages"])
    if not isinstance(enc["name"], str):
        raise SchemaError("$.encoder.name", "expected a string")
    if not isinstance(enc["stages"], list):
        raise SchemaError("$.encoder.stages", "expected a list")
    pairs = []
    for i, st in enumerate(enc["stages"]):
        p = f"$.encoder.stages[{i}]"
        _require_keys(st, p, ["channels", "stride"])
        pairs.append((_int(st["channels"], p + ".channels"), _int(st["stride"], p + ".stride")))
    try:
        spec = EncoderSpec(tuple(pairs), name=enc["name"])
    except ArchitectureError as exc:
        raise SchemaError("$.encoder", str(exc)) from None

    channels = _int(doc["decoder_channels"], "$.decoder_channels")
    if not isinstance(doc["stages"], list):
        raise SchemaError("$.stages", "expected a list")
    stages: dict[int, list[FeatureRef]] = {}
    for i, st in enumerate(doc["stages"]):
        p = f"$.stages[{i}]"
        _require_keys(st, p, ["l", "inputs"])
        l = _int(st["l"], p + ".l")
        if l in stages:
            raise SchemaError(p + ".l", f"duplicate stage {l}")
        if not isinstance(st["inputs"], list):
            raise SchemaError(p + ".inputs", "expected a list")
        srcs = []
        for j, inp in enumerate(st["inputs"]):
            q = f"{p}.inputs[{j}]"
            _require_keys(inp, q, ["kind", "index"])
            try:
                srcs.append(FeatureRef(inp["kind"], _int(inp["index"], q + ".index")))
            except ValueError as exc:
                if isinstance(exc, SchemaError):
                    raise
                raise SchemaError(q, str(exc)) from None
        stages[l] = srcs
    output_stage = _int(doc["output_stage"], "$.output_stage")
    meta = doc["meta"]
    _require_keys(meta, "$.meta", sorted(_META_REQUIRED), _META_OPTIONAL)
    if not isinstance(meta["sigma"], (int, float)) or isinstance(meta["sigma"], bool):
        raise SchemaError("$.meta.sigma", "expected a number")
    _int(meta["seed"], "$.meta.seed")
    arch = PrunedArchitecture(spec, channels, stages, output_stage, dict(meta))
    try:
        arch.validate()
    except ArchitectureError as exc:
        raise SchemaError("$.stages", str(exc)) from None
    return arch


def export_architecture(arch: PrunedArchitecture, path: str | Path) -> None:
    arch.validate()
    Path(path).write_text(arch.to_json())


def import_architecture(path: str | Path) -> PrunedArchitecture:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from None
    return _parse_architecture(doc)
