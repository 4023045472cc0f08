"""Port a discovered decoder connectivity onto a different encoder.

Features are matched by resolution (stride to the input). A source stage maps
to the target stage with the same stride, preferring the deepest target stage
when several share it. Decoder stages without a counterpart are dropped.
When several source stages land on the same target stage their input lists
are merged; inputs that would feed a stage from itself are discarded.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ArchitectureError
from .pruner import PrunedArchitecture, prune_edges
from .searchspace import G, EncoderSpec, FeatureRef


@dataclass
class TransferResult:
    arch: PrunedArchitecture
    stage_map: dict[int, int | None]  # source stage -> target stage (None = dropped)
    decoder_map: dict[int, int | None]  # kept source decoder stage -> target stage (None = dropped)


def stage_mapping(source: EncoderSpec, target: EncoderSpec) -> dict[int, int | None]:
    """For each source stage, the deepest target stage with equal stride, or ``None``.

    Identical stage lists map index to index, so repeated strides are not merged.
    """
    if source.stages == target.stages:
        return {i: i for i in range(1, source.num_stages + 1)}
    deepest: dict[int, int] = {}
    for j in range(1, target.num_stages + 1):
        deepest[target.stride(j)] = j
    return {i: deepest.get(source.stride(i)) for i in range(1, source.num_stages + 1)}


def _map_ref(ref: FeatureRef, mapping: dict[int, int | None]) -> FeatureRef | None:
    if ref.kind == "G":
        return G
    j = mapping.get(ref.index)
    return None if j is None else FeatureRef(ref.kind, j)


def transfer_connectivity(arch: PrunedArchitecture, target: EncoderSpec) -> TransferResult:
    arch.validate()
    target.validate()
    mapping = stage_mapping(arch.encoder_spec, target)
    if all(j is None for j in mapping.values()):
        raise ArchitectureError(
            f"no stage of {arch.encoder_spec.name!r} matches a stride of {target.name!r}")

    edges: dict[int, set[FeatureRef]] = {}
    for l, srcs in arch.stages.items():
        j = mapping[l]
        if j is None:
            continue
        bucket = edges.setdefault(j, set())
        for t in srcs:
            mt = _map_ref(t, mapping)
            if mt is None or (mt.kind == "D" and mt.index <= j):
                continue
            bucket.add(mt)

    out = mapping[arch.output_stage] or 1
    stages, out = prune_edges({j: sorted(s) for j, s in edges.items()}, target.num_stages, out,
                              output_fallback=True)
    if out is None:
        raise ArchitectureError(f"transfer to {target.name!r} leaves an empty architecture")
    meta = dict(arch.meta)
    result = PrunedArchitecture(target, arch.decoder_channels, stages, out, meta)
    result.validate()
    decoder_map = {l: (mapping[l] if mapping[l] in stages else None) for l in arch.kept_stages}
    return TransferResult(result, mapping, decoder_map)
