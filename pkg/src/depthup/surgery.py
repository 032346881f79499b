"""Model transformations: depth up-scaling, vocabulary growth, LoRA, dropping.

All operations build a new :class:`~depthup.model.Model` around the
*same* parameter tensors as their input wherever a parameter is carried
over unchanged, so a later in-place update of a base tensor is visible from
both models.  Every block and embedding part carries an origin tag, and
:class:`FreezeManifest` is derived from those tags.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from depthup.model import (
    BLOCK_KINDS,
    EBRANCHFORMER,
    PROJECTIONS,
    STANDARD,
    Block,
    Model,
    ModelConfig,
    _param_shapes,
    block_param_count,
)
from depthup.tensor import Tensor

BASE = "base"
ADDED = "added"
NEW_VOCAB = "new-vocab-row"
LORA = "lora"
ORIGINS = (BASE, ADDED, NEW_VOCAB, LORA)


class PlacementStrategy(str, enum.Enum):
    INTERLEAVED = "interleaved"
    BOTTOM = "bottom"
    MIDDLE = "middle"
    TOP = "top"
    SANDWICH = "sandwich"


class SurgeryError(ValueError):
    """A surgery precondition does not hold."""


# --------------------------------------------------------------------------
# placement
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanEntry:
    after: int  # 1-based index of the original layer the new one follows
    source: int  # 1-based index of the original layer it is copied from
    kind: str = STANDARD


@dataclass(frozen=True)
class UpscalePlan:
    n: int
    strategy: str
    entries: tuple[PlanEntry, ...]

    @property
    def m(self) -> int:
        return len(self.entries)

    @property
    def after(self) -> list[int]:
        return [e.after for e in self.entries]

    def validate(self, n: int | None = None) -> None:
        n = self.n if n is None else n
        if n != self.n:
            raise SurgeryError(f"plan was computed for n={self.n}, model has {n} layers")
        if not self.entries:
            raise SurgeryError("plan must insert at least one layer (m >= 1)")
        prev = 0
        for e in self.entries:
            if not 1 <= e.after <= n:
                raise SurgeryError(f"insert-after index {e.after} outside 1..{n}")
            if e.after < prev:
                raise SurgeryError("insert-after indices must be non-decreasing")
            if e.source != e.after:
                raise SurgeryError(f"entry copies layer {e.source} but follows layer {e.after}")
            if e.kind not in BLOCK_KINDS:
                raise SurgeryError(f"unknown layer kind {e.kind!r}")
            prev = e.after


def strategy_ranges(n: int, m: int, strategy: PlacementStrategy | str) -> list[tuple[int, int, int]]:
    """``(offset, length, count)`` triples of the contiguous layer ranges a
    strategy fills.  Raises :class:`SurgeryError` on a violated constraint."""
    strategy = PlacementStrategy(strategy)
    if not 1 <= m <= n:
        raise SurgeryError(f"need 1 <= m <= n, got m={m}, n={n}")
    if strategy is PlacementStrategy.INTERLEAVED:
        ranges = [(0, n, m)]
    elif strategy in (PlacementStrategy.BOTTOM, PlacementStrategy.TOP):
        if n % 2:
            raise SurgeryError(f"{strategy.value} needs n divisible by 2, got n={n}")
        ranges = [(0 if strategy is PlacementStrategy.BOTTOM else n // 2, n // 2, m)]
    elif strategy is PlacementStrategy.MIDDLE:
        if n % 4:
            raise SurgeryError(f"middle needs n divisible by 4, got n={n}")
        ranges = [(n // 4, n // 2, m)]
    else:
        if n % 4:
            raise SurgeryError(f"sandwich needs n divisible by 4, got n={n}")
        if m % 2:
            raise SurgeryError(f"sandwich needs even m, got m={m}")
        ranges = [(0, n // 4, m // 2), (3 * n // 4, n // 4, m // 2)]
    for offset, length, count in ranges:
        if count > length:
            raise SurgeryError(
                f"{strategy.value}: m={count} exceeds the capacity {length} of layers {offset + 1}..{offset + length}"
            )
    return ranges


def compute_placement(n: int, m: int, strategy: PlacementStrategy | str, kind: str = STANDARD) -> UpscalePlan:
    """Insert-after indices ``offset + ceil(length * k / count)``, k = 1..count,
    for each range the strategy fills."""
    if kind not in BLOCK_KINDS:
        raise SurgeryError(f"unknown layer kind {kind!r}")
    strategy = PlacementStrategy(strategy)
    entries = []
    for offset, length, count in strategy_ranges(n, m, strategy):
        for k in range(1, count + 1):
            after = offset + -(-length * k // count)
            entries.append(PlanEntry(after, after, kind))
    plan = UpscalePlan(n, strategy.value, tuple(entries))
    plan.validate()
    return plan


# --------------------------------------------------------------------------
# freeze manifest
# --------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    origin: str
    trainable: bool
    numel: int


@dataclass
class FreezeManifest:
    """Parameter name -> (origin, trainable, element count)."""

    entries: dict[str, ManifestEntry] = field(default_factory=dict)
    full_finetune: bool = False

    def trainable_names(self) -> list[str]:
        return [k for k, e in self.entries.items() if e.trainable]

    def origin(self, name: str) -> str:
        return self.entries[name].origin

    def to_dict(self) -> dict:
        return {
            "full_finetune": self.full_finetune,
            "parameters": {
                k: {"origin": e.origin, "trainable": e.trainable, "numel": e.numel} for k, e in self.entries.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FreezeManifest":
        entries = {k: ManifestEntry(v["origin"], bool(v["trainable"]), int(v["numel"])) for k, v in d["parameters"].items()}
        return cls(entries, bool(d.get("full_finetune", False)))

    def validate(self) -> None:
        for name, e in self.entries.items():
            if e.origin not in ORIGINS:
                raise SurgeryError(f"{name}: unknown origin {e.origin!r}")
            if not self.full_finetune and e.trainable != (e.origin != BASE):
                raise SurgeryError(f"{name}: trainable flag disagrees with origin {e.origin!r}")


def parameter_origins(model: Model) -> dict[str, str]:
    origins = {"embed.text": BASE, "final_norm": BASE}
    if model.embed_speech is not None:
        origins["embed.speech"] = NEW_VOCAB
    for i, layer in enumerate(model.layers):
        layer_origin = layer.origin
        for name in layer.params:
            origins[f"layers.{i}.{name}"] = layer_origin
        for name in layer.lora:
            origins[f"layers.{i}.{name}.lora_a"] = LORA
            origins[f"layers.{i}.{name}.lora_b"] = LORA
    return origins


def manifest_for(model: Model, full_finetune: bool = False) -> FreezeManifest:
    """Derive the freeze manifest from the model's origin tags.

    With ``full_finetune`` every parameter is trainable regardless of origin.
    """
    named = model.named_parameters()
    origins = parameter_origins(model)
    entries = {
        name: ManifestEntry(origins[name], full_finetune or origins[name] != BASE, t.size) for name, t in named.items()
    }
    return FreezeManifest(entries, full_finetune)


def count_trainable(manifest: FreezeManifest) -> int:
    return sum(e.numel for e in manifest.entries.values() if e.trainable)


def count_total(manifest: FreezeManifest) -> int:
    return sum(e.numel for e in manifest.entries.values())


# --------------------------------------------------------------------------
# depth up-scaling
# --------------------------------------------------------------------------


def _copy(t: Tensor) -> Tensor:
    return Tensor(t.data.copy())


def init_added_block(source: Block, cfg: ModelConfig, kind: str, rng: np.random.Generator) -> Block:
    """Copy ``source`` and make the copy an identity map.

    Standard kind: output projections of attention and FFN are zeroed.
    E-Branchformer kind: attention and FFN come from ``source`` with the same
    zeroing; the cgMLP is fresh; the merge conv's pointwise projection is
    zero and the merge projection is ``[I; 0]``.
    """
    if source.kind != STANDARD:
        raise SurgeryError("added layers can only be copied from standard base layers")
    if source.lora:
        raise SurgeryError("cannot copy a layer that carries LoRA adapters")
    params = {name: _copy(t) for name, t in source.params.items()}
    params["wo"].data[...] = 0.0
    params["w_down"].data[...] = 0.0
    if kind == EBRANCHFORMER:
        fresh = Block.init(cfg, EBRANCHFORMER, rng)
        for name in ("cg_up", "cg_norm", "cg_conv", "cg_down", "merge_conv"):
            params[name] = fresh.params[name]
        d = cfg.d_model
        params["merge_conv_proj"] = Tensor(np.zeros((2 * d, 2 * d), np.float32))
        w_merge = np.zeros((2 * d, d), np.float32)
        w_merge[:d] = np.eye(d, dtype=np.float32)
        params["w_merge"] = Tensor(w_merge)
        expected = _param_shapes(cfg, EBRANCHFORMER)
        assert {k: v.shape for k, v in params.items()} == expected
    return Block(kind, params, origin=ADDED)


def upscale(base: Model, plan: UpscalePlan, seed: int = 0) -> tuple[Model, FreezeManifest]:
    """Insert the plan's layers into ``base``; base tensors are shared, not copied."""
    base_layers = [layer for layer in base.layers if layer.origin == BASE]
    if len(base_layers) != len(base.layers):
        raise SurgeryError("model already contains added layers; drop them before up-scaling again")
    plan.validate(len(base.layers))
    if any(layer.lora for layer in base.layers):
        raise SurgeryError("cannot up-scale a model carrying LoRA adapters")
    rng = np.random.default_rng(seed)
    layers: list[Block] = []
    pending = list(plan.entries)
    for i, layer in enumerate(base.layers, start=1):
        layers.append(layer)
        while pending and pending[0].after == i:
            entry = pending.pop(0)
            layers.append(init_added_block(base.layers[entry.source - 1], base.config, entry.kind, rng))
    model = base.with_layers(layers)
    return model, manifest_for(model)


def drop_added_layers(model: Model, manifest: FreezeManifest) -> Model:
    """Remove every added layer and LoRA adapter, keeping base layers in order.

    Speech embedding rows are kept; text-only evaluation ignores their columns.
    """
    named = model.named_parameters()
    if set(named) != set(manifest.entries):
        missing = sorted(set(named) ^ set(manifest.entries))[:5]
        raise SurgeryError(f"manifest does not match model parameters (e.g. {missing})")
    kept = []
    for i, layer in enumerate(model.layers):
        origins = {manifest.origin(f"layers.{i}.{name}") for name in layer.params}
        if len(origins) != 1:
            raise SurgeryError(f"layer {i} mixes origins {sorted(origins)}")
        origin = origins.pop()
        if origin != layer.origin:
            raise SurgeryError(f"layer {i}: manifest says {origin!r}, model says {layer.origin!r}")
        if origin == BASE:
            if layer.lora:
                layer = Block(layer.kind, layer.params)
            kept.append(layer)
        elif origin != ADDED:
            raise SurgeryError(f"layer {i} has unexpected origin {origin!r}")
    if not kept:
        raise SurgeryError("no base layers left after dropping")
    return model.with_layers(kept)


# --------------------------------------------------------------------------
# vocabulary expansion
# --------------------------------------------------------------------------


def expand_vocabulary(model: Model, v_new: int, seed: int = 0) -> tuple[Model, FreezeManifest]:
    """Append ``v_new`` trainable rows to the tied embedding.

    New rows are drawn from a normal with the standard deviation of the
    frozen text rows.
    """
    if v_new < 1:
        raise SurgeryError(f"v_new must be >= 1, got {v_new}")
    rng = np.random.default_rng(seed)
    std = float(model.embed_text.data.std())
    rows = (rng.standard_normal((v_new, model.config.d_model)) * std).astype(np.float32)
    if model.embed_speech is not None:
        rows = np.concatenate([model.embed_speech.data, rows], axis=0)
    cfg = model.config
    new_cfg = replace(cfg, vocab_speech=cfg.vocab_speech + v_new)
    grown = Model(new_cfg, model.embed_text, Tensor(rows), model.final_norm, list(model.layers))
    return grown, manifest_for(grown)


# --------------------------------------------------------------------------
# LoRA
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LoRAConfig:
    rank: int
    alpha: float | None = None  # defaults to 2 * rank
    targets: tuple[str, ...] = PROJECTIONS

    def __post_init__(self):
        if self.rank < 1:
            raise SurgeryError(f"LoRA rank must be >= 1, got {self.rank}")
        if not self.targets:
            raise SurgeryError("LoRA target set is empty")
        unknown = set(self.targets) - set(PROJECTIONS)
        if unknown:
            raise SurgeryError(f"unknown LoRA targets {sorted(unknown)}")

    @property
    def scaling(self) -> float:
        alpha = 2.0 * self.rank if self.alpha is None else self.alpha
        return alpha / self.rank


def apply_lora(base: Model, cfg: LoRAConfig, seed: int = 0) -> tuple[Model, FreezeManifest]:
    """Wrap each targeted projection of every base layer with ``W + s * A @ B``.

    ``A`` is random with scale ``1/sqrt(fan_in)`` and ``B`` is zero, so the
    adapted model computes exactly what the base model does.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for layer in base.layers:
        if layer.origin != BASE:
            raise SurgeryError("LoRA is applied to base models without added layers")
        if layer.lora:
            raise SurgeryError("model already carries LoRA adapters")
        wrapped = Block(layer.kind, layer.params, lora_scale=cfg.scaling)
        for name in cfg.targets:
            fan_in, fan_out = layer.params[name].shape
            a = rng.standard_normal((fan_in, cfg.rank)) / math.sqrt(fan_in)
            wrapped.lora[name] = (Tensor(a.astype(np.float32)), Tensor(np.zeros((cfg.rank, fan_out), np.float32)))
        layers.append(wrapped)
    model = base.with_layers(layers)
    return model, manifest_for(model)


# --------------------------------------------------------------------------
# analytic parameter counts
# --------------------------------------------------------------------------


def depth_trainable_count(cfg: ModelConfig, m: int, kind: str, v_new: int = 0) -> int:
    """Trainable scalars after adding ``m`` layers of ``kind`` and ``v_new`` tied rows."""
    return m * block_param_count(cfg, kind) + v_new * cfg.d_model


def lora_trainable_count(cfg: ModelConfig, rank: int, targets=PROJECTIONS, v_new: int = 0) -> int:
    shapes = _param_shapes(cfg, STANDARD)
    per_rank = sum(shapes[t][0] + shapes[t][1] for t in targets)
    return cfg.n_layers * rank * per_rank + v_new * cfg.d_model


def match_lora_rank(cfg: ModelConfig, target: int, targets=PROJECTIONS, v_new: int = 0) -> int:
    """Rank whose LoRA trainable count is closest to ``target``."""
    per_rank = lora_trainable_count(cfg, 1, targets, 0)
    adapters = target - v_new * cfg.d_model
    lo = max(1, adapters // per_rank)
    candidates = (lo, lo + 1)
    return min(candidates, key=lambda r: abs(lora_trainable_count(cfg, r, targets, v_new) - target))
