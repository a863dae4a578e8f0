"""Random refinement rules and the synthetic refinement-pair corpus."""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .dsl import (
    CNN_RANGES,
    DEFAULT_D_MODEL,
    DEFAULT_INPUT_SHAPE,
    DEFAULT_NUM_CLASSES,
    TRANSFORMER_RANGES,
    CnnSpec,
    ModelSpec,
    SpecSemanticError,
    TransformerSpec,
    design_params,
    render,
)

FAMILIES = ("transformer", "cnn")
TRANSFORMER_TARGETS = ("enc", "dec", "heads", "d_ff")
CNN_TARGETS = ("c", "n", "h", "s")
MAX_SCALE_PERCENT = 50
MAX_MUTATION_DRAWS = 10_000


@dataclass(frozen=True)
class RefinementRule:
    """One design-parameter edit.

    ``percent`` is set only for ``scale`` actions and is signed: +30 means
    the feed-forward width grew by 30%.
    """

    target: str
    action: str  # increment | decrement | scale
    percent: Optional[int] = None

    def to_dict(self) -> dict:
        out = {"target": self.target, "action": self.action}
        if self.percent is not None:
            out["percent"] = self.percent
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RefinementRule":
        return cls(d["target"], d["action"], d.get("percent"))


@dataclass(frozen=True)
class RefinementPair:
    input_text: str
    output_text: str
    rule: RefinementRule

    def to_json(self) -> str:
        record = {"input": self.input_text, "output": self.output_text, "rule": self.rule.to_dict()}
        return json.dumps(record, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "RefinementPair":
        d = json.loads(line)
        return cls(d["input"], d["output"], RefinementRule.from_dict(d["rule"]))


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def head_choices(d_model: int, lo: int = 1, hi: int = 16) -> list[int]:
    return [h for h in range(lo, hi + 1) if d_model % h == 0]


def sample_spec(
    family: str,
    rng_seed=None,
    *,
    d_model: int = DEFAULT_D_MODEL,
    input_shape: tuple[int, int, int] = DEFAULT_INPUT_SHAPE,
    num_classes: int = DEFAULT_NUM_CLASSES,
) -> ModelSpec:
    """Draw every design parameter uniformly from its inclusive range."""
    rng = as_rng(rng_seed)
    if family == "transformer":
        r = TRANSFORMER_RANGES
        heads = head_choices(d_model, *r["heads"])
        return TransformerSpec(
            num_encoder_layers=int(rng.integers(r["enc"][0], r["enc"][1] + 1)),
            num_decoder_layers=int(rng.integers(r["dec"][0], r["dec"][1] + 1)),
            d_ff=int(rng.integers(r["d_ff"][0], r["d_ff"][1] + 1)),
            num_heads=int(heads[rng.integers(len(heads))]),
            d_model=d_model,
        )
    if family == "cnn":
        r = CNN_RANGES
        # small inputs cannot host deep conv stacks; redraw those
        while True:
            n = int(rng.integers(r["n"][0], r["n"][1] + 1))
            c = int(rng.integers(r["c"][0], r["c"][1] + 1))
            h = int(rng.integers(r["h"][0], r["h"][1] + 1))
            s = int(rng.integers(r["s"][0], r["s"][1] + 1))
            spec = CnnSpec((h,) * c, (s,) * n, tuple(input_shape), num_classes, c > 0)
            try:
                spec.feature_shape()
            except SpecSemanticError:
                continue
            return spec
    raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")


def scale_width(d_ff: int, percent: int) -> int:
    """Floor of ``d_ff * (1 + percent/100)`` in exact integer arithmetic."""
    return d_ff * (100 + percent) // 100


def apply_rule(spec: ModelSpec, rule: RefinementRule) -> ModelSpec:
    """Apply ``rule``; raises SpecSemanticError if the result is not a valid spec."""
    step = {"increment": 1, "decrement": -1}.get(rule.action)
    if isinstance(spec, TransformerSpec):
        if rule.target == "d_ff":
            if rule.action != "scale":
                raise ValueError("d_ff only supports the scale action")
            return replace(spec, d_ff=scale_width(spec.d_ff, rule.percent))
        if step is None:
            raise ValueError(f"{rule.target} only supports increment/decrement")
        field_name = {"enc": "num_encoder_layers", "dec": "num_decoder_layers", "heads": "num_heads"}[rule.target]
        return replace(spec, **{field_name: getattr(spec, field_name) + step})

    if step is None:
        raise ValueError("CNN parameters only support increment/decrement")
    if rule.target == "c":
        if step > 0:
            new_channels = spec.conv_channels[-1] if spec.conv_channels else CNN_RANGES["h"][0]
            convs = spec.conv_channels + (new_channels,)
        else:
            if not spec.conv_channels:
                raise SpecSemanticError("no conv layer to remove")
            convs = spec.conv_channels[:-1]
        out = replace(spec, conv_channels=convs, pool_after_convs=len(convs) > 0)
    elif rule.target == "n":
        if step > 0:
            hidden = spec.hidden_sizes + (spec.hidden_sizes[-1],)
        else:
            hidden = spec.hidden_sizes[:-1]
        if not hidden:
            raise SpecSemanticError("a CNN needs at least one hidden layer")
        out = replace(spec, hidden_sizes=hidden)
    elif rule.target == "h":
        if not spec.conv_channels:
            raise SpecSemanticError("no conv layers to resize")
        out = replace(spec, conv_channels=tuple(v + step for v in spec.conv_channels))
    elif rule.target == "s":
        out = replace(spec, hidden_sizes=tuple(v + step for v in spec.hidden_sizes))
    else:
        raise ValueError(f"unknown CNN target {rule.target!r}")
    out.feature_shape()
    return out


def _target_in_range(spec: ModelSpec, target: str) -> bool:
    if isinstance(spec, TransformerSpec):
        lo, hi = TRANSFORMER_RANGES[target]
        return lo <= design_params(spec)[target] <= hi
    lo, hi = CNN_RANGES[target]
    if target == "c":
        return lo <= spec.num_conv_layers <= hi
    if target == "n":
        return lo <= spec.num_hidden_layers <= hi
    values = spec.conv_channels if target == "h" else spec.hidden_sizes
    return all(lo <= v <= hi for v in values)


def draw_rule(spec: ModelSpec, rng: np.random.Generator) -> RefinementRule:
    """One unconditioned draw: a target uniformly, then an action uniformly."""
    targets = TRANSFORMER_TARGETS if isinstance(spec, TransformerSpec) else CNN_TARGETS
    target = targets[rng.integers(len(targets))]
    if target == "d_ff":
        sign = 1 if rng.integers(2) else -1
        return RefinementRule("d_ff", "scale", sign * int(rng.integers(1, MAX_SCALE_PERCENT + 1)))
    return RefinementRule(target, "increment" if rng.integers(2) else "decrement")


def try_rule(spec: ModelSpec, rule: RefinementRule) -> Optional[ModelSpec]:
    """Result of ``rule`` if it is a legal one-parameter change, else None."""
    try:
        out = apply_rule(spec, rule)
    except SpecSemanticError:
        return None
    if out == spec or not _target_in_range(out, rule.target):
        return None
    return out


def mutate(spec: ModelSpec, rng_seed=None) -> tuple[ModelSpec, RefinementRule]:
    """Change exactly one design parameter, redrawing illegal edits."""
    rng = as_rng(rng_seed)
    for _ in range(MAX_MUTATION_DRAWS):
        rule = draw_rule(spec, rng)
        out = try_rule(spec, rule)
        if out is not None:
            return out, rule
    raise ValueError("no legal mutation found; spec is outside the generator ranges")


def pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_dataset(family: str, count: int, rng_seed: int = 0, *, start: int = 0, **spec_kwargs) -> Iterator[RefinementPair]:
    """Yield ``count`` pairs ``(render(s), render(mutate(s)))``.

    Pair ``i`` depends only on ``(rng_seed, i)``, so shards generated with
    different ``start`` offsets concatenate to the same corpus.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    for i in range(start, start + count):
        rng = pair_rng(rng_seed, i)
        spec = sample_spec(family, rng, **spec_kwargs)
        refined, rule = mutate(spec, rng)
        yield RefinementPair(render(spec), render(refined), rule)


def write_dataset(pairs: Iterable[RefinementPair], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for pair in pairs:
            f.write(pair.to_json())
            f.write("\n")
            n += 1
    return n


def read_dataset(path, limit: Optional[int] = None) -> list[RefinementPair]:
    out = []
    with open(Path(path), encoding="utf-8") as f:
        for line in f:
            if limit is not None and len(out) >= limit:
                break
            if line.strip():
                out.append(RefinementPair.from_json(line))
    return out
