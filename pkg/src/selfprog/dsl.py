"""Source-spec language for the two model families.

Two families are understood:

* transformer configs, written as line-oriented ``config.<key> = <int>``
  assignments between a ``from_pretrained`` header and a model line, and
* CNN classifiers, written as an ordered list of layer declarations
  (``Conv2d(...)``, ``MaxPool2d(...)``, ``Linear(...)``, ``ReLU()``).

Both families also have a one-line *compact* surface form (``e2 d2 h8 f1024``,
``c2 h16 n1 s64``) used by the character-level refiner.  ``parse`` accepts
every form; ``render`` always produces the canonical multi-line text.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Union

DEFAULT_D_MODEL = 128
FULL_D_MODEL = 512
DEFAULT_NUM_HEADS = 8
DEFAULT_INPUT_SHAPE = (28, 28, 1)
DEFAULT_NUM_CLASSES = 10
KERNEL_SIZE = 3
MAX_COMPACT_LAYERS = 64

# generator ranges, inclusive
TRANSFORMER_RANGES = {
    "enc": (1, 8),
    "dec": (1, 8),
    "d_ff": (64, 4096),
    "heads": (1, 16),
}
CNN_RANGES = {
    "c": (0, 8),
    "n": (1, 8),
    "h": (16, 512),
    "s": (16, 1024),
}

TRANSFORMER_HEADER = (
    'config = transformers.PretrainedConfig.from_pretrained("Salesforce/codet5-small")'
)
TRANSFORMER_FOOTER = "model = transformers.T5ForConditionalGeneration(config)"


class DSLError(ValueError):
    """Base class for parse failures; carries a 1-based line/column."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.message = message
        self.line = line
        self.column = column
        loc = f"line {line}, col {column}: " if line else ""
        super().__init__(loc + message)


class SpecSyntaxError(DSLError):
    pass


class SpecSemanticError(DSLError):
    pass


class UnknownKeyError(DSLError):
    pass


@dataclass(frozen=True)
class TransformerSpec:
    num_encoder_layers: int
    num_decoder_layers: int
    d_ff: int
    num_heads: int = DEFAULT_NUM_HEADS
    d_model: int = DEFAULT_D_MODEL

    def __post_init__(self):
        for name in ("num_encoder_layers", "num_decoder_layers", "d_ff", "num_heads", "d_model"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise SpecSemanticError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.num_heads:
            raise SpecSemanticError(
                f"num_heads={self.num_heads} does not divide d_model={self.d_model}"
            )

    @property
    def family(self) -> str:
        return "transformer"

    @property
    def d_kv(self) -> int:
        return self.d_model // self.num_heads

    def range_violations(self) -> list[str]:
        return _range_violations(design_params(self), TRANSFORMER_RANGES)


@dataclass(frozen=True)
class CnnSpec:
    conv_channels: tuple[int, ...] = ()
    hidden_sizes: tuple[int, ...] = (16,)
    input_shape: tuple[int, int, int] = DEFAULT_INPUT_SHAPE
    num_classes: int = DEFAULT_NUM_CLASSES
    pool_after_convs: bool = False

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if not self.hidden_sizes:
            raise SpecSemanticError("a CNN needs at least one hidden linear layer")
        for v in self.conv_channels + self.hidden_sizes + self.input_shape:
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise SpecSemanticError(f"layer dimensions must be positive integers, got {v!r}")
        if len(self.input_shape) != 3:
            raise SpecSemanticError("input_shape must be (height, width, channels)")
        if self.num_classes < 1:
            raise SpecSemanticError("num_classes must be positive")

    @property
    def family(self) -> str:
        return "cnn"

    @property
    def num_conv_layers(self) -> int:
        return len(self.conv_channels)

    @property
    def num_hidden_layers(self) -> int:
        return len(self.hidden_sizes)

    @property
    def is_uniform(self) -> bool:
        return len(set(self.conv_channels)) <= 1 and len(set(self.hidden_sizes)) == 1

    def feature_shape(self) -> tuple[int, int, int]:
        """(channels, height, width) reaching the flatten step.

        Raises SpecSemanticError when the conv/pool stack exhausts the
        spatial dims.
        """
        height, width, channels = self.input_shape
        for out_channels in self.conv_channels:
            height, width = height - KERNEL_SIZE + 1, width - KERNEL_SIZE + 1
            if height < 1 or width < 1:
                raise SpecSemanticError("conv stack reduces spatial dims below 1")
            channels = out_channels
        if self.pool_after_convs:
            height, width = height // 2, width // 2
            if height < 1 or width < 1:
                raise SpecSemanticError("pooling reduces spatial dims below 1")
        return channels, height, width

    def flatten_size(self) -> int:
        return math.prod(self.feature_shape())

    def range_violations(self) -> list[str]:
        params = design_params(self)
        out = _range_violations({k: params[k] for k in ("c", "n")}, CNN_RANGES)
        for name, values in (("h", self.conv_channels), ("s", self.hidden_sizes)):
            lo, hi = CNN_RANGES[name]
            out += [f"{name}={v} outside [{lo}, {hi}]" for v in values if not lo <= v <= hi]
        return out


ModelSpec = Union[TransformerSpec, CnnSpec]


def _range_violations(params: dict, ranges: dict) -> list[str]:
    return [
        f"{k}={params[k]} outside [{lo}, {hi}]"
        for k, (lo, hi) in ranges.items()
        if k in params and not lo <= params[k] <= hi
    ]


def design_params(spec: ModelSpec) -> dict[str, float]:
    """Scalar architecture knobs tracked by the search.

    CNNs report ``h`` (mean conv channels) only when there is at least one
    conv layer.
    """
    if isinstance(spec, TransformerSpec):
        return {
            "enc": spec.num_encoder_layers,
            "dec": spec.num_decoder_layers,
            "heads": spec.num_heads,
            "d_ff": spec.d_ff,
        }
    out: dict[str, float] = {"c": spec.num_conv_layers, "n": spec.num_hidden_layers}
    if spec.conv_channels:
        out["h"] = _mean(spec.conv_channels)
    out["s"] = _mean(spec.hidden_sizes)
    return out


def _mean(values) -> float:
    m = sum(values) / len(values)
    return int(m) if m == int(m) else m


def changed_params(a: ModelSpec, b: ModelSpec) -> list[str]:
    """Design-parameter keys whose values differ, over the keys both specs define."""
    pa, pb = design_params(a), design_params(b)
    return [k for k in pa if k in pb and pa[k] != pb[k]]


# --------------------------------------------------------------------------
# rendering

def render(spec: ModelSpec) -> str:
    if isinstance(spec, TransformerSpec):
        lines = [
            TRANSFORMER_HEADER,
            f"config.num_layers = {spec.num_encoder_layers}",
            f"config.num_decoder_layers = {spec.num_decoder_layers}",
            f"config.d_ff = {spec.d_ff}",
            f"config.num_heads = {spec.num_heads}",
            f"config.d_model = {spec.d_model}",
            f"config.d_kv = {spec.d_kv}",
            TRANSFORMER_FOOTER,
        ]
        return "\n".join(lines) + "\n"
    return "\n".join(cnn_layer_lines(spec, with_input=True)) + "\n"


def cnn_layer_lines(spec: CnnSpec, with_input: bool = False) -> list[str]:
    height, width, channels = spec.input_shape
    lines = [f"Input(shape=({height}, {width}, {channels}))"] if with_input else []
    for out_channels in spec.conv_channels:
        lines.append(
            f"Conv2d({channels}, {out_channels}, kernel=({KERNEL_SIZE}, {KERNEL_SIZE}), stride=(1, 1))"
        )
        channels = out_channels
    if spec.pool_after_convs:
        lines.append("MaxPool2d(kernel=2, stride=2, padding=0, dilation=1)")
    fan_in = spec.flatten_size()
    for size in spec.hidden_sizes:
        lines.append(f"Linear(in={fan_in}, out={size}, bias=True)")
        lines.append("ReLU()")
        fan_in = size
    lines.append(f"Linear(in={fan_in}, out={spec.num_classes}, bias=True)")
    return lines


def render_compact(spec: ModelSpec) -> str:
    """One-line form; CNNs must have uniform layer widths."""
    if isinstance(spec, TransformerSpec):
        return (
            f"e{spec.num_encoder_layers} d{spec.num_decoder_layers} "
            f"h{spec.num_heads} f{spec.d_ff}"
        )
    if not spec.is_uniform:
        raise ValueError("compact form needs uniform conv and hidden widths")
    parts = [f"c{spec.num_conv_layers}"]
    if spec.conv_channels:
        parts.append(f"h{spec.conv_channels[0]}")
    parts += [f"n{spec.num_hidden_layers}", f"s{spec.hidden_sizes[0]}"]
    return " ".join(parts)


# --------------------------------------------------------------------------
# parsing

_COMMENT = re.compile(r"#.*$")
_INT = r"[-+]?\d+"
_ASSIGN = re.compile(r"^config\.([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")
_HEADER = re.compile(r'^config\s*=\s*transformers\.PretrainedConfig\.from_pretrained\(\s*"[^"\n]*"\s*\)$')
_FOOTER = re.compile(r"^model\s*=\s*transformers\.T5ForConditionalGeneration\(\s*config\s*\)$")
_INPUT = re.compile(rf"^Input\(shape=\(\s*({_INT})\s*,\s*({_INT})\s*,\s*({_INT})\s*\)\)$")
_CONV = re.compile(
    rf"^Conv2d\(\s*({_INT})\s*,\s*({_INT})\s*,\s*kernel=\(\s*3\s*,\s*3\s*\)\s*,\s*stride=\(\s*1\s*,\s*1\s*\)\s*\)$"
)
_POOL = re.compile(r"^MaxPool2d\(\s*kernel=2\s*,\s*stride=2\s*,\s*padding=0\s*,\s*dilation=1\s*\)$")
_LINEAR = re.compile(rf"^Linear\(\s*in=({_INT})\s*,\s*out=({_INT})\s*,\s*bias=True\s*\)$")
_RELU = re.compile(r"^ReLU\(\)$")
_COMPACT_TOKEN = re.compile(r"^([a-z])(\d+)$")

_TRANSFORMER_KEYS = {
    "num_layers": "num_encoder_layers",
    "num_decoder_layers": "num_decoder_layers",
    "d_ff": "d_ff",
    "num_heads": "num_heads",
    "d_model": "d_model",
    "d_kv": "d_kv",
}
_COMPACT_TRANSFORMER = {"e": "num_encoder_layers", "d": "num_decoder_layers", "h": "num_heads", "f": "d_ff"}
_COMPACT_CNN = {"c", "h", "n", "s"}


def parse(
    text: str,
    *,
    d_model: int = DEFAULT_D_MODEL,
    input_shape: tuple[int, int, int] = DEFAULT_INPUT_SHAPE,
    num_classes: int = DEFAULT_NUM_CLASSES,
) -> ModelSpec:
    """Parse any surface form into a spec.

    Keyword arguments supply context the text may omit: ``d_model`` for
    transformer text without a ``d_model`` line, and the input shape /
    class count for compact CNN text or layer lists without ``Input``.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    if not isinstance(text, str):
        raise SpecSyntaxError(f"expected text, got {type(text).__name__}")
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = _COMMENT.sub("", raw).strip()
        if stripped:
            lines.append((lineno, raw, stripped))
    if not lines:
        raise SpecSyntaxError("empty source", 1, 1)

    first = lines[0][2]
    if len(lines) == 1 and _COMPACT_TOKEN.match(first.split(" ")[0]):
        return _parse_compact(lines[0], d_model, input_shape, num_classes)
    if first.startswith("config") or first.startswith("model"):
        return _parse_transformer(lines, d_model)
    return _parse_cnn(lines, input_shape)


def _col(raw: str) -> int:
    return len(raw) - len(raw.lstrip()) + 1


def _to_int(token: str, lineno: int, raw: str) -> int:
    if not re.fullmatch(_INT, token):
        raise SpecSyntaxError(f"expected an integer literal, got {token!r}", lineno, _col(raw))
    return int(token)


def _parse_transformer(lines, default_d_model: int) -> TransformerSpec:
    values: dict[str, int] = {}
    seen_header = seen_footer = False
    for lineno, raw, line in lines:
        if seen_footer:
            raise SpecSyntaxError("statement after model construction", lineno, _col(raw))
        if _HEADER.match(line):
            if seen_header or values:
                raise SpecSyntaxError("config header must come first and only once", lineno, _col(raw))
            seen_header = True
            continue
        if _FOOTER.match(line):
            seen_footer = True
            continue
        m = _ASSIGN.match(line)
        if not m:
            raise SpecSyntaxError(f"unparseable line {line!r}", lineno, _col(raw))
        key, rhs = m.groups()
        if key not in _TRANSFORMER_KEYS:
            raise UnknownKeyError(f"unknown config key {key!r}", lineno, _col(raw) + len("config."))
        field_name = _TRANSFORMER_KEYS[key]
        if field_name in values:
            raise SpecSemanticError(f"duplicate assignment to {key}", lineno, _col(raw))
        value = _to_int(rhs, lineno, raw)
        if value < 1:
            raise SpecSemanticError(f"{key} must be positive, got {value}", lineno, _col(raw))
        values[field_name] = value

    for required in ("num_encoder_layers", "num_decoder_layers", "d_ff"):
        if required not in values:
            key = next(k for k, v in _TRANSFORMER_KEYS.items() if v == required)
            raise SpecSemanticError(f"missing required key {key}")
    d_kv = values.pop("d_kv", None)
    values.setdefault("d_model", default_d_model)
    values.setdefault("num_heads", DEFAULT_NUM_HEADS)
    spec = TransformerSpec(**values)
    if d_kv is not None and d_kv != spec.d_kv:
        raise SpecSemanticError(
            f"d_kv={d_kv} inconsistent with d_model/num_heads={spec.d_kv}"
        )
    return spec


def _parse_cnn(lines, default_input_shape) -> CnnSpec:
    input_shape = tuple(default_input_shape)
    convs: list[int] = []
    hidden: list[int] = []
    pool = False
    # stage: 0 input, 1 convs, 2 pooled, 3 expecting ReLU, 4 after ReLU, 5 done
    stage = 0
    channels = None
    linears: list[tuple[int, int, int, str]] = []
    for idx, (lineno, raw, line) in enumerate(lines):
        col = _col(raw)
        if stage == 5:
            raise SpecSyntaxError("layer after the output layer", lineno, col)
        m = _INPUT.match(line)
        if m:
            if idx != 0:
                raise SpecSyntaxError("Input must be the first declaration", lineno, col)
            input_shape = tuple(int(g) for g in m.groups())
            if min(input_shape) < 1:
                raise SpecSemanticError("input dims must be positive", lineno, col)
            continue
        if channels is None:
            channels = input_shape[2]
        m = _CONV.match(line)
        if m:
            if stage > 1:
                raise SpecSyntaxError("Conv2d must precede pooling and linear layers", lineno, col)
            c_in, c_out = int(m.group(1)), int(m.group(2))
            if c_out < 1:
                raise SpecSemanticError("conv channels must be positive", lineno, col)
            if c_in != channels:
                raise SpecSemanticError(
                    f"Conv2d expects {channels} input channels, declared {c_in}", lineno, col
                )
            convs.append(c_out)
            channels = c_out
            stage = 1
            continue
        if _POOL.match(line):
            if stage > 1:
                raise SpecSyntaxError("MaxPool2d must directly follow the conv stack", lineno, col)
            pool = True
            stage = 2
            continue
        m = _LINEAR.match(line)
        if m:
            if stage == 3:
                raise SpecSyntaxError("expected ReLU() between linear layers", lineno, col)
            fan_in, fan_out = int(m.group(1)), int(m.group(2))
            if fan_out < 1 or fan_in < 1:
                raise SpecSemanticError("linear dims must be positive", lineno, col)
            linears.append((lineno, fan_in, fan_out, raw))
            stage = 3
            continue
        if _RELU.match(line):
            if stage != 3:
                raise SpecSyntaxError("ReLU() must follow a Linear layer", lineno, col)
            stage = 4
            continue
        head = line.split("(")[0]
        if head in {"Conv2d", "MaxPool2d", "Linear", "ReLU", "Input"}:
            raise SpecSyntaxError(f"malformed {head} declaration", lineno, col)
        raise SpecSyntaxError(f"unknown layer declaration {line!r}", lineno, col)

    if stage != 3:
        raise SpecSyntaxError("a CNN must end with a Linear output layer")
    if len(linears) < 2:
        raise SpecSemanticError("a CNN needs at least one hidden Linear+ReLU before the output")
    # the flatten fan-in is derived by shape propagation, later fan-ins must chain
    for (_, _, prev_out, _), (lineno, fan_in, _, raw) in zip(linears, linears[1:]):
        if fan_in != prev_out:
            raise SpecSemanticError(
                f"Linear expects in={prev_out}, declared in={fan_in}", lineno, _col(raw)
            )
    hidden = [fan_out for _, _, fan_out, _ in linears[:-1]]
    spec = CnnSpec(tuple(convs), tuple(hidden), input_shape, linears[-1][2], pool)
    spec.feature_shape()  # raises on spatial exhaustion
    return spec


def _parse_compact(line, d_model, input_shape, num_classes) -> ModelSpec:
    lineno, raw, text = line
    tokens = text.split(" ")
    values: dict[str, int] = {}
    order = []
    for token in tokens:
        m = _COMPACT_TOKEN.match(token)
        if not m:
            raise SpecSyntaxError(f"bad compact token {token!r}", lineno, _col(raw) + text.find(token))
        key, value = m.group(1), int(m.group(2))
        if key in values:
            raise SpecSemanticError(f"duplicate compact key {key!r}", lineno, _col(raw))
        values[key] = value
        order.append(key)
    if order and order[0] == "e":
        if order != ["e", "d", "h", "f"]:
            raise SpecSyntaxError("transformer compact form is 'e<n> d<n> h<n> f<n>'", lineno, 1)
        kwargs = {_COMPACT_TRANSFORMER[k]: v for k, v in values.items()}
        if min(kwargs.values()) < 1:
            raise SpecSemanticError("compact values must be positive", lineno, 1)
        return TransformerSpec(d_model=d_model, **kwargs)
    if order and order[0] == "c":
        expected = ["c", "h", "n", "s"] if values["c"] > 0 else ["c", "n", "s"]
        if order != expected:
            raise SpecSyntaxError("CNN compact form is 'c<n> [h<n>] n<n> s<n>'", lineno, 1)
        if values["n"] < 1 or values["s"] < 1 or values.get("h", 1) < 1:
            raise SpecSemanticError("compact values must be positive", lineno, 1)
        if values["c"] > MAX_COMPACT_LAYERS or values["n"] > MAX_COMPACT_LAYERS:
            raise SpecSemanticError("layer count too large for the compact form", lineno, 1)
        c = values["c"]
        spec = CnnSpec(
            conv_channels=(values["h"],) * c if c else (),
            hidden_sizes=(values["s"],) * values["n"],
            input_shape=tuple(input_shape),
            num_classes=num_classes,
            pool_after_convs=c > 0,
        )
        spec.feature_shape()
        return spec
    raise UnknownKeyError(f"unknown compact key {order[0]!r}", lineno, 1)


def initial_transformer_spec(d_model: int = DEFAULT_D_MODEL) -> TransformerSpec:
    return TransformerSpec(num_encoder_layers=2, num_decoder_layers=2, d_ff=1024, num_heads=8, d_model=d_model)


def initial_cnn_spec(
    input_shape: tuple[int, int, int] = DEFAULT_INPUT_SHAPE, num_classes: int = DEFAULT_NUM_CLASSES
) -> CnnSpec:
    """Single hidden layer of 16 neurons, no convolutions."""
    return CnnSpec((), (16,), tuple(input_shape), num_classes, False)
