"""CNN encoder + bi-directional GRU boundary regressor.

Geometry (image convention, rows x cols): a 150x600x5 input passes through

    conv1 11x11, stride 5, pad 3  -> 30x120x256   (relu)
    conv2  1x1,  stride 1         -> 30x120x128   (relu)
    conv3  5x5,  stride 2, pad 2  -> 15x60x256    (relu)
    conv4 15x1,  valid            ->  1x60x256

giving 60 column feature vectors, ordered left to right.  Two bi-GRU context
processors (128 hidden units per direction) read that sequence: one keeps only
its final states and feeds the left/right decoder, the other emits a vector
per column for the shared upper-boundary decoder.  Decoder outputs are squashed
into (0, 0.5) by ``0.5 * sigmoid``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    concat,
    conv2d,
    dense,
    flip,
    relu,
    sigmoid,
    stack,
    take,
    tanh,
    upsample_linear_1d,
)

INPUT_HEIGHT = 150
INPUT_WIDTH = 600
INPUT_CHANNELS = 5
SEQ_LEN = 60
OUTPUT_SCALE = 0.5

# (kernel h, kernel w), stride, padding for the four encoder layers
ENCODER_GEOMETRY = (
    ((11, 11), (5, 5), (3, 3)),
    ((1, 1), (1, 1), (0, 0)),
    ((5, 5), (2, 2), (2, 2)),
    ((15, 1), (1, 1), (0, 0)),
)

SEQUENCE_FINAL = "sequence_final"
PER_STEP = "per_step"


@dataclass(frozen=True)
class ModelConfig:
    """Channel widths.  The defaults reproduce the published architecture."""

    conv_channels: tuple[int, int, int, int] = (256, 128, 256, 256)
    hidden: int = 128
    decoder_width: int = 64
    in_channels: int = INPUT_CHANNELS


# ---------------------------------------------------------------------------
# parameter containers; leaves are np.ndarray or Tensor


@dataclass
class ConvParams:
    kernel: Any
    bias: Any


@dataclass
class EncoderParams:
    conv1: ConvParams
    conv2: ConvParams
    conv3: ConvParams
    conv4: ConvParams

    def layers(self) -> list[ConvParams]:
        return [self.conv1, self.conv2, self.conv3, self.conv4]


@dataclass
class GRUCellParams:
    Wz: Any
    Wr: Any
    Wh: Any
    Uz: Any
    Ur: Any
    Uh: Any
    bz: Any
    br: Any
    bh: Any

    @property
    def hidden(self) -> int:
        return self.Uz.shape[0]


@dataclass
class ContextProcessorParams:
    forward_cell: GRUCellParams
    backward_cell: GRUCellParams
    mode: str = field(default=SEQUENCE_FINAL, metadata={"static": True})


@dataclass
class DecoderParams:
    w1: Any
    b1: Any
    w2: Any
    b2: Any


@dataclass
class ModelParams:
    encoder: EncoderParams
    lr_processor: ContextProcessorParams
    top_processor: ContextProcessorParams
    lr_decoder: DecoderParams
    top_decoder: DecoderParams


@dataclass
class BoundaryPrediction:
    """Normalized boundaries; leading batch axis optional.

    ``left``/``right`` are fractions of the width from the respective edge,
    ``top`` holds one fraction of the height (from the bottom) per column bin.
    """

    left: Any
    right: Any
    top: Any
    top_upsampled: Any

    def numpy(self) -> "BoundaryPrediction":
        conv = lambda v: v.data if isinstance(v, Tensor) else np.asarray(v)
        return BoundaryPrediction(conv(self.left), conv(self.right),
                                  conv(self.top), conv(self.top_upsampled))


def _is_static(f: dataclasses.Field) -> bool:
    return bool(f.metadata.get("static"))


def named_tensors(params, prefix: str = "") -> dict[str, Any]:
    """Flatten a parameter tree into ``{"encoder.conv1.kernel": leaf, ...}``."""
    out: dict[str, Any] = {}
    for f in dataclasses.fields(params):
        if _is_static(f):
            continue
        value = getattr(params, f.name)
        name = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(named_tensors(value, name + "."))
        else:
            out[name] = value
    return out


def map_params(params, fn: Callable[[str, Any], Any], prefix: str = ""):
    """Rebuild the tree with every leaf replaced by ``fn(name, leaf)``."""
    kwargs = {}
    for f in dataclasses.fields(params):
        value = getattr(params, f.name)
        name = f"{prefix}{f.name}"
        if _is_static(f):
            kwargs[f.name] = value
        elif dataclasses.is_dataclass(value):
            kwargs[f.name] = map_params(value, fn, name + ".")
        else:
            kwargs[f.name] = fn(name, value)
    return type(params)(**kwargs)


def from_named(named: dict[str, np.ndarray]) -> ModelParams:
    """Inverse of :func:`named_tensors` for a full model; validates shapes."""
    template = init_params(ModelConfig(conv_channels=(1, 1, 1, 1), hidden=1, decoder_width=1,
                                       in_channels=1), seed=0)
    expected = set(named_tensors(template))
    missing = expected - set(named)
    extra = set(named) - expected
    if missing or extra:
        raise ValueError(f"parameter names mismatch: missing={sorted(missing)} "
                         f"unexpected={sorted(extra)}")
    params = map_params(template, lambda name, _: np.asarray(named[name]))
    check_params(params)
    return params


def watch_params(params: ModelParams, tape: Tape) -> ModelParams:
    return map_params(params, lambda name, v: tape.watch(v, name))


def count_params(params) -> int:
    return int(sum(np.asarray(v.data if isinstance(v, Tensor) else v).size
                   for v in named_tensors(params).values()))


def check_params(params: ModelParams) -> None:
    """Raise :class:`ShapeError` unless all tensors are mutually consistent."""
    def shp(v):
        return tuple(v.shape)

    cin = None
    for i, (layer, ((kh, kw), _, _)) in enumerate(zip(params.encoder.layers(), ENCODER_GEOMETRY), 1):
        k = shp(layer.kernel)
        if len(k) != 4 or k[:2] != (kh, kw):
            raise ShapeError(f"conv{i} kernel must be {kh}x{kw}xCinxCout, got {k}")
        if cin is not None and k[2] != cin:
            raise ShapeError(f"conv{i} expects {k[2]} input channels, previous layer gives {cin}")
        if shp(layer.bias) != (k[3],):
            raise ShapeError(f"conv{i} bias must be ({k[3]},), got {shp(layer.bias)}")
        cin = k[3]
    features = cin
    for pname in ("lr_processor", "top_processor"):
        proc = getattr(params, pname)
        for cname in ("forward_cell", "backward_cell"):
            cell = getattr(proc, cname)
            h = shp(cell.Uz)[0]
            for w in ("Wz", "Wr", "Wh"):
                if shp(getattr(cell, w)) != (features, h):
                    raise ShapeError(f"{pname}.{cname}.{w} must be ({features}, {h})")
            for u in ("Uz", "Ur", "Uh"):
                if shp(getattr(cell, u)) != (h, h):
                    raise ShapeError(f"{pname}.{cname}.{u} must be ({h}, {h})")
            for b in ("bz", "br", "bh"):
                if shp(getattr(cell, b)) != (h,):
                    raise ShapeError(f"{pname}.{cname}.{b} must be ({h},)")
    ctx = 2 * shp(params.lr_processor.forward_cell.Uz)[0]
    for dname, k in (("lr_decoder", 2), ("top_decoder", 1)):
        dec = getattr(params, dname)
        w1, w2 = shp(dec.w1), shp(dec.w2)
        if len(w1) != 2 or w1[0] != ctx or shp(dec.b1) != (w1[1],):
            raise ShapeError(f"{dname} first layer must map {ctx} features")
        if w2 != (w1[1], k) or shp(dec.b2) != (k,):
            raise ShapeError(f"{dname} second layer must be ({w1[1]}, {k})")


# ---------------------------------------------------------------------------
# initialization


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape).astype(dtype)


def _init_cell(rng, features: int, hidden: int, dtype) -> GRUCellParams:
    w = lambda: _glorot(rng, (features, hidden), features, hidden, dtype)
    u = lambda: _glorot(rng, (hidden, hidden), hidden, hidden, dtype)
    z = lambda: np.zeros(hidden, dtype)
    return GRUCellParams(Wz=w(), Wr=w(), Wh=w(), Uz=u(), Ur=u(), Uh=u(), bz=z(), br=z(), bh=z())


def _init_decoder(rng, features: int, width: int, k: int, dtype) -> DecoderParams:
    return DecoderParams(
        w1=_glorot(rng, (features, width), features, width, dtype), b1=np.zeros(width, dtype),
        w2=_glorot(rng, (width, k), width, k, dtype), b2=np.zeros(k, dtype))


def init_params(config: ModelConfig = ModelConfig(), seed: int = 0,
                dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    layers = []
    cin = config.in_channels
    for cout, ((kh, kw), _, _) in zip(config.conv_channels, ENCODER_GEOMETRY):
        kernel = _glorot(rng, (kh, kw, cin, cout), kh * kw * cin, kh * kw * cout, dtype)
        layers.append(ConvParams(kernel, np.zeros(cout, dtype)))
        cin = cout
    features, hidden = cin, config.hidden
    processors = [
        ContextProcessorParams(_init_cell(rng, features, hidden, dtype),
                               _init_cell(rng, features, hidden, dtype), mode)
        for mode in (SEQUENCE_FINAL, PER_STEP)
    ]
    return ModelParams(
        encoder=EncoderParams(*layers),
        lr_processor=processors[0],
        top_processor=processors[1],
        lr_decoder=_init_decoder(rng, 2 * hidden, config.decoder_width, 2, dtype),
        top_decoder=_init_decoder(rng, 2 * hidden, config.decoder_width, 1, dtype),
    )


def zeros_like_params(params: ModelParams) -> ModelParams:
    return map_params(params, lambda _, v: np.zeros_like(np.asarray(v)))


# ---------------------------------------------------------------------------
# forward pass


def _as_tensors(tree):
    return map_params(tree, lambda _, v: as_tensor(v))


def encode(x, params: EncoderParams) -> Tensor:
    """(N,)150x600xC image -> (N,)60xF column feature sequence."""
    x = as_tensor(x)
    if x.shape[-3:-1] != (INPUT_HEIGHT, INPUT_WIDTH) or x.ndim not in (3, 4):
        raise ShapeError(f"encoder input must be (N,){INPUT_HEIGHT}x{INPUT_WIDTH}xC, got {x.shape}")
    params = _as_tensors(params)
    h = x
    for i, (layer, (_, stride, pad)) in enumerate(zip(params.layers(), ENCODER_GEOMETRY)):
        h = conv2d(h, layer.kernel, layer.bias, stride, pad)
        if i < 3:
            h = relu(h)
    # drop the collapsed row axis: (..., 1, 60, F) -> (..., 60, F)
    return h.reshape(h.shape[:-3] + h.shape[-2:])


def _gru_update(xz: Tensor, xr: Tensor, xh: Tensor, h: Tensor, cell: GRUCellParams) -> Tensor:
    """One GRU step given input projections that already include the biases."""
    z = sigmoid(xz + h @ cell.Uz)
    r = sigmoid(xr + h @ cell.Ur)
    cand = tanh(xh + (r * h) @ cell.Uh)
    return h + z * (cand - h)


def gru_step(x, h_prev, cell: GRUCellParams) -> Tensor:
    """h = (1-z)*h_prev + z*tanh(Wh'x + Uh'(r*h_prev) + bh)."""
    x, h_prev, cell = as_tensor(x), as_tensor(h_prev), _as_tensors(cell)
    hidden = cell.Uz.shape[0]
    if x.shape[-1] != cell.Wz.shape[0] or h_prev.shape[-1] != hidden:
        raise ShapeError(f"gru_step: x {x.shape} / h {h_prev.shape} do not match cell "
                         f"({cell.Wz.shape[0]} -> {hidden})")
    return _gru_update(dense(x, cell.Wz, cell.bz), dense(x, cell.Wr, cell.br),
                       dense(x, cell.Wh, cell.bh), h_prev, cell)


def _run_direction(seq: Tensor, cell: GRUCellParams) -> list[Tensor]:
    """Hidden states after each step of a left-to-right pass over axis -2."""
    proj = [dense(seq, w, b) for w, b in ((cell.Wz, cell.bz), (cell.Wr, cell.br),
                                          (cell.Wh, cell.bh))]
    steps = seq.shape[-2]
    axis = seq.ndim - 2
    hidden = cell.Uz.shape[0]
    h = Tensor(np.zeros(seq.shape[:-2] + (hidden,), dtype=seq.dtype))
    states = []
    for t in range(steps):
        xz, xr, xh = (take(p, t, axis) for p in proj)
        h = _gru_update(xz, xr, xh, h, cell)
        states.append(h)
    return states


def run_context_processor(seq, params: ContextProcessorParams,
                          seq_len: int | None = SEQ_LEN) -> Tensor:
    """Bi-directional GRU over a (N,)TxF sequence.

    ``per_step`` returns (N,)Tx2H with ``concat(h_fwd[t], h_bwd[t])``;
    ``sequence_final`` returns (N,)2H with both directions' final states.
    """
    seq = as_tensor(seq)
    if seq.ndim not in (2, 3):
        raise ShapeError(f"sequence must be (N,)TxF, got {seq.shape}")
    if seq_len is not None and seq.shape[-2] != seq_len:
        raise ShapeError(f"sequence length must be {seq_len}, got {seq.shape[-2]}")
    fwd_cell = _as_tensors(params.forward_cell)
    bwd_cell = _as_tensors(params.backward_cell)
    axis = seq.ndim - 2
    fwd = _run_direction(seq, fwd_cell)
    bwd = _run_direction(flip(seq, axis), bwd_cell)
    if params.mode == SEQUENCE_FINAL:
        return concat([fwd[-1], bwd[-1]], axis=-1)
    if params.mode == PER_STEP:
        f = stack(fwd, axis=axis)
        b = flip(stack(bwd, axis=axis), axis)
        return concat([f, b], axis=-1)
    raise ValueError(f"unknown context processor mode {params.mode!r}")


def decode(ctx, params: DecoderParams) -> Tensor:
    """0.5 * sigmoid(dense(relu(dense(ctx)))) over the last axis."""
    params = _as_tensors(params)
    hidden = relu(dense(as_tensor(ctx), params.w1, params.b1))
    return sigmoid(dense(hidden, params.w2, params.b2)) * OUTPUT_SCALE


def forward(x, params: ModelParams) -> BoundaryPrediction:
    """Full network on a (N,)150x600x5 input."""
    x = as_tensor(x)
    feats = encode(x, params.encoder)
    lr = decode(run_context_processor(feats, params.lr_processor), params.lr_decoder)
    per_col = decode(run_context_processor(feats, params.top_processor), params.top_decoder)
    top = per_col.reshape(per_col.shape[:-1])
    return BoundaryPrediction(
        left=take(lr, 0, -1),
        right=take(lr, 1, -1),
        top=top,
        top_upsampled=upsample_linear_1d(top, INPUT_WIDTH),
    )


def predict(x, params: ModelParams) -> BoundaryPrediction:
    """Forward pass returning plain arrays."""
    return forward(x, params).numpy()
