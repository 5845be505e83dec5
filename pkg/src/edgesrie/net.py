"""The dual-branch model: architecture, forward passes, counting, checkpoints.

Despeckle branch is a small U-Net, hidden width 8 everywhere:

- encoder, 4 levels: [Conv3x3 -> LeakyReLU] x2, then MaxPool2 (skip saved
  before the pool), spatial extent reaching (H/16, W/16)
- bottleneck: [Conv3x3 -> LeakyReLU] x2
- decoder, 4 levels: UpConv2x2, Concat(upsampled, skip), Conv3x3 -> LeakyReLU
- output head: Conv1x1 to 1 channel, no activation

Deblur branch is flat: five Conv3x3 -> LeakyReLU blocks, 1->8, 8->8 x3, 8->1.

The fused model runs deblur(despeckle(x)). Display inputs are scaled to
[0,1], reflect-padded on the bottom/right to a multiple of 16, and the
output is cropped, clamped to [0,1], and rescaled to [0,255].

Checkpoint format "ESNN1", little-endian throughout:

    magic "ESNN1" | u16 version=1 | u8 precision (0=float32, 1=int8)
    | u8 flags (bit0 = fused) | u16 despeckle layer count | u16 deblur
    layer count | per layer: u8 kind (1=Conv3x3, 2=Conv1x1, 3=UpConv2x2)
    + u32 out_c, in_c, kh, kw | payloads | u32 CRC32 of all prior bytes

Float payloads are, per layer in canonical order, f32 weights then f32
biases. Int8 payloads are f32 weight scale, int8 weights, i32 biases, and
after all layers a boundary table: u16 count, then per boundary u8 name
length, ASCII name, f32 activation scale, u8 zero point.
"""

from __future__ import annotations

import struct
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import (
    BadMagic,
    ChecksumError,
    DescriptorMismatch,
    DomainMismatch,
    NonDivisibleDims,
    TruncatedFile,
    VersionMismatch,
)
from .image import Domain, Image, round_half_away
from .rng import Stream

PARAM_BUDGET = 20_000
CHANNELS = 8
LEVELS = 4

_MAGIC = b"ESNN1"
_VERSION = 1
_KIND_CODE = {"conv3": 1, "conv1": 2, "upconv": 3}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}
_KERNEL = {"conv3": 3, "conv1": 1, "upconv": 2}

# Canonical layer tables; initialization, checkpoints, and gradient dicts
# all follow this order.
DESPECKLE_LAYERS: tuple = tuple(
    [(f"d.e{l}c{i}", "conv3", 1 if (l, i) == (0, 1) else CHANNELS, CHANNELS)
     for l in range(LEVELS) for i in (1, 2)]
    + [("d.bc1", "conv3", CHANNELS, CHANNELS), ("d.bc2", "conv3", CHANNELS, CHANNELS)]
    + [item
       for l in reversed(range(LEVELS))
       for item in ((f"d.d{l}u", "upconv", CHANNELS, CHANNELS),
                    (f"d.d{l}c", "conv3", 2 * CHANNELS, CHANNELS))]
    + [("d.out", "conv1", CHANNELS, 1)]
)
DEBLUR_LAYERS: tuple = (
    ("b.c1", "conv3", 1, CHANNELS),
    ("b.c2", "conv3", CHANNELS, CHANNELS),
    ("b.c3", "conv3", CHANNELS, CHANNELS),
    ("b.c4", "conv3", CHANNELS, CHANNELS),
    ("b.c5", "conv3", CHANNELS, 1),
)
ALL_LAYERS: tuple = DESPECKLE_LAYERS + DEBLUR_LAYERS

BRANCHES = ("despeckle", "deblur", "fused")

# Activation-tensor boundary feeding each parameterized layer. Boundary
# names: branch inputs d.in/b.in, post-activation conv outputs by layer
# name, pool outputs d.e{l}p, concat outputs d.d{l}cat.
LAYER_INPUT: dict[str, str] = {
    "d.e0c1": "d.in", "d.e0c2": "d.e0c1",
    "d.e1c1": "d.e0p", "d.e1c2": "d.e1c1",
    "d.e2c1": "d.e1p", "d.e2c2": "d.e2c1",
    "d.e3c1": "d.e2p", "d.e3c2": "d.e3c1",
    "d.bc1": "d.e3p", "d.bc2": "d.bc1",
    "d.d3u": "d.bc2", "d.d3c": "d.d3cat",
    "d.d2u": "d.d3c", "d.d2c": "d.d2cat",
    "d.d1u": "d.d2c", "d.d1c": "d.d1cat",
    "d.d0u": "d.d1c", "d.d0c": "d.d0cat",
    "d.out": "d.d0c",
    "b.c1": "b.in", "b.c2": "b.c1", "b.c3": "b.c2",
    "b.c4": "b.c3", "b.c5": "b.c4",
}


@dataclass
class QuantState:
    """Int8 parameters attached to a model after calibration/conversion."""

    weight_scale: dict[str, float] = field(default_factory=dict)
    qweight: dict[str, np.ndarray] = field(default_factory=dict)  # int8
    qbias: dict[str, np.ndarray] = field(default_factory=dict)  # int32
    act_scale: dict[str, float] = field(default_factory=dict)
    act_zero: dict[str, int] = field(default_factory=dict)
    weights_only: bool = False


@dataclass
class Model:
    """Parameters for both branches; layer name -> [weight, bias]."""

    params: dict[str, list[np.ndarray]]
    fused: bool = False
    quant: QuantState | None = None

    @property
    def precision(self) -> str:
        return "int8" if self.quant is not None else "float32"

    def copy(self) -> "Model":
        return Model(
            {k: [w.copy(), b.copy()] for k, (w, b) in self.params.items()},
            self.fused,
            self.quant,
        )


def _weight_shape(kind: str, in_c: int, out_c: int) -> tuple:
    k = _KERNEL[kind]
    return (out_c, in_c, k, k)


def build_default(seed: int = 0) -> Model:
    """Seeded He-uniform weights (bound sqrt(6/fan_in)), zero biases.

    Draw order is the canonical layer order, despeckle branch then deblur,
    one uniform block per weight tensor.
    """
    stream = Stream(seed)
    params: dict[str, list[np.ndarray]] = {}
    for name, kind, in_c, out_c in ALL_LAYERS:
        shape = _weight_shape(kind, in_c, out_c)
        fan_in = in_c * shape[2] * shape[3]
        bound = np.sqrt(6.0 / fan_in)
        w = stream.uniform(-bound, bound, int(np.prod(shape))).reshape(shape)
        params[name] = [w.astype(np.float32), np.zeros(out_c, dtype=np.float32)]
    model = Model(params)
    count = param_count(model)
    if count > PARAM_BUDGET:
        raise AssertionError(f"parameter budget exceeded: {count} > {PARAM_BUDGET}")
    return model


def param_count(model: Model, branch: str = "fused") -> int:
    names = _branch_names(branch)
    return sum(
        model.params[n][0].size + model.params[n][1].size for n in names
    )


def _branch_names(branch: str) -> list[str]:
    if branch == "despeckle":
        table = DESPECKLE_LAYERS
    elif branch == "deblur":
        table = DEBLUR_LAYERS
    elif branch == "fused":
        table = ALL_LAYERS
    else:
        raise ValueError(f"unknown branch {branch!r}")
    return [name for name, *_ in table]


def flop_breakdown(h: int, w: int, branch: str = "fused") -> list[tuple[str, int]]:
    """Per-layer FLOPs at input extent (h, w), counting 2 per conv MAC.

    Extents are first padded up to a multiple of 16, as the forward pass
    does. Pooling, activations, and concatenation are not counted.
    """
    ph, pw = _pad_to16(h), _pad_to16(w)
    out = []
    sizes = {l: (ph >> l, pw >> l) for l in range(LEVELS + 1)}

    def conv_flops(kind, in_c, out_c, hh, ww):
        k = _KERNEL[kind]
        if kind == "upconv":
            return 2 * 4 * in_c * out_c * hh * ww
        return 2 * k * k * in_c * out_c * hh * ww

    tables = {"despeckle": DESPECKLE_LAYERS, "deblur": DEBLUR_LAYERS,
              "fused": ALL_LAYERS}[branch]
    for name, kind, in_c, out_c in tables:
        if name.startswith("b."):
            hh, ww = ph, pw
        elif name.startswith("d.e"):
            hh, ww = sizes[int(name[3])]
        elif name.startswith("d.b"):
            hh, ww = sizes[LEVELS]
        elif name.startswith("d.d"):
            level = int(name[3])
            if name.endswith("u"):
                hh, ww = sizes[level + 1]  # upconv input extent
            else:
                hh, ww = sizes[level]
        else:  # d.out
            hh, ww = ph, pw
        out.append((name, conv_flops(kind, in_c, out_c, hh, ww)))
    return out


def flop_count(model: Model, h: int, w: int, branch: str = "fused") -> int:
    return sum(f for _, f in flop_breakdown(h, w, branch))


# --- forward / backward -------------------------------------------------------


def _pad_to16(n: int) -> int:
    return -(-n // 16) * 16


def _seam(x: np.ndarray) -> np.ndarray:
    """Display-image handoff: clamp to [0,1] and quantize to gray levels."""
    return round_half_away(np.clip(x, 0.0, 1.0) * np.float32(255.0)) / np.float32(255.0)


def _timed(timings, name, fn, *args):
    if timings is None:
        return fn(*args)
    t0 = time.perf_counter()
    out = fn(*args)
    timings[name] = timings.get(name, 0.0) + (time.perf_counter() - t0)
    return out


def _conv_act(t, w, b):
    """Convolution plus activation, grouped so one timing bucket covers both."""
    pre = nn.conv2d_forward(t, w, b)
    return pre, nn.leaky_relu_forward(pre)


def despeckle_forward(model: Model, x: np.ndarray, cache: dict | None = None,
                      timings: dict | None = None, hook=None) -> np.ndarray:
    """U-Net branch on a (n,1,h,w) tensor with h, w divisible by 16.

    `hook(boundary_name, tensor)`, when given, observes every activation
    boundary (used by quantization calibration).
    """
    P = model.params
    skips = []
    t = x
    if cache is not None:
        cache["x"] = x
    if hook:
        hook("d.in", x)
    for l in range(LEVELS):
        for i in (1, 2):
            name = f"d.e{l}c{i}"
            pre, act = _timed(timings, name, _conv_act, t, *P[name])
            if cache is not None:
                cache[name] = (t, pre)
            t = act
            if hook:
                hook(name, t)
        skips.append(t)
        pooled, idx = _timed(timings, f"d.e{l}p", nn.maxpool2_forward, t)
        if cache is not None:
            cache[f"d.e{l}p"] = (t, idx)
        t = pooled
        if hook:
            hook(f"d.e{l}p", t)
    for name in ("d.bc1", "d.bc2"):
        pre, act = _timed(timings, name, _conv_act, t, *P[name])
        if cache is not None:
            cache[name] = (t, pre)
        t = act
        if hook:
            hook(name, t)
    for l in reversed(range(LEVELS)):
        up = _timed(timings, f"d.d{l}u", nn.upconv2x2_forward, t, *P[f"d.d{l}u"])
        if cache is not None:
            cache[f"d.d{l}u"] = t
        if hook:
            hook(f"d.d{l}u", up)
        cat = _timed(timings, f"d.d{l}cat", nn.concat_forward, up, skips[l])
        if cache is not None:
            cache[f"d.d{l}cat"] = (up, skips[l])
        if hook:
            hook(f"d.d{l}cat", cat)
        name = f"d.d{l}c"
        pre, act = _timed(timings, name, _conv_act, cat, *P[name])
        if cache is not None:
            cache[name] = (cat, pre)
        t = act
        if hook:
            hook(name, t)
    y = _timed(timings, "d.out", nn.conv2d_forward, t, *P["d.out"])
    if cache is not None:
        cache["d.out"] = (t, y)
    if hook:
        hook("d.out", y)
    return y


def despeckle_backward(model: Model, cache: dict, grad_y: np.ndarray):
    """Gradients of despeckle_forward. Returns ({layer: (gw, gb)}, grad_x)."""
    P = model.params
    grads: dict[str, tuple] = {}
    t_in, _ = cache["d.out"]
    g, gw, gb = nn.conv2d_backward(t_in, P["d.out"][0], grad_y)
    grads["d.out"] = (gw, gb)
    skip_grads: dict[int, np.ndarray] = {}
    for l in range(LEVELS):
        name = f"d.d{l}c"
        cat, pre = cache[name]
        g = nn.leaky_relu_backward(pre, g)
        g, gw, gb = nn.conv2d_backward(cat, P[name][0], g)
        grads[name] = (gw, gb)
        up, skip = cache[f"d.d{l}cat"]
        g_up, g_skip = nn.concat_backward(up, skip, g)
        skip_grads[l] = g_skip
        t_in = cache[f"d.d{l}u"]
        g, gw, gb = nn.upconv2x2_backward(t_in, P[f"d.d{l}u"][0], g_up)
        grads[f"d.d{l}u"] = (gw, gb)
    for name in ("d.bc2", "d.bc1"):
        t_in, pre = cache[name]
        g = nn.leaky_relu_backward(pre, g)
        g, gw, gb = nn.conv2d_backward(t_in, P[name][0], g)
        grads[name] = (gw, gb)
    for l in reversed(range(LEVELS)):
        pre_pool, idx = cache[f"d.e{l}p"]
        g = nn.maxpool2_backward(pre_pool, idx, g)
        g = g + skip_grads[l]
        for i in (2, 1):
            name = f"d.e{l}c{i}"
            t_in, pre = cache[name]
            g = nn.leaky_relu_backward(pre, g)
            g, gw, gb = nn.conv2d_backward(t_in, P[name][0], g)
            grads[name] = (gw, gb)
    return grads, g


def deblur_forward(model: Model, x: np.ndarray, cache: dict | None = None,
                   timings: dict | None = None, hook=None) -> np.ndarray:
    t = x
    if cache is not None:
        cache["x"] = x
    if hook:
        hook("b.in", x)
    for name, *_ in DEBLUR_LAYERS:
        pre, act = _timed(timings, name, _conv_act, t, *model.params[name])
        if cache is not None:
            cache[name] = (t, pre)
        t = act
        if hook:
            hook(name, t)
    return t


def deblur_backward(model: Model, cache: dict, grad_y: np.ndarray):
    grads: dict[str, tuple] = {}
    g = grad_y
    for name, *_ in reversed(DEBLUR_LAYERS):
        t_in, pre = cache[name]
        g = nn.leaky_relu_backward(pre, g)
        g, gw, gb = nn.conv2d_backward(t_in, model.params[name][0], g)
        grads[name] = (gw, gb)
    return grads, g


def forward_tensor(model: Model, x: np.ndarray, branch: str = "fused",
                   timings: dict | None = None, hook=None) -> np.ndarray:
    """Branch composition on a [0,1]-scaled tensor, no padding or clamping."""
    if branch == "despeckle":
        return despeckle_forward(model, x, timings=timings, hook=hook)
    if branch == "deblur":
        return deblur_forward(model, x, timings=timings, hook=hook)
    if branch == "fused":
        mid = despeckle_forward(model, x, timings=timings, hook=hook)
        # The despeckled frame is handed to the deblur branch as a display
        # image: clamp to the display range and round onto the 0..255 gray
        # grid, exactly the uint8 handoff of the integer path. Running the
        # branches separately through a display image therefore composes to
        # the same bits as the fused pass.
        mid = _seam(mid)
        return deblur_forward(model, mid, timings=timings, hook=hook)
    raise ValueError(f"unknown branch {branch!r}")


def forward(model: Model, img: Image, branch: str = "fused", pad: bool = True,
            timings: dict | None = None) -> Image:
    """Run a branch on a display image.

    Input is scaled to [0,1] and reflect-padded (bottom/right) to a multiple
    of 16; output is cropped back, clamped to [0,1], and rescaled to
    [0,255].
    """
    if img.domain is not Domain.DISPLAY8:
        raise DomainMismatch("forward expects a DISPLAY8 image")
    h, w = img.height, img.width
    ph, pw = _pad_to16(h), _pad_to16(w)
    if (ph, pw) != (h, w) and not pad:
        raise NonDivisibleDims(f"{h}x{w} not divisible by 16 and padding disabled")

    def _prep():
        x = (img.data.astype(np.float32) / 255.0)[None, None]
        if (ph, pw) != (h, w):
            x = np.pad(x, ((0, 0), (0, 0), (0, ph - h), (0, pw - w)),
                       mode="reflect")
        return x

    x = _timed(timings, "prep", _prep)
    y = forward_tensor(model, x, branch, timings=timings)
    out = _timed(timings, "post",
                 lambda: np.clip(y[0, 0, :h, :w], 0.0, 1.0) * 255.0)
    return img.with_data(out)


# --- checkpoint I/O -----------------------------------------------------------


def save(model: Model, path) -> None:
    blob = bytearray()
    blob += _MAGIC
    precision = 1 if model.quant is not None else 0
    blob += struct.pack("<HBBHH", _VERSION, precision, 1 if model.fused else 0,
                        len(DESPECKLE_LAYERS), len(DEBLUR_LAYERS))
    for name, kind, in_c, out_c in ALL_LAYERS:
        k = _KERNEL[kind]
        blob += struct.pack("<BIIII", _KIND_CODE[kind], out_c, in_c, k, k)
    if precision == 0:
        for name, *_ in ALL_LAYERS:
            w, b = model.params[name]
            blob += w.astype("<f4").tobytes() + b.astype("<f4").tobytes()
    else:
        q = model.quant
        for name, *_ in ALL_LAYERS:
            blob += struct.pack("<f", q.weight_scale[name])
            blob += q.qweight[name].astype(np.int8).tobytes()
            blob += q.qbias[name].astype("<i4").tobytes()
        bounds = sorted(q.act_scale)
        blob += struct.pack("<H", len(bounds))
        for bname in bounds:
            raw = bname.encode("ascii")
            blob += struct.pack("<B", len(raw)) + raw
            blob += struct.pack("<fB", q.act_scale[bname], q.act_zero[bname])
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise BadMagic(f"{path}: not an ESNN1 checkpoint")
    if len(blob) < len(_MAGIC) + 8 + 4:
        raise TruncatedFile(f"{path}: header ends early")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{path}: CRC32 mismatch")
    off = len(_MAGIC)
    version, precision, flags, n_dsp, n_dbl = struct.unpack_from("<HBBHH", blob, off)
    off += 8
    if version != _VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {_VERSION}")
    if (n_dsp, n_dbl) != (len(DESPECKLE_LAYERS), len(DEBLUR_LAYERS)):
        raise DescriptorMismatch(
            f"layer counts {n_dsp}+{n_dbl} do not match this architecture"
        )
    records = []
    for name, kind, in_c, out_c in ALL_LAYERS:
        code, r_out, r_in, r_kh, r_kw = struct.unpack_from("<BIIII", blob, off)
        off += 17
        k = _KERNEL[kind]
        if (code, r_out, r_in, r_kh, r_kw) != (_KIND_CODE[kind], out_c, in_c, k, k):
            raise DescriptorMismatch(f"layer record for {name} does not match")
        records.append((name, kind, in_c, out_c))
    params: dict[str, list[np.ndarray]] = {}
    quant = None
    if precision == 0:
        for name, kind, in_c, out_c in records:
            shape = _weight_shape(kind, in_c, out_c)
            nw, nb = int(np.prod(shape)), out_c
            need = 4 * (nw + nb)
            if off + need > len(blob) - 4:
                raise TruncatedFile(f"{path}: float payload ends early at {name}")
            w = np.frombuffer(blob, dtype="<f4", count=nw, offset=off).reshape(shape)
            off += 4 * nw
            b = np.frombuffer(blob, dtype="<f4", count=nb, offset=off)
            off += 4 * nb
            params[name] = [w.copy(), b.copy()]
    else:
        quant = QuantState()
        for name, kind, in_c, out_c in records:
            shape = _weight_shape(kind, in_c, out_c)
            nw, nb = int(np.prod(shape)), out_c
            need = 4 + nw + 4 * nb
            if off + need > len(blob) - 4:
                raise TruncatedFile(f"{path}: int8 payload ends early at {name}")
            (s_w,) = struct.unpack_from("<f", blob, off)
            off += 4
            qw = np.frombuffer(blob, dtype=np.int8, count=nw, offset=off).reshape(shape)
            off += nw
            qb = np.frombuffer(blob, dtype="<i4", count=nb, offset=off)
            off += 4 * nb
            quant.weight_scale[name] = float(s_w)
            quant.qweight[name] = qw.copy()
            quant.qbias[name] = qb.copy()
        (n_bounds,) = struct.unpack_from("<H", blob, off)
        off += 2
        for _ in range(n_bounds):
            (ln,) = struct.unpack_from("<B", blob, off)
            off += 1
            bname = blob[off : off + ln].decode("ascii")
            off += ln
            s_a, z_a = struct.unpack_from("<fB", blob, off)
            off += 5
            quant.act_scale[bname] = float(s_a)
            quant.act_zero[bname] = int(z_a)
        # Float params reconstructed from the quantized form so the float
        # path still runs on an int8 checkpoint; bias dequantizes at
        # s_in * s_w of the layer's input boundary.
        for name, kind, in_c, out_c in records:
            s_w = quant.weight_scale[name]
            s_in = quant.act_scale[LAYER_INPUT[name]]
            w = quant.qweight[name].astype(np.float32) * np.float32(s_w)
            b = quant.qbias[name].astype(np.float32) * np.float32(s_in * s_w)
            params[name] = [w, b]
    return Model(params, fused=bool(flags & 1), quant=quant)
