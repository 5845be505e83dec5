"""Int8 quantization: calibration, conversion, fake-quant fine-tuning, and
integer inference.

Scheme (per-tensor): weights are symmetric int8 in [-127, 127] with scale
s_w = max|w|/127 and zero-point 0; activations are asymmetric uint8 with
s_a = (max-min)/255 and z_a = clamp(round(-min/s_a), 0, 255), where min/max
come from calibration over a float forward pass. Biases are int32 at scale
s_in * s_w. A degenerate (constant) activation range falls back to
s_a = max(|c|, 1)/255.

Boundaries whose uint8 codes must be interchangeable share one scale:
max-pooling reuses its input scale, and each skip connection unifies
{encoder conv output, pool output, upconv output, concat output} over the
merged min/max. On a fused model the despeckle output and deblur input are
one boundary.

Integer inference keeps activations uint8 and accumulates in int32:

    acc[o, p] = sum_k q_w[o, k] * (a[k, p] - z_in) + q_bias[o]

Requantization to the next boundary multiplies acc by the fixed-point
realization of s_in*s_w/s_out (int32 mantissa in [2^30, 2^31) plus a right
shift, rounded half away from zero; realized scale is within 2^-31 relative
of the real one) and adds z_out. LeakyReLU happens in this requantized
domain with two multipliers: the positive branch uses the identity scale,
the negative branch folds the 0.1 slope into its own multiplier.

The default execution path evaluates the integer GEMM in float32: every
product |q_w * (a - z_in)| <= 127*255 and every accumulator is bounded by
144*127*255 < 2^24, so float32 arithmetic is exact over these integers and
the result equals the pure-integer path bit for bit while using the much
faster BLAS sgemm. A debug mode (`integer_only=True`) runs the same
pipeline on integer dtypes end to end and counts array allocations per
dtype so tests can assert no floating point is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import net, nn
from .errors import (
    EmptyCalibrationSet,
    MissingQuantParams,
    NonFiniteWeights,
)
from .image import Domain, Image, round_half_away
from .errors import DomainMismatch

# Boundary groups that must share one activation scale. The fused group
# (despeckle output feeding deblur input) is applied only when both
# boundaries were calibrated.
SCALE_GROUPS: tuple = tuple(
    (f"d.e{l}c2", f"d.e{l}p", f"d.d{l}u", f"d.d{l}cat") for l in range(net.LEVELS)
) + (("d.out", "b.in"),)


class CalibrationStats:
    """Running per-boundary min/max over calibration images."""

    def __init__(self):
        self.ranges: dict[str, tuple[float, float]] = {}
        self.samples = 0

    def update(self, name: str, arr: np.ndarray) -> None:
        lo, hi = float(arr.min()), float(arr.max())
        if name in self.ranges:
            plo, phi = self.ranges[name]
            lo, hi = min(lo, plo), max(hi, phi)
        self.ranges[name] = (lo, hi)

    def merge(self, other: "CalibrationStats") -> None:
        for name, (lo, hi) in other.ranges.items():
            self.update(name, np.array([lo, hi]))
        self.samples += other.samples


def calibrate(model: net.Model, images: list[Image], branch: str = "fused") -> CalibrationStats:
    """Observe activation ranges of the float forward over a list of images."""
    if not images:
        raise EmptyCalibrationSet("calibration needs at least one image")
    stats = CalibrationStats()
    for img in images:
        if img.domain is not Domain.DISPLAY8:
            raise DomainMismatch("calibration images must be DISPLAY8")
        x = _prep_input(img)
        net.forward_tensor(model, x, branch, hook=stats.update)
        stats.samples += 1
    return stats


def quantize_weights(w: np.ndarray):
    """Symmetric per-tensor int8: returns (q, s_w) with s_w = max|w|/127."""
    if not np.isfinite(w).all():
        raise NonFiniteWeights("weight tensor contains NaN/Inf")
    s_w = float(np.abs(w).max()) / 127.0
    if s_w == 0.0:
        s_w = 1.0
    q = np.clip(round_half_away(w / s_w), -127, 127).astype(np.int8)
    return q, s_w


def _act_qparams(lo: float, hi: float):
    if hi > lo:
        s = (hi - lo) / 255.0
    else:
        s = max(abs(lo), 1.0) / 255.0
    z = int(np.clip(round_half_away(-lo / s), 0, 255))
    return s, z


def quantize(model: net.Model, stats: CalibrationStats, weights_only: bool = False) -> net.Model:
    """Int8 model from calibration stats; original model is untouched.

    With `weights_only`, activation scales are still derived (the integer
    path needs them) but inference may run float activations over
    dequantized weights.
    """
    ranges = dict(stats.ranges)
    for group in SCALE_GROUPS:
        present = [g for g in group if g in ranges]
        if len(present) < 2:
            continue
        lo = min(ranges[g][0] for g in present)
        hi = max(ranges[g][1] for g in present)
        for g in present:
            ranges[g] = (lo, hi)
    # Image-typed boundaries (branch inputs, outputs, and the inter-branch
    # handoff) carry display frames, so they get the canonical display
    # mapping [0,1] -> codes 0..255 rather than a data-dependent range.
    # The uint8 clip at these tensors then coincides exactly with the
    # float-path display clamp, and output codes land on gray levels.
    for name in ("d.in", "b.in", "d.out", "b.c5"):
        if name in ranges:
            ranges[name] = (0.0, 1.0)
    qs = net.QuantState()
    for name, (lo, hi) in ranges.items():
        s, z = _act_qparams(lo, hi)
        qs.act_scale[name] = s
        qs.act_zero[name] = z
    out = model.copy()
    for name, (w, b) in out.params.items():
        q, s_w = quantize_weights(w)
        qs.weight_scale[name] = s_w
        qs.qweight[name] = q
        bound = net.LAYER_INPUT[name]
        if bound in qs.act_scale:
            s_b = qs.act_scale[bound] * s_w
            qs.qbias[name] = round_half_away(b / s_b).astype(np.int64).astype(np.int32)
    qs.weights_only = weights_only
    out.quant = qs
    return out


# --- fixed-point requantization ----------------------------------------------


def requant_multiplier(scale: float):
    """int32 mantissa in [2^15, 2^16) and right shift realizing `scale`.

    The 16-bit mantissa keeps the realized scale within 2^-16 relative of
    the requested one (the contract allows 2^-15) and keeps every
    accumulator*mantissa product inside float64's exact-integer range, so
    the production path can evaluate the integer rounding identity with
    vectorized float64 while staying bit-identical to the pure-integer
    evaluation.
    """
    if scale <= 0:
        raise ValueError("requant scale must be positive")
    frac, exp = math.frexp(scale)  # scale = frac * 2^exp, frac in [0.5, 1)
    m = int(round(frac * (1 << 16)))
    if m == 1 << 16:
        m >>= 1
        exp += 1
    shift = 16 - exp
    if shift < 0:
        raise ValueError(f"requant scale {scale} too large for fixed point")
    return m, shift


def realized_scale(m: int, shift: int) -> float:
    return m * 2.0 ** (-shift)


# --- integer inference --------------------------------------------------------


class _Counters:
    """Dtype instrumentation for the pure-integer debug path."""

    def __init__(self):
        self.float_arrays = 0
        self.int_arrays = 0

    def note(self, arr: np.ndarray) -> None:
        if arr.dtype.kind == "f":
            self.float_arrays += 1
        else:
            self.int_arrays += 1


def _patch_rows(x: np.ndarray, k: int, pad_value, dtype) -> np.ndarray:
    """Patch matrix (n, c*k*k, h*w) of the zero-point-padded uint8 input.

    Built as k*k block copies of whole shifted image planes, so each copy
    is a wide contiguous-row operation with the uint8->dtype cast fused in.
    Row index c*k*k + dy*k + dx matches the column order of
    weight.reshape(oc, -1), and the GEMM output lands directly in
    channels-first layout.
    """
    n, c, h, w = x.shape
    pad = k // 2
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                   constant_values=pad_value)
    rows = np.empty((n, c, k * k, h, w), dtype)
    for dy in range(k):
        for dx in range(k):
            np.copyto(rows[:, :, dy * k + dx], x[:, :, dy:dy + h, dx:dx + w])
    return rows.reshape(n, c * k * k, h * w)


def _conv_int(a: np.ndarray, z_in: int, qw: np.ndarray, qbias: np.ndarray,
              integer_only: bool, counters: _Counters | None):
    """int32 accumulator (n, oc, h*w) of a quantized convolution."""
    oc, ic, k, _ = qw.shape
    n, c, h, w = a.shape
    flat = qw.reshape(oc, ic * k * k)
    # z_in correction folded with the bias: sum_k W[o,k]*(a-z_in) =
    # W@a - z_in*rowsum(W).
    corr = qbias.astype(np.int64) - np.int64(z_in) * flat.astype(np.int64).sum(axis=1)
    if integer_only:
        rows = _patch_rows(a, k, np.uint8(z_in), np.int32)
        acc = np.matmul(flat.astype(np.int32), rows)
        if counters:
            counters.note(acc)
    else:
        # Products and partial sums stay below 2^24, so float32 matmul is
        # exact over these integers.
        rows = _patch_rows(a, k, np.uint8(z_in), np.float32)
        acc_f = np.matmul(flat.astype(np.float32), rows)
        acc = acc_f.astype(np.int32)
    acc += corr.astype(np.int32)[:, None]
    if counters:
        counters.note(acc)
    return acc, (h, w)


def _upconv_int(a: np.ndarray, z_in: int, qw: np.ndarray, qbias: np.ndarray,
                integer_only: bool, counters: _Counters | None):
    oc, ic, _, _ = qw.shape
    n, c, h, w = a.shape
    corr = qbias.astype(np.int64)[:, None, None] - (
        np.int64(z_in) * qw.astype(np.int64).sum(axis=1)
    )  # (oc, 2, 2)
    if integer_only:
        acc = np.tensordot(a.astype(np.int32), qw.astype(np.int32), axes=([1], [1]))
        if counters:
            counters.note(acc)
    else:
        acc_f = np.tensordot(a.astype(np.float32), qw.astype(np.float32), axes=([1], [1]))
        acc = acc_f.astype(np.int32)
    acc = acc + corr.astype(np.int32)  # (n, h, w, oc, 2, 2)
    if counters:
        counters.note(acc)
    return acc, (h, w)


def _requant_mag(acc: np.ndarray, mult, z_out: int,
                 integer_only: bool = False) -> np.ndarray:
    """Requantize an int32 accumulator: q = clip(rshift(|acc|*m)*sgn + z).

    `mult` is either (m, shift) or, for a requantized LeakyReLU, a pair of
    multipliers ((m_pos, sh_pos), (m_neg, sh_neg)) selected by sign.  The
    two shifts are aligned to a common one by scaling the multipliers,
    which leaves every rounded result unchanged (numerator and denominator
    scale by the same power of two), so one shift covers both branches.

    Rounding is round-half-away-from-zero on the magnitude, evaluated
    branch-free through the floor identity

        sgn(a) * ((|a|*m + 2^(sh-1)) >> sh) == (a*m + 2^(sh-1) - [a<0]) >> sh

    where >> is an arithmetic shift (floor division).  The fast path runs
    the identity in float64: with the 16-bit mantissa every intermediate is
    below 2^53, so the floor is exact and bit-identical to the integer
    evaluation used when `integer_only` is set.
    """
    if isinstance(mult[0], tuple):
        (m_pos, sh_pos), (m_neg, sh_neg) = mult
        sh = max(sh_pos, sh_neg)
        mp = m_pos << (sh - sh_pos)
        mn = m_neg << (sh - sh_neg)
    else:
        mp, sh = mult
        mn = mp
    neg = acc < 0
    if integer_only:
        v = acc.astype(np.int64)
        v *= np.where(neg, np.int64(mn), np.int64(mp)) if mn != mp else np.int64(mp)
        if sh > 0:
            v += np.int64(1) << np.int64(sh - 1)
            v -= neg
            v >>= np.int64(sh)
        v += np.int64(z_out)
        return np.clip(v, 0, 255).astype(np.uint8)
    if mn != mp:
        m_arr = np.multiply(neg, float(mn - mp))
        m_arr += float(mp)
        v = np.multiply(acc, m_arr)
    else:
        v = np.multiply(acc, float(mp))
    if sh > 0:
        v += float(1 << (sh - 1))
        v -= neg
        v *= 2.0 ** -sh
        np.floor(v, out=v)
    v += float(z_out)
    np.clip(v, 0.0, 255.0, out=v)
    return v.astype(np.uint8)


def _requant_lrelu(acc: np.ndarray, scale: float, z_out: int,
                   counters: _Counters | None,
                   integer_only: bool = False) -> np.ndarray:
    out = _requant_mag(acc, (requant_multiplier(scale),
                             requant_multiplier(nn.LEAKY_SLOPE * scale)),
                       z_out, integer_only)
    if counters:
        counters.note(out)
    return out


def _requant_linear(acc: np.ndarray, scale: float, z_out: int,
                    counters: _Counters | None,
                    integer_only: bool = False) -> np.ndarray:
    out = _requant_mag(acc, requant_multiplier(scale), z_out, integer_only)
    if counters:
        counters.note(out)
    return out


def _quantize_input(x: np.ndarray, s: float, z: int) -> np.ndarray:
    return np.clip(round_half_away(x / s) + z, 0, 255).astype(np.uint8)


def _prep_input(img: Image) -> np.ndarray:
    h, w = img.height, img.width
    ph, pw = net._pad_to16(h), net._pad_to16(w)
    x = (img.data.astype(np.float32) / 255.0)[None, None]
    if (ph, pw) != (h, w):
        x = np.pad(x, ((0, 0), (0, 0), (0, ph - h), (0, pw - w)), mode="reflect")
    return x


def _layer_scales(qs: net.QuantState, name: str, out_bound: str):
    s_in = qs.act_scale[net.LAYER_INPUT[name]]
    z_in = qs.act_zero[net.LAYER_INPUT[name]]
    s_out = qs.act_scale[out_bound]
    z_out = qs.act_zero[out_bound]
    scale = s_in * qs.weight_scale[name] / s_out
    return z_in, scale, z_out


def _pool_u8(a: np.ndarray) -> np.ndarray:
    """2x2 max-pool directly on the uint8 tensor."""
    n, c, h, w = a.shape
    return a.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))


def _int_despeckle(model: net.Model, a: np.ndarray, integer_only, counters,
                   timings=None):
    qs = model.quant

    def conv_step(a, name, act=True):
        z_in, scale, z_out = _layer_scales(qs, name, name)
        acc, (h, w) = _conv_int(a, z_in, qs.qweight[name], qs.qbias[name],
                                integer_only, counters)
        requant = _requant_lrelu if act else _requant_linear
        q = requant(acc, scale, z_out, counters, integer_only)
        n, oc, _ = q.shape
        return q.reshape(n, oc, h, w)

    def upconv_step(a, name):
        z_in, scale, z_out = _layer_scales(qs, name, name)
        acc, (h, w) = _upconv_int(a, z_in, qs.qweight[name], qs.qbias[name],
                                  integer_only, counters)
        q = _requant_linear(acc, scale, z_out, counters, integer_only)
        n, oc = q.shape[0], q.shape[3]  # (n,h,w,oc,2,2)
        return q.transpose(0, 3, 1, 4, 2, 5).reshape(n, oc, 2 * h, 2 * w)

    skips = []
    for l in range(net.LEVELS):
        a = net._timed(timings, f"d.e{l}c1", conv_step, a, f"d.e{l}c1")
        a = net._timed(timings, f"d.e{l}c2", conv_step, a, f"d.e{l}c2")
        skips.append(a)
        a = net._timed(timings, f"d.e{l}p", _pool_u8, a)
        if counters:
            counters.note(a)
    a = net._timed(timings, "d.bc1", conv_step, a, "d.bc1")
    a = net._timed(timings, "d.bc2", conv_step, a, "d.bc2")
    for l in reversed(range(net.LEVELS)):
        up = net._timed(timings, f"d.d{l}u", upconv_step, a, f"d.d{l}u")
        a = net._timed(timings, f"d.d{l}cat",
                       lambda u, s: np.concatenate([u, s], axis=1), up, skips[l])
        if counters:
            counters.note(a)
        a = net._timed(timings, f"d.d{l}c", conv_step, a, f"d.d{l}c")
    return net._timed(timings, "d.out", conv_step, a, "d.out", False)


def _int_deblur(model: net.Model, a: np.ndarray, integer_only, counters,
                timings=None):
    qs = model.quant

    def conv_step(a, name):
        z_in, scale, z_out = _layer_scales(qs, name, name)
        acc, (h, w) = _conv_int(a, z_in, qs.qweight[name], qs.qbias[name],
                                integer_only, counters)
        q = _requant_lrelu(acc, scale, z_out, counters, integer_only)
        n, oc, _ = q.shape
        return q.reshape(n, oc, h, w)

    for name, *_ in net.DEBLUR_LAYERS:
        a = net._timed(timings, name, conv_step, a, name)
    return a


def quantized_forward(model: net.Model, img: Image, branch: str = "fused",
                      integer_only: bool = False,
                      counters: _Counters | None = None,
                      timings: dict | None = None) -> Image:
    """Integer inference over a display image.

    The input is quantized once at the first boundary; everything after
    that is uint8/int32 arithmetic until the final dequantization.
    """
    qs = model.quant
    if qs is None:
        raise MissingQuantParams("model has no quantization parameters")
    if img.domain is not Domain.DISPLAY8:
        raise DomainMismatch("quantized_forward expects a DISPLAY8 image")
    in_bound = "b.in" if branch == "deblur" else "d.in"
    out_bound = "d.out" if branch == "despeckle" else "b.c5"
    needed = [n for n, *_ in (net.DESPECKLE_LAYERS if branch != "deblur" else ())]
    needed += [n for n, *_ in (net.DEBLUR_LAYERS if branch != "despeckle" else ())]
    for name in needed:
        if name not in qs.qbias or net.LAYER_INPUT[name] not in qs.act_scale:
            raise MissingQuantParams(f"no quantization parameters for layer {name}")
    h, w = img.height, img.width

    def _prep():
        x = _prep_input(img)
        return _quantize_input(x, qs.act_scale[in_bound], qs.act_zero[in_bound])

    a = net._timed(timings, "prep", _prep)
    if counters:
        counters.note(a)
    if branch == "despeckle":
        q = _int_despeckle(model, a, integer_only, counters, timings)
    elif branch == "deblur":
        q = _int_deblur(model, a, integer_only, counters, timings)
    elif branch == "fused":
        q = _int_despeckle(model, a, integer_only, counters, timings)
        q = _int_deblur(model, q, integer_only, counters, timings)
    else:
        raise ValueError(f"unknown branch {branch!r}")
    s, z = qs.act_scale[out_bound], qs.act_zero[out_bound]

    def _post():
        real = (q[0, 0, :h, :w].astype(np.float32) - np.float32(z)) * np.float32(s)
        return np.clip(real, 0.0, 1.0) * 255.0

    return img.with_data(net._timed(timings, "post", _post))


# --- fake quantization / QAT ----------------------------------------------------


def _fq_act(a: np.ndarray, s: float, z: int):
    """Quantize->dequantize with the straight-through mask."""
    code = round_half_away(a / s) + z
    mask = (code >= 0) & (code <= 255)
    deq = (np.clip(code, 0, 255) - z) * s
    return deq.astype(a.dtype, copy=False), mask


def _fq_weight(w: np.ndarray, s_w: float):
    code = round_half_away(w / s_w)
    mask = np.abs(code) <= 127
    return (np.clip(code, -127, 127) * s_w).astype(w.dtype, copy=False), mask


def fake_quant_params(model: net.Model, qs: net.QuantState):
    fq = {}
    for name, (w, b) in model.params.items():
        w_fq, mask = _fq_weight(w, qs.weight_scale[name])
        fq[name] = (w_fq, b, mask)
    return fq


def fq_forward(model: net.Model, qs: net.QuantState, x: np.ndarray,
               branch: str, cache: dict | None = None) -> np.ndarray:
    """Fake-quant forward: float ops with quantize->dequantize at every
    boundary and on every weight tensor. Bias is left float (it is carried
    at int32 precision in the integer path)."""
    fqp = fake_quant_params(model, qs)
    if cache is not None:
        cache["fqp"] = fqp

    def conv_block(t, name, act=True):
        w_fq, b, _ = fqp[name]
        pre = nn.conv2d_forward(t, w_fq, b)
        out = nn.leaky_relu_forward(pre) if act else pre
        out_fq, mask = _fq_act(out, qs.act_scale[name], qs.act_zero[name])
        if cache is not None:
            cache[name] = (t, pre, mask)
        return out_fq

    def run_despeckle(t):
        t, in_mask = _fq_act(t, qs.act_scale["d.in"], qs.act_zero["d.in"])
        if cache is not None:
            cache["d.in"] = in_mask
        skips = []
        for l in range(net.LEVELS):
            t = conv_block(t, f"d.e{l}c1")
            t = conv_block(t, f"d.e{l}c2")
            skips.append(t)
            pooled, idx = nn.maxpool2_forward(t)
            if cache is not None:
                cache[f"d.e{l}p"] = (t, idx)
            t = pooled  # pool output shares its input scale: already quantized
        t = conv_block(t, "d.bc1")
        t = conv_block(t, "d.bc2")
        for l in reversed(range(net.LEVELS)):
            name = f"d.d{l}u"
            w_fq, b, _ = fqp[name]
            up = nn.upconv2x2_forward(t, w_fq, b)
            up_fq, mask = _fq_act(up, qs.act_scale[name], qs.act_zero[name])
            if cache is not None:
                cache[name] = (t, mask)
            cat = nn.concat_forward(up_fq, skips[l])  # shared scale: no re-fq
            if cache is not None:
                cache[f"d.d{l}cat"] = (up_fq, skips[l])
            t = conv_block(cat, f"d.d{l}c")
        return conv_block(t, "d.out", act=False)

    def run_deblur(t):
        t, in_mask = _fq_act(t, qs.act_scale["b.in"], qs.act_zero["b.in"])
        if cache is not None:
            cache["b.in"] = in_mask
        for name, *_ in net.DEBLUR_LAYERS:
            t = conv_block(t, name)
        return t

    if branch == "despeckle":
        return run_despeckle(x)
    if branch == "deblur":
        return run_deblur(x)
    raise ValueError(f"QAT runs per branch, got {branch!r}")


def fq_backward(model: net.Model, qs: net.QuantState, cache: dict,
                grad_y: np.ndarray, branch: str):
    """STE gradients of fq_forward w.r.t. the original float parameters."""
    fqp = cache["fqp"]
    grads: dict[str, tuple] = {}

    def conv_unwind(g, name, act=True):
        t_in, pre, mask = cache[name]
        g = g * mask
        if act:
            g = nn.leaky_relu_backward(pre, g)
        g, gw, gb = nn.conv2d_backward(t_in, fqp[name][0], g)
        grads[name] = (gw * fqp[name][2], gb)
        return g

    if branch == "deblur":
        g = grad_y
        for name, *_ in reversed(net.DEBLUR_LAYERS):
            g = conv_unwind(g, name)
        return grads, g

    g = conv_unwind(grad_y, "d.out", act=False)
    skip_grads: dict[int, np.ndarray] = {}
    for l in range(net.LEVELS):
        g = conv_unwind(g, f"d.d{l}c")
        up_fq, skip = cache[f"d.d{l}cat"]
        g_up, g_skip = nn.concat_backward(up_fq, skip, g)
        skip_grads[l] = g_skip
        name = f"d.d{l}u"
        t_in, mask = cache[name]
        g_up = g_up * mask
        g, gw, gb = nn.upconv2x2_backward(t_in, fqp[name][0], g_up)
        grads[name] = (gw * fqp[name][2], gb)
    g = conv_unwind(g, "d.bc2")
    g = conv_unwind(g, "d.bc1")
    for l in reversed(range(net.LEVELS)):
        pool_in, idx = cache[f"d.e{l}p"]
        g = nn.maxpool2_backward(pool_in, idx, g)
        g = g + skip_grads[l]
        g = conv_unwind(g, f"d.e{l}c2")
        g = conv_unwind(g, f"d.e{l}c1")
    return grads, g


def qat_finetune(model: net.Model, qs: net.QuantState, batches, steps: int,
                 branch: str, lr: float = 1e-4):
    """Fine-tune one branch under fake quantization.

    `batches` yields (input, target) float tensors scaled to [0,1]. Returns
    (model copy with tuned float params, list of per-step losses). Zero
    steps returns the model unchanged.
    """
    from .errors import NonFiniteLoss

    out = model.copy()
    table = net.DESPECKLE_LAYERS if branch == "despeckle" else net.DEBLUR_LAYERS
    names = [n for n, *_ in table]
    params = {}
    for n in names:
        params[f"{n}.w"] = out.params[n][0]
        params[f"{n}.b"] = out.params[n][1]
    opt = nn.AdamW(lr=lr)
    losses: list[float] = []
    for _ in range(steps):
        x, target = next(batches)
        cache: dict = {}
        y = fq_forward(out, qs, x, branch, cache)
        loss, gl = nn.l2_loss(y, target)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"QAT loss became {loss}")
        grads, _ = fq_backward(out, qs, cache, gl, branch)
        flat = {}
        for n in names:
            gw, gb = grads[n]
            flat[f"{n}.w"] = gw.astype(np.float32)
            flat[f"{n}.b"] = gb.astype(np.float32)
        opt.step(params, flat)
        losses.append(loss)
    return out, losses
