#!/usr/bin/env python3
"""Float and fixed-point forward pass of a dumped SkyNet model in numpy.

Usage: quant_oracle.py <dump-dir>
The directory holds model.json, model.skyn and input.skyn as written by the
quantization fixture. Prints the mean absolute difference between the float
head output and the integer-path head output.

Integer path: batch norm folded into the preceding conv, weights quantized per
tensor to 11 signed bits, activations to 9 bits (ReLU6 outputs unsigned with 6
fraction bits, other tensors sized from their observed range), round half to
even with saturation, exact int64 accumulation. The last conv's accumulator is
dequantized directly.
"""
import json
import math
import struct
import sys

import numpy as np

EPS = 1e-5
WEIGHT_BITS = 11
ACT_BITS = 9


def read_blob(path):
    data = open(path, "rb").read()
    assert data[:4] == b"SKYN"
    (version,) = struct.unpack_from("<H", data, 4)
    assert version == 1
    (count,) = struct.unpack_from("<I", data, 6)
    pos = 10
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode()
        pos += n
        dtype = data[pos]
        pos += 1
        assert dtype == 0, "oracle reads f32 tensors only"
        rank = data[pos]
        pos += 1
        shape = struct.unpack_from("<%dI" % rank, data, pos)
        pos += 4 * rank
        size = int(np.prod(shape))
        vals = np.frombuffer(data, dtype="<f4", count=size, offset=pos).astype(np.float64)
        pos += 4 * size
        out[name] = vals.reshape(shape)
    assert pos == len(data)
    return out


# --- network walk -----------------------------------------------------------

def plan(spec):
    """Yields (name, kind, out_channels, is_branch) in execution order."""
    nb = len(spec["bundles"])
    bypass = spec.get("bypass")
    pools = set(spec.get("pool_after", []))
    steps = []
    for s, b in enumerate(spec["bundles"]):
        if bypass and bypass["destination"] == s:
            steps.append(("b%d.concat" % s, "bypass_concat", 0, False))
        for i, l in enumerate(b["layers"]):
            steps.append(("b%d.l%d" % (s, i), l["kind"], l.get("out_channels", 0), False))
        if bypass and bypass["source"] == s:
            steps.append(("b%d.reorder" % s, "space_to_depth", 0, True))
        if s in pools:
            steps.append(("b%d.pool" % s, "maxpool2", 0, False))
    if bypass and bypass["destination"] == nb:
        steps.append(("head.concat", "bypass_concat", 0, False))
    for i, l in enumerate(spec["head"]):
        steps.append(("head.l%d" % i, l["kind"], l.get("out_channels", 0), False))
    return steps


def s2d(x):
    c, h, w = x.shape
    y = np.empty((4 * c, h // 2, w // 2), dtype=x.dtype)
    for k in range(4):
        y[k::4] = x[:, k // 2::2, k % 2::2]
    return y


def pool(x):
    c, h, w = x.shape
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def dw(x, w):
    c, h, wd = x.shape
    p = np.zeros((c, h + 2, wd + 2), dtype=x.dtype)
    p[:, 1:-1, 1:-1] = x
    y = np.zeros_like(x)
    for u in range(3):
        for v in range(3):
            y += p[:, u:u + h, v:v + wd] * w[:, u, v][:, None, None]
    return y


def pw(x, w):
    c, h, wd = x.shape
    return (w @ x.reshape(c, h * wd)).reshape(w.shape[0], h, wd)


def bn_affine(W, name):
    g, b, m, v = (W[name + s] for s in (".gamma", ".beta", ".mean", ".var"))
    scale = g * (1.0 / np.sqrt(v + EPS))
    shift = b - g * m * (1.0 / np.sqrt(v + EPS))
    return scale, shift


def float_forward(spec, W, x):
    held = None
    for name, kind, _, branch in plan(spec):
        if kind == "dw_conv3":
            x = dw(x, W[name + ".weight"])
        elif kind == "pw_conv1":
            x = pw(x, W[name + ".weight"])
        elif kind == "batchnorm":
            g, b, m, v = (W[name + s] for s in (".gamma", ".beta", ".mean", ".var"))
            x = g[:, None, None] * (x - m[:, None, None]) / np.sqrt(v + EPS)[:, None, None] + b[:, None, None]
        elif kind == "relu6":
            x = np.clip(x, 0.0, 6.0)
        elif kind == "relu":
            x = np.maximum(x, 0.0)
        elif kind == "maxpool2":
            x = pool(x)
        elif kind == "space_to_depth":
            held = s2d(x)
        elif kind == "bypass_concat":
            x = np.concatenate([x, held], axis=0)
    return x


# --- fixed point --------------------------------------------------------------

def frac_for(lo, hi, bits, signed):
    m = max(abs(lo), abs(hi))
    sign = 1 if signed else 0
    if m == 0:
        return bits - sign
    i = 0
    while math.ldexp(1.0, i) < m:
        i += 1
    while i > -1100 and math.ldexp(1.0, i - 1) >= m:
        i -= 1
    return min(48, max(-32, bits - sign - i))


def qrange(bits, signed):
    return (-(1 << (bits - 1)), (1 << (bits - 1)) - 1) if signed else (0, (1 << bits) - 1)


def quantize(x, bits, frac, signed):
    lo, hi = qrange(bits, signed)
    y = np.round(np.ldexp(x, frac))  # numpy rounds half to even
    return np.clip(y, lo, hi).astype(np.int64)


def shift_round(v, shift):
    """v * 2^-shift, round half to even."""
    if shift <= 0:
        return v * (1 << -shift)
    q = v >> shift
    rem = v - (q << shift)
    half = 1 << (shift - 1)
    up = (rem > half) | ((rem == half) & ((q & 1) == 1))
    return q + up.astype(np.int64)


def int_dw(x, w):
    c, h, wd = x.shape
    p = np.zeros((c, h + 2, wd + 2), dtype=np.int64)
    p[:, 1:-1, 1:-1] = x
    y = np.zeros((c, h, wd), dtype=np.int64)
    for u in range(3):
        for v in range(3):
            y += p[:, u:u + h, v:v + wd] * w[:, u, v][:, None, None]
    return y


def int_pw(x, w):
    c, h, wd = x.shape
    return (w @ x.reshape(c, h * wd)).reshape(w.shape[0], h, wd)


def quant_forward(spec, W, x):
    steps = plan(spec)
    lo, hi = float(x.min()), float(x.max())
    signed = lo < 0
    frac = frac_for(lo, hi, ACT_BITS, signed)
    cur = (quantize(x, ACT_BITS, frac, signed), ACT_BITS, frac, signed)
    held = None
    k = 0
    while k < len(steps):
        name, kind, _, branch = steps[k]
        if kind in ("dw_conv3", "pw_conv1"):
            w = W[name + ".weight"]
            out_ch = w.shape[0]
            scale, shift = np.ones(out_ch), np.zeros(out_ch)
            nxt = k + 1
            if nxt < len(steps) and steps[nxt][1] == "batchnorm":
                scale, shift = bn_affine(W, steps[nxt][0])
                nxt += 1
            act = None
            if nxt < len(steps) and steps[nxt][1] in ("relu", "relu6"):
                act = steps[nxt][1]
                nxt += 1
            wf = w * scale.reshape((out_ch,) + (1,) * (w.ndim - 1))
            wfrac = frac_for(float(wf.min()), float(wf.max()), WEIGHT_BITS, True)
            wq = quantize(wf, WEIGHT_BITS, wfrac, True)
            xv, _, xfrac, _ = cur
            acc = int_dw(xv, wq) if kind == "dw_conv3" else int_pw(xv, wq)
            afrac = xfrac + wfrac
            bias = np.array([round(math.ldexp(float(b), afrac)) for b in shift], dtype=np.int64)
            acc = acc + bias[:, None, None]
            if nxt == len(steps) and act is None:
                return np.ldexp(acc.astype(np.float64), -afrac)
            if act == "relu6":
                obits, ofrac, osigned = ACT_BITS, frac_for(0.0, 6.0, ACT_BITS, False), False
            else:
                m = math.ldexp(float(np.abs(acc).max()), -afrac)
                osigned = act is None
                obits, ofrac = ACT_BITS, frac_for(-m if osigned else 0.0, m, ACT_BITS, osigned)
            qlo, qhi = qrange(obits, osigned)
            if act:
                qlo = max(qlo, 0)
            if act == "relu6":
                qhi = min(qhi, 6 << ofrac)
            cur = (np.clip(shift_round(acc, afrac - ofrac), qlo, qhi), obits, ofrac, osigned)
            k = nxt
            continue
        if kind == "maxpool2":
            cur = (pool(cur[0]),) + cur[1:]
        elif kind == "space_to_depth":
            held = (s2d(cur[0]),) + cur[1:]
        elif kind == "bypass_concat":
            a, b = cur, held
            if a[1:] != b[1:]:
                bits, frac, signed = max(a[1], b[1]), min(a[2], b[2]), a[3] or b[3]
                lo_, hi_ = qrange(bits, signed)
                a = (np.clip(shift_round(a[0], a[2] - frac), lo_, hi_), bits, frac, signed)
                b = (np.clip(shift_round(b[0], b[2] - frac), lo_, hi_), bits, frac, signed)
            cur = (np.concatenate([a[0], b[0]], axis=0),) + a[1:]
        else:
            raise SystemExit("oracle: unsupported standalone step " + name)
        k += 1
    return np.ldexp(cur[0].astype(np.float64), -cur[2])


def main():
    d = sys.argv[1]
    spec = json.load(open(d + "/model.json"))
    W = read_blob(d + "/model.skyn")
    (x,) = read_blob(d + "/input.skyn").values()
    f = float_forward(spec, W, x)
    q = quant_forward(spec, W, x)
    print("head shape", f.shape)
    print("mean_abs_deviation %.17g" % float(np.mean(np.abs(f - q))))
    print("max_abs_deviation %.17g" % float(np.max(np.abs(f - q))))


if __name__ == "__main__":
    main()
