"""A compact U-Net that maps an image pair to a displacement field.

The architecture is fixed (two encoder stages, a bottleneck, two decoder
stages with skip connections, all 3x3 convolutions with same padding):

    name        in -> out   notes
    enc1a        2 -> 16    LeakyReLU(0.2)
    enc1b       16 -> 16    LeakyReLU(0.2)
    pool1                   2x2 average pool
    enc2a       16 -> 32    LeakyReLU(0.2)
    enc2b       32 -> 32    LeakyReLU(0.2)
    pool2                   2x2 average pool
    bottleneck  32 -> 32    LeakyReLU(0.2)
    up1                     nearest 2x, concat enc2b
    dec1        64 -> 32    LeakyReLU(0.2)
    up2                     nearest 2x, concat enc1b
    dec2        48 -> 16    LeakyReLU(0.2)
    flow        16 ->  2    linear, zero-initialised

Zero-initialising the flow head makes an untrained network predict the
identity transform, so training starts from "no deformation" rather than
from noise.

Forward and backward passes are written out by hand in numpy; the
backward pass is exact reverse-mode differentiation of the forward pass
(verified against finite differences in the test-suite), not an
approximation. Inputs must have height and width divisible by 4 because
of the two pooling stages.

Checkpoints use the NETP container: magic ``NETP``, entry count, then per
entry a name, a shape, and a little-endian float32 payload. Optimiser
state is appended as additional entries under ``adam.`` names.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DecodeError, ParameterError
from .rng import Xoshiro256pp
from .validation import check_plane, check_same_shape

__all__ = [
    "LAYERS",
    "LEAKY_SLOPE",
    "NetParams",
    "AdamState",
    "Tape",
    "init_params",
    "forward",
    "forward_batch",
    "backward",
    "backward_batch",
    "adam_step",
    "save_params",
    "load_params",
]

#: Convolution layers in forward order: (name, in_channels, out_channels).
LAYERS: tuple[tuple[str, int, int], ...] = (
    ("enc1a", 2, 16),
    ("enc1b", 16, 16),
    ("enc2a", 16, 32),
    ("enc2b", 32, 32),
    ("bottleneck", 32, 32),
    ("dec1", 64, 32),
    ("dec2", 48, 16),
    ("flow", 16, 2),
)

LEAKY_SLOPE = 0.2
_KSIZE = 3


class NetParams:
    """Kernels and biases for every convolution, keyed by layer name."""

    def __init__(self, blocks: dict[str, tuple[np.ndarray, np.ndarray]]):
        for name, cin, cout in LAYERS:
            if name not in blocks:
                raise ParameterError(f"missing parameters for layer {name!r}")
            k, b = blocks[name]
            if k.shape != (cout, cin, _KSIZE, _KSIZE) or b.shape != (cout,):
                raise ParameterError(
                    f"layer {name!r}: bad shapes {k.shape}, {b.shape}; "
                    f"expected {(cout, cin, _KSIZE, _KSIZE)}, {(cout,)}"
                )
        self.blocks = {name: blocks[name] for name, _, _ in LAYERS}

    @property
    def dtype(self):
        return self.blocks["enc1a"][0].dtype

    def param_count(self) -> int:
        return sum(k.size + b.size for k, b in self.blocks.values())

    def astype(self, dtype) -> "NetParams":
        return NetParams(
            {n: (k.astype(dtype), b.astype(dtype)) for n, (k, b) in self.blocks.items()}
        )

    def copy(self) -> "NetParams":
        return NetParams({n: (k.copy(), b.copy()) for n, (k, b) in self.blocks.items()})

    def allclose(self, other: "NetParams", rtol=0.0, atol=0.0) -> bool:
        return all(
            np.allclose(self.blocks[n][0], other.blocks[n][0], rtol=rtol, atol=atol)
            and np.allclose(self.blocks[n][1], other.blocks[n][1], rtol=rtol, atol=atol)
            for n, _, _ in LAYERS
        )


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    t: int
    m: dict[str, tuple[np.ndarray, np.ndarray]]
    v: dict[str, tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros(cls, params: NetParams) -> "AdamState":
        zero = lambda a: np.zeros_like(a)
        return cls(
            t=0,
            m={n: (zero(k), zero(b)) for n, (k, b) in params.blocks.items()},
            v={n: (zero(k), zero(b)) for n, (k, b) in params.blocks.items()},
        )


@dataclass
class Tape:
    """Activations recorded by the forward pass for the backward pass."""

    conv_inputs: dict[str, np.ndarray] = dc_field(default_factory=dict)
    preacts: dict[str, np.ndarray] = dc_field(default_factory=dict)


def init_params(seed: int, dtype=np.float32) -> NetParams:
    """He-normal initialisation from the pinned generator.

    Kernels draw Normal(0, 2 / fan_in) values in table order, entries in
    C order; biases are zero. The flow head consumes no draws and is
    entirely zero so the initial prediction is the identity field.
    """
    rng = Xoshiro256pp(seed)
    blocks = {}
    for name, cin, cout in LAYERS:
        shape = (cout, cin, _KSIZE, _KSIZE)
        if name == "flow":
            k = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = cin * _KSIZE * _KSIZE
            std = np.sqrt(2.0 / fan_in)
            k = (rng.normal_array(cout * cin * _KSIZE * _KSIZE) * std).reshape(shape)
        blocks[name] = (k.astype(dtype), np.zeros(cout, dtype=dtype))
    return NetParams(blocks)


def _conv_same(x: np.ndarray, k: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    """3x3 'same' convolution over an (N, C, H, W) batch."""
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(pad, (_KSIZE, _KSIZE), axis=(2, 3))
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # (N, H, W, Cout)
    out = np.moveaxis(out, 3, 1)
    if b is not None:
        out += b[None, :, None, None]
    return np.ascontiguousarray(out)


def _conv_same_backward(x: np.ndarray, k: np.ndarray, gy: np.ndarray):
    """Gradients of _conv_same wrt input, kernel, and bias."""
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(pad, (_KSIZE, _KSIZE), axis=(2, 3))
    dk = np.tensordot(win, gy, axes=([0, 2, 3], [0, 2, 3]))  # (Cin, 3, 3, Cout)
    dk = np.moveaxis(dk, 3, 0)
    db = gy.sum(axis=(0, 2, 3))
    # grad wrt input: correlate the upstream with spatially flipped kernels
    kt = np.ascontiguousarray(k[:, :, ::-1, ::-1])
    gpad = np.pad(gy, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gwin = np.lib.stride_tricks.sliding_window_view(gpad, (_KSIZE, _KSIZE), axis=(2, 3))
    dx = np.tensordot(gwin, kt, axes=([1, 4, 5], [0, 2, 3]))  # (N, H, W, Cin)
    return np.ascontiguousarray(np.moveaxis(dx, 3, 1)), np.ascontiguousarray(dk), db


def _lrelu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, x, LEAKY_SLOPE * x)


def _lrelu_backward(pre: np.ndarray, gy: np.ndarray) -> np.ndarray:
    one = pre.dtype.type(1.0)
    slope = pre.dtype.type(LEAKY_SLOPE)
    return gy * np.where(pre >= 0.0, one, slope)


def _avgpool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_backward(gy: np.ndarray) -> np.ndarray:
    q = gy.dtype.type(0.25)
    return np.repeat(np.repeat(gy * q, 2, axis=2), 2, axis=3)


def _upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample2_backward(gy: np.ndarray) -> np.ndarray:
    n, c, h, w = gy.shape
    return gy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _conv_act(params, name, x, tape):
    k, b = params.blocks[name]
    z = _conv_same(x, k, b)
    tape.conv_inputs[name] = x
    tape.preacts[name] = z
    return _lrelu(z)


def forward_batch(params: NetParams, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Run the network on an (N, 2, H, W) batch.

    Returns fields of shape (N, H, W, 2) (channel 0 is dx) and the tape
    needed for the backward pass.
    """
    if x.ndim != 4 or x.shape[1] != 2:
        raise ParameterError(f"expected an (N, 2, H, W) batch, got shape {x.shape}")
    _, _, h, w = x.shape
    if h % 4 != 0 or w % 4 != 0:
        raise ParameterError(
            f"input is {w}x{h} but height and width must be multiples of 4; "
            "pad or resize the images first"
        )
    x = np.ascontiguousarray(x, dtype=params.dtype)
    tape = Tape()
    e1a = _conv_act(params, "enc1a", x, tape)
    e1b = _conv_act(params, "enc1b", e1a, tape)
    p1 = _avgpool2(e1b)
    e2a = _conv_act(params, "enc2a", p1, tape)
    e2b = _conv_act(params, "enc2b", e2a, tape)
    p2 = _avgpool2(e2b)
    bt = _conv_act(params, "bottleneck", p2, tape)
    c1 = np.concatenate([_upsample2(bt), e2b], axis=1)
    d1 = _conv_act(params, "dec1", c1, tape)
    c2 = np.concatenate([_upsample2(d1), e1b], axis=1)
    d2 = _conv_act(params, "dec2", c2, tape)
    kf, bf = params.blocks["flow"]
    fl = _conv_same(d2, kf, bf)
    tape.conv_inputs["flow"] = d2
    return np.moveaxis(fl, 1, 3), tape


def backward_batch(params: NetParams, tape: Tape, grad_fields: np.ndarray):
    """Exact gradients of every kernel and bias for a batch.

    ``grad_fields`` is dL/d(fields), shape (N, H, W, 2). Returns a dict
    ``name -> (dkernel, dbias)`` summed over the batch; divide by the
    batch size for a mean.
    """
    grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    gfl = np.ascontiguousarray(np.moveaxis(grad_fields, 3, 1), dtype=params.dtype)

    g_d2, dk, db = _conv_same_backward(tape.conv_inputs["flow"], params.blocks["flow"][0], gfl)
    grads["flow"] = (dk, db)

    g_z = _lrelu_backward(tape.preacts["dec2"], g_d2)
    g_c2, dk, db = _conv_same_backward(tape.conv_inputs["dec2"], params.blocks["dec2"][0], g_z)
    grads["dec2"] = (dk, db)
    g_u2, g_e1b_skip = g_c2[:, :32], g_c2[:, 32:]

    g_d1 = _upsample2_backward(g_u2)
    g_z = _lrelu_backward(tape.preacts["dec1"], g_d1)
    g_c1, dk, db = _conv_same_backward(tape.conv_inputs["dec1"], params.blocks["dec1"][0], g_z)
    grads["dec1"] = (dk, db)
    g_u1, g_e2b_skip = g_c1[:, :32], g_c1[:, 32:]

    g_bt = _upsample2_backward(g_u1)
    g_z = _lrelu_backward(tape.preacts["bottleneck"], g_bt)
    g_p2, dk, db = _conv_same_backward(
        tape.conv_inputs["bottleneck"], params.blocks["bottleneck"][0], g_z
    )
    grads["bottleneck"] = (dk, db)

    g_e2b = _avgpool2_backward(g_p2) + g_e2b_skip
    g_z = _lrelu_backward(tape.preacts["enc2b"], g_e2b)
    g_e2a, dk, db = _conv_same_backward(tape.conv_inputs["enc2b"], params.blocks["enc2b"][0], g_z)
    grads["enc2b"] = (dk, db)

    g_z = _lrelu_backward(tape.preacts["enc2a"], g_e2a)
    g_p1, dk, db = _conv_same_backward(tape.conv_inputs["enc2a"], params.blocks["enc2a"][0], g_z)
    grads["enc2a"] = (dk, db)

    g_e1b = _avgpool2_backward(g_p1) + g_e1b_skip
    g_z = _lrelu_backward(tape.preacts["enc1b"], g_e1b)
    g_e1a, dk, db = _conv_same_backward(tape.conv_inputs["enc1b"], params.blocks["enc1b"][0], g_z)
    grads["enc1b"] = (dk, db)

    g_z = _lrelu_backward(tape.preacts["enc1a"], g_e1a)
    _, dk, db = _conv_same_backward(tape.conv_inputs["enc1a"], params.blocks["enc1a"][0], g_z)
    grads["enc1a"] = (dk, db)
    return grads


def forward(params: NetParams, fixed, moving) -> tuple[np.ndarray, Tape]:
    """Predict the field for one pair; images stacked as two channels."""
    fx = check_plane(fixed, "fixed")
    mv = check_plane(moving, "moving")
    check_same_shape(fx, mv, "network inputs")
    batch = np.stack([fx, mv])[None].astype(params.dtype)
    fields, tape = forward_batch(params, batch)
    return fields[0].astype(np.float64), tape


def backward(params: NetParams, tape: Tape, grad_field: np.ndarray):
    """Parameter gradients for a single pair (see backward_batch)."""
    return backward_batch(params, tape, np.asarray(grad_field)[None])


def adam_step(
    params: NetParams,
    grads: dict[str, tuple[np.ndarray, np.ndarray]],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[NetParams, AdamState]:
    """One Adam update with bias correction; returns new params and state."""
    t = state.t + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_blocks, new_m, new_v = {}, {}, {}
    for name, _, _ in LAYERS:
        pk, pb = params.blocks[name]
        gk, gb = grads[name]
        updated = []
        ms, vs = [], []
        for p, g, m, v in zip((pk, pb), (gk, gb), state.m[name], state.v[name]):
            g = g.astype(p.dtype)
            m2 = beta1 * m + (1.0 - beta1) * g
            v2 = beta2 * v + (1.0 - beta2) * (g * g)
            step = lr * (m2 / bc1) / (np.sqrt(v2 / bc2) + eps)
            updated.append((p - step).astype(p.dtype))
            ms.append(m2)
            vs.append(v2)
        new_blocks[name] = tuple(updated)
        new_m[name] = tuple(ms)
        new_v[name] = tuple(vs)
    return NetParams(new_blocks), AdamState(t=t, m=new_m, v=new_v)


# --- NETP container -------------------------------------------------------

_NETP_MAGIC = b"NETP"


def _netp_entries(params: NetParams, state: AdamState | None):
    for name, _, _ in LAYERS:
        k, b = params.blocks[name]
        yield f"{name}.kernel", k
        yield f"{name}.bias", b
    if state is not None:
        yield "adam.t", np.array([state.t], dtype=np.float32)
        for prefix, table in (("adam.m", state.m), ("adam.v", state.v)):
            for name, _, _ in LAYERS:
                k, b = table[name]
                yield f"{prefix}.{name}.kernel", k
                yield f"{prefix}.{name}.bias", b


def save_params(path, params: NetParams, state: AdamState | None = None) -> None:
    """Write parameters (and optionally Adam state) as a NETP file."""
    entries = list(_netp_entries(params, state))
    with open(path, "wb") as f:
        f.write(_NETP_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            encoded = name.encode("ascii")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path) -> tuple[NetParams, AdamState | None]:
    """Read a NETP file; rejects bad magic, truncation, unknown layers."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as exc:
        raise DecodeError(f"{path}: file not found") from exc
    if len(data) < 8 or data[:4] != _NETP_MAGIC:
        raise DecodeError(f"{path}: not a NETP checkpoint")
    (count,) = struct.unpack("<I", data[4:8])
    pos = 8
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("ascii")
            if len(name) != nlen:
                raise DecodeError(f"{path}: truncated entry name")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
            payload = data[pos : pos + 4 * n]
            if len(payload) != 4 * n:
                raise DecodeError(f"{path}: truncated payload for entry {name!r}")
            pos += 4 * n
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        except struct.error as exc:
            raise DecodeError(f"{path}: truncated checkpoint") from exc

    blocks = {}
    for name, cin, cout in LAYERS:
        try:
            k = arrays[f"{name}.kernel"]
            b = arrays[f"{name}.bias"]
        except KeyError as exc:
            raise DecodeError(f"{path}: checkpoint is missing layer {name!r}") from exc
        if k.shape != (cout, cin, _KSIZE, _KSIZE) or b.shape != (cout,):
            raise DecodeError(f"{path}: wrong shapes for layer {name!r}")
        blocks[name] = (k, b)
    params = NetParams(blocks)

    if "adam.t" not in arrays:
        return params, None
    m, v = {}, {}
    try:
        for prefix, table in (("adam.m", m), ("adam.v", v)):
            for name, _, _ in LAYERS:
                table[name] = (arrays[f"{prefix}.{name}.kernel"], arrays[f"{prefix}.{name}.bias"])
    except KeyError as exc:
        raise DecodeError(f"{path}: incomplete optimiser state") from exc
    state = AdamState(t=int(arrays["adam.t"][0]), m=m, v=v)
    return params, state
