"""Dense tensor arithmetic with reverse-mode differentiation on a recorded tape.

Tensors are C-contiguous float64 numpy arrays throughout. A forward pass
records a Tape: a topologically ordered list of primitive operations with
cached output values. Walking the tape in reverse yields gradients of a
scalar output with respect to every recorded node, including intermediate
convolutional activations, which is what conductance extraction needs.

Convolution is cross-correlation (no kernel flip). ReLU uses subgradient 0
at exactly 0. There is no implicit broadcasting beyond channel bias-add.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested operation."""


def tensor(values) -> np.ndarray:
    """Coerce to a C-contiguous float64 array; every extent must be >= 1."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(n < 1 for n in arr.shape):
        raise ShapeError(f"tensor extents must all be >= 1, got shape {arr.shape}")
    return arr


def softmax(v: np.ndarray) -> np.ndarray:
    """Stable softmax over the last axis."""
    v = np.asarray(v, dtype=np.float64)
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# convolution / pooling primitives (shared by the tape and the fast forward)
# ---------------------------------------------------------------------------

def conv_output_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """[N,C,H,W] -> ([N,OH,OW,C*kh*kw] patch matrix, OH, OW)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, hp, wp = x.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} does not fit padded input {hp}x{wp} at stride {stride}"
        )
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n, oh, ow, c * kh * kw), oh, ow


def _conv_forward(x: np.ndarray, k: np.ndarray, stride: int, padding: int):
    c_out = k.shape[0]
    cols, oh, ow = _im2col(x, k.shape[2], k.shape[3], stride, padding)
    y = cols @ k.reshape(c_out, -1).T
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), cols


def _conv_backward(x, k, stride, padding, cols, gy):
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    oh, ow = gy.shape[2], gy.shape[3]
    g2 = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, c_out)
    gk = (g2.T @ cols.reshape(-1, c_in * kh * kw)).reshape(k.shape)
    gcols = (g2 @ k.reshape(c_out, -1)).reshape(n, oh, ow, c_in, kh, kw)
    gx = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + w]
    return np.ascontiguousarray(gx), gk


def _pool_forward(x: np.ndarray, size: int):
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool size {size} larger than input {h}x{w}")
    xc = x[:, :, : oh * size, : ow * size]
    win = xc.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, size * size)
    idx = win.argmax(axis=-1)  # first maximum wins on ties
    val = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(val), idx


def _pool_backward(x, size, idx, gy):
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    gwin = np.zeros((n, c, oh, ow, size * size))
    np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
    gcrop = gwin.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
    gcrop = gcrop.reshape(n, c, oh * size, ow * size)
    if oh * size == h and ow * size == w:
        return np.ascontiguousarray(gcrop)
    gx = np.zeros_like(x)
    gx[:, :, : oh * size, : ow * size] = gcrop
    return gx


def conv2d(input, kernels, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate [C_in,H,W] (or [N,C_in,H,W]) with kernels [C_out,C_in,kH,kW].

    Output extents are floor((extent + 2*padding - kernel)/stride) + 1.
    """
    x = tensor(input)
    k = tensor(kernels)
    if k.ndim != 4:
        raise ShapeError(f"kernels must be 4-D [C_out,C_in,kH,kW], got {k.shape}")
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"input must be 3-D [C,H,W] or 4-D [N,C,H,W], got {x.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]} channels "
            f"(shape {x.shape}), kernels expect {k.shape[1]} (shape {k.shape})"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"need stride >= 1 and padding >= 0, got {stride}, {padding}")
    y, _ = _conv_forward(x, k, stride, padding)
    return y[0] if single else y


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    params: dict = field(default_factory=dict)
    aux: tuple = ()


class Tape:
    """Topologically ordered record of primitive operations.

    Every op appends a node whose inputs already exist on the tape, so the
    list is a valid evaluation order by construction. Node values are cached
    at record time; replay() recomputes them from the leaves.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.named: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, node_id: int) -> np.ndarray:
        return self.nodes[node_id].value

    def name(self, name: str, node_id: int) -> None:
        self.named[name] = node_id

    def _push(self, op, inputs, value, params=None, aux=()) -> int:
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"input node {i} not on tape (length {len(self.nodes)})")
        self.nodes.append(Node(op, tuple(inputs), value, params or {}, aux))
        return len(self.nodes) - 1

    # -- primitives ---------------------------------------------------------

    def leaf(self, values, name: str | None = None) -> int:
        nid = self._push("leaf", (), tensor(values))
        if name is not None:
            self.name(name, nid)
        return nid

    def conv2d(self, x: int, kernels: int, stride: int = 1, padding: int = 0) -> int:
        xv, kv = self.value(x), self.value(kernels)
        if xv.shape[1] != kv.shape[1]:
            raise ShapeError(
                f"channel mismatch: input {xv.shape} vs kernels {kv.shape}"
            )
        y, cols = _conv_forward(xv, kv, stride, padding)
        return self._push("conv2d", (x, kernels), y,
                          {"stride": stride, "padding": padding}, (cols,))

    def channel_bias(self, x: int, bias: int) -> int:
        xv, bv = self.value(x), self.value(bias)
        if xv.ndim == 4:
            if bv.shape != (xv.shape[1],):
                raise ShapeError(f"bias {bv.shape} does not match channels of {xv.shape}")
            y = xv + bv[:, None, None]
        elif xv.ndim == 2:
            if bv.shape != (xv.shape[1],):
                raise ShapeError(f"bias {bv.shape} does not match width of {xv.shape}")
            y = xv + bv
        else:
            raise ShapeError(f"channel_bias expects 2-D or 4-D input, got {xv.shape}")
        return self._push("channel_bias", (x, bias), y)

    def relu(self, x: int) -> int:
        return self._push("relu", (x,), np.maximum(self.value(x), 0.0))

    def maxpool2d(self, x: int, size: int = 2) -> int:
        y, idx = _pool_forward(self.value(x), size)
        return self._push("maxpool2d", (x,), y, {"size": size}, (idx,))

    def reshape(self, x: int, shape: tuple[int, ...]) -> int:
        y = np.ascontiguousarray(self.value(x).reshape(shape))
        return self._push("reshape", (x,), y, {"shape": tuple(shape)})

    def matmul(self, x: int, w: int) -> int:
        xv, wv = self.value(x), self.value(w)
        if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
            raise ShapeError(f"matmul shapes incompatible: {xv.shape} @ {wv.shape}")
        return self._push("matmul", (x, w), xv @ wv)

    def softmax_xent(self, logits: int, labels: np.ndarray) -> int:
        """Mean cross-entropy between softmax(logits) and integer labels."""
        zv = self.value(logits)
        labels = np.asarray(labels, dtype=np.int64)
        if zv.ndim != 2 or labels.shape != (zv.shape[0],):
            raise ShapeError(f"softmax_xent got logits {zv.shape}, labels {labels.shape}")
        z = zv - zv.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -logp[np.arange(len(labels)), labels].mean()
        p = np.exp(logp)
        return self._push("softmax_xent", (logits,), np.array([loss]),
                          {"labels": labels}, (p,))

    def replay(self) -> list[np.ndarray]:
        """Recompute every node value from the leaves, in tape order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            ins = [values[i] for i in node.inputs]
            values.append(_replay_op(node, ins))
        return values


def _replay_op(node: Node, ins: list[np.ndarray]) -> np.ndarray:
    op, p = node.op, node.params
    if op == "leaf":
        return node.value
    if op == "conv2d":
        return _conv_forward(ins[0], ins[1], p["stride"], p["padding"])[0]
    if op == "channel_bias":
        b = ins[1]
        return ins[0] + (b[:, None, None] if ins[0].ndim == 4 else b)
    if op == "relu":
        return np.maximum(ins[0], 0.0)
    if op == "maxpool2d":
        return _pool_forward(ins[0], p["size"])[0]
    if op == "reshape":
        return np.ascontiguousarray(ins[0].reshape(p["shape"]))
    if op == "matmul":
        return ins[0] @ ins[1]
    if op == "softmax_xent":
        z = ins[0] - ins[0].max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return np.array([-logp[np.arange(len(p["labels"])), p["labels"]].mean()])
    raise ValueError(f"unknown op {op!r}")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _grads_for(node: Node, ins: list[np.ndarray], g: np.ndarray):
    op, p = node.op, node.params
    if op == "conv2d":
        gx, gk = _conv_backward(ins[0], ins[1], p["stride"], p["padding"],
                                node.aux[0], g)
        return gx, gk
    if op == "channel_bias":
        axes = (0, 2, 3) if ins[0].ndim == 4 else (0,)
        return g, g.sum(axis=axes)
    if op == "relu":
        return (g * (ins[0] > 0),)
    if op == "maxpool2d":
        return (_pool_backward(ins[0], p["size"], node.aux[0], g),)
    if op == "reshape":
        return (np.ascontiguousarray(g.reshape(ins[0].shape)),)
    if op == "matmul":
        return g @ ins[1].T, ins[0].T @ g
    if op == "softmax_xent":
        labels = p["labels"]
        onehot = np.zeros_like(ins[0])
        onehot[np.arange(len(labels)), labels] = 1.0
        return (g[0] * (node.aux[0] - onehot) / len(labels),)
    raise ValueError(f"no backward rule for op {node.op!r}")


def backward_from(tape: Tape, seeds: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Reverse-accumulate from explicit cotangent seeds at arbitrary nodes."""
    grads: dict[int, np.ndarray] = {}
    for nid, seed in seeds.items():
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != tape.nodes[nid].value.shape:
            raise ShapeError(
                f"seed shape {seed.shape} does not match node {nid} "
                f"value shape {tape.nodes[nid].value.shape}"
            )
        grads[nid] = grads.get(nid, 0) + seed
    for nid in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[nid]
        g = grads.get(nid)
        if g is None or node.op == "leaf":
            continue
        ins = [tape.nodes[i].value for i in node.inputs]
        for i, gi in zip(node.inputs, _grads_for(node, ins, g)):
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    for nid, node in enumerate(tape.nodes):
        if nid not in grads:
            grads[nid] = np.zeros_like(node.value)
    return grads


def backward(tape: Tape, output_index: int) -> dict[int, np.ndarray]:
    """Gradients of presoftmax[output_index] w.r.t. every node on the tape.

    The tape must carry a node named "presoftmax". For batched tapes the
    seed selects output_index in every row, so each sample's gradient is
    taken w.r.t. its own copy of that class score.
    """
    if "presoftmax" not in tape.named:
        raise ValueError("tape has no node named 'presoftmax'")
    out = tape.named["presoftmax"]
    val = tape.value(out)
    num_classes = val.shape[-1]
    if not 0 <= output_index < num_classes:
        raise IndexError(f"output index {output_index} out of range for {num_classes} classes")
    seed = np.zeros_like(val)
    seed[..., output_index] = 1.0
    return backward_from(tape, {out: seed})


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one component at a time."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = tensor(x)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += eps
        xm = x.copy()
        xm.flat[i] -= eps
        g.flat[i] = (float(f(xp)) - float(f(xm))) / (2.0 * eps)
    return g
