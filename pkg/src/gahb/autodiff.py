"""Minimal reverse-mode autodiff over rank-4 tensors.

A Tape records Nodes in creation order; creation order is a topological order
of the (acyclic) forward graph, so the backward sweep just walks the node list
in reverse, accumulating cotangents additively in a fixed order. Only the op
vocabulary needed for bias-free convolutional denoisers exists: conv2d (3x3,
stride 1, zero padding "same"), relu, bias-free batch norm, add, scale, mse.

Ops accept either a Node or a plain ndarray for any argument; ndarrays are
constants and receive no gradient. The raw ``*_raw`` kernels are also used
directly for tape-free eval-mode forward passes.

Convolution is im2col + one GEMM; its input adjoint is another conv with the
kernel rotated 180 degrees and in/out channels swapped, and its kernel adjoint
is a second GEMM against the re-materialized column matrix.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, GahbError

# ---------------------------------------------------------------------------
# raw kernels


def _im2col(x: np.ndarray, ksize: int) -> np.ndarray:
    """(b,c,h,w) -> (b*h*w, c*ksize*ksize) with zero padding, stride 1."""
    b, c, h, w = x.shape
    p = ksize // 2
    xp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + h, p:p + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (ksize, ksize), axis=(2, 3))
    # (b, c, h, w, k, k) -> (b, h, w, c, k, k) -> rows
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * h * w, c * ksize * ksize)


def conv2d_raw(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Channel-mixing 2D correlation, stride 1, zero-padded to "same" size.

    x: (b, c_in, h, w); kernel: (c_out, c_in, k, k) with k odd.
    """
    if x.ndim != 4:
        raise DimensionMismatch("rank", 4, x.ndim, "conv2d input")
    if kernel.ndim != 4:
        raise DimensionMismatch("rank", 4, kernel.ndim, "conv2d kernel")
    b, c, h, w = x.shape
    co, ci, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise GahbError(f"conv2d kernel must be square with odd size, got {kh}x{kw}")
    if ci != c:
        raise DimensionMismatch("channels", ci, c, "conv2d input vs kernel")
    cols = _im2col(x, kh)
    out = cols @ kernel.reshape(co, ci * kh * kw).T
    return out.reshape(b, h, w, co).transpose(0, 3, 1, 2)


def conv2d_grad_input(upstream: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Adjoint of conv2d_raw in its input: correlate the upstream cotangent
    with the kernel rotated 180 degrees and channel axes swapped."""
    kt = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_raw(upstream, kt)


def conv2d_grad_kernel(x: np.ndarray, upstream: np.ndarray, ksize: int) -> np.ndarray:
    """Adjoint of conv2d_raw in its kernel."""
    b, c, h, w = x.shape
    co = upstream.shape[1]
    cols = _im2col(x, ksize)
    gf = upstream.transpose(0, 2, 3, 1).reshape(b * h * w, co)
    return (gf.T @ cols).reshape(co, c, ksize, ksize)


def relu_raw(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def bfnorm_stats(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean square over batch x spatial, and sqrt(ms + eps)."""
    ms = np.mean(np.square(x), axis=(0, 2, 3))
    return ms, np.sqrt(ms + eps)


def bfnorm_eval_raw(x: np.ndarray, gain: np.ndarray, running_rms: np.ndarray,
                    eps: float = 1e-5) -> np.ndarray:
    s = np.sqrt(np.square(running_rms) + eps)
    return x * (gain / s)[None, :, None, None]


# ---------------------------------------------------------------------------
# tape


class Node:
    """One recorded op. ``_bwd`` maps the node's cotangent to per-parent
    cotangent contributions, aligned with ``parents``."""

    __slots__ = ("tape", "kind", "value", "parents", "grad", "_bwd")

    def __init__(self, tape: "Tape", kind: str, value, parents, bwd):
        self.tape = tape
        self.kind = kind
        self.value = value
        self.parents = parents
        self.grad = None
        self._bwd = bwd
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node({self.kind}, shape={np.shape(self.value)})"


class Tape:
    """Forward recording; nodes appended in creation order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value: np.ndarray) -> Node:
        return Node(self, "input", np.asarray(value), (), None)


def _val(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(*args) -> Tape:
    tapes = {a.tape for a in args if isinstance(a, Node)}
    if len(tapes) > 1:
        raise GahbError("op arguments recorded on different tapes")
    if not tapes:
        raise GahbError("op needs at least one Node argument")
    return tapes.pop()


def _attach(tape, kind, value, node_args, contribs_fn):
    """node_args: the op args; gradient flows only to those that are Nodes."""
    parents = tuple(a for a in node_args if isinstance(a, Node))
    if not parents:
        return Node(tape, kind, value, (), None)
    mask = [isinstance(a, Node) for a in node_args]

    def bwd(up):
        all_contribs = contribs_fn(up)
        return [g for g, m in zip(all_contribs, mask) if m]

    return Node(tape, kind, value, parents, bwd)


# ---------------------------------------------------------------------------
# ops


def conv2d(x, kernel) -> Node:
    tape = _tape_of(x, kernel)
    xv, kv = _val(x), _val(kernel)
    out = conv2d_raw(xv, kv)
    ksize = kv.shape[2]
    need_k = isinstance(kernel, Node)

    def contribs(up):
        gx = conv2d_grad_input(up, kv)
        gk = conv2d_grad_kernel(xv, up, ksize) if need_k else None
        return (gx, gk)

    return _attach(tape, "conv2d", out, (x, kernel), contribs)


def relu(x) -> Node:
    tape = _tape_of(x)
    xv = _val(x)
    out = relu_raw(xv)
    mask = xv > 0

    def contribs(up):
        return (up * mask,)

    return _attach(tape, "relu", out, (x,), contribs)


def bf_batchnorm(x, gain, mode: str = "train", running_rms: np.ndarray | None = None,
                 eps: float = 1e-5, momentum: float = 0.1) -> Node:
    """Bias-free normalization: divide by the per-channel RMS, scale by gain.

    No mean is subtracted and no shift is added. In train mode the statistic
    comes from the current batch and ``running_rms`` (if given) is updated in
    place with the stated momentum; in eval mode the stored ``running_rms``
    is used and nothing depends on the batch.
    """
    if mode not in ("train", "eval"):
        raise GahbError(f"bf_batchnorm mode must be 'train' or 'eval', got {mode!r}")
    tape = _tape_of(x, gain)
    xv, gv = _val(x), _val(gain)
    c = xv.shape[1]
    if gv.shape != (c,):
        raise DimensionMismatch("channels", c, gv.shape, "bf_batchnorm gain")

    if mode == "train":
        ms, s = bfnorm_stats(xv, eps)
        if running_rms is not None:
            if running_rms.shape != (c,):
                raise DimensionMismatch("channels", c, running_rms.shape,
                                        "bf_batchnorm running_rms")
            updated = np.sqrt((1.0 - momentum) * np.square(running_rms) + momentum * ms)
            running_rms[:] = updated.astype(running_rms.dtype, copy=False)
        n = xv.shape[0] * xv.shape[2] * xv.shape[3]
        inv = (gv / s)[None, :, None, None]
        out = xv * inv

        def contribs(up):
            dot = np.sum(up * xv, axis=(0, 2, 3))  # per channel
            gx = inv * (up - xv * (dot / (n * (s * s)))[None, :, None, None])
            gg = dot / s
            return (gx, gg)

        return _attach(tape, "bfnorm", out, (x, gain), contribs)

    if running_rms is None:
        raise GahbError("bf_batchnorm eval mode needs running_rms")
    s = np.sqrt(np.square(running_rms) + eps)
    inv = (gv / s)[None, :, None, None]
    out = xv * inv

    def contribs(up):
        gx = up * inv
        gg = np.sum(up * xv, axis=(0, 2, 3)) / s
        return (gx, gg)

    return _attach(tape, "bfnorm", out, (x, gain), contribs)


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise DimensionMismatch("shape", av.shape, bv.shape, "add")
    out = av + bv

    def contribs(up):
        return (up, up)

    return _attach(tape, "add", out, (a, b), contribs)


def scale(a, factor: float) -> Node:
    tape = _tape_of(a)
    out = _val(a) * factor

    def contribs(up):
        return (up * factor,)

    return _attach(tape, "scale", out, (a,), contribs)


def mse_loss(pred, target) -> Node:
    """Mean over all entries of the squared difference. Scalar node."""
    tape = _tape_of(pred) if isinstance(pred, Node) else _tape_of(target)
    pv, tv = _val(pred), _val(target)
    if pv.shape != tv.shape:
        raise DimensionMismatch("shape", pv.shape, tv.shape, "mse_loss")
    diff = pv - tv
    n = diff.size
    out = float(np.mean(np.square(diff)))

    def contribs(up):
        g = (2.0 / n) * diff * up
        return (g, -g)

    return _attach(tape, "mse", out, (pred, target), contribs)


# ---------------------------------------------------------------------------
# backward sweeps


def backward_from(out: Node, cotangent: np.ndarray) -> None:
    """Seed ``out`` with ``cotangent`` and sweep the tape in reverse creation
    order, accumulating parent cotangents additively."""
    cot = np.asarray(cotangent)
    if np.shape(out.value) != cot.shape:
        raise DimensionMismatch("shape", np.shape(out.value), cot.shape,
                                "backward cotangent")
    out.grad = cot if out.grad is None else out.grad + cot
    for node in reversed(out.tape.nodes):
        if node.grad is None or node._bwd is None:
            continue
        for parent, contrib in zip(node.parents, node._bwd(node.grad)):
            parent.grad = contrib if parent.grad is None else parent.grad + contrib


def backward(loss: Node) -> None:
    """Backward from a scalar loss node; errors on non-scalar values."""
    if np.ndim(loss.value) != 0:
        raise GahbError(
            f"backward expects a scalar loss node, got shape {np.shape(loss.value)}")
    dtype = loss.parents[0].value.dtype if loss.parents else np.float64
    backward_from(loss, np.asarray(1.0, dtype=dtype))
