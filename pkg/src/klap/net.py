"""Compact gated residual CNN with hand-written reverse-mode gradients.

Architecture (all convolutions 3x3, stride 1, replicate padding)::

    raw (1ch) -> head conv (1->C)
              -> B x [conv (C->2C) -> gate (first half * second half)
                      -> conv (C->C) -> + block input]
              -> tail conv (C->3) -> RGB

Parameters live in one flat vector (:class:`ParamStore`). A *kernel* is one
output-channel filter of one convolution together with its bias; kernels
are the unit of attribution and adaptation.

Activations are kept channel-major, ``(C, N, H, W)``, so that every
convolution is a single ``(Cout, 9*Cin) @ (9*Cin, N*H*W)`` product.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .cfa import RawImage
from .errors import LengthError, ShapeError, SpecMismatchError, TraceMismatchError


@dataclass(frozen=True)
class NetSpec:
    width: int = 16
    blocks: int = 4
    in_channels: int = 1
    out_channels: int = 3

    def __post_init__(self):
        if self.width < 2 or self.width % 2:
            raise ValueError("width must be a positive even number")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")

    @property
    def conv_names(self) -> tuple[str, ...]:
        names = ["head"]
        for b in range(self.blocks):
            names += [f"block{b}.expand", f"block{b}.project"]
        names.append("tail")
        return tuple(names)

    def conv_shape(self, name: str) -> tuple[int, int, int, int]:
        c = self.width
        if name == "head":
            return (c, self.in_channels, 3, 3)
        if name == "tail":
            return (self.out_channels, c, 3, 3)
        if name.endswith(".expand"):
            return (2 * c, c, 3, 3)
        return (c, c, 3, 3)

    def param_count(self) -> int:
        c, b = self.width, self.blocks
        return 9 * c + c + b * (9 * c * 2 * c + 2 * c + 9 * c * c + c) + 9 * 3 * c + 3

    @functools.cached_property
    def _index(self):
        return _build_index(self)

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return self._index[0]

    @property
    def offsets(self) -> dict[str, tuple[int, int]]:
        return self._index[1]

    @property
    def kernel_slices(self) -> list[np.ndarray]:
        return self._index[2]

    @property
    def kernel_ids(self) -> np.ndarray:
        return self._index[3]

    @property
    def kernel_names(self) -> list[str]:
        return self._index[4]

    @property
    def kernel_count(self) -> int:
        return len(self._index[2])

    def conv_param_count(self) -> int:
        return self.param_count()


def _build_index(spec: NetSpec):
    layout = []
    for name in spec.conv_names:
        shape = spec.conv_shape(name)
        layout.append((f"{name}.weight", shape))
        layout.append((f"{name}.bias", (shape[0],)))
    offsets = {}
    pos = 0
    for lname, shape in layout:
        size = int(np.prod(shape))
        offsets[lname] = (pos, pos + size)
        pos += size
    kernel_slices, kernel_names = [], []
    kernel_ids = np.full(pos, -1, dtype=np.int64)
    for name in spec.conv_names:
        cout, cin, kh, kw = spec.conv_shape(name)
        w0, _ = offsets[f"{name}.weight"]
        b0, _ = offsets[f"{name}.bias"]
        per = cin * kh * kw
        for o in range(cout):
            idx = np.concatenate([np.arange(w0 + o * per, w0 + (o + 1) * per), [b0 + o]])
            kernel_ids[idx] = len(kernel_slices)
            kernel_slices.append(idx)
            kernel_names.append(f"{name}[{o}]")
    return layout, offsets, kernel_slices, kernel_ids, kernel_names


@dataclass
class ParamStore:
    """Flat parameter vector plus its layer layout."""

    spec: NetSpec
    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 1 or self.values.size != self.spec.param_count():
            raise LengthError(f"expected {self.spec.param_count()} parameters, "
                              f"got {self.values.size}")

    @classmethod
    def zeros(cls, spec: NetSpec, dtype=np.float32) -> "ParamStore":
        return cls(spec, np.zeros(spec.param_count(), dtype=dtype))

    @classmethod
    def init(cls, spec: NetSpec, rng: np.random.Generator, dtype=np.float32) -> "ParamStore":
        store = cls.zeros(spec, np.float64)
        for name in spec.conv_names:
            cout, cin, kh, kw = spec.conv_shape(name)
            std = np.sqrt(1.0 / (cin * kh * kw))
            if name.endswith(".project"):
                std *= 0.1  # blocks start close to identity
            store.layer(f"{name}.weight")[...] = rng.normal(0.0, std, (cout, cin, kh, kw))
        store.values = store.values.astype(dtype)
        return store

    @property
    def layout(self):
        return self.spec.layout

    def layer(self, name: str) -> np.ndarray:
        """Writable view of one layer."""
        start, stop = self.spec.offsets[name]
        shape = dict(self.spec.layout)[name]
        return self.values[start:stop].reshape(shape)

    def copy(self) -> "ParamStore":
        return ParamStore(self.spec, self.values.copy())

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(self.spec, self.values.astype(dtype))

    def with_values(self, values: np.ndarray) -> "ParamStore":
        return ParamStore(self.spec, values)

    def check_same_layout(self, other: "ParamStore") -> None:
        if self.spec != other.spec:
            raise SpecMismatchError(f"network specs differ: {self.spec} vs {other.spec}")


# ---------------------------------------------------------------- convolution

def _im2col(x: np.ndarray) -> np.ndarray:
    """``(C, N, H, W)`` -> ``(9*C, N*H*W)`` with replicate padding."""
    c, n, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    cols = np.empty((9, c, n, h, w), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[k] = xp[:, :, dy:dy + h, dx:dx + w]
            k += 1
    return cols.reshape(9 * c, n * h * w)


def _col2im(dcols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    c, n, h, w = shape
    dcols = dcols.reshape(9, c, n, h, w)
    dxp = np.zeros((c, n, h + 2, w + 2), dtype=dcols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            dxp[:, :, dy:dy + h, dx:dx + w] += dcols[k]
            k += 1
    dxp[:, :, 1, :] += dxp[:, :, 0, :]
    dxp[:, :, -2, :] += dxp[:, :, -1, :]
    dxp[:, :, 1:-1, 1] += dxp[:, :, 1:-1, 0]
    dxp[:, :, 1:-1, -2] += dxp[:, :, 1:-1, -1]
    return dxp[:, :, 1:-1, 1:-1]


def _wmat(params: ParamStore, name: str) -> np.ndarray:
    w = params.layer(f"{name}.weight")
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv(params: ParamStore, name: str, x: np.ndarray):
    cols = _im2col(x)
    out = _wmat(params, name) @ cols
    out += params.layer(f"{name}.bias")[:, None]
    c, n, h, w = x.shape
    return out.reshape(-1, n, h, w), cols


def _conv_backward(params: ParamStore, name: str, cols: np.ndarray, dout: np.ndarray,
                   in_shape, grads: np.ndarray, need_input: bool = True):
    cout = dout.shape[0]
    d2 = dout.reshape(cout, -1)
    w = params.layer(f"{name}.weight")
    dw = (d2 @ cols.T).reshape(cout, 3, 3, w.shape[1]).transpose(0, 3, 1, 2)
    ws, we = params.spec.offsets[f"{name}.weight"]
    bs, be = params.spec.offsets[f"{name}.bias"]
    grads[ws:we] += dw.reshape(-1)
    grads[bs:be] += d2.sum(axis=1)
    if not need_input:
        return None
    return _col2im(_wmat(params, name).T @ d2, in_shape)


# ---------------------------------------------------------------- forward / backward

@dataclass
class ForwardTrace:
    params: ParamStore
    input_shape: tuple
    squeeze: bool
    cols: dict = field(default_factory=dict)
    gates: list = field(default_factory=list)   # (a, b) halves per block
    block_inputs: list = field(default_factory=list)
    block_outputs: list = field(default_factory=list)  # each (C, N, H, W)
    output_shape: tuple = ()


def _as_batch(raw) -> tuple[np.ndarray, bool]:
    if isinstance(raw, RawImage):
        raw = raw.data
    x = np.asarray(raw)
    squeeze = False
    if x.ndim == 2:
        x, squeeze = x[None], True
    elif x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 3 or x.size == 0:
        raise ShapeError(f"cannot interpret input of shape {np.shape(raw)} as raw frames")
    return x, squeeze


def forward(params: ParamStore, raw) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network on a raw frame ``(H, W)`` or a batch ``(N, H, W)``.

    Returns the unclamped RGB prediction, ``(3, H, W)`` or ``(N, 3, H, W)``,
    and the trace needed by :func:`backward`.
    """
    x, squeeze = _as_batch(raw)
    x = x.astype(params.values.dtype, copy=False)
    trace = ForwardTrace(params, x.shape, squeeze)
    h, cols = _conv(params, "head", x[None])
    trace.cols["head"] = cols
    for b in range(params.spec.blocks):
        trace.block_inputs.append(h)
        z, trace.cols[f"block{b}.expand"] = _conv(params, f"block{b}.expand", h)
        c = params.spec.width
        ga, gb = z[:c], z[c:]
        trace.gates.append((ga, gb))
        y, trace.cols[f"block{b}.project"] = _conv(params, f"block{b}.project", ga * gb)
        h = h + y
        trace.block_outputs.append(h)
    out, trace.cols["tail"] = _conv(params, "tail", h)
    out = out.transpose(1, 0, 2, 3)
    trace.output_shape = out.shape
    if squeeze:
        out = out[0]
    return out, trace


def backward(trace: ForwardTrace, upstream: np.ndarray, block_grads=None,
             need_input: bool = False):
    """Exact gradients of ``sum(upstream * output)`` (+ block-output terms).

    ``block_grads`` optionally supplies extra gradients on the block outputs
    (list aligned with ``trace.block_outputs``; entries may be ``None``).
    Returns ``(flat parameter gradient, input gradient or None)``.
    """
    params = trace.params
    up = np.asarray(upstream)
    if trace.squeeze and up.ndim == 3:
        up = up[None]
    if up.shape != trace.output_shape:
        raise TraceMismatchError(f"upstream gradient shape {up.shape} does not match "
                                 f"output {trace.output_shape}")
    dtype = params.values.dtype
    grads = np.zeros(params.values.size, dtype=dtype)
    dout = np.ascontiguousarray(up.transpose(1, 0, 2, 3), dtype=dtype)
    c = params.spec.width
    n, hh, ww = trace.input_shape
    feat_shape = (c, n, hh, ww)
    dh = _conv_backward(params, "tail", trace.cols["tail"], dout, feat_shape, grads)
    for b in reversed(range(params.spec.blocks)):
        if block_grads is not None and block_grads[b] is not None:
            dh = dh + block_grads[b]
        ga, gb = trace.gates[b]
        dg = _conv_backward(params, f"block{b}.project", trace.cols[f"block{b}.project"],
                            dh, feat_shape, grads)
        dz = np.concatenate([dg * gb, dg * ga], axis=0)
        dh = dh + _conv_backward(params, f"block{b}.expand", trace.cols[f"block{b}.expand"],
                                 dz, feat_shape, grads)
    dx = _conv_backward(params, "head", trace.cols["head"], dh, (1, n, hh, ww), grads,
                        need_input=need_input)
    if dx is not None:
        dx = dx[0]
        if trace.squeeze:
            dx = dx[0]
    return grads, dx


def predict(params: ParamStore, raw, batch: int = 16) -> np.ndarray:
    """Inference helper: clamped RGB output, batched to bound memory."""
    x, squeeze = _as_batch(raw)
    outs = [forward(params, x[i:i + batch])[0] for i in range(0, len(x), batch)]
    out = np.clip(np.concatenate(outs), 0.0, 1.0)
    return out[0] if squeeze else out


def l1_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient (0 at exact ties)."""
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# ---------------------------------------------------------------- persistence

def spec_from_layers(layers) -> NetSpec:
    shapes = dict(layers)
    if "head.weight" not in shapes or "tail.weight" not in shapes:
        from .errors import FormatError
        raise FormatError("checkpoint lacks head/tail layers")
    width = shapes["head.weight"][0]
    blocks = sum(1 for name, _ in layers if name.endswith(".expand.weight"))
    return NetSpec(width=width, blocks=blocks, in_channels=shapes["head.weight"][1],
                   out_channels=shapes["tail.weight"][0])


def params_from_layers(layers, prefix: str = "") -> ParamStore:
    from .errors import FormatError
    own = [(name[len(prefix):], arr) for name, arr in layers if name.startswith(prefix)
           and (prefix or "/" not in name)]
    spec = spec_from_layers([(n, a.shape) for n, a in own])
    expected = [(n, tuple(s)) for n, s in spec.layout]
    if [(n, tuple(a.shape)) for n, a in own] != expected:
        raise FormatError("checkpoint layers do not match the network layout")
    return ParamStore(spec, np.concatenate([a.reshape(-1) for _, a in own]).astype(np.float32))


def param_layers(params: ParamStore, prefix: str = "") -> list[tuple[str, np.ndarray]]:
    return [(prefix + name, params.layer(name)) for name, _ in params.layout]


def save_checkpoint(params: ParamStore, path) -> None:
    from .checkpoint import write_checkpoint
    write_checkpoint(path, param_layers(params))


def load_checkpoint(path) -> ParamStore:
    from .checkpoint import read_checkpoint
    layers, _ = read_checkpoint(path)
    return params_from_layers(layers)
