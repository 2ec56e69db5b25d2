"""Dense float64 tensors plus the conv/pool kernels everything else builds on.

Values are immutable: every operation allocates a fresh tensor. Layout is
row-major (C order) and the dtype is float64 throughout; there is no other
dtype in this library. Convolution is cross-correlation (no kernel flip) over
NCHW / CHW data. Pooling is non-overlapping only: the pool mask equals the
stride and must divide the input extents.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class Tensor:
    """Immutable dense float64 array with explicit shape.

    Finiteness is validated where data enters the library (the public
    constructor and the deserializer). Operations inside the library use the
    fast wrapping path since they preserve finiteness on finite inputs.
    """

    __slots__ = ("_a",)

    def __init__(self, data, shape=None):
        a = np.asarray(data, dtype=np.float64)
        if shape is not None:
            a = a.reshape(shape)
        if not np.all(np.isfinite(a)):
            raise ValueError("tensor data contains non-finite entries")
        if not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        elif a.base is not None or a.flags.writeable:
            a = a.copy()
        a.flags.writeable = False
        object.__setattr__(self, "_a", a)

    @classmethod
    def _wrap(cls, a):
        # internal fast path: trusted float64 array, no finite check
        t = object.__new__(cls)
        a = np.asarray(a, dtype=np.float64)
        if not a.flags.c_contiguous:
            a = np.ascontiguousarray(a)
        if a.flags.writeable:
            a = a if a.base is None else a.copy()
            a.flags.writeable = False
        object.__setattr__(t, "_a", a)
        return t

    @property
    def array(self) -> np.ndarray:
        """Read-only numpy view of the payload."""
        return self._a

    @property
    def shape(self) -> tuple:
        return self._a.shape

    @property
    def rank(self) -> int:
        return self._a.ndim

    @property
    def size(self) -> int:
        return self._a.size

    def item(self) -> float:
        return float(self._a.reshape(-1)[0]) if self._a.ndim == 0 or self._a.size == 1 else self._fail_item()

    def _fail_item(self):
        raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._wrap(self._a.reshape(shape))

    def __getitem__(self, key) -> "Tensor":
        return Tensor._wrap(np.ascontiguousarray(self._a[key]))

    def __array__(self, dtype=None, copy=None):
        a = np.asarray(self._a, dtype=dtype)
        return a.copy() if copy else a

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


def tensor(data, shape=None) -> Tensor:
    """Public constructor; validates dtype coercion and finiteness."""
    return Tensor(data, shape)


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=np.float64))


def _pair(v, name):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"{name} must be an int or a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvGeometry:
    """Convolution geometry: kernel extent, stride, dilation, zero-padding.

    padding is the number of zero rows/columns added on each border; 0 means
    no padding ('none' mode). All output extents follow
    out = floor((in + 2*pad - dilation*(k-1) - 1) / stride) + 1.
    """

    kernel: tuple
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)
    padding: tuple = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel, "kernel"))
        object.__setattr__(self, "stride", _pair(self.stride, "stride"))
        object.__setattr__(self, "dilation", _pair(self.dilation, "dilation"))
        object.__setattr__(self, "padding", _pair(self.padding, "padding"))
        for name in ("kernel", "stride", "dilation"):
            lo = getattr(self, name)
            if min(lo) < 1:
                raise ValueError(f"{name} entries must be >= 1, got {lo}")
        if min(self.padding) < 0:
            raise ValueError(f"padding entries must be >= 0, got {self.padding}")

    @property
    def padding_mode(self) -> str:
        return "zero" if max(self.padding) > 0 else "none"

    def out_extent(self, in_hw) -> tuple:
        """Output (height, width) for the given input extents."""
        out = []
        for axis, n in enumerate(in_hw):
            k, s, d, p = (self.kernel[axis], self.stride[axis],
                          self.dilation[axis], self.padding[axis])
            span = d * (k - 1) + 1
            num = n + 2 * p - span
            if num < 0:
                raise ValueError(
                    f"kernel span {span} exceeds padded input extent {n + 2 * p} "
                    f"on axis {axis}")
            out.append(num // s + 1)
        return tuple(out)


def _as_batched(a, what):
    # accepts CHW or NCHW, returns (NCHW array, had_batch flag)
    if a.ndim == 3:
        return a[None], False
    if a.ndim == 4:
        return a, True
    raise ValueError(f"{what} must have rank 3 (C,H,W) or 4 (N,C,H,W), got rank {a.ndim}")


def _conv_forward(x, k, geom: ConvGeometry):
    # x: (N, C_in, H, W), k: (C_out, C_in, kh, kw); per-tap GEMM accumulation
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise ValueError(f"kernel expects {kcin} input channels, input has {cin}")
    if (kh, kw) != geom.kernel:
        raise ValueError(f"kernel extent {(kh, kw)} does not match geometry {geom.kernel}")
    ho, wo = geom.out_extent((h, w))
    sh, sw = geom.stride
    dh, dw = geom.dilation
    ph, pw = geom.padding
    xp = x if (ph, pw) == (0, 0) else np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((n * ho * wo, cout))
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u * dh:u * dh + sh * ho:sh, v * dw:v * dw + sw * wo:sw]
            cols = sl.transpose(0, 2, 3, 1).reshape(-1, cin)
            out += cols @ k[:, :, u, v].T
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def _conv_input_grad(g, k, geom: ConvGeometry, in_hw):
    # adjoint of _conv_forward in x; g: (N, C_out, Ho, Wo) -> (N, C_in, H, W)
    n, cout, ho, wo = g.shape
    _, cin, kh, kw = k.shape
    h, w = in_hw
    sh, sw = geom.stride
    dh, dw = geom.dilation
    ph, pw = geom.padding
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    xp = np.zeros((n, cin, h + 2 * ph, w + 2 * pw))
    for u in range(kh):
        for v in range(kw):
            t = g2 @ k[:, :, u, v]
            xp[:, :, u * dh:u * dh + sh * ho:sh, v * dw:v * dw + sw * wo:sw] += \
                t.reshape(n, ho, wo, cin).transpose(0, 3, 1, 2)
    return xp[:, :, ph:ph + h, pw:pw + w] if (ph, pw) != (0, 0) else xp


def _conv_kernel_grad(x, g, geom: ConvGeometry, kernel_hw):
    # adjoint of _conv_forward in k; -> (C_out, C_in, kh, kw)
    n, cin, h, w = x.shape
    _, cout, ho, wo = g.shape
    kh, kw = kernel_hw
    sh, sw = geom.stride
    dh, dw = geom.dilation
    ph, pw = geom.padding
    xp = x if (ph, pw) == (0, 0) else np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
    dk = np.empty((cout, cin, kh, kw))
    for u in range(kh):
        for v in range(kw):
            sl = xp[:, :, u * dh:u * dh + sh * ho:sh, v * dw:v * dw + sw * wo:sw]
            cols = sl.transpose(0, 2, 3, 1).reshape(-1, cin)
            dk[:, :, u, v] = g2.T @ cols
    return dk


def conv2d(x: Tensor, kernel: Tensor, geom: ConvGeometry) -> Tensor:
    """Cross-correlate x with kernel under the given geometry.

    Args:
        x: input of shape (C_in, H, W), or (N, C_in, H, W) for a batch.
        kernel: weights of shape (C_out, C_in, kh, kw).
        geom: stride/dilation/padding description.

    Returns:
        Tensor of shape (C_out, Ho, Wo), batched if the input was.
    """
    xa, batched = _as_batched(np.asarray(x), "conv2d input")
    ka = np.asarray(kernel)
    if ka.ndim != 4:
        raise ValueError(f"conv2d kernel must have rank 4, got rank {ka.ndim}")
    out = _conv_forward(xa, ka, geom)
    return Tensor._wrap(out if batched else out[0])


def _pool_geometry(shape, mask, what):
    mh, mw = _pair(mask, "pool mask")
    if mh < 1 or mw < 1:
        raise ValueError(f"pool mask must be >= 1, got {(mh, mw)}")
    h, w = shape[-2], shape[-1]
    if h % mh or w % mw:
        raise ValueError(
            f"{what} mask {(mh, mw)} must divide input extents {(h, w)} "
            "(pooling is non-overlapping, mask equals stride)")
    return mh, mw, h // mh, w // mw


def _blocks(a, mh, mw, ho, wo):
    lead = a.shape[:-2]
    return a.reshape(lead + (ho, mh, wo, mw))


def avg_pool(x: Tensor, mask) -> Tensor:
    """Non-overlapping average pooling with the given (mh, mw) mask."""
    a = np.asarray(x)
    mh, mw, ho, wo = _pool_geometry(a.shape, mask, "avg_pool")
    return Tensor._wrap(_blocks(a, mh, mw, ho, wo).mean(axis=(-3, -1)))


def _max_pool_and_mask(a, mask):
    mh, mw, ho, wo = _pool_geometry(a.shape, mask, "max_pool")
    lead = a.shape[:-2]
    win = _blocks(a, mh, mw, ho, wo)
    # move window axes last so argmax picks the first maximum in row-major
    # window order on ties
    win = np.moveaxis(win, -3, -2).reshape(lead + (ho, wo, mh * mw))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    m = np.zeros_like(win)
    np.put_along_axis(m, idx[..., None], 1.0, axis=-1)
    m = np.moveaxis(m.reshape(lead + (ho, wo, mh, mw)), -2, -3)
    return out, np.ascontiguousarray(m.reshape(a.shape))


def max_pool(x: Tensor, mask) -> Tensor:
    """Non-overlapping max pooling; ties go to the first element in row-major
    window order."""
    out, _ = _max_pool_and_mask(np.asarray(x), mask)
    return Tensor._wrap(out)


def _block_upsample(a, mask):
    mh, mw = _pair(mask, "upsample mask")
    return np.repeat(np.repeat(a, mh, axis=-2), mw, axis=-1)


def block_upsample(x: Tensor, mask) -> Tensor:
    """Replicate every pixel into an (mh, mw) block (exact copy upsampling)."""
    return Tensor._wrap(_block_upsample(np.asarray(x), mask))


def _block_sum(a, mask):
    mh, mw, ho, wo = _pool_geometry(a.shape, mask, "block_sum")
    return _blocks(a, mh, mw, ho, wo).sum(axis=(-3, -1))


# -- serialization ------------------------------------------------------------
#
# Layout, all little-endian: u32 rank, then one u32 per extent, then the
# float64 payload in row-major order.

def to_bytes(t: Tensor) -> bytes:
    shape = t.shape
    head = struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
    return head + np.ascontiguousarray(t.array, dtype="<f8").tobytes()


def from_bytes(buf: bytes) -> Tensor:
    t, used = _read_tensor_from(buf, 0)
    if used != len(buf):
        raise ValueError(f"trailing bytes after tensor payload: expected {used}, got {len(buf)}")
    return t


def _read_tensor_from(buf, off):
    if len(buf) - off < 4:
        raise ValueError(f"truncated tensor header: need 4 bytes at offset {off}, have {len(buf) - off}")
    (rank,) = struct.unpack_from("<I", buf, off)
    off += 4
    if len(buf) - off < 4 * rank:
        raise ValueError(f"truncated extent list: need {4 * rank} bytes, have {len(buf) - off}")
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    need = 8 * count
    if len(buf) - off < need:
        raise ValueError(f"truncated tensor payload: need {need} bytes, have {len(buf) - off}")
    a = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
    off += need
    if not np.all(np.isfinite(a)):
        raise ValueError("tensor payload contains non-finite entries")
    return Tensor._wrap(a.astype(np.float64)), off


def write_tensor(fh, t: Tensor):
    fh.write(to_bytes(t))


def read_tensor(fh) -> Tensor:
    head = fh.read(4)
    if len(head) < 4:
        raise ValueError("truncated tensor header: need 4 bytes for the rank")
    (rank,) = struct.unpack("<I", head)
    ext = fh.read(4 * rank)
    if len(ext) < 4 * rank:
        raise ValueError(f"truncated extent list: need {4 * rank} bytes, have {len(ext)}")
    shape = struct.unpack(f"<{rank}I", ext)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(8 * count)
    if len(payload) < 8 * count:
        raise ValueError(f"truncated tensor payload: need {8 * count} bytes, have {len(payload)}")
    a = np.frombuffer(payload, dtype="<f8", count=count).reshape(shape)
    if not np.all(np.isfinite(a)):
        raise ValueError("tensor payload contains non-finite entries")
    return Tensor._wrap(a.astype(np.float64))
