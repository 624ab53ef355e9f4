"""Residual 3D conv noise predictor with hand-written reverse-mode gradients.

Layout: stem conv -> ``num_blocks`` residual blocks -> head conv. Each block is
``h + conv2(swish(conv1(swish(h)) + proj(swish(temb))))`` where ``temb`` is a
sinusoidal timestep embedding passed through two dense layers. Convolutions
are 3x3x3 with zero padding. Activations are kept channels-last,
``(N, X, Y, Z, C)``.
"""

from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit

from .exceptions import ParameterError

KERNEL = 3
K3 = KERNEL**3


@dataclass(frozen=True)
class DenoiserArch:
    base_width: int = 32
    num_blocks: int = 4
    time_embed_dim: int = 32

    def __post_init__(self):
        for name in ("base_width", "num_blocks", "time_embed_dim"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ParameterError(f"{name} must be a positive integer, got {value}")
        if self.time_embed_dim % 2:
            raise ParameterError("time_embed_dim must be even")

    def param_shapes(self):
        """Ordered ``(name, shape)`` pairs defining the flat parameter layout."""
        F, E = self.base_width, self.time_embed_dim
        # conv weights are (c_out, 27 * c_in) in (i, j, k, c_in) order
        shapes = [("stem.w", (F, 1 * K3)), ("stem.b", (F,))]
        for i in range(self.num_blocks):
            shapes += [
                (f"block{i}.conv1.w", (F, F * K3)),
                (f"block{i}.conv1.b", (F,)),
                (f"block{i}.temb.w", (F, E)),
                (f"block{i}.temb.b", (F,)),
                (f"block{i}.conv2.w", (F, F * K3)),
                (f"block{i}.conv2.b", (F,)),
            ]
        shapes += [
            ("head.w", (1, F * K3)),
            ("head.b", (1,)),
            ("time.dense1.w", (E, E)),
            ("time.dense1.b", (E,)),
            ("time.dense2.w", (E, E)),
            ("time.dense2.b", (E,)),
        ]
        return shapes

    @property
    def param_count(self):
        return sum(int(np.prod(s)) for _, s in self.param_shapes())


def swish(x):
    return x * expit(x)


def swish_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def timestep_embedding(t, dim):
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


@numba.njit(cache=True, boundscheck=False)
def _gather_columns(xp, X, Y, Z):
    n, c = xp.shape[0], xp.shape[4]
    out = np.empty((n, X, Y, Z, KERNEL * KERNEL, KERNEL * c), dtype=xp.dtype)
    for b in range(n):
        for x in range(X):
            for y in range(Y):
                for i in range(KERNEL):
                    for j in range(KERNEL):
                        src = xp[b, x + i, y + j]
                        for z in range(Z):
                            row = out[b, x, y, z, i * KERNEL + j]
                            for k in range(KERNEL):
                                for cc in range(c):
                                    row[k * c + cc] = src[z + k, cc]
    return out


def im2col(x):
    """Columns of zero-padded 3x3x3 neighbourhoods, ordered ``(i, j, k, c)``."""
    n, X, Y, Z, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    return _gather_columns(xp, X, Y, Z).reshape(n * X * Y * Z, K3 * c)


def conv3d(x, w, b):
    """Same-size 3D cross-correlation; returns the output and the im2col matrix.

    ``w`` has shape ``(c_out, 27 * c_in)`` in ``(i, j, k, c_in)`` order.
    """
    n, X, Y, Z, _ = x.shape
    cols = im2col(x)
    out = cols @ w.T
    out += b
    return out.reshape(n, X, Y, Z, w.shape[0]), cols


def flip_transpose(w, c_in):
    """Kernel whose correlation gives the input gradient of ``w``: spatially flipped, channels swapped."""
    c_out = w.shape[0]
    k = w.reshape(c_out, KERNEL, KERNEL, KERNEL, c_in)[:, ::-1, ::-1, ::-1, :]
    return np.ascontiguousarray(np.moveaxis(k, 0, -1).transpose(3, 0, 1, 2, 4)).reshape(c_in, K3 * c_out)


def conv3d_backward(dout, cols, w, x_shape, need_dx=True, need_params=True):
    c_in = x_shape[-1]
    d = dout.reshape(-1, w.shape[0])
    dw = db = dx = None
    if need_params:
        dw = (cols.T @ d).T
        db = d.sum(axis=0)
    if need_dx:
        dx, _ = conv3d(dout, flip_transpose(w, c_in), np.zeros(c_in, dtype=dout.dtype))
    return dx, dw, db


class ResidualDenoiserNet:
    """Parameters ``theta`` (flat vector) plus forward/backward passes."""

    def __init__(self, arch, theta):
        theta = np.asarray(theta)
        if theta.ndim != 1 or theta.size != arch.param_count:
            raise ParameterError(f"theta has {theta.size} entries, arch needs {arch.param_count}")
        self.arch = arch
        self.theta = theta
        self.params = self._views(theta)

    def _views(self, flat):
        views, offset = {}, 0
        for name, shape in self.arch.param_shapes():
            size = int(np.prod(shape))
            views[name] = flat[offset : offset + size].reshape(shape)
            offset += size
        return views

    @classmethod
    def initialize(cls, arch, seed=0, dtype=np.float32, zero_head=True):
        rng = np.random.default_rng(seed)
        theta = np.zeros(arch.param_count, dtype=np.float64)
        net = cls(arch, theta)
        for name, shape in arch.param_shapes():
            if name.endswith(".b"):
                continue
            if name == "head.w" and zero_head:
                continue
            fan_in = shape[1]
            gain = 2.0 if ".conv" in name or name == "stem.w" else 1.0
            net.params[name][...] = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
        return cls(arch, theta.astype(dtype))

    def astype(self, dtype):
        return type(self)(self.arch, self.theta.astype(dtype))

    # ------------------------------------------------------------ passes

    def forward(self, x, t, keep_cache=False):
        """Predict noise for patches ``x`` of shape ``(N, X, Y, Z)`` at steps ``t``."""
        p = self.params
        dtype = self.theta.dtype
        x = np.asarray(x, dtype=dtype)
        if x.ndim != 4:
            raise ParameterError(f"expected patches of shape (N, X, Y, Z), got {x.shape}")
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        cache = {"x_shape": x.shape + (1,)}

        e0 = timestep_embedding(t, self.arch.time_embed_dim).astype(dtype)
        e1 = e0 @ p["time.dense1.w"].T + p["time.dense1.b"]
        a1 = swish(e1)
        temb = a1 @ p["time.dense2.w"].T + p["time.dense2.b"]
        stemb = swish(temb)
        cache.update(e0=e0, e1=e1, a1=a1, temb=temb, stemb=stemb)

        h, cache["stem"] = conv3d(x[..., None], p["stem.w"], p["stem.b"])
        blocks = []
        for i in range(self.arch.num_blocks):
            pre = f"block{i}."
            s1 = swish(h)
            c1, cols1 = conv3d(s1, p[pre + "conv1.w"], p[pre + "conv1.b"])
            c1 += (stemb @ p[pre + "temb.w"].T + p[pre + "temb.b"])[:, None, None, None, :]
            c2, cols2 = conv3d(swish(c1), p[pre + "conv2.w"], p[pre + "conv2.b"])
            blocks.append((h, c1, cols1, cols2))
            h = h + c2
        out, cache["head"] = conv3d(swish(h), p["head.w"], p["head.b"])
        cache["h"] = h
        cache["blocks"] = blocks
        out = out[..., 0]
        return (out, cache) if keep_cache else out

    def backward(self, dout, cache, need_dx=False, need_params=True):
        """Back-propagate ``dout`` (same shape as the output); returns ``(grad_theta, dx)``."""
        p = self.params
        F = self.arch.base_width
        grad_theta = np.zeros_like(self.theta) if need_params else None
        grads = self._views(grad_theta) if need_params else None

        def put(name, value):
            if need_params:
                grads[name][...] = value

        n, X, Y, Z, _ = cache["x_shape"]
        feat_shape = (n, X, Y, Z, F)
        ds, dw, db = conv3d_backward(dout[..., None], cache["head"], p["head.w"], feat_shape,
                                     need_params=need_params)
        put("head.w", dw)
        put("head.b", db)
        dh = ds * swish_grad(cache["h"])
        dstemb = np.zeros_like(cache["stemb"])
        for i in reversed(range(self.arch.num_blocks)):
            pre = f"block{i}."
            h_in, c1, cols1, cols2 = cache["blocks"][i]
            ds2, dw, db = conv3d_backward(dh, cols2, p[pre + "conv2.w"], feat_shape,
                                          need_params=need_params)
            put(pre + "conv2.w", dw)
            put(pre + "conv2.b", db)
            dc1 = ds2 * swish_grad(c1)
            dproj = dc1.sum(axis=(1, 2, 3))
            put(pre + "temb.w", dproj.T @ cache["stemb"])
            put(pre + "temb.b", dproj.sum(axis=0))
            dstemb += dproj @ p[pre + "temb.w"]
            ds1, dw, db = conv3d_backward(dc1, cols1, p[pre + "conv1.w"], feat_shape,
                                          need_params=need_params)
            put(pre + "conv1.w", dw)
            put(pre + "conv1.b", db)
            dh = dh + ds1 * swish_grad(h_in)
        dx, dw, db = conv3d_backward(dh, cache["stem"], p["stem.w"], cache["x_shape"],
                                     need_dx=need_dx, need_params=need_params)
        put("stem.w", dw)
        put("stem.b", db)
        if need_params:
            dtemb = dstemb * swish_grad(cache["temb"])
            grads["time.dense2.w"][...] = dtemb.T @ cache["a1"]
            grads["time.dense2.b"][...] = dtemb.sum(axis=0)
            de1 = (dtemb @ p["time.dense2.w"]) * swish_grad(cache["e1"])
            grads["time.dense1.w"][...] = de1.T @ cache["e0"]
            grads["time.dense1.b"][...] = de1.sum(axis=0)
        return grad_theta, (None if dx is None else dx[..., 0])

    def input_vjp(self, x, t, u):
        _, cache = self.forward(x, t, keep_cache=True)
        _, dx = self.backward(np.asarray(u, dtype=self.theta.dtype), cache, need_dx=True,
                              need_params=False)
        return dx
