"""Sine-activated MLP field with exact input gradients and nested backprop.

Layer ``l < L`` computes ``a_l = sin(omega0 * (W_l a_{l-1} + b_l))``; the last
layer is linear.  Besides the value, the forward pass can carry the Jacobian
of every activation with respect to the input point (three tangent
directions), which yields ``grad_x chi`` exactly.  The backward pass then
differentiates any loss that depends on both the value and ``grad_x chi``
with respect to the parameters (forward-over-reverse, specialised by hand to
this architecture; sine's derivatives are closed-form).

Parameters are stored as float32; evaluation runs in the requested dtype
(float64 by default) and parameter gradients are returned as float64.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import ThreadpoolController

from .errors import CheckpointError, InvalidArgument, NumericalError

CHECKPOINT_MAGIC = b"NPSN"
CHECKPOINT_VERSION = 1
DEFAULT_CHUNK = 8192
# Every matrix product runs on a block of exactly ROW_BLOCK rows (zero padded)
# with single-threaded BLAS.  BLAS picks kernels by matrix shape and splits
# work by thread count, so fixing both makes each point's value and each
# block's parameter gradient bitwise independent of batching and threads.
ROW_BLOCK = 256
_blas = ThreadpoolController()
_pool = {"threads": 1, "executor": None}


def set_threads(n: int) -> None:
    """Worker threads used to process row blocks in parallel."""
    if n < 1:
        raise InvalidArgument("thread count must be >= 1")
    if n != _pool["threads"] and _pool["executor"] is not None:
        _pool["executor"].shutdown()
        _pool["executor"] = None
    _pool["threads"] = int(n)


def _map(fn, items):
    if _pool["threads"] == 1 or len(items) < 2:
        return [fn(it) for it in items]
    if _pool["executor"] is None:
        _pool["executor"] = ThreadPoolExecutor(_pool["threads"])
    return list(_pool["executor"].map(fn, items))


class SirenField:
    def __init__(self, weights, biases, omega0: float = 30.0):
        if len(weights) != len(biases) or not weights:
            raise InvalidArgument("need one bias per weight matrix")
        self.weights = [np.ascontiguousarray(w, np.float32) for w in weights]
        self.biases = [np.ascontiguousarray(b, np.float32).reshape(-1) for b in biases]
        self.omega0 = float(np.float32(omega0))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[0] != len(b):
                raise InvalidArgument(f"layer {i}: weight {w.shape} vs bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidArgument(f"layer {i}: input width mismatch")
        if self.weights[-1].shape[0] != 1:
            raise InvalidArgument("output layer must be scalar")
        self._cast = {}

    @classmethod
    def init(cls, seed=0, hidden: int = 256, n_layers: int = 5, in_dim: int = 3,
             omega0: float = 30.0) -> "SirenField":
        """Sine-network initialisation.

        First layer ``U(-1/fan_in, 1/fan_in)``, later layers
        ``U(-sqrt(6/fan_in)/omega0, +sqrt(6/fan_in)/omega0)``, zero biases.
        """
        if n_layers < 2:
            raise InvalidArgument("need at least one hidden layer")
        dims = [in_dim] + [hidden] * (n_layers - 1) + [1]
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for l in range(n_layers):
            fan_in, fan_out = dims[l], dims[l + 1]
            bound = 1.0 / fan_in if l == 0 else np.sqrt(6.0 / fan_in) / omega0
            weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)).astype(np.float32))
            biases.append(np.zeros(fan_out, np.float32))
        return cls(weights, biases, omega0)

    # parameter vector ---------------------------------------------------
    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def parameters(self) -> np.ndarray:
        """Flat float64 copy ``[W1, b1, W2, b2, ...]`` (weights row-major)."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in
                               zip(self.weights, self.biases)]).astype(np.float64)

    def set_parameters(self, theta) -> None:
        theta = np.asarray(theta)
        if theta.shape != (self.n_params,):
            raise InvalidArgument(f"expected {self.n_params} parameters, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise NumericalError("non-finite parameters")
        o = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = theta[o:o + w.size].reshape(w.shape)
            o += w.size
            b[...] = theta[o:o + b.size]
            o += b.size
        self._cast = {}

    def copy(self) -> "SirenField":
        return SirenField([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                          self.omega0)

    def _params(self, dtype):
        dtype = np.dtype(dtype)
        if dtype not in self._cast:
            self._cast[dtype] = ([w.astype(dtype) for w in self.weights],
                                 [b.astype(dtype) for b in self.biases])
        return self._cast[dtype]

    # forward / backward -------------------------------------------------
    def _forward(self, x, tangents: bool, dtype):
        Ws, bs = self._params(dtype)
        om = dtype.type(self.omega0)
        n = len(x)
        pad = ROW_BLOCK - n
        if pad:
            x = np.concatenate([x, np.zeros((pad, x.shape[1]), x.dtype)])
        a = x
        cache = {"x": x, "s": [], "c": [], "hd": []}
        J = None
        for l in range(len(Ws) - 1):
            h = a @ Ws[l].T
            h += bs[l]
            h *= om
            s, c = np.sin(h), np.cos(h)
            if tangents:
                if l == 0:
                    # input tangents are unit vectors, so h-dot is a weight column
                    hd = (om * Ws[0].T)[:, None, :]
                else:
                    hd = (J.reshape(-1, J.shape[-1]) @ Ws[l].T).reshape(3, -1, Ws[l].shape[0])
                    hd *= om
                J = c[None] * hd
                cache["hd"].append(hd)
            cache["s"].append(s)
            cache["c"].append(c)
            a = s
        value = (a @ Ws[-1].T)[:n, 0] + bs[-1][0]
        grad = (J.reshape(-1, J.shape[-1]) @ Ws[-1][0]).reshape(3, -1).T[:n] if tangents else None
        cache["J_last"] = J
        return value, grad, cache

    def _backward(self, cache, dv, dg, dtype):
        Ws, _ = self._params(dtype)
        pad = len(cache["x"]) - len(dv)
        if pad:
            dv = np.concatenate([dv, np.zeros(pad, dv.dtype)])
            if dg is not None:
                dg = np.concatenate([dg, np.zeros((pad, 3), dg.dtype)])
        om = dtype.type(self.omega0)
        L = len(Ws)
        gW = [None] * L
        gb = [None] * L
        s_last = cache["s"][-1]
        w_out = Ws[-1][0]
        gW[-1] = (dv @ s_last)[None, :]
        if dg is not None:
            J = cache["J_last"]
            gW[-1] += (dg.T.reshape(-1) @ J.reshape(-1, J.shape[-1]))[None, :]
        gb[-1] = np.array([dv.sum()], dtype)
        abar = dv[:, None] * w_out[None, :]
        Abar = None
        if dg is not None:
            Abar = dg.T[:, :, None] * w_out[None, None, :]
        for l in range(L - 2, -1, -1):
            s, c = cache["s"][l], cache["c"][l]
            a_prev = cache["x"] if l == 0 else cache["s"][l - 1]
            hbar = abar * c
            if Abar is not None:
                hd = cache["hd"][l]
                hdbar = Abar * c[None]
                hbar -= s * np.sum(Abar * hd, axis=0)
            gW[l] = om * (hbar.T @ a_prev)
            if Abar is not None and l > 0:
                J_prev = cache["c"][l - 1][None] * cache["hd"][l - 1]
                n_out, n_in = Ws[l].shape
                gW[l] += om * (hdbar.reshape(-1, n_out).T @ J_prev.reshape(-1, n_in))
            gb[l] = om * hbar.sum(axis=0)
            if Abar is not None and l == 0:
                gW[l] += om * hdbar.sum(axis=1).T
            if l > 0:
                abar = om * (hbar @ Ws[l])
                if Abar is not None:
                    Abar = (hdbar.reshape(-1, hdbar.shape[-1]) @ Ws[l]).reshape(3, -1, Ws[l].shape[1])
                    Abar *= om
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(gW, gb)])

    def evaluate(self, x, with_grad: bool = False, cotangents=None, chunk: int = DEFAULT_CHUNK,
                 dtype=np.float64):
        """Chunked evaluation with optional parameter backprop.

        ``cotangents(sl, value, grad)`` is called per chunk with the slice and
        that chunk's outputs and returns ``(dL_dvalue, dL_dgrad or None)``.
        Returns ``(value, grad or None, theta_grad or None)``; the parameter
        gradient is accumulated block by block in float64 in a fixed order.
        """
        dtype = np.dtype(dtype)
        x = np.asarray(x, dtype).reshape(-1, 3)
        n = len(x)
        value = np.empty(n, dtype)
        grad = np.empty((n, 3), dtype) if with_grad else None
        total = np.zeros(self.n_params) if cotangents is not None else None
        chunk = max(ROW_BLOCK, chunk - chunk % ROW_BLOCK)
        with _blas.limit(limits=1, user_api="blas"):
            for start in range(0, n, chunk):
                sl = slice(start, min(start + chunk, n))
                blocks = [slice(b, min(b + ROW_BLOCK, sl.stop))
                          for b in range(start, sl.stop, ROW_BLOCK)]
                outs = _map(lambda b: self._forward(x[b], with_grad, dtype), blocks)
                value[sl] = np.concatenate([o[0] for o in outs])
                if with_grad:
                    grad[sl] = np.concatenate([o[1] for o in outs])
                if cotangents is None:
                    continue
                dv, dg = cotangents(sl, value[sl], grad[sl] if with_grad else None)
                dv = np.zeros(sl.stop - start, dtype) if dv is None else np.asarray(dv, dtype)
                if dg is not None:
                    if not with_grad:
                        raise InvalidArgument("gradient cotangents need with_grad=True")
                    dg = np.asarray(dg, dtype)

                def back(i):
                    r = slice(blocks[i].start - start, blocks[i].stop - start)
                    return self._backward(outs[i][2], dv[r], None if dg is None else dg[r], dtype)

                for g in _map(back, range(len(blocks))):
                    total += g
        return value, grad, total

    def eval(self, x, dtype=np.float64):
        """Field value at one point (returns float) or at ``(N, 3)`` points."""
        single = np.ndim(x) == 1
        v, _, _ = self.evaluate(x, dtype=dtype)
        return float(v[0]) if single else v

    def eval_dual(self, x, dtype=np.float64) -> "DualEval":
        """Value and exact input gradient."""
        single = np.ndim(x) == 1
        v, g, _ = self.evaluate(x, with_grad=True, dtype=dtype)
        if single:
            return DualEval(float(v[0]), g[0])
        return DualEval(v, g)

    def backward_batch(self, xs, dL_dvalue, dL_dgrad=None, chunk: int = DEFAULT_CHUNK,
                       dtype=np.float64) -> np.ndarray:
        """Sum over points of ``dL_dvalue * d chi/d theta + dL_dgrad . d(grad_x chi)/d theta``."""
        xs = np.asarray(xs, np.float64).reshape(-1, 3)
        dv = None if dL_dvalue is None else np.asarray(dL_dvalue, np.float64).reshape(-1)
        dg = None if dL_dgrad is None else np.asarray(dL_dgrad, np.float64).reshape(-1, 3)
        for arr in (dv, dg):
            if arr is not None and len(arr) != len(xs):
                raise InvalidArgument(f"{len(arr)} cotangents for {len(xs)} points")
        need_grad = dg is not None and bool(np.any(dg))
        if (dv is None or not np.any(dv)) and not need_grad:
            return np.zeros(self.n_params)
        _, _, total = self.evaluate(
            xs, with_grad=need_grad, chunk=chunk, dtype=dtype,
            cotangents=lambda sl, v, g: (None if dv is None else dv[sl],
                                         dg[sl] if need_grad else None))
        return total


@dataclass
class DualEval:
    value: object
    grad: np.ndarray
    cache: dict = field(repr=False, default=None)


# optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-4, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns new parameters."""
    theta = np.asarray(theta, np.float64)
    grad = np.asarray(grad, np.float64)
    if theta.shape != grad.shape or theta.shape != state.m.shape:
        raise InvalidArgument("parameter, gradient and moment sizes differ")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient in Adam step")
    state.step += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# checkpoints --------------------------------------------------------------

def save_checkpoint(field_: SirenField, path) -> None:
    """Little-endian: magic, u32 version, f32 omega0, u32 n_dims, u32 dims, f32 W/b per layer."""
    dims = field_.dims
    parts = [CHECKPOINT_MAGIC, struct.pack("<IfI", CHECKPOINT_VERSION, field_.omega0, len(dims)),
             struct.pack(f"<{len(dims)}I", *dims)]
    for w, b in zip(field_.weights, field_.biases):
        parts.append(w.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> SirenField:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 16 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a field checkpoint (bad magic)")
    version, omega0, nd = struct.unpack_from("<IfI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if not 2 <= nd <= 64 or len(buf) < 16 + 4 * nd:
        raise CheckpointError(f"{path}: truncated layer table")
    dims = struct.unpack_from(f"<{nd}I", buf, 16)
    o = 16 + 4 * nd
    need = o + 4 * sum(dims[i] * dims[i + 1] + dims[i + 1] for i in range(nd - 1))
    if len(buf) != need:
        raise CheckpointError(f"{path}: size {len(buf)} bytes, expected {need}")
    weights, biases = [], []
    for i in range(nd - 1):
        n_w = dims[i] * dims[i + 1]
        weights.append(np.frombuffer(buf, "<f4", n_w, o).reshape(dims[i + 1], dims[i]).copy())
        o += 4 * n_w
        biases.append(np.frombuffer(buf, "<f4", dims[i + 1], o).copy())
        o += 4 * dims[i + 1]
    return SirenField(weights, biases, omega0)
