"""Dense float64 tensors with reverse-mode differentiation.

Only the operators the pose head needs are provided. Every op works on
numpy arrays and records a closure that maps the output gradient to
input gradients; ``backward`` replays those closures in reverse creation
order.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

_node_ids = itertools.count()


class Tensor:
    __slots__ = ("values", "grad", "node_id", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, parents: Sequence["Tensor"] = (), backward: Optional[Callable] = None,
                 requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_node_ids)
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if g.shape != self.values.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.values.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node_id={self.node_id}, requires_grad={self.requires_grad})"


def leaf(values, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def constant(values) -> Tensor:
    return Tensor(values)


def _op(values, parents, backward) -> Tensor:
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(values)
    return Tensor(values, parents, backward)


def tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in execution (creation) order."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen[node.node_id] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    return [seen[k] for k in sorted(seen)]


def backward(loss: Tensor) -> None:
    if loss.values.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.values.shape}")
    nodes = tape(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
    for node in reversed(nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if not node._parents:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    return _op(a.values + b.values, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _op(a.values * c, (a,), lambda g: (g * c,))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _op(np.sum(a.values), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def weighted_sum(a: Tensor, weights) -> Tensor:
    """Scalar sum(a * weights) for a constant weight array."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != a.shape:
        raise ValueError(f"weights shape {weights.shape} does not match {a.shape}")
    return _op(np.sum(a.values * weights), (a,), lambda g: (g * weights,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _op(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.values)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _op(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Flatten each tensor and join them into one vector."""
    sizes = [t.values.size for t in tensors]
    shapes = [t.shape for t in tensors]
    out = np.concatenate([t.values.ravel() for t in tensors]) if tensors else np.zeros(0)

    def bw(g):
        parts = np.split(g, np.cumsum(sizes)[:-1])
        return tuple(p.reshape(s) for p, s in zip(parts, shapes))

    return _op(out, tensors, bw)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    out = np.repeat(np.repeat(a.values, factor, axis=-2), factor, axis=-1)
    shape = a.shape

    def bw(g):
        h, w = shape[-2], shape[-1]
        g = g.reshape(g.shape[:-2] + (h, factor, w, factor))
        return (g.sum(axis=(-3, -1)),)

    return _op(out, (a,), bw)


# ---------------------------------------------------------------- convolution

def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")
    return x, False


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Cross-correlation of a (N x) C_in x H x W input with a C_out x C_in x k x k kernel."""
    xv, squeezed = _batched(x.values)
    wv, bv = weight.values, bias.values
    if wv.ndim != 4 or wv.shape[2] != wv.shape[3]:
        raise ValueError(f"weights must be C_out x C_in x k x k, got {wv.shape}")
    c_out, c_in, k, _ = wv.shape
    if xv.shape[1] != c_in:
        raise ValueError(f"input has {xv.shape[1]} channels, weights expect {c_in}")
    if bv.shape != (c_out,):
        raise ValueError(f"bias must have shape ({c_out},), got {bv.shape}")
    if padding is None:
        padding = k // 2
    n, _, h, w = xv.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(xv, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xv

    # cols[(c, i, j), (n, r, s)] = xp[n, c, r*stride + i, s*stride + j]
    cols = np.empty((c_in, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    cols = cols.reshape(c_in * k * k, n * ho * wo)
    wmat = wv.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3) + bv[:, None, None]
    out = np.ascontiguousarray(out)
    if squeezed:
        out = out[0]

    def bw(g):
        gb = g[None] if squeezed else g
        gmat = gb.transpose(1, 0, 2, 3).reshape(c_out, -1)
        g_w = (gmat @ cols.T).reshape(wv.shape)
        g_b = gmat.sum(axis=1)
        g_x = None
        if x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c_in, k, k, n, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j].transpose(1, 0, 2, 3)
            g_x = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            if squeezed:
                g_x = g_x[0]
        return g_x, g_w, g_b

    return _op(out, (x, weight, bias), bw)


# ---------------------------------------------------------------- bilinear sampling

@dataclass
class _Corners:
    x0: np.ndarray
    x1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    wx: np.ndarray
    wy: np.ndarray
    inside_x: np.ndarray
    inside_y: np.ndarray


def _corners(px: np.ndarray, py: np.ndarray, h: int, w: int) -> _Corners:
    # Clamp to the border; the clamped axis gets zero coordinate gradient.
    inside_x = (px >= 0) & (px <= w - 1)
    inside_y = (py >= 0) & (py <= h - 1)
    cx = np.clip(px, 0, w - 1)
    cy = np.clip(py, 0, h - 1)
    x0 = np.clip(np.floor(cx), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(cy), 0, max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return _Corners(x0, x1, y0, y1, cx - x0, cy - y0, inside_x, inside_y)


def bilinear_sample(feature: Tensor, point: Tensor) -> Tensor:
    """Sample a C x H x W map at continuous grid coordinates ``point = (x, y)``."""
    fv = feature.values
    if fv.ndim != 3:
        raise ValueError(f"feature must be C x H x W, got {fv.shape}")
    pv = np.asarray(point.values, dtype=np.float64)
    if pv.shape != (2,):
        raise ValueError("point must be a 2-vector (x, y)")
    _, h, w = fv.shape
    c = _corners(pv[0:1], pv[1:2], h, w)
    x0, x1, y0, y1 = int(c.x0[0]), int(c.x1[0]), int(c.y0[0]), int(c.y1[0])
    wx, wy = float(c.wx[0]), float(c.wy[0])
    f00, f01 = fv[:, y0, x0], fv[:, y0, x1]
    f10, f11 = fv[:, y1, x0], fv[:, y1, x1]
    top = (1 - wx) * f00 + wx * f01
    bottom = (1 - wx) * f10 + wx * f11
    out = (1 - wy) * top + wy * bottom

    def bw(g):
        gf = np.zeros_like(fv)
        gf[:, y0, x0] += g * (1 - wx) * (1 - wy)
        gf[:, y0, x1] += g * wx * (1 - wy)
        gf[:, y1, x0] += g * (1 - wx) * wy
        gf[:, y1, x1] += g * wx * wy
        dx = ((1 - wy) * (f01 - f00) + wy * (f11 - f10)) if c.inside_x[0] else np.zeros_like(g)
        dy = (bottom - top) if c.inside_y[0] else np.zeros_like(g)
        return gf, np.array([np.dot(g, dx), np.dot(g, dy)])

    return _op(out, (feature, point), bw)


def deformable_pose_conv(feature: Tensor, offsets: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """K-point deformable convolution.

    At every location p the map is sampled at ``p + offset_i`` for the K
    joints (offset channels are ordered dx_0, dy_0, dx_1, dy_1, ...), and the
    K sampled C_in-vectors are mixed by ``weight[:, :, i]``.
    """
    fv, squeezed = _batched(feature.values)
    ov, _ = _batched(offsets.values)
    wv, bv = weight.values, bias.values
    if wv.ndim != 3:
        raise ValueError(f"weights must be C_out x C_in x K, got {wv.shape}")
    c_out, c_in, K = wv.shape
    n, c, h, w = fv.shape
    if c != c_in:
        raise ValueError(f"feature has {c} channels, weights expect {c_in}")
    if ov.shape != (n, 2 * K, h, w):
        raise ValueError(f"offsets must have shape {(n, 2 * K, h, w)}, got {ov.shape}")
    if bv.shape != (c_out,):
        raise ValueError(f"bias must have shape ({c_out},), got {bv.shape}")

    cols_idx = np.arange(w, dtype=np.float64)[None, None, None, :]
    rows_idx = np.arange(h, dtype=np.float64)[None, None, :, None]
    px = cols_idx + ov[:, 0::2]  # n, K, h, w
    py = rows_idx + ov[:, 1::2]
    cr = _corners(px, py, h, w)

    flat = fv.reshape(n, c, h * w)
    m = K * h * w

    def gather(yy, xx):
        idx = (yy * w + xx).reshape(n, 1, m)
        return np.take_along_axis(flat, np.broadcast_to(idx, (n, c, m)), axis=2)

    f00, f01 = gather(cr.y0, cr.x0), gather(cr.y0, cr.x1)
    f10, f11 = gather(cr.y1, cr.x0), gather(cr.y1, cr.x1)
    wx = cr.wx.reshape(n, 1, m)
    wy = cr.wy.reshape(n, 1, m)
    top = (1 - wx) * f00 + wx * f01
    bottom = (1 - wx) * f10 + wx * f11
    samples = (1 - wy) * top + wy * bottom  # n, c, K*h*w

    # cols[(c, k), (n, r, s)] mirrors the 1x1 conv2d layout so K = 1 matches it exactly.
    cols = samples.reshape(n, c, K, h, w).transpose(1, 2, 0, 3, 4).reshape(c * K, n * h * w)
    wmat = wv.reshape(c_out, c * K)
    out = (wmat @ cols).reshape(c_out, n, h, w).transpose(1, 0, 2, 3) + bv[:, None, None]
    out = np.ascontiguousarray(out)
    if squeezed:
        out = out[0]

    def bw(g):
        gb = g[None] if squeezed else g
        gmat = gb.transpose(1, 0, 2, 3).reshape(c_out, -1)
        g_w = (gmat @ cols.T).reshape(wv.shape)
        g_b = gmat.sum(axis=1)
        gcols = wmat.T @ gmat
        g_samples = gcols.reshape(c, K, n, h, w).transpose(2, 0, 1, 3, 4).reshape(n, c, m)

        g_f = None
        if feature.requires_grad:
            base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
            acc = np.zeros(n * c * h * w)
            for yy, xx, wgt in (
                (cr.y0, cr.x0, (1 - wx) * (1 - wy)),
                (cr.y0, cr.x1, wx * (1 - wy)),
                (cr.y1, cr.x0, (1 - wx) * wy),
                (cr.y1, cr.x1, wx * wy),
            ):
                idx = base + (yy * w + xx).reshape(n, 1, m)
                acc += np.bincount(idx.ravel(), weights=(g_samples * wgt).ravel(), minlength=acc.size)
            g_f = acc.reshape(n, c, h, w)
            if squeezed:
                g_f = g_f[0]

        g_o = None
        if offsets.requires_grad:
            dsx = (1 - wy) * (f01 - f00) + wy * (f11 - f10)
            dsy = bottom - top
            gx = (g_samples * dsx).sum(axis=1).reshape(n, K, h, w) * cr.inside_x
            gy = (g_samples * dsy).sum(axis=1).reshape(n, K, h, w) * cr.inside_y
            g_o = np.empty((n, 2 * K, h, w))
            g_o[:, 0::2] = gx
            g_o[:, 1::2] = gy
            if squeezed:
                g_o = g_o[0]
        return g_f, g_o, g_w, g_b

    return _op(out, (feature, offsets, weight, bias), bw)


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradcheckReport:
    max_rel_err: dict[str, float]
    checked: dict[str, int]
    skipped_kinks: dict[str, int] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_err.values())


def gradcheck(builder: Callable[[dict[str, Tensor]], Tensor], inputs: Mapping[str, np.ndarray],
              eps: float = 1e-4, tol: float = 1e-4, n_coords: int = 32,
              rng: Optional[np.random.Generator] = None, wrt: Optional[Sequence[str]] = None) -> GradcheckReport:
    """Compare analytic gradients with central differences.

    ``builder`` maps a dict of leaf tensors to a scalar loss and must be
    deterministic. Up to ``n_coords`` coordinates per checked input are
    sampled. When the central difference straddles a kink (relu, bilinear
    cell edge) it changes with the step size; such a coordinate is re-checked
    at eps/10 and eps/100 and counted under ``skipped_kinks`` if a smaller
    step agrees with the analytic value. Relative errors use a denominator
    floored at the central-difference roundoff bound divided by ``tol``, so
    gradients far below the loss's float64 resolution are not judged on noise.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    names = list(base) if wrt is None else list(wrt)

    leaves = {k: leaf(v, name=k) for k, v in base.items()}
    loss = builder(leaves)
    backward(loss)
    # cancellation noise of (f(x+e) - f(x-e)) / 2e, with headroom for summation order
    noise = 1e3 * np.finfo(np.float64).eps * max(1.0, abs(float(loss.values))) / eps
    floor = max(1e-8, noise / tol)

    def evaluate(name, flat_index, delta):
        vals = {k: v for k, v in base.items()}
        arr = base[name].copy()
        arr.reshape(-1)[flat_index] += delta
        vals[name] = arr
        return float(builder({k: Tensor(v) for k, v in vals.items()}).values)

    max_err: dict[str, float] = {}
    checked: dict[str, int] = {}
    skipped: dict[str, int] = {}
    for name in names:
        analytic = leaves[name].grad
        analytic = np.zeros_like(base[name]) if analytic is None else analytic
        size = base[name].size
        picks = rng.choice(size, size=min(n_coords, size), replace=False) if size else []
        worst, count, kinks = 0.0, 0, 0
        for idx in picks:
            fp = evaluate(name, idx, eps)
            fm = evaluate(name, idx, -eps)
            fd = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[idx])
            if max(abs(fd), abs(a)) <= 1e-8:
                continue
            err = abs(a - fd) / max(abs(fd), abs(a), floor)
            if err > tol and _straddles_kink(lambda d: evaluate(name, idx, d), a, fd, eps, tol):
                kinks += 1
                continue
            worst = max(worst, err)
            count += 1
        max_err[name] = worst
        checked[name] = count
        skipped[name] = kinks
    return GradcheckReport(max_err, checked, skipped, tol)


def _straddles_kink(f: Callable[[float], float], analytic: float, fd: float, eps: float, tol: float) -> bool:
    for step in (eps / 10, eps / 100):
        fd_small = (f(step) - f(-step)) / (2 * step)
        scale = max(abs(fd_small), abs(analytic), 1e-8)
        unstable = abs(fd - fd_small) / max(abs(fd), abs(fd_small), 1e-8) > tol
        if unstable and abs(analytic - fd_small) / scale <= tol:
            return True
    return False
