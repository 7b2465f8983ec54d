"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records a backward closure on the implicit tape (the graph of
Tensor nodes). Gradients flow with `backward(loss)`; parameters are plain
Tensors with requires_grad=True collected in dicts by the model code.

Everything is float64 and CPU-only. Primitive outputs are checked for
finiteness; a NaN/inf raises NumericError naming the op.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericError

CHECK_FINITE = True

CHECKPOINT_FORMAT_VERSION = "medembed-ckpt-1"


def _check_finite(op: str, arr: np.ndarray) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite output of op '{op}'")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    # -- operator sugar (delegates to the primitives below) --
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, Tensor(-1.0))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: tuple, backward) -> Tensor:
    _check_finite(op, data)
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# ---------------------------------------------------------------------------
# elementwise / linear algebra primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _result("add", out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _result("sub", out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result("mul", out, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data ** 2), b.shape))

    return _result("div", out, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            ga = np.matmul(g, b.data.swapaxes(-1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(a.data.swapaxes(-1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return _result("matmul", out, (a, b), bw)


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * out * (1.0 - out))

    return _result("sigmoid", out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * (1.0 - out * out))

    return _result("tanh", out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * (x.data > 0.0))

    return _result("relu", out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * out)

    return _result("exp", out, (x,), bw)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def bw(g):
        if x.requires_grad:
            _accum(x, g / x.data)

    return _result("log", out, (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * 0.5 / out)

    return _result("sqrt", out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.shape[axis]

    def bw(g):
        if not x.requires_grad:
            return
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape) / count)

    return _result("mean", np.asarray(out), (x,), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not x.requires_grad:
            return
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _result("sum", np.asarray(out), (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            _accum(x, out * (g - dot))

    return _result("softmax", out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.data.shape[-1]

    def bw(g):
        if gain.requires_grad:
            _accum(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            # d/dx of (x - mu) * inv with mu, inv functions of x
            t1 = gx * inv
            t2 = inv / n * gx.sum(axis=-1, keepdims=True)
            t3 = xhat * inv / n * (gx * xhat).sum(axis=-1, keepdims=True)
            _accum(x, t1 - t2 - t3)

    return _result("layer_norm", out, (x, gain, bias), bw)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: scales by 1/(1-p) at train time, exact identity in eval."""
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * keep)

    return _result("dropout", x.data * keep, (x,), bw)


# ---------------------------------------------------------------------------
# structural primitives
# ---------------------------------------------------------------------------

def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _result("concat", out, tuple(tensors), bw)


def tslice(x: Tensor, index) -> Tensor:
    """Basic slicing (tuples of slices/ints). Backward zero-pads."""
    out = x.data[index]

    def bw(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[index] = g
            _accum(x, full)

    return _result("slice", np.asarray(out), (x,), bw)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(
            f"embedding_lookup: id out of range for table with {table.shape[0]} rows"
        )
    out = table.data[ids]

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            _accum(table, full)

    return _result("embedding_lookup", out, (table,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.shape))

    return _result("reshape", out, (x,), bw)


def transpose(x: Tensor, axes) -> Tensor:
    out = x.data.transpose(axes)
    inv = np.argsort(axes)

    def bw(g):
        if x.requires_grad:
            _accum(x, g.transpose(inv))

    return _result("transpose", out, (x,), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

_BCE_EPS = 1e-7


def binary_cross_entropy(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean BCE over all elements. Predictions are clipped to [eps, 1-eps]."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise DimensionError(
            f"binary_cross_entropy: pred {pred.shape} vs target {target.shape}"
        )
    if target.size and (target.min() < 0.0 or target.max() > 1.0):
        from .errors import InputError

        raise InputError("binary_cross_entropy: labels must lie in {0,1}")
    p = np.clip(pred.data, _BCE_EPS, 1.0 - _BCE_EPS)
    out = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)).mean()

    def bw(g):
        if pred.requires_grad:
            inside = (pred.data > _BCE_EPS) & (pred.data < 1.0 - _BCE_EPS)
            grad = (p - target) / (p * (1.0 - p)) / target.size
            _accum(pred, g * grad * inside)

    return _result("binary_cross_entropy", np.asarray(out), (pred,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy over rows; rows with mask==0 are ignored."""
    targets = np.asarray(targets)
    n, v = logits.shape
    if mask is None:
        mask = np.ones(n)
    mask = np.asarray(mask, dtype=np.float64)
    denom = max(mask.sum(), 1.0)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(n), targets]
    out = (nll * mask).sum() / denom

    def bw(g):
        if logits.requires_grad:
            probs = np.exp(shifted - logz[:, None])
            probs[np.arange(n), targets] -= 1.0
            _accum(logits, g * probs * (mask[:, None] / denom))

    return _result("cross_entropy", np.asarray(out), (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; populates .grad on reachable nodes."""
    if loss.data.shape != ():
        raise ContractError(f"backward root must be scalar, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones(())
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradient per parameter; params unreachable from the loss get zeros."""
    return {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in params.items()
    }


def zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """Bias-corrected Adam update, in place."""
    state.step_count += 1
    t = state.step_count
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"NaN/inf gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / (1.0 - state.beta1 ** t)
        vhat = v / (1.0 - state.beta2 ** t)
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params: dict[str, Tensor], h: float = 1e-5,
               samples_per_param: int = 4, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn() must rebuild the graph from `params` and return a scalar Tensor,
    deterministically (dropout off).
    """
    if h <= 0:
        raise ContractError("grad_check: h must be positive")
    zero_grads(params)
    loss = loss_fn()
    backward(loss)
    analytic = collect_grads(params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(samples_per_param, n), replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            fp = loss_fn().item()
            flat[c] = orig - h
            fm = loss_fn().item()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[name].reshape(-1)[c]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    zero_grads(params)
    return worst


# ---------------------------------------------------------------------------
# deterministic randomness
# ---------------------------------------------------------------------------

class RngStream:
    """Counter-based splittable random stream (Philox under the hood).

    A stream is identified by (seed, path); `child(tag)` derives an
    independent stream, so parallel runs never share state. Identical seed
    and call sequence give identical outputs on every platform.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = path
        self._gen = np.random.Generator(np.random.Philox(
            np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)))

    def child(self, tag) -> "RngStream":
        if isinstance(tag, str):
            tag = zlib.crc32(tag.encode())
        return RngStream(self.seed, self.path + (int(tag),))

    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, scale: float, shape) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)


# ---------------------------------------------------------------------------
# parameter checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, Tensor]) -> None:
    """Self-describing checkpoint: ordered (name, shape, data) + format version."""
    names = list(params.keys())
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "entries": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    arrays = {f"arr_{i}": params[n].data for i, n in enumerate(names)}
    arrays["manifest"] = np.frombuffer(
        json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    from .errors import InputError

    with np.load(path) as z:
        manifest = json.loads(bytes(z["manifest"]))
        if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise InputError(f"unsupported checkpoint format in {path}")
        out = {}
        for i, entry in enumerate(manifest["entries"]):
            arr = z[f"arr_{i}"]
            if list(arr.shape) != entry["shape"]:
                raise InputError(f"checkpoint entry {entry['name']} has wrong shape")
            out[entry["name"]] = arr.astype(np.float64)
    return out


def params_from_arrays(arrays: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=requires_grad) for k, v in arrays.items()}


def snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}
