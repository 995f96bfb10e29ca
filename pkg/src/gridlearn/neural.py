"""Dense feed-forward networks with a small reverse-mode autodiff tape.

``Tensor`` records the operations needed by the training loss (affine maps,
ReLU, |x|, max(0, x), sin/cos, products with constant matrices, means) and
backpropagates exact gradients. At kinks of |x| and max(0, x) the derivative
is taken as 0. Every operation checks its result for non-finite values and
raises ``NonFiniteError`` naming the node that produced it.

Parameters of a model live in one flat buffer (``ParamStore``) so the
optimizer state has a fixed footprint and checkpoints are a single array.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    def __init__(self, node: str):
        super().__init__(f"non-finite value produced by node '{node}'")
        self.node = node


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "name", "needs", "_parents", "_backward", "kink")
    # make numpy defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, name: str = "const", parents=(), backward=None, kink=None):
        self.value = np.asarray(value, dtype=float)
        if not np.isfinite(self.value).all():
            raise NonFiniteError(name)
        self.grad = None
        self.name = name
        self.needs = any(p.needs for p in parents)
        self._parents = parents
        self._backward = backward if self.needs else None
        # argument whose sign switches the derivative (for kink bookkeeping)
        self.kink = kink

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=float)
        else:
            self.grad += g

    # -- arithmetic

    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.needs:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.needs:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor(a.value + b.value, "add", (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor(-a.value, "neg", (a,), lambda g: a._accumulate(-g))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            if a.needs:
                a._accumulate(_unbroadcast(g * b.value, a.shape))
            if b.needs:
                b._accumulate(_unbroadcast(g * a.value, b.shape))

        return Tensor(a.value * b.value, "mul", (a, b), back)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            # promote 1-d operands to matrices, then drop the added axes
            av = a.value if a.value.ndim == 2 else a.value[None, :]
            bv = b.value if b.value.ndim == 2 else b.value[:, None]
            gm = np.asarray(g).reshape(av.shape[0], bv.shape[1])
            if a.needs:
                a._accumulate((gm @ bv.T).reshape(a.shape))
            if b.needs:
                b._accumulate((av.T @ gm).reshape(b.shape))

        return Tensor(a.value @ b.value, "matmul", (a, b), back)

    def square(self):
        a = self
        return Tensor(a.value * a.value, "square", (a,), lambda g: a._accumulate(2 * a.value * g))

    def sin(self):
        a = self
        return Tensor(np.sin(a.value), "sin", (a,), lambda g: a._accumulate(np.cos(a.value) * g))

    def cos(self):
        a = self
        return Tensor(np.cos(a.value), "cos", (a,), lambda g: a._accumulate(-np.sin(a.value) * g))

    def relu(self):
        a = self
        mask = a.value > 0
        return Tensor(np.where(mask, a.value, 0.0), "relu", (a,),
                      lambda g: a._accumulate(g * mask), kink=a.value)

    def abs(self):
        a = self
        sign = np.sign(a.value)
        return Tensor(np.abs(a.value), "abs", (a,), lambda g: a._accumulate(g * sign), kink=a.value)

    def mean(self, axis=None):
        a = self
        n = a.value.size if axis is None else a.value.shape[axis]

        def back(g):
            g = np.asarray(g) / n
            if axis is not None:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor(a.value.mean(axis=axis), "mean", (a,), back)

    def sum(self, axis=None):
        a = self

        def back(g):
            g = np.asarray(g)
            if axis is not None:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

        return Tensor(a.value.sum(axis=axis), "sum", (a,), back)

    def named(self, name: str) -> "Tensor":
        self.name = name
        return self

    # -- reverse pass

    def tape(self) -> list["Tensor"]:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self):
        order = self.tape()
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None and node.needs:
                node._backward(node.grad)
                for p in node._parents:
                    if p.grad is not None and not np.isfinite(p.grad).all():
                        raise NonFiniteError(f"grad of {p.name}")

    def kink_margin(self) -> float:
        """Smallest |argument| over all kinked operations feeding this node."""
        m = np.inf
        for node in self.tape():
            if node.kink is not None and node.kink.size:
                m = min(m, float(np.abs(node.kink).min()))
        return m


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def variable(value, name: str = "var") -> Tensor:
    """Leaf tensor that collects a gradient."""
    t = Tensor(value, name)
    t.needs = True
    return t


def relu(x: Tensor) -> Tensor:
    return x.relu()


def hinge(x: Tensor) -> Tensor:
    """max(0, x) elementwise."""
    return x.relu().named("hinge")


class Param(Tensor):
    """Leaf tensor whose value and gradient are views into a ParamStore."""

    __slots__ = ()

    def __init__(self, value_view, grad_view, name):
        Tensor.__init__(self, np.zeros(0), name)
        self.value = value_view
        self.grad = grad_view
        self.needs = True

    def _accumulate(self, g):
        self.grad += g


class ParamStore:
    """One flat float64 buffer for all parameters plus one for their gradients."""

    def __init__(self, shapes: list[tuple]):
        self.shapes = [tuple(s) for s in shapes]
        sizes = [int(np.prod(s)) for s in self.shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.flat = np.zeros(int(self.offsets[-1]))
        self.grad = np.zeros_like(self.flat)

    def view(self, k: int, buf=None) -> np.ndarray:
        buf = self.flat if buf is None else buf
        return buf[self.offsets[k]:self.offsets[k + 1]].reshape(self.shapes[k])

    def params(self) -> list[Param]:
        return [Param(self.view(k), self.view(k, self.grad), f"param{k}") for k in range(len(self.shapes))]

    def zero_grad(self):
        self.grad[:] = 0.0


@dataclass
class Mlp:
    """Fully connected ReLU network: sizes = [in, h1, ..., out]."""

    sizes: list[int]
    relu_head: bool = False

    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def shapes(self) -> list[tuple]:
        out = []
        for i in range(self.n_layers()):
            out += [(self.sizes[i + 1], self.sizes[i]), (self.sizes[i + 1],)]
        return out

    def forward(self, x: Tensor, params: list[Tensor]) -> Tensor:
        h = x
        last = self.n_layers() - 1
        for i in range(self.n_layers()):
            W, b = params[2 * i], params[2 * i + 1]
            h = h @ _transpose(W) + b
            if i < last or self.relu_head:
                h = h.relu()
        return h

    def infer(self, x: np.ndarray, params: list[np.ndarray]) -> np.ndarray:
        h = x
        last = self.n_layers() - 1
        for i in range(self.n_layers()):
            h = h @ params[2 * i].T + params[2 * i + 1]
            if i < last or self.relu_head:
                np.maximum(h, 0.0, out=h)
        return h


def _transpose(W: Tensor) -> Tensor:
    w = W

    def back(g):
        w._accumulate(g.T)

    return Tensor(w.value.T, "transpose", (w,), back)


HEADS = ("v", "theta", "pg", "qg")


@dataclass
class Standardizer:
    """Affine per-component scaling; a component with zero spread in the
    training data keeps scale 1 on inputs and scale 0 on outputs (the output
    is then the constant training mean)."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray, *, output: bool) -> "Standardizer":
        data = np.asarray(data, dtype=float)
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        std = np.where(flat, 0.0 if output else 1.0, std)
        return cls(mean, std)

    @classmethod
    def identity(cls, width: int) -> "Standardizer":
        return cls(np.zeros(width), np.ones(width))


@dataclass
class OpfDnn:
    """Four subnetworks sharing the load input and predicting v, theta
    (reference bus excluded), pg and qg."""

    n_load: int
    n_bus: int
    n_gen: int
    ref_bus: int
    hidden: list[int]
    relu_heads: bool = False
    x_scale: Standardizer | None = None
    y_scale: dict = field(default_factory=dict)
    store: ParamStore | None = None

    def __post_init__(self):
        outs = self.head_widths()
        self.nets = {h: Mlp([self.input_width(), *self.hidden, outs[h]], self.relu_heads) for h in HEADS}
        if self.store is None:
            self.store = ParamStore([s for h in HEADS for s in self.nets[h].shapes()])
        if self.x_scale is None:
            self.x_scale = Standardizer.identity(self.input_width())
        for h in HEADS:
            self.y_scale.setdefault(h, Standardizer.identity(outs[h]))
        self._slices = {}
        k = 0
        for h in HEADS:
            n = len(self.nets[h].shapes())
            self._slices[h] = (k, k + n)
            k += n
        nonref = [i for i in range(self.n_bus) if i != self.ref_bus]
        self.theta_splice = np.zeros((self.n_bus - 1, self.n_bus))
        self.theta_splice[np.arange(self.n_bus - 1), nonref] = 1.0

    def input_width(self) -> int:
        return 2 * self.n_load

    def head_widths(self) -> dict:
        return {"v": self.n_bus, "theta": self.n_bus - 1, "pg": self.n_gen, "qg": self.n_gen}

    @classmethod
    def build(cls, n_load, n_bus, n_gen, ref_bus, hidden=None, depth=2, relu_heads=False, rng=None):
        width = max(64, 2 * 2 * n_load)
        hidden = list(hidden) if hidden is not None else [width] * depth
        model = cls(n_load, n_bus, n_gen, ref_bus, hidden, relu_heads)
        if rng is not None:
            model.init_weights(rng)
        return model

    def init_weights(self, rng: np.random.Generator):
        """Uniform fan-in (Kaiming-style) weights, zero biases."""
        for k, shape in enumerate(self.store.shapes):
            view = self.store.view(k)
            if len(shape) == 2:
                bound = np.sqrt(6.0 / shape[1])
                view[...] = rng.uniform(-bound, bound, size=shape)
            else:
                view[...] = 0.0

    def param_arrays(self, head: str) -> list[np.ndarray]:
        a, b = self._slices[head]
        return [self.store.view(k) for k in range(a, b)]

    # -- tape forward (training)

    def forward(self, x) -> dict[str, Tensor]:
        """Raw per-unit predictions (theta includes the reference bus at 0)."""
        x = np.asarray(x, dtype=float)
        self._check_width(x)
        z = Tensor((x - self.x_scale.mean) / self.x_scale.std, "input")
        params = self.store.params()
        out = {}
        for h in HEADS:
            a, b = self._slices[h]
            raw = self.nets[h].forward(z, params[a:b])
            sc = self.y_scale[h]
            out[h] = (raw * sc.std + sc.mean).named(f"head_{h}")
        out["theta"] = (out["theta"] @ self.theta_splice).named("theta_full")
        return out

    # -- plain numpy forward (inference)

    def predict_arrays(self, x) -> dict[str, np.ndarray]:
        x = np.asarray(x, dtype=float)
        self._check_width(x)
        z = (x - self.x_scale.mean) / self.x_scale.std
        out = {}
        for h in HEADS:
            sc = self.y_scale[h]
            out[h] = self.nets[h].infer(z, self.param_arrays(h)) * sc.std + sc.mean
        out["theta"] = out["theta"] @ self.theta_splice
        return out

    def _check_width(self, x):
        if x.shape[-1] != self.input_width():
            raise ValueError(f"input width {x.shape[-1]} does not match model input {self.input_width()}")

    # -- serialization

    def spec_dict(self) -> dict:
        return {
            "n_load": self.n_load, "n_bus": self.n_bus, "n_gen": self.n_gen,
            "ref_bus": self.ref_bus, "hidden": list(self.hidden), "relu_heads": self.relu_heads,
        }


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def step(self, params: np.ndarray, grads: np.ndarray) -> None:
        """In-place bias-corrected Adam update of a flat parameter buffer."""
        if params.shape != grads.shape:
            raise ValueError("parameter and gradient shapes differ")
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        t = self.step_count
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grads * grads
        mhat = self.m / (1 - self.beta1**t)
        vhat = self.v / (1 - self.beta2**t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- checkpoint container


def _enc(a) -> dict:
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _dec(d) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype=d["dtype"]).reshape(d["shape"]).astype(float)


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: OpfDnn, *, case_hash: str, adam: Adam, multipliers: dict,
                    epoch: int, extra: dict | None = None) -> None:
    doc = {
        "format": "gridlearn-checkpoint",
        "version": CHECKPOINT_VERSION,
        "case_hash": case_hash,
        "model": model.spec_dict(),
        "params": _enc(model.store.flat),
        "x_scale": {"mean": _enc(model.x_scale.mean), "std": _enc(model.x_scale.std)},
        "y_scale": {h: {"mean": _enc(s.mean), "std": _enc(s.std)} for h, s in model.y_scale.items()},
        "adam": {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps,
            "step": adam.step_count,
            "m": None if adam.m is None else _enc(adam.m),
            "v": None if adam.v is None else _enc(adam.v),
        },
        "multipliers": {k: float(v) for k, v in multipliers.items()},
        "epoch": int(epoch),
        "extra": extra or {},
    }
    text = json.dumps(doc, sort_keys=True, indent=1)
    with open(path, "w") as fh:
        fh.write(text + "\n")


@dataclass
class Checkpoint:
    model: OpfDnn
    case_hash: str
    adam: Adam
    multipliers: dict
    epoch: int
    extra: dict


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != "gridlearn-checkpoint" or doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint format or version")
    if expected_hash is not None and doc["case_hash"] != expected_hash:
        raise CheckpointError("checkpoint was trained on a different case (case hash mismatch)")
    spec = doc["model"]
    model = OpfDnn(**spec)
    flat = _dec(doc["params"])
    if flat.shape != model.store.flat.shape:
        raise CheckpointError("parameter vector does not match the declared architecture")
    model.store.flat[:] = flat
    model.x_scale = Standardizer(_dec(doc["x_scale"]["mean"]), _dec(doc["x_scale"]["std"]))
    model.y_scale = {h: Standardizer(_dec(s["mean"]), _dec(s["std"])) for h, s in doc["y_scale"].items()}
    a = doc["adam"]
    adam = Adam(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"],
                None if a["m"] is None else _dec(a["m"]), None if a["v"] is None else _dec(a["v"]))
    return Checkpoint(model, doc["case_hash"], adam, doc["multipliers"], doc["epoch"], doc["extra"])
