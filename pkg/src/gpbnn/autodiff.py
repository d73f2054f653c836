"""Reverse-mode automatic differentiation over dense float64 arrays.

The central object is the :class:`Tape`, an append-only expression graph.
Parameters are named leaves; every other node applies one primitive
(elementwise arithmetic, matmul, activations, reductions) to earlier nodes.
Evaluating a tape with identical bindings replays the same numpy calls in
the same order, so outputs are bit-identical across runs.

Gradients are *symbolic*: ``Tape.grad_nodes`` walks the graph in reverse and
emits new nodes built from the same primitive set. Because the backward pass
is itself a graph, it can be differentiated again, which is what the
critic's gradient-norm penalty needs (an exact second-order path through
affine/softplus compositions).

Hot loops should compile the nodes they need once via :meth:`Tape.compile`
and then call the resulting :class:`Program` with fresh bindings; graph
construction cost is paid a single time.
"""

from __future__ import annotations

import numpy as np
from scipy import special


def _np_softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


class DiffEngineError(Exception):
    """Base class for tape construction and evaluation failures."""


class ShapeError(DiffEngineError):
    """Incompatible operand shapes at graph-construction time."""


class EvaluationError(DiffEngineError):
    """Runtime failure (non-finite value, missing binding) during replay."""


def _as_shape(shape) -> tuple:
    if shape is None:
        return ()
    if isinstance(shape, int):
        return (shape,)
    return tuple(int(s) for s in shape)


def _keepdims_shape(shape: tuple, axis) -> tuple:
    if axis is None:
        return (1,) * len(shape)
    ax = axis % len(shape)
    return shape[:ax] + (1,) + shape[ax + 1 :]


def _reduced_shape(shape: tuple, axis, keepdims: bool) -> tuple:
    if axis is None:
        return (1,) * len(shape) if keepdims else ()
    ax = axis % len(shape)
    if keepdims:
        return shape[:ax] + (1,) + shape[ax + 1 :]
    return shape[:ax] + shape[ax + 1 :]


class Node:
    """One entry of a :class:`Tape`: a primitive applied to earlier nodes."""

    __slots__ = ("tape", "idx", "op", "parents", "shape", "meta")

    def __init__(self, tape, idx, op, parents, shape, meta=None):
        self.tape = tape
        self.idx = idx
        self.op = op
        self.parents = parents
        self.shape = shape
        self.meta = meta

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def label(self) -> str:
        name = self.meta if self.op == "param" else None
        return f"{self.op}#{self.idx}" + (f"[{name}]" if name else "")

    def __repr__(self):
        return f"<Node {self.label()} shape={self.shape}>"

    # Operator sugar; scalars and ndarrays are lifted to constants.
    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.tape.const(other)

    def __add__(self, other):
        return self.tape._binary("add", self, self._lift(other))

    def __radd__(self, other):
        return self.tape._binary("add", self._lift(other), self)

    def __sub__(self, other):
        return self.tape._binary("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape._binary("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.tape._binary("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.tape._binary("mul", self._lift(other), self)

    def __truediv__(self, other):
        return self.tape._binary("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return self.tape._binary("div", self._lift(other), self)

    def __neg__(self):
        return self.tape._unary("neg", self)

    def __matmul__(self, other):
        return self.tape.matmul(self, self._lift(other))

    def __rmatmul__(self, other):
        return self.tape.matmul(self._lift(other), self)


class Tape:
    """Append-only computation graph with named parameter leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self._program_cache: dict = {}
        self._last_bindings: dict | None = None

    # ------------------------------------------------------------------
    # graph construction
    # ------------------------------------------------------------------

    def _append(self, op, parents, shape, meta=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(parents), tuple(shape), meta)
        self.nodes.append(node)
        return node

    def param(self, name: str, shape) -> Node:
        """Declare a named input leaf with a fixed shape."""
        if name in self.params:
            raise DiffEngineError(f"parameter {name!r} already declared")
        node = self._append("param", (), _as_shape(shape), meta=name)
        self.params[name] = node
        return node

    def const(self, value) -> Node:
        arr = np.asarray(value, dtype=np.float64)
        return self._append("const", (), arr.shape, meta=arr)

    def _binary(self, op, a: Node, b: Node) -> Node:
        try:
            shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(
                f"{op}: cannot broadcast {a.shape} with {b.shape} "
                f"(nodes {a.label()}, {b.label()})"
            ) from None
        return self._append(op, (a, b), shape)

    def _unary(self, op, a: Node, shape=None, meta=None) -> Node:
        return self._append(op, (a,), a.shape if shape is None else shape, meta)

    def matmul(self, a: Node, b: Node) -> Node:
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(
                f"matmul requires ndim >= 2, got {a.shape} @ {b.shape} "
                f"(nodes {a.label()}, {b.label()})"
            )
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul inner dims differ: {a.shape} @ {b.shape} "
                f"(nodes {a.label()}, {b.label()})"
            )
        try:
            batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            raise ShapeError(
                f"matmul batch dims incompatible: {a.shape} @ {b.shape}"
            ) from None
        return self._append("matmul", (a, b), batch + (a.shape[-2], b.shape[-1]))

    def mT(self, a: Node) -> Node:
        if a.ndim < 2:
            raise ShapeError(f"mT requires ndim >= 2, got {a.shape}")
        shape = a.shape[:-2] + (a.shape[-1], a.shape[-2])
        return self._unary("mT", a, shape)

    def reshape(self, a: Node, shape) -> Node:
        shape = _as_shape(shape)
        if int(np.prod(shape, dtype=np.int64)) != int(np.prod(a.shape, dtype=np.int64)):
            raise ShapeError(f"cannot reshape {a.shape} to {shape} ({a.label()})")
        if shape == a.shape:
            return a
        return self._unary("reshape", a, shape, meta=shape)

    def slice_last(self, a: Node, lo: int, hi: int) -> Node:
        if not (0 <= lo <= hi <= a.shape[-1]):
            raise ShapeError(f"slice [{lo}:{hi}] out of range for {a.shape}")
        return self._unary("slice_last", a, a.shape[:-1] + (hi - lo,), meta=(lo, hi))

    def embed_last(self, a: Node, lo: int, total: int) -> Node:
        if lo + a.shape[-1] > total:
            raise ShapeError(f"embed at {lo} of {a.shape} into size {total}")
        return self._unary("embed_last", a, a.shape[:-1] + (total,), meta=(lo, total))

    def broadcast_to(self, a: Node, shape) -> Node:
        shape = _as_shape(shape)
        if shape == a.shape:
            return a
        np.broadcast_shapes(a.shape, shape)  # raises on mismatch
        return self._unary("broadcast_to", a, shape, meta=shape)

    def sum_to(self, a: Node, shape) -> Node:
        shape = _as_shape(shape)
        if shape == a.shape:
            return a
        return self._unary("sum_to", a, shape, meta=shape)

    def tanh(self, a):
        return self._unary("tanh", a)

    def sigmoid(self, a):
        return self._unary("sigmoid", a)

    def softplus(self, a):
        return self._unary("softplus", a)

    def relu(self, a):
        return self._unary("relu", a)

    def step(self, a):
        return self._unary("step", a)

    def exp(self, a):
        return self._unary("exp", a)

    def log(self, a):
        return self._unary("log", a)

    def sqrt(self, a):
        return self._unary("sqrt", a)

    def square(self, a):
        return self._unary("square", a)

    def safe_div(self, a: Node, b: Node) -> Node:
        """a / b where b != 0, exactly 0 where b == 0 (subgradient convention)."""
        return self._binary("safe_div", a, b)

    def sum(self, a: Node, axis=None, keepdims=False) -> Node:
        return self._unary(
            "sum", a, _reduced_shape(a.shape, axis, keepdims), meta=(axis, keepdims)
        )

    def mean(self, a: Node, axis=None, keepdims=False) -> Node:
        return self._unary(
            "mean", a, _reduced_shape(a.shape, axis, keepdims), meta=(axis, keepdims)
        )

    def l2norm(self, a: Node, axis=None, keepdims=False) -> Node:
        """Euclidean norm with subgradient 0 at the origin."""
        return self._unary(
            "l2norm", a, _reduced_shape(a.shape, axis, keepdims), meta=(axis, keepdims)
        )

    def logsumexp(self, a: Node, axis=None, keepdims=False) -> Node:
        return self._unary(
            "logsumexp", a, _reduced_shape(a.shape, axis, keepdims), meta=(axis, keepdims)
        )

    # ------------------------------------------------------------------
    # differentiation
    # ------------------------------------------------------------------

    def _vjp(self, node: Node, g: Node):
        """Adjoint contributions for each parent, built from tape primitives."""
        op = node.op
        p = node.parents
        if op in ("add", "sub"):
            a, b = p
            gb = -g if op == "sub" else g
            return [self.sum_to(g, a.shape), self.sum_to(gb, b.shape)]
        if op == "neg":
            return [-g]
        if op == "mul":
            a, b = p
            return [self.sum_to(g * b, a.shape), self.sum_to(g * a, b.shape)]
        if op == "div":
            a, b = p
            return [self.sum_to(g / b, a.shape), self.sum_to(-(g * (node / b)), b.shape)]
        if op == "safe_div":
            a, b = p
            ga = self.sum_to(self.safe_div(g, b), a.shape)
            gb = self.sum_to(-(g * self.safe_div(node, b)), b.shape)
            return [ga, gb]
        if op == "matmul":
            a, b = p
            return [
                self.sum_to(self.matmul(g, self.mT(b)), a.shape),
                self.sum_to(self.matmul(self.mT(a), g), b.shape),
            ]
        if op == "mT":
            return [self.mT(g)]
        if op == "reshape":
            return [self.reshape(g, p[0].shape)]
        if op == "slice_last":
            lo, _hi = node.meta
            return [self.embed_last(g, lo, p[0].shape[-1])]
        if op == "embed_last":
            lo, _total = node.meta
            return [self.slice_last(g, lo, lo + p[0].shape[-1])]
        if op == "broadcast_to":
            return [self.sum_to(g, p[0].shape)]
        if op == "sum_to":
            return [self.broadcast_to(g, p[0].shape)]
        if op == "tanh":
            return [g * (self.const(1.0) - self.square(node))]
        if op == "sigmoid":
            return [g * (node * (self.const(1.0) - node))]
        if op == "softplus":
            return [g * self.sigmoid(p[0])]
        if op == "relu":
            return [g * self.step(p[0])]
        if op == "step":
            return [None]
        if op == "exp":
            return [g * node]
        if op == "log":
            return [g / p[0]]
        if op == "sqrt":
            return [g / (self.const(2.0) * node)]
        if op == "square":
            return [g * (self.const(2.0) * p[0])]
        if op in ("sum", "mean"):
            axis, keepdims = node.meta
            x = p[0]
            gk = g if keepdims or x.ndim == 0 else self.reshape(
                g, _keepdims_shape(x.shape, axis)
            )
            if op == "mean":
                n = int(np.prod(x.shape, dtype=np.int64)) if axis is None else x.shape[
                    axis % x.ndim
                ]
                gk = gk * self.const(1.0 / n)
            return [self.broadcast_to(gk, x.shape)]
        if op == "l2norm":
            axis, keepdims = node.meta
            x = p[0]
            kshape = _keepdims_shape(x.shape, axis)
            nk = node if keepdims or x.ndim == 0 else self.reshape(node, kshape)
            gk = g if keepdims or x.ndim == 0 else self.reshape(g, kshape)
            return [gk * self.safe_div(x, nk)]
        if op == "logsumexp":
            axis, keepdims = node.meta
            x = p[0]
            kshape = _keepdims_shape(x.shape, axis)
            nk = node if keepdims or x.ndim == 0 else self.reshape(node, kshape)
            gk = g if keepdims or x.ndim == 0 else self.reshape(g, kshape)
            return [gk * self.exp(x - nk)]
        raise DiffEngineError(f"no VJP rule for op {op!r}")

    def _ancestors(self, outputs) -> list[Node]:
        seen = set()
        stack = list(outputs)
        while stack:
            node = stack.pop()
            if node.idx in seen:
                continue
            seen.add(node.idx)
            stack.extend(node.parents)
        return [self.nodes[i] for i in sorted(seen)]

    def grad_nodes(self, output: Node, wrt: list[str]) -> dict[str, Node]:
        """Symbolic reverse-mode gradients of a scalar output.

        Returns one node per requested parameter name; parameters the output
        does not depend on get a zero constant of the right shape. The
        resulting nodes live on the same tape and can be differentiated
        again.
        """
        if output.shape != ():
            raise DiffEngineError(
                f"gradient target must be scalar, got shape {output.shape} "
                f"({output.label()})"
            )
        for name in wrt:
            if name not in self.params:
                raise DiffEngineError(f"unknown parameter {name!r}")
        adjoint: dict[int, Node] = {output.idx: self.const(1.0)}
        for node in reversed(self._ancestors([output])):
            g = adjoint.get(node.idx)
            if g is None or node.op in ("param", "const"):
                continue
            contribs = self._vjp(node, g)
            for parent, pg in zip(node.parents, contribs):
                if pg is None:
                    continue
                prev = adjoint.get(parent.idx)
                adjoint[parent.idx] = pg if prev is None else prev + pg
        out = {}
        for name in wrt:
            pnode = self.params[name]
            g = adjoint.get(pnode.idx)
            if g is None:
                g = self.const(np.zeros(pnode.shape))
            out[name] = g
        return out

    # ------------------------------------------------------------------
    # evaluation
    # ------------------------------------------------------------------

    def compile(self, outputs: list[Node], check: bool = False) -> "Program":
        key = (tuple(n.idx for n in outputs), check)
        prog = self._program_cache.get(key)
        if prog is None:
            prog = Program(self, outputs, check=check)
            self._program_cache[key] = prog
        return prog

    def evaluate(self, output, bindings: dict):
        """Replay the tape for one or more output nodes.

        ``bindings`` maps parameter names to arrays. Intermediates are
        recomputed deterministically, so repeated calls with the same
        bindings are bit-identical. Bindings are kept so that a later
        :func:`gradient` call can reuse them.
        """
        single = isinstance(output, Node)
        outputs = [output] if single else list(output)
        self._last_bindings = dict(bindings)
        vals = self.compile(outputs).run(bindings)
        return vals[0] if single else vals


class Program:
    """A compiled, reusable evaluation plan for a fixed set of outputs."""

    def __init__(self, tape: Tape, outputs: list[Node], check: bool = False):
        self._tape = tape
        self._outputs = outputs
        self._check = check
        order = tape._ancestors(outputs)
        slot = {node.idx: i for i, node in enumerate(order)}
        self._out_slots = [slot[n.idx] for n in outputs]
        self._steps = []
        self._labels = [n.label() for n in order]
        self.n_params = 0
        for node in order:
            self._steps.append(self._executor(node, slot))
            if node.op == "param":
                self.n_params += 1
        # Liveness: drop each intermediate right after its last consumer so
        # the allocator reuses pages instead of faulting in fresh ones.
        last_use = [i for i in range(len(order))]
        for i, node in enumerate(order):
            for p in node.parents:
                last_use[slot[p.idx]] = i
        keep = set(self._out_slots)
        self._release = [[] for _ in order]
        for s, last in enumerate(last_use):
            if s not in keep:
                self._release[last].append(s)

    @staticmethod
    def _executor(node: Node, slot):
        op = node.op
        ps = [slot[p.idx] for p in node.parents]
        meta = node.meta
        if op == "param":
            name, shape = meta, node.shape

            def fetch(v, b):
                try:
                    arr = b[name]
                except KeyError:
                    raise EvaluationError(f"unbound parameter {name!r}") from None
                arr = np.asarray(arr, dtype=np.float64)
                if arr.shape != shape:
                    raise ShapeError(
                        f"binding for {name!r} has shape {arr.shape}, expected {shape}"
                    )
                return arr

            return fetch
        if op == "const":
            return lambda v, b, c=meta: c
        if op == "add":
            i, j = ps
            return lambda v, b: v[i] + v[j]
        if op == "sub":
            i, j = ps
            return lambda v, b: v[i] - v[j]
        if op == "neg":
            (i,) = ps
            return lambda v, b: -v[i]
        if op == "mul":
            i, j = ps
            return lambda v, b: v[i] * v[j]
        if op == "div":
            i, j = ps
            return lambda v, b: v[i] / v[j]
        if op == "safe_div":
            i, j = ps

            def safe_div(v, b):
                num, den = v[i], v[j]
                den_ok = np.where(den == 0.0, 1.0, den)
                return np.where(den == 0.0, 0.0, num / den_ok)

            return safe_div
        if op == "matmul":
            i, j = ps
            return lambda v, b: v[i] @ v[j]
        if op == "mT":
            (i,) = ps
            return lambda v, b: np.swapaxes(v[i], -1, -2)
        if op == "reshape":
            (i,) = ps
            return lambda v, b, s=meta: np.reshape(v[i], s)
        if op == "slice_last":
            (i,) = ps
            lo, hi = meta
            return lambda v, b: v[i][..., lo:hi]
        if op == "embed_last":
            (i,) = ps
            lo, total = meta

            def embed(v, b):
                x = v[i]
                out = np.zeros(x.shape[:-1] + (total,), dtype=np.float64)
                out[..., lo : lo + x.shape[-1]] = x
                return out

            return embed
        if op == "broadcast_to":
            (i,) = ps
            return lambda v, b, s=meta: np.broadcast_to(v[i], s)
        if op == "sum_to":
            (i,) = ps
            target = meta

            def sum_to(v, b):
                x = v[i]
                while x.ndim > len(target):
                    x = x.sum(axis=0)
                for ax, (have, want) in enumerate(zip(x.shape, target)):
                    if want == 1 and have != 1:
                        x = x.sum(axis=ax, keepdims=True)
                return x

            return sum_to
        if op == "tanh":
            (i,) = ps
            return lambda v, b: np.tanh(v[i])
        if op == "sigmoid":
            (i,) = ps
            return lambda v, b: special.expit(v[i])
        if op == "softplus":
            (i,) = ps
            return lambda v, b: _np_softplus(v[i])
        if op == "relu":
            (i,) = ps
            return lambda v, b: np.maximum(v[i], 0.0)
        if op == "step":
            (i,) = ps
            return lambda v, b: (v[i] > 0.0).astype(np.float64)
        if op == "exp":
            (i,) = ps
            return lambda v, b: np.exp(v[i])
        if op == "log":
            (i,) = ps
            return lambda v, b: np.log(v[i])
        if op == "sqrt":
            (i,) = ps
            return lambda v, b: np.sqrt(v[i])
        if op == "square":
            (i,) = ps
            return lambda v, b: np.square(v[i])
        if op == "sum":
            (i,) = ps
            axis, keepdims = meta
            return lambda v, b: np.sum(v[i], axis=axis, keepdims=keepdims)
        if op == "mean":
            (i,) = ps
            axis, keepdims = meta
            return lambda v, b: np.mean(v[i], axis=axis, keepdims=keepdims)
        if op == "l2norm":
            (i,) = ps
            axis, keepdims = meta
            return lambda v, b: np.sqrt(
                np.sum(np.square(v[i]), axis=axis, keepdims=keepdims)
            )
        if op == "logsumexp":
            (i,) = ps
            axis, keepdims = meta

            def logsumexp(v, b):
                x = v[i]
                m = np.max(x, axis=axis, keepdims=True)
                out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
                if not keepdims:
                    out = np.reshape(out, _reduced_shape(x.shape, axis, False))
                return out

            return logsumexp
        raise DiffEngineError(f"no executor for op {op!r}")

    def run(self, bindings: dict) -> list[np.ndarray]:
        vals = []
        append = vals.append
        if self._check:
            for fn, label in zip(self._steps, self._labels):
                out = fn(vals, bindings)
                if not np.all(np.isfinite(out)):
                    raise EvaluationError(f"non-finite value produced at node {label}")
                append(out)
        else:
            release = self._release
            for i, fn in enumerate(self._steps):
                append(fn(vals, bindings))
                for s in release[i]:
                    vals[s] = None
            for s in self._out_slots:
                if not np.all(np.isfinite(vals[s])):
                    # Locate the first offending node for the error message.
                    self._tape.compile(self._outputs, check=True).run(bindings)
        return [np.asarray(vals[s]) for s in self._out_slots]


# ----------------------------------------------------------------------
# generic math helpers: work on tape nodes and plain ndarrays alike
# ----------------------------------------------------------------------


def _dispatch(x, node_fn, np_fn):
    if isinstance(x, Node):
        return node_fn(x)
    return np_fn(np.asarray(x, dtype=np.float64))


def tanh(x):
    return _dispatch(x, lambda n: n.tape.tanh(n), np.tanh)


def sigmoid(x):
    return _dispatch(x, lambda n: n.tape.sigmoid(n), special.expit)


def softplus(x):
    return _dispatch(x, lambda n: n.tape.softplus(n), _np_softplus)


def relu(x):
    return _dispatch(x, lambda n: n.tape.relu(n), lambda a: np.maximum(a, 0.0))


def exp(x):
    return _dispatch(x, lambda n: n.tape.exp(n), np.exp)


def log(x):
    return _dispatch(x, lambda n: n.tape.log(n), np.log)


def sqrt(x):
    return _dispatch(x, lambda n: n.tape.sqrt(n), np.sqrt)


def square(x):
    return _dispatch(x, lambda n: n.tape.square(n), np.square)


def reshape(x, shape):
    if isinstance(x, Node):
        return x.tape.reshape(x, shape)
    return np.reshape(x, shape)


def slice_last(x, lo, hi):
    if isinstance(x, Node):
        return x.tape.slice_last(x, lo, hi)
    return x[..., lo:hi]


def mT(x):
    if isinstance(x, Node):
        return x.tape.mT(x)
    return np.swapaxes(x, -1, -2)


def asum(x, axis=None, keepdims=False):
    if isinstance(x, Node):
        return x.tape.sum(x, axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def amean(x, axis=None, keepdims=False):
    if isinstance(x, Node):
        return x.tape.mean(x, axis=axis, keepdims=keepdims)
    return np.mean(x, axis=axis, keepdims=keepdims)


def l2norm(x, axis=None, keepdims=False):
    if isinstance(x, Node):
        return x.tape.l2norm(x, axis=axis, keepdims=keepdims)
    return np.sqrt(np.sum(np.square(x), axis=axis, keepdims=keepdims))


def logsumexp(x, axis=None, keepdims=False):
    if isinstance(x, Node):
        return x.tape.logsumexp(x, axis=axis, keepdims=keepdims)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.reshape(out, _reduced_shape(np.shape(x), axis, False))
    return out


# ----------------------------------------------------------------------
# contract-level entry points
# ----------------------------------------------------------------------


def evaluate(tape: Tape, output, bindings: dict):
    """Forward-evaluate ``output`` (a node or list of nodes) under bindings."""
    return tape.evaluate(output, bindings)


def gradient(tape: Tape, output: Node, wrt: list[str], bindings: dict | None = None):
    """Numeric reverse-mode gradients of a scalar node.

    Uses the bindings from the most recent ``evaluate`` call unless given
    explicitly. Returns a dict mapping each requested parameter name to its
    gradient array.
    """
    if bindings is None:
        bindings = tape._last_bindings
    if bindings is None:
        raise EvaluationError("no bindings: call evaluate() first or pass bindings=")
    nodes = tape.grad_nodes(output, wrt)
    ordered = list(wrt)
    vals = tape.compile([nodes[n] for n in ordered]).run(bindings)
    return dict(zip(ordered, vals))


def gradient_of_gradient_norm(
    tape: Tape,
    output: Node,
    inner_wrt: str,
    outer_wrt: list[str],
    bindings: dict | None = None,
):
    """Gradient of the unit-norm penalty of an inner input gradient.

    Builds ``(||d output / d inner||_2 - 1)^2`` symbolically (the inner
    gradient is itself a differentiable graph) and differentiates it with
    respect to the outer parameters. At a zero inner gradient the norm's
    subgradient is taken to be 0, so the penalty contributes no update.
    """
    if bindings is None:
        bindings = tape._last_bindings
    if bindings is None:
        raise EvaluationError("no bindings: call evaluate() first or pass bindings=")
    inner = tape.grad_nodes(output, [inner_wrt])[inner_wrt]
    penalty = tape.square(tape.l2norm(inner) - tape.const(1.0))
    nodes = tape.grad_nodes(penalty, outer_wrt)
    ordered = list(outer_wrt)
    vals = tape.compile([nodes[n] for n in ordered]).run(bindings)
    return dict(zip(ordered, vals))
