"""Dense-matrix computation graphs with reverse-mode differentiation.

A :class:`Tape` is a reusable program over 2-D float matrices: record the
graph once through the primitive methods, then ``forward(bindings)`` with
concrete input values as many times as needed, and ``backward()`` to get
the gradient of the (scalar) final node with respect to every input.

The primitive set is fixed and small on purpose so every backward rule can
be audited by hand: matmul, add, mul (elementwise), scalar multiply,
row softmax, log, exp, sigmoid, tanh, relu, row L2-normalize, sum / mean
reduction, stop-gradient, gradient scaling, and the structural ops
(transpose, vstack/hstack, row/column slices) needed to assemble models
without dense selector products.  add and mul accept a row vector (1, n),
column vector (m, 1) or scalar (1, 1) second operand; the backward pass
sums adjoints over the broadcast axes.

backward visits nodes in exact reverse recording order, so gradients are
bitwise reproducible between runs on the same tape.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import _kernels as K
from .errors import DimensionError, TapeStateError

__all__ = ["Tape", "Var", "as_matrix"]

_SUPPORTED_DTYPES = (np.float32, np.float64)


def as_matrix(value, dtype=np.float64) -> np.ndarray:
    """Coerce ``value`` to a C-contiguous 2-D array of ``dtype``.

    1-D inputs become a single row.  Non-finite entries are rejected.
    """
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"expected a matrix, got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains non-finite entries")
    return np.ascontiguousarray(arr)


class Node:
    __slots__ = ("op", "args", "shape", "meta", "value", "adjoint", "extra")

    def __init__(self, op, args, shape, meta=None):
        self.op = op
        self.args = args
        self.shape = shape
        self.meta = meta or {}
        self.value = None
        self.adjoint = None
        self.extra = None  # op-specific cache (e.g. row norms)

    def label(self, index):
        name = self.meta.get("name")
        return f"node {index} ({self.op}{':' + name if name else ''})"


class Var:
    """Handle to a node on a tape; obtained from the recording methods."""

    __slots__ = ("tape", "index")

    def __init__(self, tape, index):
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.tape._nodes[self.index].shape

    def __repr__(self):
        return f"Var({self.tape._nodes[self.index].op}@{self.index}, shape={self.shape})"


class Tape:
    """Recorder and evaluator for a fixed differentiable program."""

    def __init__(self, dtype=np.float64):
        dtype = np.dtype(dtype).type
        if dtype not in _SUPPORTED_DTYPES:
            raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
        self.dtype = dtype
        self._nodes: list[Node] = []
        self._input_indices: dict[str, int] = {}
        self._ran_forward = False
        self.check_finite = False

    # -- recording ---------------------------------------------------------

    @property
    def input_names(self) -> list[str]:
        return list(self._input_indices)

    @property
    def num_nodes(self) -> int:
        return len(self._nodes)

    def _push(self, node) -> Var:
        self._nodes.append(node)
        self._ran_forward = False
        return Var(self, len(self._nodes) - 1)

    def _node(self, var: Var) -> Node:
        if var.tape is not self:
            raise TapeStateError("variable belongs to a different tape")
        return self._nodes[var.index]

    def input(self, name: str, rows: int, cols: int) -> Var:
        """Declare a named input of fixed shape; bound at forward time."""
        if name in self._input_indices:
            raise TapeStateError(f"duplicate input name {name!r}")
        var = self._push(Node("input", (), (rows, cols), {"name": name}))
        self._input_indices[name] = var.index
        return var

    def constant(self, value) -> Var:
        arr = as_matrix(value, self.dtype)
        node = Node("constant", (), arr.shape)
        node.value = arr
        return self._push(node)

    def matmul(self, a: Var, b: Var) -> Var:
        sa, sb = self._node(a).shape, self._node(b).shape
        if sa[1] != sb[0]:
            raise DimensionError(
                f"matmul at node {len(self._nodes)}: {sa} @ {sb} inner dimensions differ"
            )
        return self._push(Node("matmul", (a.index, b.index), (sa[0], sb[1])))

    def _broadcast_mode(self, op, sa, sb):
        if sb == sa:
            return "same"
        if sb == (1, 1):
            return "scalar"
        if sb == (1, sa[1]):
            return "row"
        if sb == (sa[0], 1):
            return "col"
        raise DimensionError(
            f"{op} at node {len(self._nodes)}: {sb} does not broadcast against {sa}"
        )

    def add(self, a: Var, b: Var) -> Var:
        sa, sb = self._node(a).shape, self._node(b).shape
        mode = self._broadcast_mode("add", sa, sb)
        return self._push(Node("add", (a.index, b.index), sa, {"mode": mode}))

    def mul(self, a: Var, b: Var) -> Var:
        sa, sb = self._node(a).shape, self._node(b).shape
        mode = self._broadcast_mode("mul", sa, sb)
        return self._push(Node("mul", (a.index, b.index), sa, {"mode": mode}))

    def smul(self, a: Var, scalar: float) -> Var:
        return self._push(
            Node("smul", (a.index,), self._node(a).shape, {"scalar": float(scalar)})
        )

    def _unary(self, op, a) -> Var:
        return self._push(Node(op, (a.index,), self._node(a).shape))

    def row_softmax(self, a: Var) -> Var:
        return self._unary("row_softmax", a)

    def log(self, a: Var) -> Var:
        return self._unary("log", a)

    def exp(self, a: Var) -> Var:
        return self._unary("exp", a)

    def sigmoid(self, a: Var) -> Var:
        return self._unary("sigmoid", a)

    def tanh(self, a: Var) -> Var:
        return self._unary("tanh", a)

    def relu(self, a: Var) -> Var:
        return self._unary("relu", a)

    def row_normalize(self, a: Var) -> Var:
        return self._unary("row_normalize", a)

    def sum(self, a: Var) -> Var:
        return self._push(Node("sum", (a.index,), (1, 1)))

    def mean(self, a: Var) -> Var:
        return self._push(Node("mean", (a.index,), (1, 1)))

    def stop_gradient(self, a: Var) -> Var:
        return self._unary("stop_gradient", a)

    def scale_grad(self, a: Var, factor: float) -> Var:
        """Identity in the forward pass; multiplies the adjoint by ``factor``."""
        return self._push(
            Node("scale_grad", (a.index,), self._node(a).shape, {"factor": float(factor)})
        )

    def transpose(self, a: Var) -> Var:
        r, c = self._node(a).shape
        return self._push(Node("transpose", (a.index,), (c, r)))

    def vstack(self, a: Var, b: Var) -> Var:
        sa, sb = self._node(a).shape, self._node(b).shape
        if sa[1] != sb[1]:
            raise DimensionError(
                f"vstack at node {len(self._nodes)}: column counts differ {sa} vs {sb}"
            )
        return self._push(Node("vstack", (a.index, b.index), (sa[0] + sb[0], sa[1])))

    def hstack(self, a: Var, b: Var) -> Var:
        sa, sb = self._node(a).shape, self._node(b).shape
        if sa[0] != sb[0]:
            raise DimensionError(
                f"hstack at node {len(self._nodes)}: row counts differ {sa} vs {sb}"
            )
        return self._push(Node("hstack", (a.index, b.index), (sa[0], sa[1] + sb[1])))

    def rows(self, a: Var, start: int, stop: int) -> Var:
        r, c = self._node(a).shape
        if not 0 <= start < stop <= r:
            raise DimensionError(
                f"rows at node {len(self._nodes)}: [{start}:{stop}] out of range for {r} rows"
            )
        return self._push(
            Node("rows", (a.index,), (stop - start, c), {"start": start, "stop": stop})
        )

    def cols(self, a: Var, start: int, stop: int) -> Var:
        r, c = self._node(a).shape
        if not 0 <= start < stop <= c:
            raise DimensionError(
                f"cols at node {len(self._nodes)}: [{start}:{stop}] out of range for {c} columns"
            )
        return self._push(
            Node("cols", (a.index,), (r, stop - start), {"start": start, "stop": stop})
        )

    # -- execution ---------------------------------------------------------

    def _bindings_by_name(self, inputs):
        if isinstance(inputs, Mapping):
            return dict(inputs)
        if isinstance(inputs, Sequence):
            names = self.input_names
            if len(inputs) != len(names):
                raise TapeStateError(
                    f"expected {len(names)} input values, got {len(inputs)}"
                )
            return dict(zip(names, inputs))
        raise TypeError("inputs must be a mapping name->matrix or a sequence")

    def forward(self, inputs) -> np.ndarray:
        """Evaluate every node in recording order; returns the final value."""
        if not self._nodes:
            raise TapeStateError("empty tape")
        bindings = self._bindings_by_name(inputs)
        missing = set(self._input_indices) - set(bindings)
        if missing:
            raise TapeStateError(f"missing bindings for inputs: {sorted(missing)}")

        for i, node in enumerate(self._nodes):
            node.adjoint = None
            if node.op == "constant":
                continue
            if node.op == "input":
                value = as_matrix(bindings[node.meta["name"]], self.dtype)
                if value.shape != node.shape:
                    raise DimensionError(
                        f"{node.label(i)}: bound value has shape {value.shape}, "
                        f"declared {node.shape}"
                    )
                node.value = value
                continue
            args = [self._nodes[j].value for j in node.args]
            node.value = self._eval(node, args, i)
            if self.check_finite and not np.all(np.isfinite(node.value)):
                raise FloatingPointError(f"{node.label(i)} produced non-finite values")

        out = self._nodes[-1].value
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("final node value is not finite")
        self._ran_forward = True
        return out

    def _eval(self, node, args, index):
        op = node.op
        if op == "matmul":
            return np.matmul(args[0], args[1])
        if op == "add":
            return args[0] + args[1]
        if op == "mul":
            return args[0] * args[1]
        if op == "smul":
            return args[0] * node.meta["scalar"]
        if op == "row_softmax":
            return K.row_softmax(args[0])
        if op == "log":
            if np.any(args[0] <= 0.0):
                raise FloatingPointError(
                    f"{node.label(index)}: log requires strictly positive input"
                )
            return K.log(args[0])
        if op == "exp":
            return K.exp(args[0])
        if op == "sigmoid":
            return K.sigmoid(args[0])
        if op == "tanh":
            return K.tanh(args[0])
        if op == "relu":
            return K.relu(args[0])
        if op == "row_normalize":
            value, norms = K.row_normalize(args[0])
            node.extra = norms
            return value
        if op == "sum":
            return np.array([[args[0].sum()]], dtype=self.dtype)
        if op == "mean":
            return np.array([[args[0].mean()]], dtype=self.dtype)
        if op in ("stop_gradient", "scale_grad"):
            return args[0]
        if op == "transpose":
            return np.ascontiguousarray(args[0].T)
        if op == "vstack":
            return np.concatenate(args, axis=0)
        if op == "hstack":
            return np.concatenate(args, axis=1)
        if op == "rows":
            return np.ascontiguousarray(args[0][node.meta["start"] : node.meta["stop"]])
        if op == "cols":
            return np.ascontiguousarray(
                args[0][:, node.meta["start"] : node.meta["stop"]]
            )
        raise AssertionError(f"unhandled op {op}")

    def value(self, var: Var) -> np.ndarray:
        """Value of any node after the most recent forward pass."""
        node = self._node(var)
        if not self._ran_forward:
            raise TapeStateError("value requested before forward")
        return node.value

    def gradient(self, var: Var) -> np.ndarray:
        """Adjoint of any node after the most recent backward pass."""
        node = self._node(var)
        if node.adjoint is None:
            return np.zeros(node.shape, dtype=self.dtype)
        return node.adjoint.astype(self.dtype, copy=False)

    def _accum(self, index, delta):
        node = self._nodes[index]
        if node.adjoint is None:
            node.adjoint = np.zeros(node.shape, dtype=np.float64)
        node.adjoint += delta

    def _adjoint_buffer(self, index):
        node = self._nodes[index]
        if node.adjoint is None:
            node.adjoint = np.zeros(node.shape, dtype=np.float64)
        return node.adjoint

    def backward(self) -> dict[str, np.ndarray]:
        """Propagate adjoints from the scalar final node back to the inputs.

        Adjoints accumulate in float64 regardless of the tape dtype (mixed
        precision keeps float32 gradients accurate); the returned gradients
        are cast back to the tape dtype.
        """
        if not self._ran_forward:
            raise TapeStateError("backward before forward")
        final = self._nodes[-1]
        if final.shape != (1, 1):
            raise TapeStateError(
                f"backward requires a scalar final node, got shape {final.shape}"
            )
        for node in self._nodes:
            node.adjoint = None
        final.adjoint = np.ones((1, 1), dtype=np.float64)

        for i in range(len(self._nodes) - 1, -1, -1):
            node = self._nodes[i]
            if node.adjoint is None or node.op in ("input", "constant"):
                continue
            self._backprop(node)

        grads = {}
        for name, idx in self._input_indices.items():
            node = self._nodes[idx]
            grads[name] = (
                node.adjoint.astype(self.dtype, copy=False)
                if node.adjoint is not None
                else np.zeros(node.shape, dtype=self.dtype)
            )
        return grads

    @staticmethod
    def _f64(arr):
        return arr if arr.dtype == np.float64 else arr.astype(np.float64)

    def _reduce_broadcast(self, grad, mode):
        if mode == "same":
            return grad
        if mode == "scalar":
            return grad.sum().reshape(1, 1)
        if mode == "row":
            return grad.sum(axis=0, keepdims=True)
        return grad.sum(axis=1, keepdims=True)  # col

    def _backprop(self, node):
        op, gy = node.op, node.adjoint
        vals = [self._nodes[j].value for j in node.args]
        if op == "matmul":
            self._accum(node.args[0], gy @ vals[1].T)
            self._accum(node.args[1], vals[0].T @ gy)
        elif op == "add":
            self._accum(node.args[0], gy)
            self._accum(node.args[1], self._reduce_broadcast(gy, node.meta["mode"]))
        elif op == "mul":
            mode = node.meta["mode"]
            self._accum(node.args[0], gy * vals[1])
            self._accum(node.args[1], self._reduce_broadcast(gy * vals[0], mode))
        elif op == "smul":
            self._accum(node.args[0], gy * node.meta["scalar"])
        elif op == "row_softmax":
            K.row_softmax_bwd(self._f64(node.value), gy, self._adjoint_buffer(node.args[0]))
        elif op == "log":
            K.log_bwd(self._f64(vals[0]), gy, self._adjoint_buffer(node.args[0]))
        elif op == "exp":
            K.exp_bwd(self._f64(node.value), gy, self._adjoint_buffer(node.args[0]))
        elif op == "sigmoid":
            K.sigmoid_bwd(self._f64(node.value), gy, self._adjoint_buffer(node.args[0]))
        elif op == "tanh":
            K.tanh_bwd(self._f64(node.value), gy, self._adjoint_buffer(node.args[0]))
        elif op == "relu":
            K.relu_bwd(self._f64(vals[0]), gy, self._adjoint_buffer(node.args[0]))
        elif op == "row_normalize":
            K.row_normalize_bwd(
                self._f64(node.value), self._f64(node.extra), gy,
                self._adjoint_buffer(node.args[0]),
            )
        elif op == "sum":
            self._accum(node.args[0], np.full(vals[0].shape, gy[0, 0], dtype=self.dtype))
        elif op == "mean":
            self._accum(
                node.args[0],
                np.full(vals[0].shape, gy[0, 0] / vals[0].size, dtype=self.dtype),
            )
        elif op == "stop_gradient":
            pass
        elif op == "scale_grad":
            self._accum(node.args[0], gy * node.meta["factor"])
        elif op == "transpose":
            self._accum(node.args[0], np.ascontiguousarray(gy.T))
        elif op == "vstack":
            ra = self._nodes[node.args[0]].shape[0]
            self._accum(node.args[0], gy[:ra])
            self._accum(node.args[1], gy[ra:])
        elif op == "hstack":
            ca = self._nodes[node.args[0]].shape[1]
            self._accum(node.args[0], gy[:, :ca])
            self._accum(node.args[1], gy[:, ca:])
        elif op == "rows":
            buf = self._adjoint_buffer(node.args[0])
            buf[node.meta["start"] : node.meta["stop"]] += gy
        elif op == "cols":
            buf = self._adjoint_buffer(node.args[0])
            buf[:, node.meta["start"] : node.meta["stop"]] += gy
        else:
            raise AssertionError(f"unhandled op {op}")

    # -- utilities ---------------------------------------------------------

    def cast(self, dtype) -> "Tape":
        """Structural clone of this tape at another precision."""
        clone = Tape(dtype)
        for node in self._nodes:
            copy = Node(node.op, node.args, node.shape, dict(node.meta))
            if node.op == "constant":
                copy.value = node.value.astype(clone.dtype)
            clone._nodes.append(copy)
        clone._input_indices = dict(self._input_indices)
        return clone
