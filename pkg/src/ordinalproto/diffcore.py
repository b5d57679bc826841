"""Reverse-mode automatic differentiation over dense float64 matrices.

Everything is a 2-D matrix (scalars are 1x1). A :class:`Tape` records
primitive operations in topological order as they are evaluated; forward
values are computed eagerly and kept on the tape. :meth:`Tape.backward`
walks the record once, in reverse, and returns gradients of a scalar loss
for every named parameter.

A tape is single-threaded and is rebuilt for every forward pass. Distinct
tapes share no mutable state and may live on distinct threads.
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tape", "OP_KINDS", "finite_difference_check"]

# Op kinds accepted by Tape.record. "tanh" and "transpose" extend the core
# matrix set: the first for the image-encoder nonlinearity, the second so a
# similarity of the form X @ Y.T is expressible.
OP_KINDS = (
    "matmul",
    "add",
    "elementwise-mul",
    "row-softmax-with-temperature",
    "col-softmax-with-temperature",
    "l2-normalize-rows",
    "kl-divergence-rows",
    "scalar-scale",
    "concat-rows",
    "weighted-sum",
    "transpose",
    "tanh",
)

_LEAF_KINDS = ("constant", "parameter")


def _as_matrix(array) -> np.ndarray:
    a = np.asarray(array, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.isfinite(value).all():
        raise FloatingPointError(f"non-finite values produced by op '{op}'")


class _Node:
    __slots__ = ("op", "inputs", "value", "meta", "name")

    def __init__(self, op, inputs, value, meta=None, name=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.meta = meta or {}
        self.name = name


class Tape:
    """Forward evaluation record supporting one reverse sweep.

    Node references are plain integer indices into the tape, which makes
    the topological-order invariant automatic: an op can only consume
    indices that already exist.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    # -- leaves ----------------------------------------------------------

    def constant(self, array) -> int:
        """A node that never receives a gradient."""
        return self._append(_Node("constant", (), _as_matrix(array)))

    def parameter(self, array, name: str) -> int:
        """A trainable leaf; its gradient appears in backward() under `name`."""
        if name in self._params:
            raise ValueError(f"parameter {name!r} registered twice on this tape")
        idx = self._append(_Node("parameter", (), _as_matrix(array), name=name))
        self._params[name] = idx
        return idx

    def value(self, node: int) -> np.ndarray:
        return self._nodes[node].value

    def _append(self, node: _Node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    # -- recording -------------------------------------------------------

    def record(self, op_kind: str, inputs, **params) -> int:
        """Record one primitive, computing and storing its forward value.

        `inputs` is a sequence of node references. Extra op parameters:
        temperature (softmaxes), factor (scalar-scale), weights
        (weighted-sum).
        """
        if op_kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {op_kind!r}; valid kinds: {OP_KINDS}")
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self._nodes):
                raise ValueError(f"input node {i} not on tape")
        vals = [self._nodes[i].value for i in inputs]
        value, meta = _FORWARD[op_kind](vals, params)
        _check_finite(value, op_kind)
        return self._append(_Node(op_kind, inputs, value, meta))

    # Convenience wrappers, one per primitive.

    def matmul(self, a: int, b: int) -> int:
        return self.record("matmul", (a, b))

    def add(self, a: int, b: int) -> int:
        return self.record("add", (a, b))

    def mul(self, a: int, b: int) -> int:
        return self.record("elementwise-mul", (a, b))

    def row_softmax(self, a: int, temperature: float) -> int:
        return self.record("row-softmax-with-temperature", (a,), temperature=temperature)

    def col_softmax(self, a: int, temperature: float) -> int:
        return self.record("col-softmax-with-temperature", (a,), temperature=temperature)

    def l2_normalize_rows(self, a: int) -> int:
        return self.record("l2-normalize-rows", (a,))

    def kl_div(self, target: int, prediction: int) -> int:
        """Total KL divergence, a 1x1 node.

        Sums p * log(p / q) over all entries with the 0 * log 0 = 0
        convention, so all-zero rows (or columns) of the target contribute
        nothing. Summing over entries makes the same primitive serve both
        row-wise and column-wise divergence terms.
        """
        return self.record("kl-divergence-rows", (target, prediction))

    def scale(self, a: int, factor: float) -> int:
        return self.record("scalar-scale", (a,), factor=factor)

    def concat_rows(self, nodes) -> int:
        return self.record("concat-rows", tuple(nodes))

    def weighted_sum(self, nodes, weights) -> int:
        return self.record("weighted-sum", tuple(nodes), weights=tuple(float(w) for w in weights))

    def transpose(self, a: int) -> int:
        return self.record("transpose", (a,))

    def tanh(self, a: int) -> int:
        return self.record("tanh", (a,))

    def sum_all(self, a: int) -> int:
        """Sum of all entries as a 1x1 node (derived: two matmuls with ones)."""
        rows, cols = self._nodes[a].value.shape
        left = self.constant(np.ones((1, rows)))
        right = self.constant(np.ones((cols, 1)))
        return self.matmul(self.matmul(left, a), right)

    # -- reverse sweep ----------------------------------------------------

    def backward(self, loss_node: int) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every registered parameter.

        Parameters the loss does not reach get exact-zero gradients of the
        parameter's shape. Each node is visited exactly once.
        """
        loss = self._nodes[loss_node]
        if loss.value.shape != (1, 1):
            raise ValueError(f"loss node must be 1x1, got shape {loss.value.shape}")
        adjoint: list[np.ndarray | None] = [None] * len(self._nodes)
        adjoint[loss_node] = np.ones((1, 1))
        for idx in range(loss_node, -1, -1):
            g = adjoint[idx]
            if g is None:
                continue
            node = self._nodes[idx]
            if node.op in _LEAF_KINDS:
                continue
            in_vals = [self._nodes[i].value for i in node.inputs]
            contribs = _BACKWARD[node.op](g, node.value, in_vals, node.meta)
            for inp, contrib in zip(node.inputs, contribs):
                if contrib is None:
                    continue
                if adjoint[inp] is None:
                    adjoint[inp] = contrib.copy()
                else:
                    adjoint[inp] += contrib
        grads = {}
        for name, idx in self._params.items():
            g = adjoint[idx]
            grads[name] = np.zeros_like(self._nodes[idx].value) if g is None else g
        return grads


# ---------------------------------------------------------------------------
# forward rules: (input values, params) -> (value, meta)


def _shape_err(op, shapes):
    return ValueError(f"{op}: incompatible shapes {shapes}")


def _fwd_matmul(vals, params):
    a, b = vals
    if a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", (a.shape, b.shape))
    return a @ b, None


def _fwd_add(vals, params):
    a, b = vals
    # Same shape, or a 1 x k bias row broadcast over the rows of a.
    if a.shape == b.shape:
        return a + b, None
    if b.shape == (1, a.shape[1]):
        return a + b, {"broadcast": True}
    raise _shape_err("add", (a.shape, b.shape))


def _fwd_mul(vals, params):
    a, b = vals
    if a.shape != b.shape:
        raise _shape_err("elementwise-mul", (a.shape, b.shape))
    return a * b, None


def _softmax(x, axis):
    shifted = x - x.max(axis=axis, keepdims=True)  # overflow guard, value-identical
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _fwd_row_softmax(vals, params):
    t = float(params["temperature"])
    if t <= 0:
        raise ValueError(f"softmax temperature must be positive, got {t}")
    return _softmax(vals[0] / t, axis=1), {"temperature": t}


def _fwd_col_softmax(vals, params):
    t = float(params["temperature"])
    if t <= 0:
        raise ValueError(f"softmax temperature must be positive, got {t}")
    return _softmax(vals[0] / t, axis=0), {"temperature": t}


def _fwd_l2_normalize_rows(vals, params):
    (a,) = vals
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    zero = np.flatnonzero(norms.ravel() == 0.0)
    if zero.size:
        raise ValueError(f"l2-normalize-rows: row {zero[0]} is the zero vector")
    return a / norms, {"norms": norms}


def _fwd_kl(vals, params):
    p, q = vals
    if p.shape != q.shape:
        raise _shape_err("kl-divergence-rows", (p.shape, q.shape))
    if (p < 0).any():
        raise ValueError("kl-divergence-rows: target has negative entries")
    support = p > 0
    if (q[support] <= 0).any():
        raise ValueError("kl-divergence-rows: prediction is zero on the target support")
    total = float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))
    return np.array([[total]]), {"support": support}


def _fwd_scale(vals, params):
    return vals[0] * float(params["factor"]), {"factor": float(params["factor"])}


def _fwd_concat_rows(vals, params):
    cols = {v.shape[1] for v in vals}
    if len(vals) == 0 or len(cols) != 1:
        raise _shape_err("concat-rows", [v.shape for v in vals])
    return np.vstack(vals), {"row_counts": [v.shape[0] for v in vals]}


def _fwd_weighted_sum(vals, params):
    weights = params["weights"]
    if len(weights) != len(vals) or not vals:
        raise ValueError("weighted-sum: need one weight per input")
    if len({v.shape for v in vals}) != 1:
        raise _shape_err("weighted-sum", [v.shape for v in vals])
    out = np.zeros_like(vals[0])
    for w, v in zip(weights, vals):
        out += w * v
    return out, {"weights": weights}


def _fwd_transpose(vals, params):
    return vals[0].T.copy(), None


def _fwd_tanh(vals, params):
    return np.tanh(vals[0]), None


_FORWARD = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "elementwise-mul": _fwd_mul,
    "row-softmax-with-temperature": _fwd_row_softmax,
    "col-softmax-with-temperature": _fwd_col_softmax,
    "l2-normalize-rows": _fwd_l2_normalize_rows,
    "kl-divergence-rows": _fwd_kl,
    "scalar-scale": _fwd_scale,
    "concat-rows": _fwd_concat_rows,
    "weighted-sum": _fwd_weighted_sum,
    "transpose": _fwd_transpose,
    "tanh": _fwd_tanh,
}


# ---------------------------------------------------------------------------
# backward rules: (upstream grad, forward value, input values, meta)
#   -> one gradient (or None) per input


def _bwd_matmul(g, out, ins, meta):
    a, b = ins
    return (g @ b.T, a.T @ g)


def _bwd_add(g, out, ins, meta):
    if meta and meta.get("broadcast"):
        return (g, g.sum(axis=0, keepdims=True))
    return (g, g)


def _bwd_mul(g, out, ins, meta):
    a, b = ins
    return (g * b, g * a)


def _bwd_row_softmax(g, s, ins, meta):
    t = meta["temperature"]
    inner = (g * s).sum(axis=1, keepdims=True)
    return (s * (g - inner) / t,)


def _bwd_col_softmax(g, s, ins, meta):
    t = meta["temperature"]
    inner = (g * s).sum(axis=0, keepdims=True)
    return (s * (g - inner) / t,)


def _bwd_l2_normalize_rows(g, y, ins, meta):
    norms = meta["norms"]
    inner = (g * y).sum(axis=1, keepdims=True)
    return ((g - inner * y) / norms,)


def _bwd_kl(g, out, ins, meta):
    p, q = ins
    support = meta["support"]
    scalar = g[0, 0]
    dq = np.zeros_like(q)
    dq[support] = -scalar * p[support] / q[support]
    # d/dp is only defined on the target's support; elsewhere the 0*log 0
    # convention makes the contribution identically zero.
    dp = np.zeros_like(p)
    dp[support] = scalar * (np.log(p[support]) - np.log(q[support]) + 1.0)
    return (dp, dq)


def _bwd_scale(g, out, ins, meta):
    return (g * meta["factor"],)


def _bwd_concat_rows(g, out, ins, meta):
    grads = []
    start = 0
    for count in meta["row_counts"]:
        grads.append(g[start:start + count])
        start += count
    return tuple(grads)


def _bwd_weighted_sum(g, out, ins, meta):
    return tuple(w * g for w in meta["weights"])


def _bwd_transpose(g, out, ins, meta):
    return (g.T.copy(),)


def _bwd_tanh(g, y, ins, meta):
    return (g * (1.0 - y * y),)


_BACKWARD = {
    "matmul": _bwd_matmul,
    "add": _bwd_add,
    "elementwise-mul": _bwd_mul,
    "row-softmax-with-temperature": _bwd_row_softmax,
    "col-softmax-with-temperature": _bwd_col_softmax,
    "l2-normalize-rows": _bwd_l2_normalize_rows,
    "kl-divergence-rows": _bwd_kl,
    "scalar-scale": _bwd_scale,
    "concat-rows": _bwd_concat_rows,
    "weighted-sum": _bwd_weighted_sum,
    "transpose": _bwd_transpose,
    "tanh": _bwd_tanh,
}


# ---------------------------------------------------------------------------


def finite_difference_check(f, point, analytic, h: float = 1e-5) -> float:
    """Max relative error between `analytic` and central differences of `f`.

    `f` maps a matrix to a scalar; `analytic` is the gradient to check,
    with the same shape as `point`. The error for each entry is
    |analytic - central| / (|central| + 1e-12); the max over entries is
    returned. A non-finite value of `f` at a perturbed point is an error,
    reported with the entry being perturbed.
    """
    point = _as_matrix(point)
    analytic = _as_matrix(analytic)
    if analytic.shape != point.shape:
        raise ValueError(f"gradient shape {analytic.shape} != parameter shape {point.shape}")
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    worst = 0.0
    perturbed = point.copy()
    for i in range(point.shape[0]):
        for j in range(point.shape[1]):
            orig = perturbed[i, j]
            perturbed[i, j] = orig + h
            f_plus = float(f(perturbed))
            perturbed[i, j] = orig - h
            f_minus = float(f(perturbed))
            perturbed[i, j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(
                    f"f returned a non-finite value when perturbing entry ({i}, {j})"
                )
            central = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[i, j] - central) / (abs(central) + 1e-12)
            worst = max(worst, err)
    return worst
