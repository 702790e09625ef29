"""Dense float64 tensors with taped reverse-mode differentiation.

Deliberately small: exactly the primitives needed to train the neural-process
model and the MLP victims, and to run white-box diagnostics. Arrays are
row-major numpy float64 throughout; there is no broadcasting beyond the
row-vector bias case and no GPU path.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


class Tensor:
    """A dense float64 array, optionally tracked on a Tape.

    Tensors built directly are constants. Tensors registered through
    ``Tape.leaf`` / ``Tape.watch`` are differentiable leaves: after
    ``backward()`` their ``grad`` holds d(loss)/d(leaf).
    """

    __slots__ = ("data", "grad", "_tape", "_nid")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._tape = None
        self._nid = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ContractViolation("item() requires a scalar tensor")
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, taped={self._tape is not None})"


class _Node:
    __slots__ = ("op", "parents", "grads")

    def __init__(self, op, parents, grads):
        self.op = op
        self.parents = parents  # node ids; None marks a constant input
        self.grads = grads      # per-parent closures: adjoint -> contribution


class Tape:
    """Ordered record of primitive ops; parents always precede children."""

    def __init__(self):
        self._nodes = []
        self._leaves = []

    def __len__(self):
        return len(self._nodes)

    def leaf(self, data):
        """Create a fresh differentiable leaf on this tape."""
        return self.watch(Tensor(data))

    def watch(self, tensor):
        """Register an existing tensor as a leaf of this tape."""
        tensor._tape = self
        tensor._nid = len(self._nodes)
        self._nodes.append(_Node("leaf", (), ()))
        self._leaves.append((tensor, tensor._nid))
        return tensor


def _record(op, inputs, out_data, grads):
    """Build the output tensor; record a node if any input is taped.

    ``grads`` holds one closure per input mapping the output adjoint to that
    input's adjoint contribution; closures of constant inputs are never
    called.
    """
    out = Tensor(out_data)
    tape = None
    for t in inputs:
        t_tape = t._tape
        if t_tape is None:
            continue
        if tape is None:
            tape = t_tape
        elif tape is not t_tape:
            raise ContractViolation("inputs recorded on different tapes")
    if tape is not None:
        parents = tuple(t._nid if t._tape is tape else None for t in inputs)
        out._tape = tape
        out._nid = len(tape._nodes)
        tape._nodes.append(_Node(op, parents, grads))
    return out


def backward(tape, loss):
    """Run reverse-mode accumulation from a scalar loss over the tape.

    Every leaf of the tape gets ``grad`` populated: d(loss)/d(leaf) when the
    leaf is reachable from the loss, zeros otherwise. The tape is consumed:
    its leaves are released back to constants (their grads remain), so the
    same parameter tensors can be re-watched on the next step's tape.
    """
    if loss._tape is not tape or loss._nid is None:
        raise ContractViolation("loss was not produced on this tape")
    if loss.data.size != 1:
        raise ContractViolation("loss must be a scalar")

    adjoints = [None] * len(tape._nodes)
    adjoints[loss._nid] = np.ones_like(loss.data)
    for nid in range(loss._nid, -1, -1):
        adj = adjoints[nid]
        if adj is None:
            continue
        node = tape._nodes[nid]
        for pid, grad_fn in zip(node.parents, node.grads):
            if pid is None:
                continue
            contrib = grad_fn(adj)
            # stored adjoints are never mutated in place, so the first
            # contribution may alias an upstream array; later ones allocate
            if adjoints[pid] is None:
                adjoints[pid] = contrib
            else:
                adjoints[pid] = adjoints[pid] + contrib

    for tensor, nid in tape._leaves:
        acc = adjoints[nid]
        tensor.grad = np.zeros_like(tensor.data) if acc is None else \
            np.asarray(acc).reshape(tensor.data.shape)
        if tensor._tape is tape:
            tensor._tape = None
            tensor._nid = None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise a + b; b may be a row vector broadcast over a's rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return _record("add", (a, b), a.data + b.data,
                       (lambda g: g, lambda g: g))
    if a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        return _record("add_row", (a, b), a.data + b.data[None, :],
                       (lambda g: g, lambda g: g.sum(axis=0)))
    raise ContractViolation(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _record("sub", (a, b), a.data - b.data,
                   (lambda g: g, lambda g: -g))


def neg(a):
    a = _as_tensor(a)
    return _record("neg", (a,), -a.data, (lambda g: -g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   (lambda g: g * bd, lambda g: g * ad))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"div: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record("div", (a, b), ad / bd,
                   (lambda g: g / bd, lambda g: -g * ad / (bd * bd)))


def scale(a, s):
    """a * s for a plain python scalar s."""
    a = _as_tensor(a)
    s = float(s)
    return _record("scale", (a,), a.data * s, (lambda g: g * s,))


def add_scalar(a, s):
    a = _as_tensor(a)
    return _record("add_scalar", (a,), a.data + float(s), (lambda g: g,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd,
                   (lambda g: g @ bd.T, lambda g: ad.T @ g))


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ContractViolation("transpose expects a matrix")
    return _record("transpose", (a,), a.data.T.copy(), (lambda g: g.T,))


def relu(a):
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _record("relu", (a,), np.where(mask, a.data, 0.0),
                   (lambda g: g * mask,))


def sigmoid(a):
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500.0, 500.0)))
    return _record("sigmoid", (a,), out, (lambda g: g * out * (1.0 - out),))


def softplus(a):
    """log(1 + e^x), computed stably."""
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500.0, 500.0)))
    return _record("softplus", (a,), out, (lambda g: g * sig,))


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", (a,), out, (lambda g: g * out,))


def log(a):
    a = _as_tensor(a)
    ad = a.data
    return _record("log", (a,), np.log(ad), (lambda g: g / ad,))


def square(a):
    a = _as_tensor(a)
    ad = a.data
    return _record("square", (a,), ad * ad, (lambda g: 2.0 * ad * g,))


def sum_all(a):
    a = _as_tensor(a)
    shape = a.data.shape
    return _record("sum_all", (a,), np.asarray(a.data.sum()),
                   (lambda g: np.broadcast_to(g, shape),))


def mean_all(a):
    a = _as_tensor(a)
    shape = a.data.shape
    n = a.data.size
    return _record("mean_all", (a,), np.asarray(a.data.mean()),
                   (lambda g: np.broadcast_to(g / n, shape),))


def mean_rows(a):
    """Column means of a matrix, kept as a 1xD row."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ContractViolation("mean_rows expects a matrix")
    n, d = a.shape
    return _record("mean_rows", (a,), a.data.mean(axis=0, keepdims=True),
                   (lambda g: np.broadcast_to(g / n, (n, d)),))


def repeat_rows(a, n):
    """Tile a 1xD row (or length-D vector) into an NxD matrix."""
    a = _as_tensor(a)
    row = a.data.reshape(1, -1)
    shape = a.data.shape
    return _record("repeat_rows", (a,), np.repeat(row, n, axis=0),
                   (lambda g: g.sum(axis=0).reshape(shape),))


def concat_cols(parts):
    parts = [_as_tensor(p) for p in parts]
    if any(p.data.ndim != 2 for p in parts):
        raise ContractViolation("concat_cols expects matrices")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ContractViolation("concat_cols: row counts differ")
    offsets = np.concatenate([[0], np.cumsum([p.shape[1] for p in parts])])

    def part_grad(i):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[:, lo:hi]

    return _record("concat_cols", tuple(parts),
                   np.concatenate([p.data for p in parts], axis=1),
                   tuple(part_grad(i) for i in range(len(parts))))


def slice_cols(a, lo, hi):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ContractViolation("slice_cols expects a matrix")
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape)
        full[:, lo:hi] = g
        return full

    return _record("slice_cols", (a,), a.data[:, lo:hi].copy(), (bwd,))


def take_per_row(a, idx):
    """Pick one column per row: out[i] = a[i, idx[i]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ContractViolation("take_per_row: need NxC matrix and N indices")
    if idx.min() < 0 or idx.max() >= a.shape[1]:
        raise ContractViolation("take_per_row: index out of range")
    rows = np.arange(a.shape[0])
    shape = a.data.shape

    def bwd(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, idx), g)
        return full

    return _record("take_per_row", (a,), a.data[rows, idx].copy(), (bwd,))


def softmax_rows(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ContractViolation("softmax_rows expects a matrix")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return out * (g - (g * out).sum(axis=1, keepdims=True))

    return _record("softmax_rows", (a,), out, (bwd,))


def log_softmax_rows(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ContractViolation("log_softmax_rows expects a matrix")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bwd(g):
        return g - soft * g.sum(axis=1, keepdims=True)

    return _record("log_softmax_rows", (a,), out, (bwd,))


def affine(x, w, b):
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def scaled_dot_attention(queries, keys, values):
    """softmax(q k^T / sqrt(d)) v, single head.

    queries: n x d, keys: m x d, values: m x v -> n x v. Each softmax row
    sums to one; with a single key the value row is returned exactly.
    """
    queries, keys, values = _as_tensor(queries), _as_tensor(keys), _as_tensor(values)
    if queries.data.ndim != 2 or keys.data.ndim != 2 or values.data.ndim != 2:
        raise ContractViolation("attention expects matrices")
    d = queries.shape[1]
    if d < 1 or keys.shape[1] != d:
        raise ContractViolation(
            f"attention: query/key width mismatch {queries.shape} vs {keys.shape}")
    if keys.shape[0] != values.shape[0]:
        raise ContractViolation(
            f"attention: key/value count mismatch {keys.shape} vs {values.shape}")
    scores = scale(matmul(queries, transpose(keys)), 1.0 / np.sqrt(d))
    return matmul(softmax_rows(scores), values)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer over a fixed set of parameter tensors.

    Parameters are persistent Tensor objects; callers re-watch them on a
    fresh tape each step and run backward() before calling step().
    """

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise ContractViolation("adam step with missing gradient")
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self._t
        bc2 = 1.0 - b2 ** self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class GradientCheckResult:
    __slots__ = ("max_rel_error", "excluded", "analytic")

    def __init__(self, max_rel_error, excluded, analytic):
        self.max_rel_error = max_rel_error
        self.excluded = excluded
        self.analytic = analytic


def gradient_check_details(f, point, step, kink_tol=0.05):
    """Compare taped gradients of a scalar function with central differences.

    Per coordinate the relative error is |analytic - central| / max(1,
    |analytic|). Coordinates where the one-sided differences disagree by
    more than ``kink_tol`` (relative) are flagged as non-differentiable and
    excluded from the maximum.
    """
    if step <= 0:
        raise ContractViolation("gradient_check needs step > 0")
    point = np.asarray(point, dtype=np.float64)

    tape = Tape()
    x = tape.leaf(point.copy())
    out = f(x)
    if out.data.size != 1:
        raise ContractViolation("gradient_check requires a scalar-valued function")
    backward(tape, out)
    analytic = x.grad.ravel()

    def feval(flat):
        r = f(Tensor(flat.reshape(point.shape)))
        if r.data.size != 1:
            raise ContractViolation("gradient_check requires a scalar-valued function")
        return float(r.data)

    flat0 = point.ravel()
    f0 = feval(flat0)
    max_err = 0.0
    excluded = []
    work = flat0.copy()
    for i in range(flat0.size):
        orig = work[i]
        work[i] = orig + step
        fp = feval(work)
        work[i] = orig - step
        fm = feval(work)
        work[i] = orig
        central = (fp - fm) / (2.0 * step)
        left = (f0 - fm) / step
        right = (fp - f0) / step
        if abs(left - right) > kink_tol * max(1.0, abs(central)):
            excluded.append(i)
            continue
        err = abs(analytic[i] - central) / max(1.0, abs(analytic[i]))
        max_err = max(max_err, err)
    return GradientCheckResult(max_err, excluded, analytic.reshape(point.shape))


def gradient_check(f, point, step):
    """Max relative error between taped gradients and central differences."""
    return gradient_check_details(f, point, step).max_rel_error
