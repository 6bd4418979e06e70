"""Reverse-mode automatic differentiation on float64 numpy arrays.

The model is a recorded tape: while a Tape is active (as a context manager),
every primitive operation appends one node in execution order. A node stores
the primitive, the input Vars, the output Var, and whatever context the
primitive needs to replay itself. Backward walks the node list in exact
reverse recording order, which is a reverse topological order because a node
can only consume Vars that already existed when it was recorded.

Contracts this module keeps:

* forward replay of a tape reproduces every node output bit-exactly,
* backward order is deterministic (list order, no hashing involved),
* gradient accumulation is explicit: backward returns a BackwardResult and
  nothing else changes; parameter stores pull from it on request.

Primitives themselves (conv, pooling, elementwise, ...) live in
``volume_ops`` and friends; this module only provides the machinery plus
``grad_check``, the central-difference harness used by the test suite and
the ``gradcheck`` CLI command.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class Var:
    """A float64 array participating in differentiation.

    Vars are thin handles: the payload is ``.value``. They support
    ``np.asarray`` so tests can compare them directly with numpy helpers.
    """

    __slots__ = ("value",)

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.value
        return self.value.astype(dtype)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def wrap(x) -> Var:
    """Return x as a Var, wrapping plain arrays/scalars as constant leaves."""
    return x if isinstance(x, Var) else Var(x)


class Prim:
    """A differentiable primitive: a forward function and its VJP.

    forward(*values, **ctx) -> ndarray
    vjp(grad, *values, out, **ctx) -> tuple of input gradients, aligned with
    the inputs; use None for inputs that do not receive gradient.
    """

    __slots__ = ("name", "forward", "vjp")

    def __init__(self, name, forward, vjp):
        self.name = name
        self.forward = forward
        self.vjp = vjp


class _Node:
    __slots__ = ("prim", "inputs", "output", "ctx")

    def __init__(self, prim, inputs, output, ctx):
        self.prim = prim
        self.inputs = inputs
        self.output = output
        self.ctx = ctx


_TAPE_STACK: list["Tape"] = []


def active_tape():
    """The innermost active Tape, or None when not recording."""
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def apply_prim(prim: Prim, *inputs, **ctx) -> Var:
    """Run a primitive, recording it on the active tape if there is one."""
    in_vars = tuple(wrap(x) for x in inputs)
    out = Var(prim.forward(*(v.value for v in in_vars), **ctx))
    tape = active_tape()
    if tape is not None:
        tape._nodes.append(_Node(prim, in_vars, out, ctx))
    return out


class BackwardResult:
    """Gradients from one backward pass, keyed by Var identity."""

    def __init__(self, grads, keepalive):
        self._grads = grads
        self._keepalive = keepalive

    def get(self, var: Var):
        """Gradient array for var, or None if it did not affect the result."""
        return self._grads.get(id(var))

    def get_or_zeros(self, var: Var) -> np.ndarray:
        g = self._grads.get(id(var))
        if g is None:
            return np.zeros(var.shape, dtype=np.float64)
        return g


class Tape:
    """Records primitive applications and runs replay/backward over them."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def nodes(self):
        """Recorded nodes in execution order (read-only view)."""
        return tuple(self._nodes)

    def replay(self):
        """Recompute every node output in recording order, in place.

        With unchanged leaf values this reproduces all outputs bit-exactly;
        after editing a leaf's .value it propagates the change forward.
        """
        for node in self._nodes:
            node.output.value = node.prim.forward(
                *(v.value for v in node.inputs), **node.ctx
            )

    def backward(self, result: Var) -> BackwardResult:
        """Reverse sweep from a scalar result. Does not mutate any Var."""
        if result.shape != ():
            raise ShapeError(
                f"backward needs a scalar result, got shape {result.shape}"
            )
        grads: dict[int, np.ndarray] = {id(result): np.ones((), dtype=np.float64)}
        keepalive: list[Var] = [result]
        for node in reversed(self._nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.prim.vjp(
                g_out,
                *(v.value for v in node.inputs),
                out=node.output.value,
                **node.ctx,
            )
            for v, g in zip(node.inputs, in_grads):
                if g is None:
                    continue
                acc = grads.get(id(v))
                if acc is None:
                    grads[id(v)] = g
                    keepalive.append(v)
                else:
                    grads[id(v)] = acc + g
        return BackwardResult(grads, keepalive)


class GradCheckReport:
    """Outcome of grad_check: worst relative error per parameter."""

    def __init__(self, errors: dict[str, float], tolerance: float):
        self.errors = errors
        self.tolerance = tolerance

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


_KINK_PRIMS = ("relu", "abs")


def _eval_with_kink_signs(f):
    """Evaluate f under a throwaway tape; return (value, kink sign pattern).

    The sign pattern is the signbit of every input to a relu or abs node, in
    recording order. If it differs between the two points of a central
    difference, the probe straddled a kink and the difference quotient does
    not estimate the derivative there.
    """
    with Tape() as tape:
        out = f()
    signs = [
        np.signbit(node.inputs[0].value)
        for node in tape._nodes
        if node.prim.name in _KINK_PRIMS
    ]
    return float(out.value), signs


def _signs_equal(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _probe(f, flat, i, h):
    """Central difference for entry i, or None if the probe crossed a kink."""
    saved = flat[i]
    flat[i] = saved + h
    hi, signs_hi = _eval_with_kink_signs(f)
    flat[i] = saved - h
    lo, signs_lo = _eval_with_kink_signs(f)
    flat[i] = saved
    if not _signs_equal(signs_hi, signs_lo):
        return None
    return (hi - lo) / (2.0 * h)


def _rel_err(a: float, numeric: float) -> float:
    return abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)


def grad_check(f, params, h: float = 1e-3, tolerance: float = 1e-4,
               names=None) -> GradCheckReport:
    """Compare tape gradients of a scalar computation to central differences.

    f is a zero-argument callable that builds the computation from the
    current parameter values and returns a scalar Var. It is recorded once
    for the analytic gradients, then each parameter entry is probed with a
    central difference (f(p+h) - f(p-h)) / (2h). Relative errors use
    max(|analytic|, |numeric|, 1e-8) as denominator.

    A central difference is only a derivative estimate where f is smooth, so
    probes that push a relu/abs input across zero are detected (the sign
    pattern of those inputs differs between the two evaluations) and redone
    at a base point nudged along that entry by a few multiples of h, with the
    analytic gradient recomputed there. The nudge schedule is deterministic;
    if no clean point is found the raw difference is kept, so a genuinely
    wrong gradient still shows up as a failure.

    params is anything with .items() yielding (name, Var); names optionally
    restricts the check to a subset.
    """
    with Tape() as tape:
        out = f()
    if out.shape != ():
        raise ShapeError(f"grad_check needs a scalar loss, got shape {out.shape}")
    result = tape.backward(out)

    errors: dict[str, float] = {}
    for name, var in params.items():
        if names is not None and name not in names:
            continue
        analytic = result.get_or_zeros(var).reshape(-1)
        flat = var.value.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            numeric = _probe(f, flat, i, h)
            if numeric is not None:
                err = _rel_err(float(analytic[i]), numeric)
            else:
                err = _check_entry_nudged(f, params, name, flat, i, h)
            if err > worst:
                worst = err
        errors[name] = worst
    return GradCheckReport(errors, tolerance)


def _check_entry_nudged(f, params, name, flat, i, h):
    """Re-check one entry at nudged base points until the probe is kink-free."""
    saved = flat[i]
    try:
        for mult in (8.0, -8.0, 32.0, -32.0, 128.0, -128.0):
            flat[i] = saved + mult * h
            numeric = _probe(f, flat, i, h)
            if numeric is None:
                continue
            with Tape() as tape:
                out = f()
            analytic_here = float(
                tape.backward(out).get_or_zeros(params.get(name)).reshape(-1)[i]
            )
            return _rel_err(analytic_here, numeric)
        # No clean point found: fall back to the raw difference at the
        # original base so a real gradient bug cannot hide here.
        flat[i] = saved
        with Tape() as tape:
            out = f()
        analytic = float(tape.backward(out).get_or_zeros(params.get(name)).reshape(-1)[i])
        flat[i] = saved + h
        hi, _ = _eval_with_kink_signs(f)
        flat[i] = saved - h
        lo, _ = _eval_with_kink_signs(f)
        return _rel_err(analytic, (hi - lo) / (2.0 * h))
    finally:
        flat[i] = saved
