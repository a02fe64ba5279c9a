from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, _topo_order, no_grad


class EvaluationError(RuntimeError):
    pass


def _scalar(out: Tensor) -> float:
    val = float(np.asarray(out.data).reshape(-1)[0]) if out.size == 1 else None
    if val is None:
        raise EvaluationError(f"gradient check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(val):
        raise EvaluationError("function value is not finite at a perturbed point")
    return val


def analytic_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    f().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def numeric_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> list[np.ndarray]:
    """Central differences, one coordinate at a time, perturbing ``data`` in place."""
    out = []
    with no_grad():
        for t in inputs:
            g = np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                try:
                    fp = _scalar(f())
                    flat[i] = orig - eps
                    fm = _scalar(f())
                except (FloatingPointError, ValueError) as exc:
                    raise EvaluationError(f"evaluation failed at perturbed point: {exc}") from exc
                finally:
                    flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * eps)
            out.append(g)
    return out


class Replay:
    """A recorded graph that can be re-evaluated after in-place edits to its leaves.

    Only nodes downstream of an edited leaf are recomputed, each through the
    array-level forward its op recorded. Nodes that did not require grad at
    recording time are constants here, so ``f`` must not read ``data`` of
    an input to build later ops (frozen targets are fine).
    """

    def __init__(self, root: Tensor):
        if root.size != 1:
            raise EvaluationError(f"gradient check needs a scalar function, got shape {root.shape}")
        self.root = root
        self.nodes = _topo_order(root)
        missing = sorted({n.op for n in self.nodes if n._parents and n._fwd is None})
        if missing:
            raise EvaluationError(f"ops without a recorded forward: {', '.join(missing)}")

    def downstream(self, leaf: Tensor) -> list[Tensor]:
        hit = {leaf.id}
        plan = []
        for node in self.nodes:
            if node._parents and any(p.id in hit for p in node._parents):
                hit.add(node.id)
                plan.append(node)
        return plan

    @staticmethod
    def compile(plan: Sequence[Tensor]) -> list[tuple]:
        """Steps of (forward, argument sources); a source is a slot index or -1 with a constant array."""
        slot = {n.id: i for i, n in enumerate(plan)}
        return [(n._fwd, tuple((slot[p.id], None) if p.id in slot else (-1, p.data) for p in n._parents))
                for n in plan]

    @staticmethod
    def run(steps: Sequence[tuple]) -> list[np.ndarray]:
        vals: list = []
        for fwd, srcs in steps:
            vals.append(fwd(*[c if j < 0 else vals[j] for j, c in srcs]))
        return vals

    def value(self, plan: Sequence[Tensor], steps: Sequence[tuple] | None = None) -> float:
        """Root value after re-running ``plan``; only the root is checked for finiteness."""
        if plan and plan[-1] is self.root:
            val = float(np.reshape(self.run(steps if steps is not None else self.compile(plan))[-1], -1)[0])
        else:
            val = float(self.root.data.reshape(-1)[0])
        if not np.isfinite(val):
            raise EvaluationError("function value is not finite at a perturbed point")
        return val

    def verify(self) -> None:
        """Recompute every node unperturbed and require bit-identical values."""
        plan = [n for n in self.nodes if n._parents]
        for node, val in zip(plan, self.run(self.compile(plan))):
            if not np.array_equal(val, node.data):
                raise EvaluationError(f"replayed {node.op} differs from the recorded value")


def replay_numeric_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor],
                             eps: float = 1e-6) -> list[np.ndarray]:
    """Central differences like :func:`numeric_gradients`, re-evaluating only what each input feeds."""
    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
    try:
        replay = Replay(f())
    finally:
        for t, flag in zip(inputs, flags):
            t.requires_grad = flag
    replay.verify()
    out = []
    for t in inputs:
        plan = replay.downstream(t)
        steps = replay.compile(plan)
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        if plan:
            for i in range(flat.size):
                orig = flat[i]
                try:
                    flat[i] = orig + eps
                    fp = replay.value(plan, steps)
                    flat[i] = orig - eps
                    fm = replay.value(plan, steps)
                finally:
                    flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * eps)
        out.append(g)
    return out


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
                    replay: bool = False) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` must read the current ``data`` of each input. By default it is
    re-evaluated from scratch for every perturbation; ``replay=True`` records
    it once and re-evaluates only the affected part of the graph.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    analytic = analytic_gradients(f, inputs)
    numeric = (replay_numeric_gradients if replay else numeric_gradients)(f, inputs, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))))
    return worst
