"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, make, trace_relu


class NondeterminismError(RuntimeError):
    pass


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_input: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    worst: tuple[str, tuple[int, ...]] | None = None
    shrunk: int = 0
    kinks: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps exact zeros from dividing by 0."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _project(out: Tensor, weights: np.ndarray | None) -> Tensor:
    if weights is None:
        return out
    return make(
        np.asarray((out.data * weights).sum()), (out,), lambda g: (g * weights,)
    )


def gradcheck(
    f: Callable[..., Tensor],
    inputs: Mapping[str, Tensor] | list[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    min_h: float = 1e-9,
) -> GradcheckReport:
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes the inputs positionally (or as keywords for a mapping). A
    non-scalar output is reduced with a fixed random projection so every
    output element contributes. ``max_entries`` caps the number of entries
    perturbed per input (chosen by a seeded draw); ``None`` checks all.

    A difference quotient is only a derivative estimate if both probes sit in
    the same linear piece, so whenever a relu flips between ``x + h`` and
    ``x - h`` the step is cut tenfold (down to ``min_h``). ``report.shrunk``
    counts entries that needed a smaller step; ``report.kinks`` counts those
    that still straddle a kink at ``min_h`` (their error is reported as is).
    """
    if isinstance(inputs, Mapping):
        names = list(inputs)
        tensors = [inputs[k] for k in names]
        call = lambda: f(**dict(zip(names, tensors)))  # noqa: E731
    else:
        tensors = list(inputs)
        names = [f"input{i}" for i in range(len(tensors))]
        call = lambda: f(*tensors)  # noqa: E731

    rng = np.random.default_rng(seed)
    first = call()
    again = call()
    if first.shape != again.shape or not np.array_equal(first.data, again.data):
        raise NondeterminismError("f returned different outputs for identical inputs")
    weights = None if first.data.size == 1 else rng.uniform(-1.0, 1.0, size=first.shape)

    saved = [(t.requires_grad, t.grad) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            loss = _project(call(), weights)
        tape.backward(loss)
        analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    finally:
        for t, (rg, _) in zip(tensors, saved):
            t.requires_grad = rg
    for t, (_, g) in zip(tensors, saved):
        t.grad = g

    def value() -> float:
        return float(_project(call(), weights).data)

    report = GradcheckReport(max_rel_error=0.0)
    for name, t, ga in zip(names, tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat[i]
            step = h
            while True:
                with trace_relu() as on_up:
                    flat[i] = orig + step
                    up = value()
                with trace_relu() as on_down:
                    flat[i] = orig - step
                    down = value()
                flat[i] = orig
                if all(np.array_equal(a, b) for a, b in zip(on_up, on_down)):
                    break
                if step / 10.0 < min_h:
                    report.kinks += 1
                    break
                step /= 10.0
            if step != h:
                report.shrunk += 1
            num = (up - down) / (2.0 * step)
            err = float(relative_error(np.asarray(ga.reshape(-1)[i]), np.asarray(num), floor))
            if err > worst:
                worst = err
                if err > report.max_rel_error:
                    report.max_rel_error = err
                    report.worst = (name, np.unravel_index(i, t.shape))
        report.per_input[name] = worst
        report.checked[name] = int(idx.size)
    return report
