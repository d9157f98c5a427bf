"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor, no_record


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    max_abs_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error < self.tolerance for e in self.entries)

    def __str__(self) -> str:
        lines = [f"gradcheck tol={self.tolerance:g} -> {'PASS' if self.passed else 'FAIL'}"]
        for e in self.entries:
            lines.append(f"  {e.name:<32s} rel={e.max_rel_error:.3e} abs={e.max_abs_error:.3e}")
        return "\n".join(lines)


def finite_diff_check(fn: Callable[[], Tensor], params: Sequence[Tensor], tolerance: float = 1e-5,
                      h: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must be deterministic and return a scalar tensor computed from
    ``params`` (all requires-grad tensors).  Each element is perturbed by
    ``h * max(1, |value|)``.  The error for one parameter is the norm-wise
    relative error ``max|a - n| / max(max|a|, max|n|)``.

    Points near kinks (tReLU thresholds, maxout ties) have to be avoided by
    the caller; see :func:`sample_away_from_kinks`.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(tolerance)
    for idx, (p, a) in enumerate(zip(params, analytic)):
        num = np.zeros(p.data.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        with no_record():
            for i in range(flat.size):
                orig = flat[i]
                step = h * max(1.0, abs(float(orig)))
                flat[i] = orig + step
                fp = float(fn().data)
                flat[i] = orig - step
                fm = float(fn().data)
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * step)
        diff = np.abs(a - num)
        scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0))
        rel = float(diff.max(initial=0.0) / scale) if scale > 0 else float(diff.max(initial=0.0))
        name = getattr(p, "name", "") or f"input[{idx}]"
        report.entries.append(GradCheckEntry(name, rel, float(diff.max(initial=0.0))))
    for p in params:
        p.grad = np.zeros_like(p.data) if isinstance(p, Parameter) else None
    return report


def sample_away_from_kinks(draw: Callable[[np.random.Generator], object],
                           kink_distance: Callable[[object], float], margin: float,
                           rng: np.random.Generator, max_tries: int = 1000):
    """Redraw ``draw(rng)`` until ``kink_distance(sample) > margin``."""
    for _ in range(max_tries):
        sample = draw(rng)
        if kink_distance(sample) > margin:
            return sample
    raise RuntimeError(f"could not draw a sample farther than {margin} from a kink")
