"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor


@dataclass
class InputReport:
    name: str
    worst_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int


@dataclass
class GradcheckReport:
    passed: bool
    tol: float
    inputs: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def worst_rel_err(self) -> float:
        return max((r.worst_rel_err for r in self.inputs), default=0.0)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [f"{status} worst rel-err {self.worst_rel_err:.3e} (tol {self.tol:g})"]
        for r in self.inputs:
            lines.append(
                f"  {r.name}: rel-err {r.worst_rel_err:.3e} at {r.worst_index} "
                f"analytic={r.analytic:.6e} numeric={r.numeric:.6e} ({r.checked} elements)"
            )
        lines.extend(f"  failure: {f}" for f in self.failures)
        return "\n".join(lines)


def _scalar(out: Tensor) -> Tensor:
    return out if out.size == 1 else ops.sum_(out)


def _eval(f, inputs) -> float:
    return float(_scalar(f(*inputs)).values.reshape(-1)[0])


def gradient_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    names: Optional[Sequence[str]] = None,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare tape gradients of ``f(*inputs)`` with central differences.

    The error per element is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    Non-scalar outputs are summed. ``max_elements`` subsamples coordinates of
    large inputs (deterministically from ``seed``).
    """
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    report = GradcheckReport(passed=True, tol=tol)
    for t in inputs:
        if t.dtype != np.float64:
            report.failures.append(f"input dtype {t.dtype} is not float64")
            report.passed = False
            return report
        t.requires_grad = True
        t.zero_grad()

    with Tape() as tape:
        out = _scalar(f(*inputs))
    if not np.all(np.isfinite(out.values)):
        report.passed = False
        report.failures.append("non-finite output at the base point")
        return report
    tape.backward(out)
    analytic = [t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    for name, t, ga in zip(names, inputs, analytic):
        if not np.all(np.isfinite(ga)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(ga))[0])
            report.failures.append(f"{name}: non-finite analytic gradient at {bad}")
            report.passed = False
            continue
        flat_idx = np.arange(t.size)
        if max_elements is not None and t.size > max_elements:
            flat_idx = np.sort(rng.choice(t.size, size=max_elements, replace=False))
        worst = (0.0, (), 0.0, 0.0)
        flat = t.values.reshape(-1)
        for fi in flat_idx:
            orig = flat[fi]
            flat[fi] = orig + h
            fp = _eval(f, inputs)
            flat[fi] = orig - h
            fm = _eval(f, inputs)
            flat[fi] = orig
            idx = tuple(int(i) for i in np.unravel_index(fi, t.shape))
            if not (np.isfinite(fp) and np.isfinite(fm)):
                report.failures.append(f"{name}: non-finite output when perturbing {idx}")
                report.passed = False
                continue
            num = (fp - fm) / (2 * h)
            an = float(ga.reshape(-1)[fi])
            err = abs(an - num) / max(1.0, abs(an), abs(num))
            if err > worst[0] or not worst[1]:
                worst = (err, idx, an, num)
            if err > tol:
                report.passed = False
                report.failures.append(f"{name}{list(idx)}: analytic={an:.8e} numeric={num:.8e} rel-err={err:.3e}")
        report.inputs.append(InputReport(name, worst[0], worst[1], worst[2], worst[3], len(flat_idx)))
    return report
