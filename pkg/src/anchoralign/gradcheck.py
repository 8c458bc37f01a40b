"""Finite-difference validation of tape gradients.

The oracle is central differences evaluated in double precision on a
structural clone of the tape, with the step sized relative to each
parameter entry: h = step_scale * max(1, |theta|).  Relative error is
|analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tape import Tape

__all__ = ["grad_check", "GradCheckReport", "ParamCheck"]


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    entries_checked: int

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_err < tolerance


@dataclass
class GradCheckReport:
    tolerance: float
    per_param: dict[str, ParamCheck] = field(default_factory=dict)

    @property
    def max_rel_err(self) -> float:
        if not self.per_param:
            return 0.0
        return max(p.max_rel_err for p in self.per_param.values())

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def __str__(self):
        lines = [f"grad check (tolerance {self.tolerance:g}):"]
        for p in self.per_param.values():
            status = "ok" if p.passed(self.tolerance) else "FAIL"
            lines.append(
                f"  {p.name:<28} rel_err={p.max_rel_err:.3e}"
                f"  ({p.entries_checked} entries)  {status}"
            )
        lines.append(f"  max over parameters: {self.max_rel_err:.3e}"
                     f"  -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def grad_check(
    tape: Tape,
    inputs,
    tolerance: float = 1e-6,
    *,
    wrt: list[str] | None = None,
    step_scale: float = 1e-5,
    samples_per_param: int | None = None,
    sample_strategy: str = "random",
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic tape gradients against central differences.

    ``wrt`` restricts which inputs are checked (default: all of them);
    ``samples_per_param`` caps how many entries are perturbed per input
    (default: every entry).  ``sample_strategy`` picks those entries either
    reproducibly at random ("random", from ``seed``) or as the largest
    analytic-gradient magnitudes ("largest") -- near-zero entries carry only
    roundoff under a pure relative-error measure, so dominant entries are
    the informative ones when the budget is small.
    """
    if sample_strategy not in ("random", "largest"):
        raise ContractError(f"unknown sample_strategy {sample_strategy!r}")
    if tape._nodes and tape._nodes[-1].shape != (1, 1):
        raise ContractError(
            f"grad_check requires a scalar output, got shape {tape._nodes[-1].shape}"
        )
    bindings = tape._bindings_by_name(inputs)

    tape.forward(bindings)
    analytic = tape.backward()

    # Finite differences always run in double precision, evaluated at the
    # point the tape actually used (bindings rounded to the tape's dtype),
    # so lower-precision tapes are compared at their own parameter values.
    fd_tape = tape if tape.dtype == np.float64 else tape.cast(np.float64)
    fd_bindings = {
        k: np.ascontiguousarray(
            np.atleast_2d(np.asarray(v, dtype=tape.dtype)).astype(np.float64)
        )
        for k, v in bindings.items()
    }

    names = wrt if wrt is not None else tape.input_names
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)

    for name in names:
        if name not in analytic:
            raise ContractError(f"unknown input {name!r}")
        grad = analytic[name]
        theta = fd_bindings[name]
        flat_positions = np.arange(theta.size)
        if samples_per_param is not None and samples_per_param < theta.size:
            if sample_strategy == "largest":
                order = np.argsort(-np.abs(grad).ravel(), kind="stable")
                flat_positions = np.sort(order[:samples_per_param])
            else:
                flat_positions = rng.choice(
                    theta.size, size=samples_per_param, replace=False
                )
                flat_positions.sort()

        max_err = 0.0
        for pos in flat_positions:
            r, c = divmod(int(pos), theta.shape[1])
            orig = theta[r, c]
            h = step_scale * max(1.0, abs(orig))
            theta[r, c] = orig + h
            f_plus = fd_tape.forward(fd_bindings)[0, 0]
            theta[r, c] = orig - h
            f_minus = fd_tape.forward(fd_bindings)[0, 0]
            theta[r, c] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(grad[r, c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_err = max(max_err, err)

        report.per_param[name] = ParamCheck(name, max_err, len(flat_positions))

    # Leave the original tape in a consistent forward/backward state.
    tape.forward(bindings)
    tape.backward()
    return report
