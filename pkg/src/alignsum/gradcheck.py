"""Central finite-difference verification of analytic gradients.

The checked callable must map leaf tensors to a scalar tensor and be
deterministic. Checks are only meaningful in float64: the default step
``h = 1e-5`` drowns in float32 rounding noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, record
from .errors import CheckInvalidError, InvalidArgumentError

DEFAULT_STEP = 1e-5


@dataclass
class GradCheckReport:
    """Worst-case relative error per input and overall."""

    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    step: float = DEFAULT_STEP

    def passed(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = DEFAULT_STEP,
) -> GradCheckReport:
    """Compare the tape gradient of ``op(*inputs)`` against central differences.

    Relative error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``;
    the report carries the maximum over all coordinates of every input.
    Raises :class:`CheckInvalidError` if the op is not deterministic at the
    evaluation point.
    """
    inputs = list(inputs)
    if not inputs:
        raise InvalidArgumentError("grad_check needs at least one input")
    for t in inputs:
        if not isinstance(t, Tensor):
            raise InvalidArgumentError("inputs must be Tensors")
        if t.dtype != np.float64:
            raise InvalidArgumentError("grad_check requires float64 inputs")
        if not np.all(np.isfinite(t.data)):
            raise InvalidArgumentError("grad_check requires finite inputs")

    def evaluate() -> float:
        out = op(*inputs)
        if not isinstance(out, Tensor) or out.size != 1:
            raise InvalidArgumentError("op under check must return a scalar Tensor")
        return out.item()

    base = evaluate()
    if evaluate() != base:
        raise CheckInvalidError("op is not deterministic under fixed inputs")

    leaves = [t for t in inputs if t.requires_grad]
    if not leaves:
        raise InvalidArgumentError("no input requires a gradient")
    for t in leaves:
        t.zero_grad()
    with record() as tape:
        out = op(*inputs)
    tape.backward(out)

    per_input = []
    for t in leaves:
        analytic = t.grad
        worst = 0.0
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = evaluate()
            flat[i] = orig - step
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            if rel > worst:
                worst = rel
        per_input.append(worst)
    return GradCheckReport(max_rel_error=max(per_input), per_input=per_input, step=step)
