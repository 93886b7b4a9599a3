"""Finite-difference verification of the model's backward pass."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as tc

GROUPS = OrderedDict(
    [
        ("conv", ("conv.",)),
        ("primary_caps", ("primary.",)),
        ("transform", ("routing.",)),
        ("lstm", ("lstm_fwd.", "lstm_bwd.")),
        ("attention", ("attention.",)),
        ("dense", ("dense1.", "dense2.")),
    ]
)

# A 1e-3 stencil straddles ReLU / max-pool switch points on a noticeable
# fraction of random draws; 1e-5 in float64 keeps truncation and rounding
# error near 1e-10.
DEFAULT_STEP = 1e-5

# below this magnitude errors are judged absolutely (1e-5 at rtol 1e-3)
REL_FLOOR = 1e-2


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


@dataclass
class GradcheckReport:
    per_tensor: "OrderedDict[str, float]"
    per_group: "OrderedDict[str, float]"
    tolerance: float

    @property
    def failing(self) -> list[str]:
        return [g for g, e in self.per_group.items() if not e <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failing


def check_model(
    config: M.ModelConfig | None = None,
    seed: int = 0,
    tolerance: float = 1e-3,
    step: float = DEFAULT_STEP,
    batch: int = 2,
) -> GradcheckReport:
    """Compare tape gradients with central differences for every parameter.

    Runs in float64. The routing coupling coefficients are pinned at their
    base-point values for the perturbed evaluations, since the tape treats
    them as constants.
    """
    cfg = config or M.preset("mini", seed=seed)
    rng = np.random.default_rng(seed)
    with tc.precision(np.float64):
        m = M.build(cfg, dtype=np.float64)
        # spread parameters so activations sit away from saturation and ReLU kinks
        for t in m.parameters():
            t.data = t.data + rng.uniform(-0.3, 0.3, t.shape)
        x = rng.uniform(-1, 1, (batch, cfg.T, cfg.patch_h, cfg.patch_w, cfg.bands))
        labels = rng.integers(0, cfg.num_classes, batch)
        weights = rng.uniform(0.5, 2.0, batch)

        probs, trace = M.forward(m, x, with_trace=True)
        frozen = trace.couplings
        loss = M.loss(m, x, labels, weights, couplings=frozen)
        params = m.named_parameters()
        tc.zero_grad(params.values())
        tc.backward(loss, params.values())

        per_tensor: OrderedDict[str, float] = OrderedDict()
        for name, p in params.items():
            analytic = p.grad.copy()
            numeric = tc.finite_diff_grad(lambda _: M.loss(m, x, labels, weights, couplings=frozen), p, step)
            per_tensor[name] = float(relative_error(analytic, numeric).max())

    per_group: OrderedDict[str, float] = OrderedDict()
    for group, prefixes in GROUPS.items():
        errs = [e for n, e in per_tensor.items() if n.startswith(prefixes)]
        if errs:
            per_group[group] = max(errs)
    return GradcheckReport(per_tensor, per_group, tolerance)
