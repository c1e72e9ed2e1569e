"""Finite-difference check of autograd gradients on sampled scalar parameters."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np
import torch
from torch import nn


@dataclass
class GradCheckResult:
    max_rel_error: float
    errors: np.ndarray  # per sampled parameter
    checked: List[Tuple[str, int]]

    def passed(self, tol: float = 1e-3) -> bool:
        return bool(self.max_rel_error <= tol)


def gradient_check(model: nn.Module, inputs, n_params: int = 100, eps: float = 1e-8,
                   seed: int = 0, floor: float = 1e-7,
                   loss_fn: Callable[[torch.Tensor], torch.Tensor] | None = None) -> GradCheckResult:
    """Compares d(loss)/d(theta) from autograd with central differences, in float64 and eval mode.

    The default loss projects the output onto fixed random weights so every output unit
    contributes. ``inputs`` may be a tensor or a tuple of tensors (``None`` entries kept).
    The small default step keeps ReLU kinks from being straddled; BatchNorm statistics
    should be calibrated on realistic data first, or outputs (and gradients) shrink to
    roundoff level.
    """
    model = copy.deepcopy(model).double().eval()
    cast = (lambda t: None if t is None else t.double())
    x = tuple(cast(t) for t in inputs) if isinstance(inputs, tuple) else cast(inputs)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        out = model(x)
    proj = torch.as_tensor(rng.standard_normal(tuple(out.shape)))
    loss_fn = loss_fn or (lambda o: (o * proj).sum())

    named = [(k, p) for k, p in model.named_parameters() if p.requires_grad]
    sizes = np.array([p.numel() for _, p in named])
    flat = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    model.zero_grad()
    loss_fn(model(x)).backward()
    errors, checked = [], []
    for f in np.sort(flat):
        j = int(np.searchsorted(offsets, f, side="right") - 1)
        name, p = named[j]
        i = int(f - offsets[j])
        analytic = p.grad.view(-1)[i].item()
        with torch.no_grad():
            orig = p.view(-1)[i].item()
            p.view(-1)[i] = orig + eps
            up = loss_fn(model(x)).item()
            p.view(-1)[i] = orig - eps
            down = loss_fn(model(x)).item()
            p.view(-1)[i] = orig
        numeric = (up - down) / (2 * eps)
        errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
        checked.append((name, i))
    errors = np.asarray(errors)
    return GradCheckResult(float(errors.max(initial=0.0)), errors, checked)
