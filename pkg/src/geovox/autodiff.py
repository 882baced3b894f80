"""Parameter store, checked backward pass and finite-difference gradient checks.

Reverse-mode gradients come from torch autograd; ``grad_check`` is the
independent central-difference oracle used to verify them.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, Mapping, Optional, Tuple

import numpy as np
import torch
from torch import nn


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss to be differentiated is NaN or infinite."""


class ParameterStore:
    """Named trainable arrays with a stable iteration order.

    Wraps the parameters of one module tree; every trainable component of a
    model registers under that tree, so there is a single store per model.
    """

    def __init__(self, module: nn.Module):
        self.module = module

    def named(self) -> "OrderedDict[str, nn.Parameter]":
        return OrderedDict(self.module.named_parameters())

    def __iter__(self) -> Iterator[Tuple[str, nn.Parameter]]:
        return iter(self.named().items())

    def __len__(self) -> int:
        return len(self.named())

    def __getitem__(self, name: str) -> nn.Parameter:
        return self.named()[name]

    def keys(self):
        return list(self.named().keys())

    def zero_grad(self) -> None:
        for p in self.module.parameters():
            p.grad = None

    def grads(self) -> "OrderedDict[str, torch.Tensor]":
        """Gradient per parameter; parameters off the loss path get zeros."""
        return OrderedDict((k, p.grad if p.grad is not None else torch.zeros_like(p))
                           for k, p in self.named().items())

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over the raw bytes of parameters whose name starts with ``prefix``."""
        h = hashlib.sha256()
        for k, p in self.named().items():
            if k.startswith(prefix):
                h.update(k.encode())
                h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.detach().cpu().numpy().copy()) for k, p in self.named().items())

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        named = self.named()
        missing = set(named) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        with torch.no_grad():
            for k, p in named.items():
                src = torch.as_tensor(np.asarray(arrays[k]))
                if tuple(src.shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {k}: {tuple(src.shape)} vs {tuple(p.shape)}")
                p.copy_(src.to(p.dtype))


def backward(total_loss: torch.Tensor, components: Optional[Mapping[str, torch.Tensor]] = None,
             store: Optional[ParameterStore] = None) -> None:
    """Populate gradients for ``total_loss``, refusing non-finite values.

    ``components`` (name -> loss term) is only used to name the offending
    term(s) in the error message. Gradients accumulate into existing slots.
    """
    if not bool(torch.isfinite(total_loss).all()):
        bad = [k for k, v in (components or {}).items()
               if not bool(torch.isfinite(torch.as_tensor(v)).all())]
        where = f" (non-finite terms: {', '.join(bad)})" if bad else ""
        raise NonFiniteLossError(f"loss is {float(total_loss.detach())}{where}")
    if total_loss.requires_grad:
        total_loss.backward()
    if store is not None:
        for _, p in store:
            if p.grad is None:
                p.grad = torch.zeros_like(p)


@dataclass
class GradCheckReport:
    per_param: Dict[str, float]
    max_rel_error: float
    mean_rel_error: float
    tolerance: float
    n_checked: int
    worst: str = ""
    details: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def lines(self):
        status = "PASS" if self.passed else "FAIL"
        yield (f"{status} max_rel_err={self.max_rel_error:.3e} mean_rel_err={self.mean_rel_error:.3e} "
               f"tol={self.tolerance:.1e} n={self.n_checked}")
        for k, v in self.per_param.items():
            yield f"  {k}: {v:.3e}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise.

    The floor keeps entries whose true gradient is (numerically) zero from
    dominating through round-off in the difference quotient.
    """
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor],
               step: float = 1e-5, tolerance: float = 1e-4, floor: float = 1e-6,
               max_params: int = 5000) -> GradCheckReport:
    """Compare autograd gradients against central differences, scalar by scalar.

    Args:
        loss_fn: closure recomputing the scalar loss from the current values of
            ``params`` (which are perturbed in place).
        params: named leaf tensors, ideally float64.
        step: finite-difference step.
        max_params: guard against accidentally checking large models.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    total = sum(p.numel() for p in params.values())
    if total > max_params:
        raise ValueError(f"{total} parameters exceeds the micro-instance limit of {max_params}")
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    per_param, details, all_err = {}, {}, []
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            analytic = (g if g is not None else torch.zeros_like(p)).detach().double().numpy().ravel()
            numeric = np.zeros_like(analytic)
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                f_plus = float(loss_fn())
                flat[i] = orig - step
                f_minus = float(loss_fn())
                flat[i] = orig
                numeric[i] = (f_plus - f_minus) / (2 * step)
            err = relative_error(analytic, numeric, floor)
            per_param[name] = float(err.max()) if err.size else 0.0
            details[name] = (analytic, numeric)
            all_err.append(err)
    errs = np.concatenate(all_err) if all_err else np.zeros(1)
    worst = max(per_param, key=per_param.get) if per_param else ""
    return GradCheckReport(per_param, float(errs.max()), float(errs.mean()), tolerance,
                           int(errs.size), worst, details)
