"""Dense tensor ops with reverse-mode gradients, Adam, Polyak averaging and a
finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` objects. Every op here accepts a single
channel-major sample (``C x H x W`` or a flat vector) and, where it makes sense,
a leading batch axis as well, so the networks can run mini-batches through the
same functions.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import torch
import torch.nn.functional as F

TRAIN_DTYPE = torch.float32
CHECK_DTYPE = torch.float64


class ContractViolation(ValueError):
    """Raised when an operation is called with arguments outside its contract."""


class NumericDomainError(ArithmeticError):
    """Raised in checked mode when a value leaves an op's mathematical domain."""


class DiagnosticError(RuntimeError):
    """Raised when a verification routine meets non-finite values."""


def set_deterministic(seed: int | None = None, threads: int = 1) -> None:
    """Force sequential, bitwise-reproducible kernels."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)


def _batched(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    if x.dim() == ndim:
        return x.unsqueeze(0), True
    if x.dim() == ndim + 1:
        return x, False
    raise ContractViolation(f"expected a {ndim}-d tensor (or batch of them), got shape {tuple(x.shape)}")


# --------------------------------------------------------------------------- layers


def conv2d(
    input: torch.Tensor,
    kernel: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    if kernel.dim() != 4:
        raise ContractViolation(f"kernel must be C_out x C_in x k x k, got {tuple(kernel.shape)}")
    k = kernel.shape[-1]
    if kernel.shape[-2] != k or k % 2 == 0:
        raise ContractViolation(f"kernel must be square with odd size, got {tuple(kernel.shape[-2:])}")
    if stride < 1 or padding < 0:
        raise ContractViolation(f"need stride >= 1 and padding >= 0, got {stride}, {padding}")
    x, squeeze = _batched(input, 3)
    if x.shape[1] != kernel.shape[1]:
        raise ContractViolation(
            f"input has {x.shape[1]} channels but kernel expects {kernel.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ContractViolation(f"bias shape {tuple(bias.shape)} does not match C_out={kernel.shape[0]}")
    out = F.conv2d(x, kernel, bias, stride=stride, padding=padding)
    return out[0] if squeeze else out


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def upsample_nearest(input: torch.Tensor, factor: int) -> torch.Tensor:
    if factor < 1:
        raise ContractViolation(f"factor must be >= 1, got {factor}")
    x, squeeze = _batched(input, 3)
    if factor > 1:
        x = x.repeat_interleave(factor, dim=2).repeat_interleave(factor, dim=3)
    return x[0] if squeeze else x


def linear(input: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if weight.dim() != 2 or input.shape[-1] != weight.shape[1]:
        raise ContractViolation(
            f"cannot apply weight {tuple(weight.shape)} to input {tuple(input.shape)}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ContractViolation(f"bias shape {tuple(bias.shape)} does not match {weight.shape[0]} outputs")
    return F.linear(input, weight, bias)


# ------------------------------------------------------------ elementwise / reduce


def _check_same(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same(a, b)
    return a + b


def subtract(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same(a, b)
    return a - b


def multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_same(a, b)
    return a * b


def scale(a: torch.Tensor, c: float) -> torch.Tensor:
    return a * c


def relu(a: torch.Tensor) -> torch.Tensor:
    return torch.relu(a)


def tanh(a: torch.Tensor) -> torch.Tensor:
    return torch.tanh(a)


def softplus(a: torch.Tensor) -> torch.Tensor:
    return F.softplus(a)


def exp(a: torch.Tensor) -> torch.Tensor:
    return torch.exp(a)


def log(a: torch.Tensor, checked: bool = False) -> torch.Tensor:
    if checked and bool((a <= 0).any()):
        raise NumericDomainError("log of a non-positive value")
    return torch.log(a)


def square(a: torch.Tensor) -> torch.Tensor:
    return a * a


def mean(a: torch.Tensor) -> torch.Tensor:
    return a.mean()


def sum(a: torch.Tensor) -> torch.Tensor:  # noqa: A001 - mirrors the op name
    return a.sum()


def concat_channels(tensors: Sequence[torch.Tensor]) -> torch.Tensor:
    """Stack along the channel axis; all inputs must share H x W (and batch)."""
    if not tensors:
        raise ContractViolation("concat_channels needs at least one tensor")
    batched = tensors[0].dim() == 4
    lead = tensors[0].shape[:1] if batched else ()
    hw = tensors[0].shape[-2:]
    for t in tensors:
        if t.dim() != tensors[0].dim() or t.shape[-2:] != hw or t.shape[: len(lead)] != lead:
            raise ContractViolation("concat_channels requires equal spatial extents")
    return torch.cat(list(tensors), dim=1 if batched else 0)


def backward(scalar_loss: torch.Tensor) -> None:
    """Reverse accumulation into ``.grad``; repeated calls add up."""
    if scalar_loss.numel() != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {tuple(scalar_loss.shape)}")
    scalar_loss.reshape(()).backward()


# ----------------------------------------------------------------- parameter sets


class ParameterSet:
    """Named, ordered collection of trainable tensors for one network."""

    def __init__(self, tensors: Iterable[tuple[str, torch.Tensor]] | Mapping[str, torch.Tensor]):
        items = tensors.items() if isinstance(tensors, Mapping) else tensors
        self._tensors: OrderedDict[str, torch.Tensor] = OrderedDict()
        for name, t in items:
            if name in self._tensors:
                raise ContractViolation(f"duplicate parameter name {name!r}")
            self._tensors[name] = t

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "") -> "ParameterSet":
        return cls((prefix + n, p) for n, p in module.named_parameters())

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> list[torch.Tensor]:
        return list(self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def require_grad(self, flag: bool) -> None:
        for t in self._tensors.values():
            t.requires_grad_(flag)

    def snapshot(self) -> OrderedDict[str, torch.Tensor]:
        return OrderedDict((n, t.detach().clone()) for n, t in self._tensors.items())

    def load(self, values: Mapping[str, torch.Tensor]) -> None:
        if list(values) != self.names():
            raise ContractViolation("parameter names differ from the stored set")
        with torch.no_grad():
            for n, t in self._tensors.items():
                if values[n].shape != t.shape:
                    raise ContractViolation(
                        f"{n}: shape {tuple(values[n].shape)} does not match {tuple(t.shape)}"
                    )
                t.copy_(values[n])

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._tensors.values():
            if t.grad is not None:
                total += float((t.grad.double() ** 2).sum())
        return math.sqrt(total)


def _check_matching(a: ParameterSet, b: ParameterSet) -> None:
    if a.names() != b.names():
        raise ContractViolation("parameter sets have different names")
    for n in a:
        if a[n].shape != b[n].shape:
            raise ContractViolation(f"{n}: shape {tuple(a[n].shape)} vs {tuple(b[n].shape)}")


class AdamState:
    """Adam moments and step counter for one :class:`ParameterSet`."""

    def __init__(
        self,
        params: ParameterSet,
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = OrderedDict((n, torch.zeros_like(t)) for n, t in params.items())
        self.v = OrderedDict((n, torch.zeros_like(t)) for n, t in params.items())

    def tensors(self) -> OrderedDict[str, torch.Tensor]:
        out: OrderedDict[str, torch.Tensor] = OrderedDict()
        for n in self.m:
            out["m." + n] = self.m[n]
            out["v." + n] = self.v[n]
        return out

    def load_tensors(self, values: Mapping[str, torch.Tensor]) -> None:
        for n in self.m:
            self.m[n].copy_(values["m." + n])
            self.v[n].copy_(values["v." + n])


def adam_step(params: ParameterSet, state: AdamState) -> None:
    """Bias-corrected Adam update in place, then clear the gradients."""
    if list(state.m) != params.names():
        raise ContractViolation("Adam state does not belong to this parameter set")
    missing = [n for n, t in params.items() if t.grad is None]
    if missing:
        raise ContractViolation(f"missing gradient for {missing}")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step_count
    c2 = 1.0 - b2**state.step_count
    with torch.no_grad():
        for n, p in params.items():
            g = p.grad
            m, v = state.m[n], state.v[n]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            denom = (v / c2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-state.lr / c1)
    params.zero_grad()


def polyak_update(target: ParameterSet, source: ParameterSet, tau: float) -> None:
    """target <- tau * source + (1 - tau) * target."""
    if not 0.0 <= tau <= 1.0:
        raise ContractViolation(f"tau must lie in [0, 1], got {tau}")
    _check_matching(target, source)
    with torch.no_grad():
        for n, t in target.items():
            if tau == 1.0:
                t.copy_(source[n])
            elif tau != 0.0:
                t.mul_(1.0 - tau).add_(source[n], alpha=tau)


# ------------------------------------------------------------------ verification


def gradient_check(
    function: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-6,
) -> float:
    """Worst relative error between autograd and central differences.

    Inputs are promoted to float64 copies. For every input entry the numeric
    derivative ``(f(x + h) - f(x - h)) / 2h`` is compared with the reverse-mode
    gradient; the error is the largest absolute deviation divided by the
    largest gradient magnitude seen (0 when both gradients vanish).
    """
    xs = [x.detach().to(CHECK_DTYPE).clone().requires_grad_(True) for x in inputs]
    out = function(*xs)
    if out.numel() != 1:
        raise ContractViolation("gradient_check needs a scalar-valued function")
    if not torch.isfinite(out).all():
        raise DiagnosticError(f"function value is not finite: {out.item()}")
    grads = torch.autograd.grad(out.reshape(()), xs, allow_unused=True)
    analytic = [torch.zeros_like(x) if g is None else g.detach() for x, g in zip(xs, grads)]

    worst_abs = 0.0
    scale_ = 0.0
    with torch.no_grad():
        probes = [x.detach().clone() for x in xs]
        for i, x in enumerate(probes):
            flat = x.view(-1)
            a_flat = analytic[i].reshape(-1)
            for j in range(flat.numel()):
                orig = float(flat[j])
                flat[j] = orig + step
                f_plus = float(function(*probes))
                flat[j] = orig - step
                f_minus = float(function(*probes))
                flat[j] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise DiagnosticError(f"non-finite value probing input {i} entry {j}")
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = float(a_flat[j])
                worst_abs = max(worst_abs, abs(a - numeric))
                scale_ = max(scale_, abs(a), abs(numeric))
    if scale_ == 0.0:
        return 0.0
    return worst_abs / scale_
