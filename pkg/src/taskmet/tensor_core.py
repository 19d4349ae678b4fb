"""Flat named parameter containers and exact derivative products.

Everything downstream (inner fits, implicit gradients, the tri-level RL
variant) is built on four queries against scalar-valued functions of one
or two parameter vectors: value, gradient, Hessian-vector product, and
mixed second-order product. All arithmetic is float64; non-finite results
raise immediately with the offending operation named instead of silently
propagating NaNs into a training run.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from collections.abc import Callable, Iterable

import torch

DTYPE = torch.float64


class EvaluationError(RuntimeError):
    """A derivative or value query produced a non-finite result."""


def check_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise EvaluationError(f"non-finite values produced by '{op}'")
    return t


def as_tensor(data, dtype=DTYPE) -> torch.Tensor:
    return torch.as_tensor(data, dtype=dtype)


def child_seed(seed: int, tag: str) -> int:
    """Stable derived seed for an independent random stream.

    Keeping streams separate (data, init, implicit batches, env, ...) is what
    makes the reduction tests bit-exact: disabling one consumer must not
    shift the draws seen by another.
    """
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63 - 1)


def generator(seed: int, tag: str = "") -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(child_seed(seed, tag) if tag else seed)
    return g


class ParamVector:
    """Ordered named segments of float64 tensors, flattenable to one vector.

    Segment names are unique; flatten/unflatten round-trips exactly. Supports
    the small amount of vector arithmetic the solvers need.
    """

    def __init__(self, segments: "OrderedDict[str, torch.Tensor] | dict[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]]"):
        items = segments.items() if isinstance(segments, dict) else segments
        self.segments: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for name, t in items:
            if name in self.segments:
                raise ValueError(f"duplicate segment name {name!r}")
            self.segments[name] = torch.as_tensor(t, dtype=DTYPE)

    # -- structure ---------------------------------------------------------

    def names(self) -> list[str]:
        return list(self.segments)

    def tensors(self) -> list[torch.Tensor]:
        return list(self.segments.values())

    @property
    def numel(self) -> int:
        return sum(t.numel() for t in self.segments.values())

    def flatten(self) -> torch.Tensor:
        return torch.cat([t.reshape(-1) for t in self.segments.values()])

    def unflatten_like(self, flat: torch.Tensor) -> "ParamVector":
        if flat.numel() != self.numel:
            raise ValueError(f"length {flat.numel()} != {self.numel}")
        out, i = OrderedDict(), 0
        for name, t in self.segments.items():
            out[name] = flat[i : i + t.numel()].reshape(t.shape)
            i += t.numel()
        return ParamVector(out)

    def clone(self) -> "ParamVector":
        return ParamVector(OrderedDict((k, v.detach().clone()) for k, v in self.segments.items()))

    def detach(self) -> "ParamVector":
        return ParamVector(OrderedDict((k, v.detach()) for k, v in self.segments.items()))

    def requires_grad_(self, flag: bool = True) -> "ParamVector":
        for t in self.segments.values():
            t.requires_grad_(flag)
        return self

    def zeros_like(self) -> "ParamVector":
        return ParamVector(OrderedDict((k, torch.zeros_like(v)) for k, v in self.segments.items()))

    # -- arithmetic --------------------------------------------------------

    def _binary(self, other: "ParamVector", fn) -> "ParamVector":
        if self.names() != other.names():
            raise ValueError("segment structure mismatch")
        return ParamVector(
            OrderedDict((k, fn(self.segments[k], other.segments[k])) for k in self.segments)
        )

    def __add__(self, other: "ParamVector") -> "ParamVector":
        return self._binary(other, torch.add)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        return self._binary(other, torch.sub)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(OrderedDict((k, v * scalar) for k, v in self.segments.items()))

    __rmul__ = __mul__

    def dot(self, other: "ParamVector") -> torch.Tensor:
        if self.names() != other.names():
            raise ValueError("segment structure mismatch")
        return sum(
            (self.segments[k] * other.segments[k]).sum() for k in self.segments
        )

    def norm(self) -> float:
        return float(self.flatten().norm())

    def __repr__(self) -> str:
        segs = ", ".join(f"{k}{tuple(t.shape)}" for k, t in self.segments.items())
        return f"ParamVector({segs})"


def params_of(module: torch.nn.Module) -> ParamVector:
    """Snapshot of a module's named parameters as a detached ParamVector."""
    return ParamVector(OrderedDict((n, p.detach().clone()) for n, p in module.named_parameters()))


def load_params(module: torch.nn.Module, pv: ParamVector) -> None:
    with torch.no_grad():
        for n, p in module.named_parameters():
            p.copy_(pv.segments[n])


# -- derivative queries -----------------------------------------------------
#
# Scalar functions take one or two ParamVectors whose segments carry
# requires_grad; they must build the output with torch ops so the tape
# records second-order structure.

ScalarFn = Callable[..., torch.Tensor]


def _prepared(p: ParamVector) -> ParamVector:
    q = p.clone()
    q.requires_grad_(True)
    return q


def _grad_list(out, tensors, create_graph=False, retain_graph=None):
    if not (isinstance(out, torch.Tensor) and out.requires_grad):
        # constant w.r.t. the inputs (e.g. grad of a linear function)
        return [torch.zeros_like(t) for t in tensors]
    grads = torch.autograd.grad(
        out, tensors, create_graph=create_graph, retain_graph=retain_graph, allow_unused=True
    )
    return [
        g if g is not None else torch.zeros_like(t)
        for g, t in zip(grads, tensors)
    ]


def value(f: ScalarFn, *ps: ParamVector) -> float:
    """Evaluate f at the given parameter vectors."""
    out = f(*[p.detach() for p in ps])
    check_finite(out, "value")
    return float(out)


def grad(f: ScalarFn, p: ParamVector) -> ParamVector:
    """Reverse-mode gradient of scalar f with the same segment structure as p."""
    p_ = _prepared(p)
    out = f(p_)
    check_finite(out, "grad (forward value)")
    gs = _grad_list(out, p_.tensors())
    res = ParamVector(OrderedDict(zip(p_.names(), gs)))
    check_finite(res.flatten(), "grad")
    return res.detach()


def hvp(f: ScalarFn, p: ParamVector, v: ParamVector) -> ParamVector:
    """Exact Hessian-vector product (d^2 f / dp^2) v via nested differentiation.

    The Hessian is never materialized; cost is one extra backward pass.
    """
    if p.names() != v.names():
        raise ValueError("v must share p's segment structure")
    p_ = _prepared(p)
    out = f(p_)
    check_finite(out, "hvp (forward value)")
    gs = _grad_list(out, p_.tensors(), create_graph=True)
    inner = sum((g * vt).sum() for g, vt in zip(gs, v.tensors()))
    hs = _grad_list(inner, p_.tensors())
    res = ParamVector(OrderedDict(zip(p_.names(), hs)))
    check_finite(res.flatten(), "hvp")
    return res.detach()


def mixed_grad(f: ScalarFn, p: ParamVector, q: ParamVector, v: ParamVector) -> ParamVector:
    """v^T d^2 f / (dp dq), returned with q's segment structure.

    Computed as the q-gradient of the directional derivative v^T grad_p f.
    """
    if p.names() != v.names():
        raise ValueError("v must share p's segment structure")
    p_, q_ = _prepared(p), _prepared(q)
    out = f(p_, q_)
    check_finite(out, "mixed_grad (forward value)")
    gs = _grad_list(out, p_.tensors(), create_graph=True)
    inner = sum((g * vt).sum() for g, vt in zip(gs, v.tensors()))
    ms = _grad_list(inner, q_.tensors())
    res = ParamVector(OrderedDict(zip(q_.names(), ms)))
    check_finite(res.flatten(), "mixed_grad")
    return res.detach()


def quadratic_form(resid: torch.Tensor, mat: torch.Tensor) -> torch.Tensor:
    """Batched r^T M r for residuals (B, n) against metrics (B, n, n) or (n, n)."""
    if mat.dim() == 2:
        mr = resid @ mat.T
    else:
        mr = torch.einsum("bij,bj->bi", mat, resid)
    return (resid * mr).sum(dim=-1)
