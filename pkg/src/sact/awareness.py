"""Per-frame awareness selectors and the gating function built on them.

A selector looks at each frame together with the clip's temporal mean and
emits a per-feature weight in (0, 1)::

    omega_t = sigmoid(Z1 relu(Z2 x_t + Z3 mean_t(x)))

Training multiplies features by ``omega`` directly. At inference weights
below the threshold are zeroed, so whole frames can drop out of attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import param
from .tensor import DimensionError, Tensor

DEFAULT_THRESHOLD = 0.05
LOGIT_LIMIT = 30.0  # keeps sigmoid strictly inside (0, 1) at f64


class GateConfigError(ValueError):
    pass


@dataclass
class AwarenessParams:
    """Z1 (d x g) weights the hidden code, Z2 (g x d) reads the frame,
    Z3 (g x d) reads the clip-level context."""

    z1: Tensor
    z2: Tensor
    z3: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, dim: int, hidden: int | None = None):
        g = hidden or max(1, dim // 2)
        return cls(
            param(rng.normal(0.0, 1.0 / np.sqrt(g), size=(dim, g))),
            param(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(g, dim))),
            param(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(g, dim))),
        )

    @property
    def dim(self) -> int:
        return self.z1.shape[0]

    def check(self, width: int) -> None:
        d, g = self.z1.shape
        if self.z2.shape != (g, d) or self.z3.shape != (g, d):
            raise DimensionError(
                f"gate matrices disagree: z1 {self.z1.shape}, z2 {self.z2.shape}, z3 {self.z3.shape}"
            )
        if d != width:
            raise DimensionError(f"gate built for width {d} applied to width {width}")


@dataclass
class AwarenessGate:
    omega: Tensor
    threshold: float = DEFAULT_THRESHOLD

    @property
    def keep(self) -> np.ndarray:
        return self.omega.data >= self.threshold

    @property
    def sparse_beta(self) -> Tensor:
        return T.mul(self.omega, self.keep.astype(np.float64))


def compute_gate(
    x: Tensor,
    params: AwarenessParams,
    threshold: float = DEFAULT_THRESHOLD,
    override: float | None = None,
) -> AwarenessGate:
    """``override`` pins every selector to a constant (diagnostics and equivalence tests)."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"gate input must be frames x features, got {x.shape}")
    params.check(x.shape[1])
    if override is not None:
        return AwarenessGate(Tensor(np.full(x.shape, float(override))), threshold)
    context = T.reshape(T.matmul(T.reshape(T.mean_over_axis(x, 0), (1, -1)), T.transpose(params.z3)), (-1,))
    hidden = T.relu(T.add(T.matmul(x, T.transpose(params.z2)), context))
    logits = T.clip(T.matmul(hidden, T.transpose(params.z1)), -LOGIT_LIMIT, LOGIT_LIMIT)
    return AwarenessGate(T.sigmoid(logits), threshold)


def apply_gate(x: Tensor, gate: AwarenessGate, training: bool = True) -> Tensor:
    return T.mul(x, gate.omega if training else gate.sparse_beta)


def apply_phi_single(
    x: Tensor,
    params: AwarenessParams,
    *,
    training: bool = True,
    threshold: float = DEFAULT_THRESHOLD,
    override: float | None = None,
) -> tuple[Tensor, AwarenessGate]:
    gate = compute_gate(x, params, threshold, override)
    return apply_gate(x, gate, training), gate


def apply_phi_joint(
    u: Tensor,
    v: Tensor | None,
    params_u: AwarenessParams,
    params_v: AwarenessParams | None,
    *,
    training: bool = True,
    threshold: float = DEFAULT_THRESHOLD,
    override: float | None = None,
) -> tuple[Tensor, list[AwarenessGate]]:
    """Gate each stream with its own selector, then join along features."""
    gu, gate_u = apply_phi_single(u, params_u, training=training, threshold=threshold, override=override)
    if v is None:
        return gu, [gate_u]
    if u.shape[0] != v.shape[0]:
        raise DimensionError(f"streams have {u.shape[0]} and {v.shape[0]} frames")
    if params_v is None:
        raise GateConfigError("second stream given without its gate parameters")
    gv, gate_v = apply_phi_single(v, params_v, training=training, threshold=threshold, override=override)
    return T.concat([gu, gv], axis=1), [gate_u, gate_v]


def merge_gates(gates: list[AwarenessGate]) -> AwarenessGate:
    """Join gates over the same frames into one gate across all their features."""
    if len(gates) == 1:
        return gates[0]
    return AwarenessGate(T.concat([g.omega for g in gates], axis=1), gates[0].threshold)


def frame_beta(gate: AwarenessGate) -> tuple[np.ndarray, int]:
    """Per-frame utility (row mean of the sparse gate) and the kept-frame count m."""
    beta = gate.sparse_beta.data.mean(axis=1)
    return beta, int(np.count_nonzero(beta > 0))


def gate_l1_penalty(gates: list[AwarenessGate], lam: float) -> Tensor:
    if lam < 0:
        raise GateConfigError(f"gate penalty weight must be non-negative, got {lam}")
    if not gates:
        return Tensor(0.0)
    total = sum(g.omega.size for g in gates)
    sums = [T.reduce_sum(g.omega) for g in gates]
    acc = sums[0]
    for s in sums[1:]:
        acc = T.add(acc, s)
    return T.scale(acc, lam / total)
