"""Worker and server state machines for two-way quantized, error-compensated Adam.

A worker keeps Adam moments and an error-feedback residual and sends a
quantized update each round; the server averages the decoded updates,
quantizes the average (again with its own residual) and broadcasts it.
Every node subtracts the broadcast from its copy of the iterate.

The numerical kernels (``adam_moments``, ``sgdm_moments``, ``compensate``,
``average_rows``) accept arrays with any leading shape, so a stack of
workers can be advanced with the same floating point operations as one
worker at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from effadam.linalg import RandomStream
from effadam.quantize import (
    QuantizedMessage,
    QuantizerKind,
    decode,
    encode,
    is_stochastic,
    quantize,
    range_violations,
)


class ProtocolError(RuntimeError):
    """A round was driven with the wrong number or shape of messages."""


@dataclass(frozen=True)
class HyperParams:
    """Step-size and averaging constants.

    ``schedule="horizon"`` ties the constants to the horizon ``T``:
    ``theta_t = 1 - theta/T`` and ``alpha_t = alpha/sqrt(T)``.
    ``schedule="constant"`` uses ``theta`` and ``alpha`` directly as the
    per-step values, the usual deep-learning convention.
    """

    alpha: float
    beta: float = 0.9
    theta: float = 0.99
    epsilon: float = 1e-8
    T: int = 5000
    schedule: str = "horizon"
    momentum: float = 0.9

    def __post_init__(self):
        if self.schedule not in ("horizon", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must lie in [0, 1)")
        if not 0.0 < self.theta < 1.0:
            raise ValueError("theta must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError("T must be a positive integer")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.gamma >= 1.0:
            raise ValueError(f"gamma = beta/theta_t = {self.gamma} must be < 1")

    @property
    def theta_t(self) -> float:
        if self.schedule == "horizon":
            return 1.0 - self.theta / self.T
        return self.theta

    @property
    def alpha_t(self) -> float:
        if self.schedule == "horizon":
            return self.alpha / math.sqrt(self.T)
        return self.alpha

    @property
    def gamma(self) -> float:
        return self.beta / self.theta_t


# ---------------------------------------------------------------------------
# kernels


def adam_moments(m, v, g, h: HyperParams):
    """One moment update; returns ``(m', v', alpha_t * m' / sqrt(v'))``."""
    theta_t = h.theta_t
    v = theta_t * v + (1.0 - theta_t) * (g * g)
    m = h.beta * m + (1.0 - h.beta) * g
    return m, v, h.alpha_t * m / np.sqrt(v)


def sgdm_moments(m, g, h: HyperParams):
    m = h.momentum * m + g
    return m, h.alpha_t * m


def compensate(kind: QuantizerKind, raw, e, error_feedback: bool, stream=None):
    """Quantize ``raw + e`` and return ``(q, e')``.

    Without error feedback the residual is dropped and ``e'`` stays zero.
    """
    if error_feedback:
        target = raw + e
        q = quantize(kind, target, stream)
        return q, target - q
    return quantize(kind, raw, stream), np.zeros_like(raw)


def average_rows(rows) -> np.ndarray:
    """Mean over the first axis, summed in ascending index order."""
    acc = np.array(rows[0], dtype=np.float64, copy=True)
    for row in rows[1:]:
        acc = acc + row
    return acc / len(rows)


# ---------------------------------------------------------------------------
# invariant diagnostics


def moment_bound_excess(m, v, h: HyperParams) -> float:
    """max(m^2 - v / ((1-gamma)(1-theta_t))); never positive in exact arithmetic."""
    bound = v / ((1.0 - h.gamma) * (1.0 - h.theta_t))
    return float(np.max(m * m - bound))


def log_sum_term(g, v, h: HyperParams) -> np.ndarray:
    """||sqrt(1-theta_t) g / sqrt(v)||^2 along the last axis."""
    return np.sum((1.0 - h.theta_t) * (g * g) / v, axis=-1)


def log_sum_bound(G: float, t: int, d: int, h: HyperParams) -> float:
    """Pathwise bound on the first ``t`` log-sum terms.

    d * log(1 + G^2 (W_t - 1) / (d eps)) with W_t = theta_t^-t, valid for any
    constant theta_t; G is the largest gradient norm seen so far.
    """
    a = G * G / (d * h.epsilon)
    log_w = -t * math.log(h.theta_t)
    if a == 0.0:
        return 0.0
    if log_w < 600.0:
        return d * math.log1p(a * math.expm1(log_w))
    # W_t beyond e^600: the "+1 - a" correction is below double precision
    return d * (math.log(a) + log_w)


def log_sum_bound_horizon(G: float, d: int, h: HyperParams) -> float:
    """Horizon-schedule closed form d [log(1 + G^2/(eps d)) + theta/(1-theta)]."""
    if h.schedule != "horizon":
        raise ValueError("closed form only holds for the horizon schedule")
    return d * (math.log1p(G * G / (h.epsilon * d)) + h.theta / (1.0 - h.theta))


# ---------------------------------------------------------------------------
# nodes


@dataclass(frozen=True)
class WorkerState:
    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    e: np.ndarray
    quantizer: QuantizerKind
    t: int = 1
    error_feedback: bool = True
    optimizer: str = "adam"
    stream: Optional[RandomStream] = field(default=None, repr=False)
    violations: int = 0

    @property
    def dim(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class ServerState:
    x: np.ndarray
    e: np.ndarray
    quantizer: QuantizerKind
    t: int = 1
    error_feedback: bool = True
    stream: Optional[RandomStream] = field(default=None, repr=False)
    violations: int = 0
    mean_update: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.x.shape[0]


def make_worker(
    x1,
    quantizer: QuantizerKind,
    h: HyperParams,
    *,
    error_feedback: bool = True,
    optimizer: str = "adam",
    stream: Optional[RandomStream] = None,
) -> WorkerState:
    if optimizer not in ("adam", "sgdm"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if is_stochastic(quantizer) and stream is None:
        raise ValueError(f"{quantizer.spec} needs a random stream")
    x1 = np.array(x1, dtype=np.float64)
    d = x1.shape[0]
    return WorkerState(
        x=x1,
        m=np.zeros(d),
        v=np.full(d, h.epsilon),
        e=np.zeros(d),
        quantizer=quantizer,
        error_feedback=error_feedback,
        optimizer=optimizer,
        stream=stream,
    )


def make_server(
    x1, quantizer: QuantizerKind, *, error_feedback: bool = True, stream: Optional[RandomStream] = None
) -> ServerState:
    if is_stochastic(quantizer) and stream is None:
        raise ValueError(f"{quantizer.spec} needs a random stream")
    x1 = np.array(x1, dtype=np.float64)
    return ServerState(
        x=x1, e=np.zeros(x1.shape[0]), quantizer=quantizer, error_feedback=error_feedback, stream=stream
    )


def set_error_feedback(state, enabled: bool):
    """Return ``state`` with error feedback switched on or off.

    Switching off also clears the stored residual, which then stays zero.
    """
    if enabled:
        return replace(state, error_feedback=True)
    return replace(state, error_feedback=False, e=np.zeros_like(state.e))


def _check_grad(s: WorkerState, g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != s.x.shape:
        raise ValueError(f"gradient shape {g.shape} does not match iterate {s.x.shape}")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient has non-finite entries")
    return g


def _send(s: WorkerState, raw: np.ndarray, **changes):
    target = raw + s.e if s.error_feedback else raw
    q, e = compensate(s.quantizer, raw, s.e, s.error_feedback, s.stream)
    s2 = replace(
        s,
        e=e,
        t=s.t + 1,
        violations=s.violations + range_violations(s.quantizer, target),
        **changes,
    )
    return s2, encode(s.quantizer, q), raw


def worker_step(s: WorkerState, h: HyperParams, g) -> tuple[WorkerState, QuantizedMessage, np.ndarray]:
    """Adam worker round: update moments, send Q(alpha_t m/sqrt(v) + e).

    The local iterate is left alone until the broadcast arrives.
    """
    if s.optimizer != "adam":
        raise ValueError("worker_step drives Adam workers; use sgdm_worker_step")
    if s.t > h.T:
        raise ProtocolError(f"worker already ran its {h.T} rounds")
    g = _check_grad(s, g)
    m, v, raw = adam_moments(s.m, s.v, g, h)
    return _send(s, raw, m=m, v=v)


def sgdm_worker_step(s: WorkerState, h: HyperParams, g) -> tuple[WorkerState, QuantizedMessage, np.ndarray]:
    """Heavy-ball worker round: m' = mu m + g, sends Q(alpha_t m' + e)."""
    if s.optimizer != "sgdm":
        raise ValueError("sgdm_worker_step drives SGDM workers")
    if s.t > h.T:
        raise ProtocolError(f"worker already ran its {h.T} rounds")
    g = _check_grad(s, g)
    m, raw = sgdm_moments(s.m, g, h)
    return _send(s, raw, m=m)


def step(s: WorkerState, h: HyperParams, g):
    """Dispatch on the worker's optimizer."""
    if s.optimizer == "adam":
        return worker_step(s, h, g)
    return sgdm_worker_step(s, h, g)


def worker_apply_broadcast(s: WorkerState, msg: QuantizedMessage) -> WorkerState:
    if msg.dim != s.dim:
        raise ValueError(f"broadcast has dim {msg.dim}, worker has {s.dim}")
    return replace(s, x=s.x - decode(msg))


def server_step(s: ServerState, inbox: Sequence[QuantizedMessage], N: int) -> tuple[ServerState, QuantizedMessage]:
    """Average the inbox, broadcast Q_s(mean + e), and move the global iterate."""
    if len(inbox) != N:
        raise ProtocolError(f"expected {N} messages, got {len(inbox)}")
    if any(msg.dim != s.dim for msg in inbox):
        raise ValueError("inbox message dimension does not match the server iterate")
    mean = average_rows([decode(msg) for msg in inbox])
    target = mean + s.e if s.error_feedback else mean
    q, e = compensate(s.quantizer, mean, s.e, s.error_feedback, s.stream)
    s2 = replace(
        s,
        x=s.x - q,
        e=e,
        t=s.t + 1,
        violations=s.violations + range_violations(s.quantizer, target),
        mean_update=mean,
    )
    return s2, encode(s.quantizer, q)
