"""Scalar type policy, seeded randomness, and numerical verification utilities.

All tensors in this package are plain numpy arrays in the module-wide real
dtype (float32 by default, float64 when NARPQ_DTYPE=float64 is set before
import). Gradients are computed by hand-written backward passes in the layer
modules; this module supplies the stable cross-entropy primitive, the
central-difference gradient checker that validates them, and the weighted
sampler used by the refinement decoder.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

_DTYPE_NAMES = {"float32": np.float32, "float64": np.float64}
_dtype_env = os.environ.get("NARPQ_DTYPE", "float32")
if _dtype_env not in _DTYPE_NAMES:
    raise RuntimeError(f"NARPQ_DTYPE must be one of {sorted(_DTYPE_NAMES)}, got {_dtype_env!r}")

DTYPE = _DTYPE_NAMES[_dtype_env]


class ContractError(RuntimeError):
    """A caller-supplied callable violated its contract (e.g. non-determinism)."""


class TrainingError(RuntimeError):
    """Training diverged; carries diagnostic state in .diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def as_real(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Rng:
    """Seeded random stream; identical seed + call sequence gives identical output.

    Thin wrapper over numpy's PCG64 so the seed is explicit and child streams
    are derived deterministically.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self) -> "Rng":
        # Advances this stream; two child() calls give independent streams.
        return Rng(int(self._gen.integers(0, 2**63 - 1)))

    def random(self, size=None):
        return self._gen.random(size=size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size=size)

    def normal(self, scale: float, size) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=size).astype(DTYPE)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)


@dataclass
class Param:
    """A trainable tensor paired with its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    name: str = ""

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        assert self.grad.shape == self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax_xent(logits: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of a single categorical against `target`, with gradient.

    Returns (loss, grad) where loss = -log softmax(logits)[target] and
    grad = softmax(logits) - onehot(target). Max-subtracted for stability;
    the scalar itself is evaluated in float64 so near-certain predictions
    keep their tiny positive losses.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ValueError(f"logits must be a vector of >= 2 classes, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logit")
    target = int(target)
    if not 0 <= target < logits.shape[0]:
        raise IndexError(f"target {target} out of range for {logits.shape[0]} classes")
    logp = log_softmax(logits)
    grad = np.exp(logp)
    grad[target] -= 1.0
    return float(-logp[target]), grad.astype(DTYPE)


def grad_check(f, params: list[Param], eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` takes no arguments, returns a scalar loss, and as a side effect leaves
    the analytic gradient of that loss in each param's .grad. Every scalar in
    every param is perturbed by +-eps. The error measure is
    |analytic - numeric| / max(1, |analytic|, |numeric|), so small gradients
    are compared absolutely.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-6, 1e-2], got {eps}")
    loss_a = float(f())
    analytic = [p.grad.copy() for p in params]
    loss_b = float(f())
    if loss_a != loss_b:
        raise ContractError(f"f is not deterministic: {loss_a!r} != {loss_b!r}")

    max_err = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(flat[i])
            loss_hi = float(f())
            flat[i] = orig - eps
            lo = float(flat[i])
            loss_lo = float(f())
            flat[i] = orig
            # use the actually-representable perturbation to divide out
            # float32 rounding of orig +- eps
            numeric = (loss_hi - loss_lo) / (hi - lo)
            a = float(gflat[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > max_err:
                max_err = err
    return max_err


def multinomial_without_replacement(weights, k: int, rng: Rng) -> list[int]:
    """Draw k distinct indices, iterating renormalized categorical draws.

    Each draw picks an index with probability proportional to its remaining
    weight, then removes it from the pool.
    """
    w = np.asarray(weights, dtype=np.float64).copy()
    if w.ndim != 1:
        raise ValueError("weights must be a vector")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    support = int(np.count_nonzero(w > 0))
    if support == 0:
        raise ValueError("all weights are zero")
    k = int(k)
    if k < 0 or k > support:
        raise ValueError(f"k={k} exceeds the {support} strictly positive weights")

    out: list[int] = []
    for _ in range(k):
        cdf = np.cumsum(w)
        u = rng.random() * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        idx = min(idx, w.size - 1)
        while w[idx] == 0.0:  # guard against landing on a removed index via rounding
            idx -= 1
        out.append(idx)
        w[idx] = 0.0
    return out
