"""Random streams, vector checks and noise schedules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidRangeError(ValueError):
    """Raised when an argument falls outside its admissible range."""


class NonFiniteError(FloatingPointError):
    """Raised when a vector that must stay finite picks up NaN or Inf."""


def check_finite(x: np.ndarray, what: str = "vector") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite entries")
    return x


def as_vector(x, dim: int | None = None, what: str = "vector") -> np.ndarray:
    """Coerce ``x`` to a float64 array and validate its trailing dimension."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise InvalidRangeError(f"{what} must be at least 1-D")
    if dim is not None and arr.shape[-1] != dim:
        raise InvalidRangeError(f"{what} has dimension {arr.shape[-1]}, expected {dim}")
    return arr


class SeededRng:
    """Counter-based (Philox) random stream.

    Child streams for workers are derived from ``(seed, worker_id)`` so that
    parallel draws never overlap and do not depend on scheduling order.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        self.seed = int(seed) & (2**64 - 1)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence([self.seed, *self.stream])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, worker_id: int) -> "SeededRng":
        return SeededRng(self.seed, (*self.stream, worker_id))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers on ``[low, high]`` inclusive."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def gaussian(rng: SeededRng, dim: int) -> np.ndarray:
    """Draw a standard-normal vector of length ``dim``."""
    if dim < 1:
        raise InvalidRangeError(f"dim must be >= 1, got {dim}")
    return rng.normal(dim)


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete variance-preserving schedule for steps ``t = 1..T``.

    ``alpha``, ``alpha_bar`` and ``lambda_w`` are stored 0-based, so
    ``alpha_bar[0]`` is the value at ``t = 1``. Use :meth:`abar` for
    1-based lookups that also accept ``t = 0`` (clean data, value 1).
    """

    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    lambda_w: np.ndarray
    kind: str = "linear_beta"
    beta_min: float = 0.0
    beta_max: float = 0.0
    _abar_ext: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ext = np.concatenate([[1.0], self.alpha_bar])
        ext.setflags(write=False)
        object.__setattr__(self, "_abar_ext", ext)
        for arr in (self.alpha, self.alpha_bar, self.lambda_w):
            arr.setflags(write=False)

    def abar(self, t):
        """Cumulative retention at step(s) ``t`` in ``[0, T]``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise InvalidRangeError(f"timestep outside [0, {self.T}]")
        return self._abar_ext[t]

    def weight(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise InvalidRangeError(f"timestep outside [1, {self.T}]")
        return self.lambda_w[t - 1]

    def metadata(self) -> dict:
        return {"T": self.T, "kind": self.kind,
                "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_schedule(T: int, kind: str = "linear_beta", beta_min: float = 1e-4,
                  beta_max: float = 0.02) -> NoiseSchedule:
    """Build a schedule with unit loss weights.

    ``linear_beta`` spaces the per-step variances linearly between
    ``beta_min`` and ``beta_max``. ``cosine`` uses the squared-cosine
    cumulative curve, with each per-step beta clipped to
    ``[beta_min, beta_max]``.
    """
    if T < 2:
        raise InvalidRangeError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidRangeError(
            f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear_beta":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise InvalidRangeError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - betas
    alpha_bar = np.cumprod(alpha)
    if not np.all(np.diff(alpha_bar) < 0) or alpha_bar[-1] <= 0.0:
        raise InvalidRangeError("schedule collapsed numerically; lower beta_max or T")
    if alpha_bar[0] < 0.99:
        raise InvalidRangeError(
            f"first step keeps only {alpha_bar[0]:.4f} of the signal (need >= 0.99); "
            "lower beta_min or use more steps")
    return NoiseSchedule(T=T, alpha=alpha, alpha_bar=alpha_bar,
                         lambda_w=np.ones(T), kind=kind,
                         beta_min=float(beta_min), beta_max=float(beta_max))

