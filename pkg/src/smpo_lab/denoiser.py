"""Noise-prediction network with exact parameter gradients.

The network is a plain MLP over ``[x_t, c, emb(t)]``. Forward passes without
a tape return numpy arrays; passes recorded on a :class:`Tape` return
:class:`~smpo_lab.autodiff.Node` objects so that objectives built on top can
be differentiated with :func:`backward`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import GraphReuseError, Node, backprop, value_of
from .numerics import InvalidRangeError, SeededRng, check_finite

ACTIVATIONS = {"tanh": kernels.TANH, "silu": kernels.SILU}


class DimensionMismatchError(InvalidRangeError):
    pass


class ArchitectureMismatchError(ValueError):
    pass


def timestep_embedding(t, width: int, T: int) -> np.ndarray:
    """Sinusoidal features of ``t`` (rescaled to a 1000-step clock)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * (1000.0 / T)
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class DenoiserModel:
    """MLP noise predictor ``eps(x_t, t, c)``.

    ``null_condition`` is the condition vector reserved for unconditional
    predictions; datasets must keep their real conditions away from it.
    """

    def __init__(self, data_dim: int, cond_dim: int, T: int, hidden_dim: int = 64,
                 depth: int = 3, activation: str = "tanh", t_embedding: int = 16,
                 seed: int = 0, init: str = "normal", null_condition=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if t_embedding % 2:
            raise ValueError("t_embedding must be even")
        if depth < 1 or hidden_dim < 1:
            raise ValueError("depth and hidden_dim must be positive")
        self.data_dim = int(data_dim)
        self.cond_dim = int(cond_dim)
        self.T = int(T)
        self.hidden_dim = int(hidden_dim)
        self.depth = int(depth)
        self.activation = activation
        self.t_embedding = int(t_embedding)
        self.null_condition = (np.zeros(cond_dim) if null_condition is None
                               else np.asarray(null_condition, dtype=np.float64).copy())
        sizes = [self.in_dim] + [self.hidden_dim] * self.depth + [self.data_dim]
        rng = SeededRng(seed, (0xDE,))
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            if init == "zeros":
                W = np.zeros((a, b))
            else:
                gain = 1.0 if i < len(sizes) - 2 else 0.1
                W = rng.normal((a, b)) * (gain / np.sqrt(a))
            self.weights.append(np.ascontiguousarray(W))
            self.biases.append(np.zeros(b))

    @property
    def in_dim(self) -> int:
        return self.data_dim + self.cond_dim + self.t_embedding

    @property
    def act_code(self) -> int:
        return ACTIVATIONS[self.activation]

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def architecture(self) -> dict:
        return {"data_dim": self.data_dim, "cond_dim": self.cond_dim, "T": self.T,
                "hidden_dim": self.hidden_dim, "depth": self.depth,
                "activation": self.activation, "t_embedding": self.t_embedding}

    def same_architecture(self, other: "DenoiserModel") -> bool:
        return self.architecture() == other.architecture()

    def copy(self) -> "DenoiserModel":
        new = object.__new__(DenoiserModel)
        new.__dict__.update(self.__dict__)
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        new.null_condition = self.null_condition.copy()
        return new

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        i = 0
        for p in self.parameters():
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def _inputs(self, x, t, c):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x2 = np.atleast_2d(x)
        if x2.shape[1] != self.data_dim:
            raise DimensionMismatchError(
                f"x has dimension {x2.shape[1]}, model expects {self.data_dim}")
        c2 = np.atleast_2d(np.asarray(c, dtype=np.float64))
        if c2.shape[1] != self.cond_dim:
            raise DimensionMismatchError(
                f"c has dimension {c2.shape[1]}, model expects {self.cond_dim}")
        n = x2.shape[0]
        if c2.shape[0] == 1 and n > 1:
            c2 = np.broadcast_to(c2, (n, self.cond_dim))
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise InvalidRangeError(f"timestep outside [0, {self.T}]")
        temb = timestep_embedding(np.broadcast_to(t, (n,)), self.t_embedding, self.T)
        return single, n, c2, temb

    def forward(self, x, t, c) -> np.ndarray:
        """Untracked prediction; accepts single vectors or ``(B, d)`` blocks."""
        single, n, c2, temb = self._inputs(x, t, c)
        inp = np.concatenate([np.atleast_2d(x), c2, temb], axis=1)
        out, _ = kernels.mlp_forward(self.weights, self.biases, inp, self.act_code)
        return out[0] if single else out

    def predict(self, x, t, c, w: float = 1.0) -> np.ndarray:
        """Guided prediction ``e_u + w (e_c - e_u)`` with exact ``w`` in {0, 1}."""
        if w == 1.0:
            return self.forward(x, t, c)
        uncond = self.forward(x, t, self.null_condition)
        if w == 0.0:
            return uncond
        return uncond + w * (self.forward(x, t, c) - uncond)

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {"architecture": self.architecture(),
                "null_condition": self.null_condition.tolist(),
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserModel":
        arch = d["architecture"]
        model = cls(**arch, init="zeros", null_condition=d.get("null_condition"))
        for i, (w, b) in enumerate(zip(d["weights"], d["biases"])):
            W = np.asarray(w, dtype=np.float64)
            B = np.asarray(b, dtype=np.float64)
            if W.shape != model.weights[i].shape or B.shape != model.biases[i].shape:
                raise ArchitectureMismatchError(
                    f"layer {i}: stored shape {W.shape}/{B.shape} does not match "
                    f"{model.weights[i].shape}/{model.biases[i].shape}")
            model.weights[i] = np.ascontiguousarray(W)
            model.biases[i] = B
        return model


def eps_predict(model: DenoiserModel, x_t, t, c) -> np.ndarray:
    """Noise prediction for ``x_t`` at step ``t`` under condition ``c``."""
    return check_finite(model.forward(x_t, t, c), "eps prediction")


def eps_predict_guided(model: DenoiserModel, x_t, t, c, w: float) -> np.ndarray:
    return check_finite(model.predict(x_t, t, c, w), "guided eps prediction")


@dataclass
class GradientBundle:
    """Gradients per parameter, in the order of ``model.parameters()``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    loss: float

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.arrays()])

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.arrays())))

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle([a + b for a, b in zip(self.weights, other.weights)],
                              [a + b for a, b in zip(self.biases, other.biases)],
                              self.loss + other.loss)

    def scaled(self, s: float) -> "GradientBundle":
        return GradientBundle([a * s for a in self.weights],
                              [a * s for a in self.biases], self.loss * s)

    @classmethod
    def zeros_like(cls, model: DenoiserModel) -> "GradientBundle":
        return cls([np.zeros_like(w) for w in model.weights],
                   [np.zeros_like(b) for b in model.biases], 0.0)


class Tape:
    """Records network calls of one trainable model for later differentiation.

    Calls on any other model (e.g. the frozen reference) are evaluated as
    constants.
    """

    def __init__(self, model: DenoiserModel):
        self.model = model
        self.calls: list[Node] = []
        self.used = False

    def eps(self, model: DenoiserModel, x, t, c, w: float = 1.0):
        """Prediction of ``model`` at ``x``, recorded when it can carry gradient.

        Calls on the tape's model are always recorded. Calls on other models
        (the frozen reference) are recorded only when ``x`` is itself a tape
        node, and then contribute input gradients but no parameter gradients.
        """
        trainable = model is self.model
        if not trainable and not isinstance(x, Node):
            return model.predict(x, t, c, w)
        if w == 1.0:
            return self._call(model, x, t, c, trainable)
        uncond = self._call(model, x, t, model.null_condition, trainable)
        if w == 0.0:
            return uncond
        return uncond + (self._call(model, x, t, c, trainable) - uncond) * w

    def _call(self, model: DenoiserModel, x, t, c, trainable: bool) -> Node:
        xv = value_of(x)
        _, n, c2, temb = model._inputs(xv, t, c)
        inp = np.concatenate([np.atleast_2d(xv), c2, temb], axis=1)
        out, cache = kernels.mlp_forward(model.weights, model.biases, inp, model.act_code)
        x_tracked = isinstance(x, Node)
        d = model.data_dim
        node = None

        def bw(g):
            gws, gbs, ginp = kernels.mlp_backward(
                model.weights, cache, np.atleast_2d(g), model.act_code, x_tracked)
            if trainable:
                node._param_grads = (gws, gbs)
            gx = None
            if x_tracked:
                gx = ginp[:, :d].reshape(np.shape(xv))
            return (gx,)

        if xv.ndim == 1:
            out = out[0]
        node = _NetNode(out, (x,), bw)
        if trainable:
            self.calls.append(node)
        return node


class _NetNode(Node):
    __slots__ = ("_param_grads",)

    def __init__(self, value, parents, backward_fn):
        super().__init__(value, parents, backward_fn)
        self._param_grads = None


class LossGraph:
    """Scalar loss recorded on a tape, plus optional per-pair diagnostics."""

    def __init__(self, root, tape: Tape, breakdown=None):
        self.root = root
        self.tape = tape
        self.breakdown = breakdown

    @property
    def value(self) -> float:
        return float(value_of(self.root))


def backward(model: DenoiserModel, graph: LossGraph) -> GradientBundle:
    """Exact gradient of ``graph``'s scalar with respect to ``model``'s parameters."""
    tape = graph.tape
    if tape.model is not model:
        raise ArchitectureMismatchError("graph was recorded for a different model")
    if tape.used:
        raise GraphReuseError("loss graph already differentiated; re-run forward")
    tape.used = True
    bundle = GradientBundle.zeros_like(model)
    bundle.loss = graph.value
    if isinstance(graph.root, Node):
        backprop(graph.root)
        # ordered summation keeps results independent of graph traversal order
        for call in tape.calls:
            if call._param_grads is None:
                continue
            gws, gbs = call._param_grads
            for i in range(len(gws)):
                bundle.weights[i] += gws[i]
                bundle.biases[i] += gbs[i]
    for g in bundle.arrays():
        check_finite(g, "gradient")
    return bundle
