"""Small differentiable networks over a flat float64 parameter vector.

Every probe in the package talks to a model through three calls:
``forward_loss``, ``gradient`` and ``hessian_vector_product``.  Parameters
live in one contiguous vector so that interpolation, projection and masking
are plain vector arithmetic.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from implab.exceptions import DimensionError, NonFiniteError

ACTIVATIONS = {"relu": torch.relu, "tanh": torch.tanh}


@dataclass(frozen=True)
class Slot:
    name: str
    shape: tuple
    offset: int
    prunable: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


class Layout:
    """Offset table of a flat parameter vector."""

    def __init__(self, slots: Sequence[Slot]):
        self.slots = tuple(slots)
        self.size = self.slots[-1].stop if self.slots else 0
        prunable = np.zeros(self.size, dtype=bool)
        for s in self.slots:
            if s.prunable:
                prunable[s.offset:s.stop] = True
        prunable.setflags(write=False)
        self.prunable = prunable
        self.prunable_index = np.flatnonzero(prunable)

    @classmethod
    def flat(cls, size: int, prunable: bool = True) -> "Layout":
        return cls([Slot("w", (size,), 0, prunable)])

    @property
    def n_prunable(self) -> int:
        return int(self.prunable_index.size)

    def slot_of(self, index: int) -> Slot:
        for s in self.slots:
            if s.offset <= index < s.stop:
                return s
        raise IndexError(index)

    def __eq__(self, other):
        return isinstance(other, Layout) and self.slots == other.slots

    def __hash__(self):
        return hash(self.slots)

    def __repr__(self):
        return f"Layout(D={self.size}, prunable={self.n_prunable}, slots={len(self.slots)})"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and initialization seed of a small classifier.

    ``widths`` are the hidden fully-connected widths.  For ``kind="conv"``
    the convolutional ``channels`` (3x3, same padding, each followed by a 2x2
    max-pool) come first and ``input_shape`` must be ``(C, H, W)``.
    """

    kind: str = "mlp"
    input_shape: tuple = (2,)
    widths: tuple = (64, 64)
    channels: tuple = ()
    activation: str = "relu"
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.kind not in ("mlp", "conv"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.kind == "conv" and len(self.input_shape) != 3:
            raise ValueError("conv models need input_shape=(C, H, W)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass
class ParamVector:
    """Flat float64 parameter vector with its layout."""

    values: np.ndarray
    layout: Layout = field(repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.layout.size:
            raise DimensionError(
                f"parameter vector of length {self.values.size} does not match layout D={self.layout.size}"
            )

    @classmethod
    def from_array(cls, values, prunable=None) -> "ParamVector":
        """Wrap a bare array; every entry is prunable unless ``prunable`` says otherwise."""
        values = np.asarray(values, dtype=np.float64)
        if prunable is None:
            return cls(values, Layout.flat(values.size))
        prunable = np.asarray(prunable, dtype=bool)
        slots, start = [], 0
        for i in range(1, values.size + 1):
            if i == values.size or prunable[i] != prunable[start]:
                slots.append(Slot(f"s{len(slots)}", (i - start,), start, bool(prunable[start])))
                start = i
        return cls(values, Layout(slots))

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def prunable_values(self) -> np.ndarray:
        return self.values[self.layout.prunable_index]

    def replace(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def dot(self, other: "ParamVector") -> float:
        return float(np.dot(self.values, _values(other)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def lerp(self, other: "ParamVector", gamma: float) -> "ParamVector":
        """Point ``(1 - gamma) * self + gamma * other`` on the segment.

        Computed as ``self + gamma * (other - self)`` so equal endpoints give
        exactly ``self``; ``gamma`` of 0 or 1 returns the endpoint itself.
        """
        b = _values(other)
        if gamma == 1:
            return self.replace(b.copy())
        return self.replace(self.values + gamma * (b - self.values))

    def __add__(self, other):
        return self.replace(self.values + _values(other))

    def __sub__(self, other):
        return self.replace(self.values - _values(other))

    def __mul__(self, scalar):
        return self.replace(self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return self.replace(-self.values)

    def layer(self, name: str) -> np.ndarray:
        for s in self.layout.slots:
            if s.name == name:
                return self.values[s.offset:s.stop].reshape(s.shape)
        raise KeyError(name)


def _values(x):
    return x.values if isinstance(x, ParamVector) else np.asarray(x, dtype=np.float64)


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] < 1:
            raise ValueError("a batch needs at least one example")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DimensionError("labels must be a vector with one entry per example")

    def __len__(self):
        return self.inputs.shape[0]

    def tensors(self):
        return torch.from_numpy(self.inputs), torch.from_numpy(self.labels)


def _tensors(batch):
    return (None, None) if batch is None else batch.tensors()


def _check_batch(batch: Batch, n_classes: int):
    if batch.labels.size and (batch.labels.min() < 0 or batch.labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")


class Objective:
    """Shared interface of everything that exposes a loss surface over a ParamVector."""

    layout: Layout

    def init(self) -> ParamVector:
        raise NotImplementedError

    def _check(self, params: ParamVector):
        if _values(params).size != self.layout.size:
            raise DimensionError(
                f"expected {self.layout.size} parameters, got {_values(params).size}"
            )

    def loss_t(self, theta: torch.Tensor, X: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def error_t(self, theta: torch.Tensor, X: torch.Tensor, y: torch.Tensor) -> float:
        raise NotImplementedError

    def forward_loss(self, params: ParamVector, batch: Batch) -> tuple[float, float]:
        """Return ``(mean loss, error rate)`` on ``batch``."""
        self._check(params)
        X, y = _tensors(batch)
        theta = torch.from_numpy(_values(params))
        with torch.no_grad():
            return float(self.loss_t(theta, X, y)), self.error_t(theta, X, y)

    def gradient(self, params: ParamVector, batch: Batch) -> ParamVector:
        self._check(params)
        X, y = _tensors(batch)
        theta = torch.tensor(_values(params), requires_grad=True)
        (g,) = torch.autograd.grad(self.loss_t(theta, X, y), theta)
        return ParamVector(g.numpy(), self.layout)

    def hessian_vector_product(self, params: ParamVector, batch: Batch, v) -> ParamVector:
        """Exact ``H v`` by differentiating ``<grad, v>`` a second time."""
        self._check(params)
        v = _values(v)
        if v.size != self.layout.size:
            raise DimensionError("direction has the wrong dimension")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError("direction contains non-finite entries")
        X, y = _tensors(batch)
        theta = torch.tensor(_values(params), requires_grad=True)
        (g,) = torch.autograd.grad(self.loss_t(theta, X, y), theta, create_graph=True)
        (hv,) = torch.autograd.grad(g @ torch.from_numpy(v), theta)
        out = hv.numpy()
        self._raise_non_finite(out, "Hessian-vector product")
        return ParamVector(out, self.layout)

    hvp = hessian_vector_product

    def _raise_non_finite(self, values: np.ndarray, what: str):
        bad = ~np.isfinite(values)
        if bad.any():
            slot = self.layout.slot_of(int(np.flatnonzero(bad)[0]))
            raise NonFiniteError(f"{what} is non-finite in layer {slot.name!r}", layer=slot.name)


class Network(Objective):
    """Cross-entropy classifier (MLP or small conv net) built from a ModelSpec."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        slots, offset = [], 0
        self._conv = []
        self._dense = []
        in_ch = spec.input_shape[0] if spec.kind == "conv" else None
        spatial = list(spec.input_shape[1:]) if spec.kind == "conv" else None
        if spec.kind == "conv":
            for i, ch in enumerate(spec.channels):
                w = Slot(f"conv{i}.weight", (ch, in_ch, 3, 3), offset, True)
                offset = w.stop
                b = Slot(f"conv{i}.bias", (ch,), offset, False)
                offset = b.stop
                slots += [w, b]
                self._conv.append((w, b))
                in_ch = ch
                spatial = [s // 2 for s in spatial]
                if min(spatial) < 1:
                    raise ValueError("too many pooling stages for the input size")
            fan_in = in_ch * int(np.prod(spatial))
        else:
            fan_in = int(np.prod(spec.input_shape))
        for i, width in enumerate(spec.widths + (spec.n_classes,)):
            w = Slot(f"fc{i}.weight", (width, fan_in), offset, True)
            offset = w.stop
            b = Slot(f"fc{i}.bias", (width,), offset, False)
            offset = b.stop
            slots += [w, b]
            self._dense.append((w, b))
            fan_in = width
        self.layout = Layout(slots)
        self._act = ACTIVATIONS[spec.activation]

    @property
    def n_params(self) -> int:
        return self.layout.size

    def init(self, seed: int | None = None) -> ParamVector:
        """Initial parameters; identical for identical ``(spec, seed)``."""
        rng = np.random.default_rng(self.spec.seed if seed is None else seed)
        gain = 2.0 if self.spec.activation == "relu" else 1.0
        values = np.zeros(self.layout.size)
        for s in self.layout.slots:
            if s.prunable:
                fan_in = int(np.prod(s.shape[1:]))
                values[s.offset:s.stop] = rng.normal(0.0, np.sqrt(gain / fan_in), s.size)
        return ParamVector(values, self.layout)

    def _view(self, theta, slot):
        return theta[slot.offset:slot.stop].view(slot.shape)

    def logits_t(self, theta: torch.Tensor, X: torch.Tensor) -> torch.Tensor:
        h = X
        if self._conv:
            h = h.reshape((h.shape[0],) + self.spec.input_shape)
            for w, b in self._conv:
                h = F.conv2d(h, self._view(theta, w), self._view(theta, b), padding=1)
                h = F.max_pool2d(self._act(h), 2)
        h = h.reshape(h.shape[0], -1)
        last = len(self._dense) - 1
        for i, (w, b) in enumerate(self._dense):
            h = torch.addmm(self._view(theta, b), h, self._view(theta, w).T)
            if i < last:
                h = self._act(h)
        return h

    def loss_t(self, theta, X, y):
        return F.cross_entropy(self.logits_t(theta, X), y)

    def error_t(self, theta, X, y) -> float:
        # torch.argmax returns the first maximal index, i.e. ties go to the lowest class
        pred = torch.argmax(self.logits_t(theta, X), dim=1)
        return float((pred != y).double().mean())

    def predict(self, params: ParamVector, X: np.ndarray) -> np.ndarray:
        self._check(params)
        with torch.no_grad():
            logits = self.logits_t(torch.from_numpy(_values(params)), torch.from_numpy(np.asarray(X, dtype=np.float64)))
        return torch.argmax(logits, dim=1).numpy()

    def predict_proba(self, params: ParamVector, X: np.ndarray) -> np.ndarray:
        self._check(params)
        with torch.no_grad():
            logits = self.logits_t(torch.from_numpy(_values(params)), torch.from_numpy(np.asarray(X, dtype=np.float64)))
        return torch.softmax(logits, dim=1).numpy()

    def forward_loss(self, params, batch):
        _check_batch(batch, self.spec.n_classes)
        return super().forward_loss(params, batch)

    def hessian_vector_product(self, params, batch, v):
        _check_batch(batch, self.spec.n_classes)
        return super().hessian_vector_product(params, batch, v)

    hvp = hessian_vector_product


class QuadraticObjective(Objective):
    """``0.5 (w - c)^T H (w - c)`` with an explicit Hessian.

    Serves as an exact stand-in landscape; its "error" is the loss itself.
    """

    def __init__(self, hessian, center=None, prunable=None):
        H = np.asarray(hessian, dtype=np.float64)
        if H.ndim == 1:
            H = np.diag(H)
        if H.shape[0] != H.shape[1]:
            raise DimensionError("Hessian must be square")
        self.H = 0.5 * (H + H.T)
        self.center = np.zeros(H.shape[0]) if center is None else np.asarray(center, dtype=np.float64)
        self.layout = ParamVector.from_array(np.zeros(H.shape[0]), prunable).layout
        self._H_t = torch.from_numpy(self.H)
        self._c_t = torch.from_numpy(self.center)

    def init(self) -> ParamVector:
        return ParamVector(self.center.copy(), self.layout)

    def loss_t(self, theta, X=None, y=None):
        d = theta - self._c_t
        return 0.5 * d @ (self._H_t @ d)

    def error_t(self, theta, X=None, y=None) -> float:
        return float(self.loss_t(theta))

    def value(self, params) -> float:
        d = _values(params) - self.center
        return float(0.5 * d @ self.H @ d)
