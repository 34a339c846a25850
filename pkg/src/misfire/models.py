"""Small CNN classifiers: definition, seeded training, prediction, and a
bit-exact checkpoint format.

Models output pre-softmax scores; softmax lives outside the model so the
raw class score of a prediction stays available for attribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import (
    ShapeError,
    Tape,
    backward_from,
    conv_output_extent,
    softmax,
    tensor,
    _conv_forward,
    _pool_forward,
)
from .container import DataFormatError, read_container, write_container

CHECKPOINT_MAGIC = b"MFCK"

_ACTIVATIONS = ("relu", "linear")


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    activation: str = "relu"


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


@dataclass(frozen=True)
class Dense:
    width: int
    activation: str = "relu"


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer descriptors plus input shape and class count.

    At least one convolutional layer is required (conductance is defined
    over conv feature maps) and the final layer must be a linear Dense of
    width num_classes: the model's output is the pre-softmax vector.
    """

    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or any(v < 1 for v in self.input_shape):
            raise ValueError(f"input_shape must be 3 positive extents, got {self.input_shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not any(isinstance(l, Conv) for l in self.layers):
            raise ValueError("model needs at least one convolutional layer")
        last = self.layers[-1]
        if not isinstance(last, Dense) or last.width != self.num_classes:
            raise ValueError("last layer must be a Dense of width num_classes")
        if last.activation != "linear":
            raise ValueError("last layer must be linear: the model outputs pre-softmax scores")
        for l in self.layers:
            if isinstance(l, (Conv, Dense)) and l.activation not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {l.activation!r}")

    def layer_names(self) -> list[str]:
        names, counts = [], {"conv": 0, "pool": 0, "dense": 0}
        for l in self.layers:
            kind = {Conv: "conv", MaxPool: "pool", Dense: "dense"}[type(l)]
            counts[kind] += 1
            names.append(f"{kind}{counts[kind]}")
        return names

    def conv_layer_names(self) -> list[str]:
        return [n for n, l in zip(self.layer_names(), self.layers) if isinstance(l, Conv)]

    def conv_channels(self, layer_name: str) -> int:
        for n, l in zip(self.layer_names(), self.layers):
            if n == layer_name:
                if not isinstance(l, Conv):
                    raise ValueError(f"layer {layer_name!r} is not convolutional")
                return l.out_channels
        raise KeyError(f"no layer named {layer_name!r}")

    def to_dict(self) -> dict:
        out = {"input_shape": list(self.input_shape), "num_classes": self.num_classes,
               "layers": []}
        for l in self.layers:
            d = asdict(l)
            d["kind"] = {Conv: "conv", MaxPool: "pool", Dense: "dense"}[type(l)]
            out["layers"].append(d)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            kind = ld.pop("kind")
            layers.append({"conv": Conv, "pool": MaxPool, "dense": Dense}[kind](**ld))
        return cls(tuple(d["input_shape"]), d["num_classes"], tuple(layers))


@dataclass(frozen=True)
class Hyper:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0


@dataclass
class Checkpoint:
    """A ModelSpec plus its weight tensors and training metadata."""

    spec: ModelSpec
    weights: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.meta == other.meta
            and self.weights.keys() == other.weights.keys()
            and all(np.array_equal(self.weights[k], other.weights[k]) for k in self.weights)
        )

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.spec, {k: v.copy() for k, v in self.weights.items()},
                          dict(self.meta))


@dataclass(frozen=True)
class PredictionRecord:
    """One prediction: pre-softmax scores, the argmax class (lowest index on
    ties), its softmax probability, and whether it disagrees with the label."""

    sample_id: str
    presoftmax: np.ndarray
    predicted_class: int
    softmax_score: float
    true_class: int
    is_wrong: bool

    @classmethod
    def from_presoftmax(cls, sample_id: str, presoftmax, true_class: int) -> "PredictionRecord":
        v = tensor(presoftmax)
        if v.ndim != 1:
            raise ShapeError(f"presoftmax must be a vector, got shape {v.shape}")
        pred = int(np.argmax(v))
        return cls(
            sample_id=sample_id,
            presoftmax=v,
            predicted_class=pred,
            softmax_score=float(softmax(v)[pred]),
            true_class=int(true_class),
            is_wrong=pred != int(true_class),
        )


# ---------------------------------------------------------------------------
# initialization and forward passes
# ---------------------------------------------------------------------------

def _weight_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c, h, w = spec.input_shape
    flat = None
    for name, layer in zip(spec.layer_names(), spec.layers):
        if isinstance(layer, Conv):
            shapes[f"{name}.kernels"] = (layer.out_channels, c, layer.kernel_size, layer.kernel_size)
            shapes[f"{name}.bias"] = (layer.out_channels,)
            h = conv_output_extent(h, layer.kernel_size, layer.stride, layer.padding)
            w = conv_output_extent(w, layer.kernel_size, layer.stride, layer.padding)
            c = layer.out_channels
        elif isinstance(layer, MaxPool):
            h, w = h // layer.size, w // layer.size
        else:
            if flat is None:
                flat = c * h * w
            shapes[f"{name}.w"] = (flat, layer.width)
            shapes[f"{name}.b"] = (layer.width,)
            flat = layer.width
    return shapes


def init_checkpoint(spec: ModelSpec, seed: int) -> Checkpoint:
    """Seeded uniform init scaled by fan-in."""
    rng = np.random.Generator(np.random.PCG64(seed))
    weights: dict[str, np.ndarray] = {}
    for name, shape in _weight_shapes(spec).items():
        if name.endswith(".bias") or name.endswith(".b"):
            weights[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            weights[name] = rng.uniform(-bound, bound, shape)
    return Checkpoint(spec, weights, {"seed": seed, "epochs": 0})


def _check_input(spec: ModelSpec, x) -> tuple[np.ndarray, bool]:
    x = tensor(x)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ShapeError(
            f"input shape {x.shape[1:] if x.ndim == 4 else x.shape} does not match "
            f"model input {spec.input_shape}"
        )
    return x, single


def forward_record(ckpt: Checkpoint, input) -> tuple[Tape, dict[str, np.ndarray], np.ndarray]:
    """Run the model while recording a tape.

    Returns the tape, a map with every convolutional layer's output (its
    post-activation feature maps), and the pre-softmax vector. The tape
    names "input", every weight ("<layer>.kernels" etc.), every conv
    layer's output ("<layer>.out"), and "presoftmax".
    """
    spec = ckpt.spec
    x, single = _check_input(spec, input)
    tape = Tape()
    cur = tape.leaf(x, "input")
    activations: dict[str, np.ndarray] = {}
    flattened = False
    for name, layer in zip(spec.layer_names(), spec.layers):
        if isinstance(layer, Conv):
            k = tape.leaf(ckpt.weights[f"{name}.kernels"], f"{name}.kernels")
            b = tape.leaf(ckpt.weights[f"{name}.bias"], f"{name}.bias")
            cur = tape.conv2d(cur, k, layer.stride, layer.padding)
            cur = tape.channel_bias(cur, b)
            if layer.activation == "relu":
                cur = tape.relu(cur)
            tape.name(f"{name}.out", cur)
            activations[name] = tape.value(cur)
        elif isinstance(layer, MaxPool):
            cur = tape.maxpool2d(cur, layer.size)
        else:
            if not flattened:
                v = tape.value(cur)
                cur = tape.reshape(cur, (v.shape[0], int(np.prod(v.shape[1:]))))
                flattened = True
            w = tape.leaf(ckpt.weights[f"{name}.w"], f"{name}.w")
            b = tape.leaf(ckpt.weights[f"{name}.b"], f"{name}.b")
            cur = tape.matmul(cur, w)
            cur = tape.channel_bias(cur, b)
            if layer.activation == "relu":
                cur = tape.relu(cur)
    tape.name("presoftmax", cur)
    presoftmax = tape.value(cur)
    if single:
        activations = {k: v[0] for k, v in activations.items()}
        presoftmax = presoftmax[0]
    return tape, activations, presoftmax


def forward_presoftmax(ckpt: Checkpoint, input) -> np.ndarray:
    """Plain forward pass without recording; same arithmetic as the tape."""
    spec = ckpt.spec
    x, single = _check_input(spec, input)
    flattened = False
    for name, layer in zip(spec.layer_names(), spec.layers):
        if isinstance(layer, Conv):
            x, _ = _conv_forward(x, ckpt.weights[f"{name}.kernels"], layer.stride, layer.padding)
            x = x + ckpt.weights[f"{name}.bias"][:, None, None]
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
        elif isinstance(layer, MaxPool):
            x, _ = _pool_forward(x, layer.size)
        else:
            if not flattened:
                x = x.reshape(x.shape[0], -1)
                flattened = True
            x = x @ ckpt.weights[f"{name}.w"] + ckpt.weights[f"{name}.b"]
            if layer.activation == "relu":
                x = np.maximum(x, 0.0)
    return x[0] if single else x


def predicted_classes(ckpt: Checkpoint, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Argmax class per image, computed in chunks."""
    out = np.empty(len(images), dtype=np.int64)
    for lo in range(0, len(images), chunk):
        out[lo : lo + chunk] = forward_presoftmax(ckpt, images[lo : lo + chunk]).argmax(axis=1)
    return out


def predict(ckpt: Checkpoint, input, true_class: int, sample_id: str = "") -> PredictionRecord:
    return PredictionRecord.from_presoftmax(
        sample_id, forward_presoftmax(ckpt, input), true_class
    )


def predict_dataset(ckpt: Checkpoint, ds, chunk: int = 512) -> list[PredictionRecord]:
    records = []
    for lo in range(0, len(ds.images), chunk):
        scores = forward_presoftmax(ckpt, ds.images[lo : lo + chunk])
        for row, v in enumerate(scores):
            i = lo + row
            records.append(PredictionRecord.from_presoftmax(ds.ids[i], v, int(ds.labels[i])))
    return records


def evaluate(ckpt: Checkpoint, ds, chunk: int = 512) -> float:
    """Fraction of dataset samples whose argmax prediction matches the label."""
    if len(ds.images) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predicted_classes(ckpt, ds.images, chunk)
    return float((preds == ds.labels).mean())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train(spec: ModelSpec, train_set, hyper: Hyper) -> tuple[Checkpoint, list[float]]:
    """SGD with momentum on softmax cross-entropy; deterministic per seed.

    Returns the trained checkpoint and the per-epoch training accuracy
    history (one entry per epoch).
    """
    if len(train_set.images) == 0:
        raise ValueError("training set is empty")
    if train_set.labels.max(initial=0) >= spec.num_classes:
        raise ValueError("train labels exceed num_classes")
    ckpt = init_checkpoint(spec, hyper.seed)
    velocity = {k: np.zeros_like(v) for k, v in ckpt.weights.items()}
    rng = np.random.Generator(np.random.PCG64(hyper.seed))
    history: list[float] = []
    n = len(train_set.images)
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, hyper.batch_size):
            idx = order[lo : lo + hyper.batch_size]
            tape, _, _ = forward_record(ckpt, train_set.images[idx])
            loss_id = tape.softmax_xent(tape.named["presoftmax"], train_set.labels[idx])
            loss = float(tape.value(loss_id)[0])
            if not math.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became {loss} at epoch {epoch}, batch offset {lo} "
                    f"(lr={hyper.learning_rate}); lower the learning rate"
                )
            grads = backward_from(tape, {loss_id: np.ones(1)})
            for name in ckpt.weights:
                g = grads[tape.named[name]]
                velocity[name] = hyper.momentum * velocity[name] - hyper.learning_rate * g
                ckpt.weights[name] = ckpt.weights[name] + velocity[name]
        history.append(evaluate(ckpt, train_set))
    ckpt.meta = {
        "seed": hyper.seed,
        "epochs": hyper.epochs,
        "final_train_accuracy": history[-1] if history else None,
        "hyper": {"learning_rate": hyper.learning_rate, "momentum": hyper.momentum,
                  "epochs": hyper.epochs, "batch_size": hyper.batch_size, "seed": hyper.seed},
    }
    return ckpt, history


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    header = {"spec": ckpt.spec.to_dict(), "meta": ckpt.meta}
    write_container(path, CHECKPOINT_MAGIC, header, ckpt.weights)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = read_container(path, CHECKPOINT_MAGIC)
    spec = ModelSpec.from_dict(header["spec"])
    expected = _weight_shapes(spec)
    if set(expected) != set(arrays):
        raise DataFormatError(
            f"{path}: weight blocks {sorted(arrays)} do not match spec "
            f"layers {sorted(expected)}"
        )
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise DataFormatError(
                f"{path}: weight {name} has shape {arrays[name].shape}, spec implies {shape}"
            )
    return Checkpoint(spec, arrays, header["meta"])
