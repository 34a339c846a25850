"""Attribution along a straight path from a baseline input.

The score being decomposed is always the pre-softmax output at one class.
With gamma(a) = baseline + a*(x - baseline) and n interpolation steps
x_k = gamma(k/n), the fast per-neuron conductance is

    cond[y] = sum_{k=1..n} d presoftmax_c(x_k) / d act_y(x_k) * (act_y(x_k) - act_y(x_{k-1}))

where act is a convolutional layer's output. Summed over a whole layer this
telescopes (up to discretization error) to presoftmax_c(x) - presoftmax_c(baseline),
which completeness_residual measures. The direct form integrates the
per-pixel chain rule instead and serves as a slow cross-check.

A feature map's conductance is the spatial sum of its neuron conductances;
one vector of those per prediction is the error detector's feature vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, backward, backward_from, tensor
from .csvio import read_prediction_table, write_prediction_table
from .models import Checkpoint, PredictionRecord, forward_presoftmax, forward_record

DEFAULT_STEPS = 10


@dataclass(frozen=True, eq=False)
class PathSpec:
    """Straight interpolation path: a baseline input and a step count.

    baseline None means the all-zero input of the same shape as x.
    """

    baseline: np.ndarray | None = None
    steps: int = DEFAULT_STEPS

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.baseline is not None:
            object.__setattr__(self, "baseline", tensor(self.baseline))

    def resolve_baseline(self, x: np.ndarray) -> np.ndarray:
        if self.baseline is None:
            return np.zeros_like(x)
        if self.baseline.shape != x.shape:
            raise ShapeError(
                f"baseline shape {self.baseline.shape} does not match input {x.shape}"
            )
        return self.baseline


def _resolve_layer(spec, layer: str | None) -> str:
    conv_names = spec.conv_layer_names()
    if layer is None:
        return conv_names[-1]
    if layer not in conv_names:
        raise ValueError(f"layer {layer!r} is not a convolutional layer of this model "
                         f"(have {conv_names})")
    return layer


def _interpolate(x: np.ndarray, baseline: np.ndarray, n: int) -> np.ndarray:
    alphas = np.arange(n + 1, dtype=np.float64) / n
    return baseline[None] + alphas[:, None, None, None] * (x - baseline)[None]


def integrated_gradients(ckpt: Checkpoint, x, path: PathSpec, class_index: int) -> np.ndarray:
    """Per-pixel attribution: (x - baseline) times the path-averaged gradient."""
    x = tensor(x)
    base = path.resolve_baseline(x)
    xs = _interpolate(x, base, path.steps)
    tape, _, _ = forward_record(ckpt, xs)
    grads = backward(tape, class_index)
    g = grads[tape.named["input"]]
    return (x - base) * g[1:].mean(axis=0)


def neuron_conductance_fast(ckpt: Checkpoint, x, path: PathSpec, class_index: int,
                            layer: str | None = None) -> np.ndarray:
    """Per-neuron conductance from n recorded passes over the interpolations.

    One batched forward covers all n+1 interpolation points; one batched
    backward gives the class-score gradient at each point's activations.
    """
    x = tensor(x)
    layer = _resolve_layer(ckpt.spec, layer)
    base = path.resolve_baseline(x)
    xs = _interpolate(x, base, path.steps)
    tape, acts, _ = forward_record(ckpt, xs)
    grads = backward(tape, class_index)
    g = grads[tape.named[f"{layer}.out"]]
    a = acts[layer]
    return (g[1:] * (a[1:] - a[:-1])).sum(axis=0)


def neuron_conductance_direct(ckpt: Checkpoint, x, path: PathSpec, class_index: int,
                              layer: str | None = None) -> np.ndarray:
    """Slow per-pixel form: for every step and every neuron, chain the class
    gradient at the neuron with the neuron's input gradient dotted into
    (x - baseline). O(steps * neurons) backward passes; a test oracle."""
    x = tensor(x)
    layer = _resolve_layer(ckpt.spec, layer)
    base = path.resolve_baseline(x)
    dx = x - base
    n = path.steps
    total = None
    for k in range(1, n + 1):
        xk = base + (k / n) * dx
        tape, _, _ = forward_record(ckpt, xk)
        act_id = tape.named[f"{layer}.out"]
        input_id = tape.named["input"]
        av = tape.value(act_id)  # [1, C, H, W]
        g_class = backward(tape, class_index)[act_id][0]
        inner = np.zeros_like(av[0])
        for y in range(inner.size):
            seed = np.zeros_like(av)
            seed.reshape(-1)[y] = 1.0
            gx = backward_from(tape, {act_id: seed})[input_id][0]
            inner.reshape(-1)[y] = float((gx * dx).sum())
        contrib = g_class * inner
        total = contrib if total is None else total + contrib
    return total / n


def feature_map_conductance(neuron_cond) -> np.ndarray:
    """Spatial sum per channel of a [C,H,W] neuron conductance tensor."""
    t = tensor(neuron_cond)
    if t.ndim != 3:
        raise ShapeError(f"expected a 3-D neuron conductance tensor, got shape {t.shape}")
    return t.sum(axis=(1, 2))


def completeness_residual(ckpt: Checkpoint, x, path: PathSpec, class_index: int,
                          layer: str | None = None) -> float:
    """Layer conductance total minus the score change along the path."""
    x = tensor(x)
    base = path.resolve_baseline(x)
    cond = neuron_conductance_fast(ckpt, x, path, class_index, layer)
    f_x = float(forward_presoftmax(ckpt, x)[class_index])
    f_base = float(forward_presoftmax(ckpt, base)[class_index])
    return float(cond.sum() - (f_x - f_base))


def conductance_dataset(ckpt: Checkpoint, ds, layer: str | None = None,
                        path: PathSpec | None = None, chunk: int = 32,
                        ) -> tuple[np.ndarray, list[PredictionRecord]]:
    """Feature-map conductance of every sample w.r.t. its own predicted class.

    Returns the [num_samples x num_feature_maps] matrix (input order) and the
    matching prediction records, whose is_wrong flags label the rows.
    """
    if len(ds.images) == 0:
        raise ValueError("dataset is empty")
    path = path or PathSpec()
    layer = _resolve_layer(ckpt.spec, layer)
    n = path.steps
    num_fm = ckpt.spec.conv_channels(layer)
    matrix = np.zeros((len(ds.images), num_fm))
    records: list[PredictionRecord] = []
    for lo in range(0, len(ds.images), chunk):
        imgs = ds.images[lo : lo + chunk]
        m = len(imgs)
        try:
            rows = np.concatenate(
                [_interpolate(img, path.resolve_baseline(img), n) for img in imgs]
            )
            tape, acts, pres = forward_record(ckpt, rows)
            full = pres.reshape(m, n + 1, -1)[:, n, :]
            pred = full.argmax(axis=1)
            seed = np.zeros_like(pres)
            seed[np.arange(len(rows)), np.repeat(pred, n + 1)] = 1.0
            grads = backward_from(tape, {tape.named["presoftmax"]: seed})
            g = grads[tape.named[f"{layer}.out"]]
            a = acts[layer]
            g = g.reshape(m, n + 1, *g.shape[1:])
            a = a.reshape(m, n + 1, *a.shape[1:])
            cond = (g[:, 1:] * (a[:, 1:] - a[:, :-1])).sum(axis=1)
            matrix[lo : lo + m] = cond.sum(axis=(2, 3))
        except Exception as exc:
            raise RuntimeError(
                f"conductance failed for samples {ds.ids[lo]}..{ds.ids[lo + m - 1]}: {exc}"
            ) from exc
        for row in range(m):
            records.append(PredictionRecord.from_presoftmax(
                ds.ids[lo + row], full[row], int(ds.labels[lo + row])
            ))
    return matrix, records


def write_conductance_csv(path, matrix: np.ndarray, records: list[PredictionRecord]) -> None:
    cols = {f"fm_{j}": matrix[:, j] for j in range(matrix.shape[1])}
    write_prediction_table(
        path,
        [r.sample_id for r in records],
        [r.true_class for r in records],
        [r.predicted_class for r in records],
        [r.is_wrong for r in records],
        cols,
    )


def read_conductance_csv(path):
    """Returns (ids, true_classes, pred_classes, is_wrong, matrix)."""
    ids, true_c, pred_c, wrong, cols = read_prediction_table(path)
    matrix = np.column_stack([cols[f"fm_{j}"] for j in range(len(cols))])
    return ids, true_c, pred_c, wrong, matrix
