"""Weight-mutated model variants and the Label Change Rate they induce.

A mutable weight is one 2-D convolutional kernel: the [kH,kW] slice at
(output channel, input channel) of a conv layer. An operator rewrites a
seeded random subset of those kernels:

    GF   add Gaussian noise scaled by the layer's weight std
    NAI  negate the kernel, inverting the sign of its pre-activation
         contribution
    WS   shuffle the kernel's entries
    NS   exchange the kernel with another one from the same layer

Dense weights are never mutated. Generated mutants are kept only if they
retain at least validity_floor of the original model's validation accuracy.
The LCR of an input is the fraction of kept mutants whose argmax prediction
on it differs from the original model's.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import DataFormatError, read_container, write_container
from .csvio import write_prediction_table
from .models import (
    Checkpoint,
    evaluate,
    forward_presoftmax,
    load_checkpoint,
    predict_dataset,
    predicted_classes,
)

MUTANTS_MAGIC = b"MFMD"
OPERATORS = ("GF", "NAI", "WS", "NS")


class MutantYieldError(RuntimeError):
    """The attempt budget ran out before enough valid mutants were found."""


@dataclass(frozen=True)
class MutationConfig:
    operator: str = "NAI"
    rate: float = 0.002
    count: int = 100
    seed: int = 0
    validity_floor: float = 0.9
    gf_scale: float = 1.0

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}, expected one of {OPERATORS}")
        if not 0.0 < self.rate < 1.0:
            raise ValueError(f"rate must be in (0,1), got {self.rate}")
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 0.0 < self.validity_floor <= 1.0:
            raise ValueError(f"validity_floor must be in (0,1], got {self.validity_floor}")

    def to_dict(self) -> dict:
        return {"operator": self.operator, "rate": self.rate, "count": self.count,
                "seed": self.seed, "validity_floor": self.validity_floor,
                "gf_scale": self.gf_scale}


@dataclass
class Mutant:
    """Deltas against an original checkpoint: (layer, kernel index, replacement).

    The kernel index is the flat (out_channel * in_channels + in_channel)
    position within the layer's kernel tensor.
    """

    operator: str
    rate: float
    seed: int
    deltas: list[tuple[str, int, np.ndarray]]
    val_accuracy: float | None = None


@dataclass
class MutantSet:
    original: Checkpoint
    mutants: list[Mutant]
    config: MutationConfig
    original_val_accuracy: float | None = None

    def __len__(self) -> int:
        return len(self.mutants)


def _kernel_slots(spec) -> list[tuple[str, int]]:
    slots = []
    for name, layer in zip(spec.layer_names(), spec.layers):
        if name.startswith("conv"):
            slots.extend((name, i) for i in range(layer.out_channels * _in_channels(spec, name)))
    return slots


def _in_channels(spec, layer_name: str) -> int:
    c = spec.input_shape[0]
    for name, layer in zip(spec.layer_names(), spec.layers):
        if name.startswith("conv"):
            if name == layer_name:
                return c
            c = layer.out_channels
    raise KeyError(layer_name)


def kernel_count(spec) -> int:
    """Total number of mutable convolutional kernels in a model."""
    return len(_kernel_slots(spec))


def generate_mutant(ckpt: Checkpoint, operator: str, rate: float, seed: int,
                    gf_scale: float = 1.0) -> Mutant:
    """Mutate ceil(rate * kernel count) seeded-random kernels; deterministic."""
    if operator not in OPERATORS:
        raise ValueError(f"unknown operator {operator!r}")
    slots = _kernel_slots(ckpt.spec)
    n_mutate = math.ceil(rate * len(slots))
    if n_mutate < 1:
        raise ValueError(f"rate {rate} selects no kernels out of {len(slots)}")
    rng = np.random.Generator(np.random.PCG64(seed))
    chosen = rng.choice(len(slots), size=n_mutate, replace=False)
    working = {
        name: ckpt.weights[f"{name}.kernels"].reshape(-1, *ckpt.weights[f"{name}.kernels"].shape[2:]).copy()
        for name in ckpt.spec.conv_layer_names()
    }
    layer_std = {name: float(ckpt.weights[f"{name}.kernels"].std()) for name in working}
    touched: set[tuple[str, int]] = set()
    for slot in chosen:
        layer, kidx = slots[int(slot)]
        kern = working[layer][kidx]
        if operator == "GF":
            working[layer][kidx] = kern + rng.normal(0.0, layer_std[layer] * gf_scale, kern.shape)
        elif operator == "NAI":
            working[layer][kidx] = -kern
        elif operator == "WS":
            working[layer][kidx] = rng.permutation(kern.reshape(-1)).reshape(kern.shape)
        else:  # NS: exchange with another kernel of the same layer
            n_layer = len(working[layer])
            if n_layer > 1:
                partner = int(rng.integers(0, n_layer - 1))
                if partner >= kidx:
                    partner += 1
                a, b = working[layer][kidx].copy(), working[layer][partner].copy()
                working[layer][kidx], working[layer][partner] = b, a
                touched.add((layer, partner))
        touched.add((layer, kidx))
    deltas = [
        (layer, kidx, working[layer][kidx].copy())
        for layer, kidx in sorted(touched)
    ]
    return Mutant(operator=operator, rate=rate, seed=seed, deltas=deltas)


def apply_mutant(ckpt: Checkpoint, mutant: Mutant) -> Checkpoint:
    out = ckpt.copy()
    for layer, kidx, replacement in mutant.deltas:
        kernels = out.weights[f"{layer}.kernels"]
        flat = kernels.reshape(-1, *kernels.shape[2:])
        flat[kidx] = replacement
    return out


def build_mutant_population(ckpt: Checkpoint, config: MutationConfig, val_set) -> MutantSet:
    """Generate until config.count mutants pass the validity filter.

    Retries with fresh seeds up to 10x count attempts; running out means the
    mutation rate is destroying too much accuracy.
    """
    if len(val_set) == 0:
        raise ValueError("validation set is empty")
    original_acc = evaluate(ckpt, val_set)
    threshold = config.validity_floor * original_acc
    kept: list[Mutant] = []
    budget = 10 * config.count
    attempt = 0
    while len(kept) < config.count and attempt < budget:
        m = generate_mutant(ckpt, config.operator, config.rate,
                            config.seed + attempt, config.gf_scale)
        attempt += 1
        acc = evaluate(apply_mutant(ckpt, m), val_set)
        if acc >= threshold:
            m.val_accuracy = acc
            kept.append(m)
    if len(kept) < config.count:
        raise MutantYieldError(
            f"only {len(kept)}/{config.count} mutants passed the validity filter "
            f"after {attempt} attempts (yield {len(kept) / attempt:.1%}); "
            f"the mutation rate {config.rate} is likely too aggressive"
        )
    return MutantSet(ckpt, kept, config, original_acc)


# ---------------------------------------------------------------------------
# label change rate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LcrRecord:
    sample_id: str
    lcr: float
    mutant_count: int
    predicted_class: int


def label_change_rate(original_pred: int, mutant_preds) -> float:
    preds = np.asarray(mutant_preds)
    if preds.size == 0:
        raise ValueError("need at least one mutant prediction")
    return float((preds != original_pred).mean())


def lcr(x, original: Checkpoint, mutants: MutantSet, sample_id: str = "") -> LcrRecord:
    """Fraction of mutants whose argmax prediction on x differs from the
    original model's."""
    if len(mutants) == 0:
        raise ValueError("mutant set is empty")
    orig_pred = int(np.argmax(forward_presoftmax(original, x)))
    preds = [
        int(np.argmax(forward_presoftmax(apply_mutant(original, m), x)))
        for m in mutants.mutants
    ]
    return LcrRecord(sample_id, label_change_rate(orig_pred, preds),
                     len(mutants), orig_pred)


def disagreement_matrix(images: np.ndarray, original_preds: np.ndarray,
                        mutants: MutantSet, chunk: int = 512) -> np.ndarray:
    """[num_mutants x num_samples] booleans: mutant prediction != original."""
    out = np.zeros((len(mutants), len(images)), dtype=bool)
    for i, m in enumerate(mutants.mutants):
        mut = apply_mutant(mutants.original, m)
        out[i] = predicted_classes(mut, images, chunk) != original_preds
    return out


def lcr_dataset(ds, original: Checkpoint, mutants: MutantSet
                ) -> tuple[list[LcrRecord], np.ndarray]:
    """Per-sample LCR in input order, plus the is_wrong labels."""
    if len(mutants) == 0:
        raise ValueError("mutant set is empty")
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    orig_records = predict_dataset(original, ds)
    orig_preds = np.array([r.predicted_class for r in orig_records])
    dis = disagreement_matrix(ds.images, orig_preds, mutants)
    values = dis.mean(axis=0)
    records = [
        LcrRecord(r.sample_id, float(values[i]), len(mutants), r.predicted_class)
        for i, r in enumerate(orig_records)
    ]
    labels = np.array([r.is_wrong for r in orig_records], dtype=bool)
    return records, labels


@dataclass(frozen=True)
class LcrSummary:
    mean_correct: float | None
    std_correct: float | None
    mean_wrong: float | None
    std_wrong: float | None
    lcr_difference: float | None
    n_correct: int = 0
    n_wrong: int = 0


def lcr_summary(records: list[LcrRecord], labels) -> LcrSummary:
    """Group means/stds (population std) and the separation margin
    (mean_wrong - std_wrong) - (mean_correct + std_correct)."""
    values = np.array([r.lcr for r in records])
    labels = np.asarray(labels, dtype=bool)
    if len(values) != len(labels):
        raise ValueError("records and labels differ in length")
    correct = values[~labels]
    wrong = values[labels]
    mc = float(correct.mean()) if len(correct) else None
    sc = float(correct.std()) if len(correct) else None
    mw = float(wrong.mean()) if len(wrong) else None
    sw = float(wrong.std()) if len(wrong) else None
    diff = None
    if len(correct) and len(wrong):
        diff = (mw - sw) - (mc + sc)
    return LcrSummary(mc, sc, mw, sw, diff, len(correct), len(wrong))


def lcr_difference(mean_correct: float, std_correct: float,
                   mean_wrong: float, std_wrong: float) -> float:
    """Separation margin between the LCR bands of wrong and correct groups."""
    return (mean_wrong - std_wrong) - (mean_correct + std_correct)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_mutant_set(path, mutants: MutantSet, original_path,
                     stored_path: str | None = None) -> None:
    """Persist as deltas next to a reference to the original checkpoint.

    original_path is digested for integrity; stored_path (default the same)
    is what gets written into the file, usually relative to the delta file.
    """
    header = {
        "config": mutants.config.to_dict(),
        "original_path": stored_path if stored_path is not None else str(original_path),
        "original_digest": _digest(original_path),
        "original_val_accuracy": mutants.original_val_accuracy,
        "mutants": [
            {
                "operator": m.operator,
                "rate": m.rate,
                "seed": m.seed,
                "val_accuracy": m.val_accuracy,
                "slots": [[layer, kidx] for layer, kidx, _ in m.deltas],
            }
            for m in mutants.mutants
        ],
    }
    arrays = {}
    for i, m in enumerate(mutants.mutants):
        for j, (_, _, replacement) in enumerate(m.deltas):
            arrays[f"m{i:04d}.d{j:03d}"] = replacement
    write_container(path, MUTANTS_MAGIC, header, arrays)


def read_mutant_set(path, original: Checkpoint | None = None) -> MutantSet:
    header, arrays = read_container(path, MUTANTS_MAGIC)
    if original is None:
        orig_path = Path(header["original_path"])
        if not orig_path.is_absolute():
            orig_path = Path(path).parent / orig_path
        if not orig_path.exists():
            raise DataFormatError(f"{path}: original checkpoint {orig_path} not found")
        if _digest(orig_path) != header["original_digest"]:
            raise DataFormatError(
                f"{path}: original checkpoint {orig_path} does not match the "
                f"digest recorded with the deltas"
            )
        original = load_checkpoint(orig_path)
    config = MutationConfig(**header["config"])
    mutants = []
    for i, md in enumerate(header["mutants"]):
        deltas = [
            (layer, int(kidx), arrays[f"m{i:04d}.d{j:03d}"])
            for j, (layer, kidx) in enumerate(md["slots"])
        ]
        mutants.append(Mutant(md["operator"], md["rate"], md["seed"], deltas,
                              md["val_accuracy"]))
    return MutantSet(original, mutants, config, header["original_val_accuracy"])


def write_lcr_csv(path, records: list[LcrRecord], true_classes, is_wrong) -> None:
    write_prediction_table(
        path,
        [r.sample_id for r in records],
        true_classes,
        [r.predicted_class for r in records],
        is_wrong,
        {"lcr": np.array([r.lcr for r in records])},
    )
