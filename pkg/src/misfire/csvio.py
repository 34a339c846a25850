"""CSV tables keyed by prediction: sample_id,true_class,pred_class,is_wrong
followed by one or more value columns. Floats are written with repr so they
round-trip exactly and the files are byte-deterministic."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def write_prediction_table(path, ids, true_classes, pred_classes, is_wrong,
                           columns: dict[str, np.ndarray]) -> None:
    n = len(ids)
    for name, col in columns.items():
        if len(col) != n:
            raise ValueError(f"column {name!r} has {len(col)} rows, expected {n}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "true_class", "pred_class", "is_wrong", *columns])
        for i in range(n):
            w.writerow(
                [ids[i], int(true_classes[i]), int(pred_classes[i]), int(is_wrong[i])]
                + [repr(float(col[i])) for col in columns.values()]
            )


def read_prediction_table(path):
    """Returns (ids, true_classes, pred_classes, is_wrong, {name: column})."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:4] != ["sample_id", "true_class", "pred_class", "is_wrong"]:
        raise ValueError(f"{path}: not a prediction table (bad header)")
    names = rows[0][4:]
    ids, true_c, pred_c, wrong = [], [], [], []
    cols = {name: [] for name in names}
    for row in rows[1:]:
        ids.append(row[0])
        true_c.append(int(row[1]))
        pred_c.append(int(row[2]))
        wrong.append(bool(int(row[3])))
        for name, cell in zip(names, row[4:]):
            cols[name].append(float(cell))
    return (
        ids,
        np.array(true_c, dtype=np.int64),
        np.array(pred_c, dtype=np.int64),
        np.array(wrong, dtype=bool),
        {name: np.array(vals) for name, vals in cols.items()},
    )
