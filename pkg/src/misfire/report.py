"""Render the run's tables and figures from persisted pipeline artifacts.

Everything is derived from the CSV/JSON files a completed run leaves in the
output directory, so the report can be regenerated without recomputing any
stage. Figures are SVG; files are written deterministically (fixed hash
salt, no embedded dates) so report bytes are stable across identical runs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .conductance import read_conductance_csv
from .csvio import read_prediction_table
from .detector import read_roc_csv

TOP_FEATURE_MAPS = 3

_SAVEFIG = {"format": "svg", "metadata": {"Date": None}, "bbox_inches": "tight"}


def _style():
    matplotlib.rcParams.update({
        "svg.hashsalt": "misfire",
        "figure.figsize": (5.0, 3.4),
        "font.size": 9,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "svg.fonttype": "none",
    })


class MissingArtifacts(RuntimeError):
    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        super().__init__("report inputs missing: " + ", ".join(self.paths))


def _require(out: Path, names: list[str]) -> None:
    missing = [out / n for n in names if not (out / n).exists()]
    if missing:
        raise MissingArtifacts(missing)


def _read_scores(path):
    ids, true_c, pred_c, wrong, cols = read_prediction_table(path)
    return ids, true_c, pred_c, wrong, cols["score"]


# ---------------------------------------------------------------------------
# individual renderers
# ---------------------------------------------------------------------------

def _top_conductance_table(out: Path, rep: Path) -> Path:
    """Per predicted class: the highest-mean feature maps over correct
    predictions, with the wrong-prediction means of the same maps beside."""
    _, _, pred_c, wrong, matrix = read_conductance_csv(out / "conductance_val.csv")
    dest = rep / "top_conductance.csv"
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pred_class", "feature_map", "mean_correct", "mean_wrong",
                    "n_correct", "n_wrong"])
        for cls in sorted(set(pred_c.tolist())):
            m_corr = matrix[(pred_c == cls) & ~wrong]
            m_wrong = matrix[(pred_c == cls) & wrong]
            if len(m_corr) == 0:
                continue
            means = m_corr.mean(axis=0)
            for fm in np.argsort(-means)[:TOP_FEATURE_MAPS]:
                wrong_mean = repr(float(m_wrong[:, fm].mean())) if len(m_wrong) else ""
                w.writerow([cls, int(fm), repr(float(means[fm])), wrong_mean,
                            len(m_corr), len(m_wrong)])
    return dest


def _conductance_example_chart(out: Path, rep: Path) -> Path:
    """Bar charts of one correct and one wrong test prediction's feature-map
    conductances, the score-decomposition view of the two cases."""
    ids, _, pred_c, wrong, matrix = read_conductance_csv(out / "conductance_test.csv")
    fig, axes = plt.subplots(2, 1, figsize=(6.0, 4.6), sharex=True)
    for ax, mask, label in ((axes[0], ~wrong, "correct"), (axes[1], wrong, "wrong")):
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            ax.set_title(f"no {label} predictions in test set")
            continue
        i = int(idx[0])
        total = matrix[i].sum()
        ax.bar(np.arange(matrix.shape[1]), matrix[i], width=0.8)
        ax.set_title(f"{label}: sample {ids[i]}, predicted class {pred_c[i]}, "
                     f"conductance total {total:.2f}")
        ax.set_ylabel("conductance")
    axes[1].set_xlabel("feature map")
    dest = rep / "conductance_examples.svg"
    fig.savefig(dest, **_SAVEFIG)
    plt.close(fig)
    return dest


def _lcr_summary_table(out: Path, rep: Path) -> Path:
    dest = rep / "lcr_summary.csv"
    dest.write_bytes((out / "lcr_sweep.csv").read_bytes())
    return dest


def _auroc_vs_mutants(out: Path, rep: Path) -> list[Path]:
    rows = list(csv.reader((out / "auroc_vs_mutants.csv").open()))
    counts = [int(r[0]) for r in rows[1:]]
    aurocs = [float(r[1]) for r in rows[1:]]
    fig, ax = plt.subplots()
    ax.plot(counts, aurocs, marker="o")
    ax.set_xlabel("mutants voting")
    ax.set_ylabel("validation AUROC of LCR")
    ax.set_title("LCR separating power vs. mutant count")
    dest_svg = rep / "auroc_vs_mutants.svg"
    fig.savefig(dest_svg, **_SAVEFIG)
    plt.close(fig)
    dest_csv = rep / "auroc_vs_mutants.csv"
    dest_csv.write_bytes((out / "auroc_vs_mutants.csv").read_bytes())
    return [dest_csv, dest_svg]


def _roc_overlay(out: Path, rep: Path, unified_kind: str) -> list[Path]:
    safe = unified_kind.replace("/", "_")
    sources = {
        "conductance": ("roc_conductance_val.csv", "threshold_conductance.json"),
        "lcr": ("roc_lcr_val.csv", "threshold_lcr.json"),
        f"unified {unified_kind}": (f"roc_unified_{safe}_val.csv",
                                    f"threshold_unified_{safe}.json"),
    }
    written = []
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    for label, (roc_name, thr_name) in sources.items():
        roc = read_roc_csv(out / roc_name)
        thr = json.loads((out / thr_name).read_text())
        ax.plot(1.0 - roc.recall_correct, roc.recall_wrong,
                label=f"{label} (AUROC {roc.auroc:.3f})")
        ax.plot(1.0 - thr["recall_correct"], thr["recall_wrong"], "o",
                color=ax.lines[-1].get_color(), markersize=5)
        copy = rep / f"roc_{label.split()[0]}.csv"
        copy.write_bytes((out / roc_name).read_bytes())
        written.append(copy)
    ax.plot([0, 1], [0, 1], ":", color="gray", linewidth=0.8)
    ax.set_xlabel("1 - recall of correct predictions")
    ax.set_ylabel("recall of wrong predictions")
    ax.set_title("validation ROC, circles at selected thresholds")
    ax.legend(loc="lower right", fontsize=8)
    dest = rep / "roc_overlay.svg"
    fig.savefig(dest, **_SAVEFIG)
    plt.close(fig)
    written.append(dest)
    return written


def _confusion(out: Path, rep: Path) -> list[Path]:
    confusion = json.loads((out / "confusion_test.json").read_text())
    dest_csv = rep / "confusion.csv"
    with open(dest_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "count"])
        for key in ("wrong_caught", "wrong_missed", "false_alarms", "correct_passed"):
            w.writerow([key, confusion[key]])
        w.writerow(["recall_wrong", repr(confusion["recall_wrong"])])
        w.writerow(["recall_correct", repr(confusion["recall_correct"])])
    grid = np.array([
        [confusion["correct_passed"], confusion["false_alarms"]],
        [confusion["wrong_missed"], confusion["wrong_caught"]],
    ])
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    ax.imshow(grid, cmap="Blues")
    for (r, c), v in np.ndenumerate(grid):
        ax.text(c, r, str(v), ha="center", va="center",
                color="black" if v < grid.max() * 0.6 else "white")
    ax.set_xticks([0, 1], ["kept", "flagged"])
    ax.set_yticks([0, 1], ["correct", "wrong"])
    ax.set_title(f"test verdicts ({confusion['classifier']}, "
                 f"threshold {confusion['threshold']:.3f})")
    ax.grid(False)
    dest_svg = rep / "confusion.svg"
    fig.savefig(dest_svg, **_SAVEFIG)
    plt.close(fig)
    return [dest_csv, dest_svg]


def _settings_table(out: Path, rep: Path, unified_kinds: list[str]) -> Path:
    """Validation AUROC and both-split recalls for every detector setting."""
    settings = [("conductance", "cond_scores_{split}.csv", "threshold_conductance.json",
                 "roc_conductance_val.csv"),
                ("lcr", "lcr_{split}.csv", "threshold_lcr.json", "roc_lcr_val.csv")]
    for kind in unified_kinds:
        safe = kind.replace("/", "_")
        settings.append((f"{kind} both", f"unified_{safe}_scores_{{split}}.csv",
                         f"threshold_unified_{safe}.json", f"roc_unified_{safe}_val.csv"))
    dest = rep / "settings.csv"
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["setting", "val_auroc", "val_recall_correct", "val_recall_wrong",
                    "test_recall_correct", "test_recall_wrong"])
        for label, scores_tpl, thr_name, roc_name in settings:
            auroc = read_roc_csv(out / roc_name).auroc
            thr = json.loads((out / thr_name).read_text())
            _, _, _, wrong_test, cols = read_prediction_table(
                out / scores_tpl.format(split="test"))
            values = next(iter(cols.values()))
            flagged = values >= thr["threshold"]
            n_wrong = int(wrong_test.sum())
            n_corr = int((~wrong_test).sum())
            rw = float((flagged & wrong_test).sum() / n_wrong) if n_wrong else ""
            rc = float((~flagged & ~wrong_test).sum() / n_corr) if n_corr else ""
            w.writerow([label, repr(auroc), repr(thr["recall_correct"]),
                        repr(thr["recall_wrong"]),
                        repr(rc) if rc != "" else "", repr(rw) if rw != "" else ""])
    return dest


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_INPUTS = [
    "conductance_val.csv", "conductance_test.csv", "verdicts_test.csv",
    "lcr_sweep.csv", "auroc_vs_mutants.csv", "roc_conductance_val.csv",
    "threshold_conductance.json", "roc_lcr_val.csv", "threshold_lcr.json",
    "lcr_val.csv", "lcr_test.csv", "cond_scores_test.csv", "confusion_test.json",
]


def render_report(outdir) -> list[Path]:
    """Write the report bundle into <outdir>/report; returns written files."""
    out = Path(outdir)
    manifest_path = out / "manifest.json"
    unified_kinds = ["mlp_2x10"]
    if manifest_path.exists():
        stages = json.loads(manifest_path.read_text()).get("stages", {})
        kinds = [k.removeprefix("model_") for k in
                 stages.get("unified", {}).get("artifacts", {}) if k.startswith("model_")]
        if kinds:
            unified_kinds = kinds
    primary = unified_kinds[0]
    safe = primary.replace("/", "_")
    needed = _INPUTS + [f"roc_unified_{safe}_val.csv", f"threshold_unified_{safe}.json",
                        f"unified_{safe}_scores_test.csv"]
    _require(out, needed)
    _style()
    rep = out / "report"
    rep.mkdir(exist_ok=True)
    files = [
        _top_conductance_table(out, rep),
        _conductance_example_chart(out, rep),
        _lcr_summary_table(out, rep),
        *_auroc_vs_mutants(out, rep),
        *_roc_overlay(out, rep, primary),
        *_confusion(out, rep),
        _settings_table(out, rep, unified_kinds),
    ]
    return files
