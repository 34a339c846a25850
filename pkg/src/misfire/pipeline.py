"""End-to-end orchestration: train the CNN, build conductance and LCR
datasets, train detectors, combine them, and judge the test set.

A run is described by one JSON config. Every stage persists its outputs as
files and records their SHA-256 digests in a manifest, so a rerun with
--resume skips any stage whose artifacts are intact and recomputes only
what is missing or stale.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .conductance import (
    PathSpec,
    conductance_dataset,
    read_conductance_csv,
    write_conductance_csv,
)
from .csvio import read_prediction_table, write_prediction_table
from .detector import (
    confusion_report,
    load_detector,
    read_roc_csv,
    roc_curve,
    save_detector,
    score,
    select_threshold,
    train_error_detector,
    train_unified,
    write_roc_csv,
)
from .models import Hyper, ModelSpec, Conv, Dense, MaxPool, evaluate, load_checkpoint, save_checkpoint, train
from .models import predict_dataset
from .mutation import (
    MutantYieldError,
    MutationConfig,
    build_mutant_population,
    disagreement_matrix,
    lcr_dataset,
    lcr_summary,
    read_mutant_set,
    write_lcr_csv,
    write_mutant_set,
)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


class ConfigError(ValueError):
    """The run configuration is missing, malformed, or references absent files."""


class StageError(RuntimeError):
    """A pipeline stage could not run; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r}: {message}")
        self.stage = stage


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_REQUIRED_SECTIONS = ("dataset", "model", "attribution", "mutation", "detector",
                      "unified", "threshold")


@dataclass(frozen=True)
class RunConfig:
    raw: dict

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    # -- dataset ------------------------------------------------------------

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def num_classes(self) -> int:
        return int(self.dataset["classes"])

    @property
    def image_channels(self) -> int:
        return 3 if self.dataset["source"] == "cifar" else 1

    def build_dataset(self) -> data_mod.Dataset:
        d = self.dataset
        if d["source"] == "synth":
            return data_mod.synth_shapes(int(d["num_per_class"]), int(d["classes"]),
                                         float(d["noise"]), int(d["seed"]))
        if d["source"] == "idx":
            return data_mod.load_idx(d["images"], d["labels"], num_classes=int(d["classes"]))
        if d["source"] == "cifar":
            return data_mod.load_cifar_binary(d["path"], num_classes=int(d["classes"]))
        raise ConfigError(f"unknown dataset source {d['source']!r}")

    # -- model --------------------------------------------------------------

    def model_spec(self, input_shape: tuple[int, int, int]) -> ModelSpec:
        m = self.raw["model"]
        layers: list = []
        k = int(m.get("kernel_size", 3))
        for ch in m["conv_channels"]:
            layers.append(Conv(int(ch), kernel_size=k, stride=1, padding=k // 2))
            layers.append(MaxPool(2))
        for w in m.get("dense_widths", []):
            layers.append(Dense(int(w)))
        layers.append(Dense(self.num_classes, activation="linear"))
        return ModelSpec(input_shape, self.num_classes, tuple(layers))

    def hyper(self) -> Hyper:
        m = self.raw["model"]
        return Hyper(
            learning_rate=float(m.get("learning_rate", 0.05)),
            momentum=float(m.get("momentum", 0.9)),
            epochs=int(m.get("epochs", 10)),
            batch_size=int(m.get("batch_size", 64)),
            seed=int(m.get("seed", 0)),
        )

    # -- attribution / mutation / detector ----------------------------------

    @property
    def attribution_layer(self) -> str | None:
        return self.raw["attribution"].get("layer")

    @property
    def attribution_steps(self) -> int:
        return int(self.raw["attribution"].get("steps", 10))

    def mutation_config(self, rate: float | None = None) -> MutationConfig:
        m = self.raw["mutation"]
        return MutationConfig(
            operator=m.get("operator", "NAI"),
            rate=float(m["rate"] if rate is None else rate),
            count=int(m.get("count", 100)),
            seed=int(m.get("seed", 0)),
            validity_floor=float(m.get("validity_floor", 0.9)),
            gf_scale=float(m.get("gf_scale", 1.0)),
        )

    @property
    def mutation_rates(self) -> list[float]:
        m = self.raw["mutation"]
        grid = m.get("rate_grid")
        return [float(r) for r in grid] if grid else [float(m["rate"])]

    @property
    def detector_settings(self) -> dict:
        d = dict(self.raw["detector"])
        d.setdefault("seed", 0)
        return d

    @property
    def unified_kinds(self) -> list[str]:
        return list(self.raw["unified"].get("kinds", ["mlp_2x10", "lda", "qda"]))

    @property
    def unified_seed(self) -> int:
        return int(self.raw["unified"].get("seed", 0))

    @property
    def threshold_policy(self) -> str:
        return self.raw["threshold"].get("policy", "equal_recall")

    @property
    def threshold_target(self) -> float:
        return float(self.raw["threshold"].get("target_recall", 0.98))

    def override_seed(self, seed: int) -> "RunConfig":
        """Rebase every component seed on one master value."""
        raw = json.loads(self.canonical_json())
        raw["dataset"]["seed"] = seed
        raw["dataset"]["split_seed"] = seed + 1
        raw["model"]["seed"] = seed + 2
        raw["mutation"]["seed"] = seed + 3
        raw["detector"]["seed"] = seed + 4
        raw["unified"]["seed"] = seed + 5
        return RunConfig(raw)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return validate_config(raw, base_dir=path.parent)


def validate_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if raw.get("schema") != SCHEMA_VERSION:
        raise ConfigError(
            f"config schema {raw.get('schema')!r} unsupported; this build "
            f"reads schema {SCHEMA_VERSION}"
        )
    for section in _REQUIRED_SECTIONS:
        if section not in raw:
            raise ConfigError(f"config is missing the {section!r} section")
    d = raw["dataset"]
    source = d.get("source")
    if source not in ("synth", "idx", "cifar"):
        raise ConfigError(f"dataset.source must be synth/idx/cifar, got {source!r}")
    if "classes" not in d:
        raise ConfigError("dataset.classes is required")
    fractions = d.get("fractions")
    if not fractions or len(fractions) != 3:
        raise ConfigError("dataset.fractions must list three values")
    path_keys = {"idx": ("images", "labels"), "cifar": ("path",), "synth": ()}[source]
    for key in path_keys:
        if key not in d:
            raise ConfigError(f"dataset.{key} is required for {source} sources")
        p = Path(d[key])
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
            d[key] = str(p)
        if not p.exists():
            raise ConfigError(f"dataset.{key}: no such file: {p}")
    if "conv_channels" not in raw["model"] or not raw["model"]["conv_channels"]:
        raise ConfigError("model.conv_channels must list at least one channel count")
    m = raw["mutation"]
    if "rate" not in m and not m.get("rate_grid"):
        raise ConfigError("mutation.rate or mutation.rate_grid is required")
    cfg = RunConfig(raw)
    cfg.mutation_config(cfg.mutation_rates[0])  # validates operator/floor/count
    if cfg.threshold_policy not in ("equal_recall", "favor_correct", "favor_wrong"):
        raise ConfigError(f"unknown threshold policy {cfg.threshold_policy!r}")
    for kind in cfg.unified_kinds:
        if kind not in ("mlp_2x10", "lda", "qda"):
            raise ConfigError(f"unknown unified classifier kind {kind!r}")
    return cfg


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    stages: dict[str, dict] = field(default_factory=dict)

    def record_stage(self, name: str, outdir: Path, artifacts: dict[str, str],
                     metrics: dict, seconds: float) -> None:
        self.stages[name] = {
            "artifacts": {
                label: {"path": rel, "sha256": _sha256(outdir / rel)}
                for label, rel in artifacts.items()
            },
            "metrics": metrics,
            "seconds": seconds,
        }

    def stage_fresh(self, name: str, outdir: Path) -> bool:
        rec = self.stages.get(name)
        if rec is None:
            return False
        for art in rec["artifacts"].values():
            p = outdir / art["path"]
            if not p.exists() or _sha256(p) != art["sha256"]:
                return False
        return True

    def artifact(self, stage: str, label: str, outdir: Path) -> Path:
        try:
            return outdir / self.stages[stage]["artifacts"][label]["path"]
        except KeyError:
            raise StageError(stage, f"artifact {label!r} is not recorded") from None

    def metrics(self, stage: str) -> dict:
        return self.stages[stage]["metrics"]

    def save(self, outdir: Path) -> None:
        payload = {"config_hash": self.config_hash, "stages": self.stages}
        tmp = outdir / (MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(payload, indent=2, sort_keys=True))
        tmp.replace(outdir / MANIFEST_NAME)

    @classmethod
    def load(cls, outdir: Path) -> "RunManifest":
        payload = json.loads((Path(outdir) / MANIFEST_NAME).read_text())
        return cls(payload["config_hash"], payload["stages"])


# ---------------------------------------------------------------------------
# split storage helpers
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


def _split_files(cfg: RunConfig, split: str) -> tuple[str, str]:
    ext = "cifar" if cfg.image_channels == 3 else "idx"
    return f"data/{split}-images.{ext}", f"data/{split}-labels.{ext}"


def load_split(cfg: RunConfig, outdir: Path, split: str) -> data_mod.Dataset:
    img_rel, lbl_rel = _split_files(cfg, split)
    if cfg.image_channels == 3:
        return data_mod.load_cifar_binary(outdir / img_rel, id_prefix=f"{split}-",
                                          num_classes=cfg.num_classes)
    return data_mod.load_idx(outdir / img_rel, outdir / lbl_rel,
                             id_prefix=f"{split}-", num_classes=cfg.num_classes)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _stage_data(cfg: RunConfig, out: Path):
    full = cfg.build_dataset()
    if len(full) == 0:
        raise ValueError("dataset is empty")
    parts = data_mod.split(full, cfg.dataset["fractions"], int(cfg.dataset["split_seed"]))
    (out / "data").mkdir(exist_ok=True)
    artifacts: dict[str, str] = {}
    rows = []
    sizes = {}
    for split_name, part in zip(SPLITS, parts):
        img_rel, lbl_rel = _split_files(cfg, split_name)
        if cfg.image_channels == 3:
            data_mod.save_cifar_binary(part, out / img_rel)
            artifacts[f"{split_name}_images"] = img_rel
        else:
            data_mod.save_idx(part, out / img_rel, out / lbl_rel)
            artifacts[f"{split_name}_images"] = img_rel
            artifacts[f"{split_name}_labels"] = lbl_rel
        canonical = load_split(cfg, out, split_name)
        sizes[split_name] = len(canonical)
        for i, (sid, src) in enumerate(zip(canonical.ids, part.ids)):
            rows.append((sid, split_name, i, int(canonical.labels[i]), src))
    with open(out / "data" / "splits.csv", "w") as fh:
        fh.write("sample_id,split,index,label,source_id\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    artifacts["splits"] = "data/splits.csv"
    return artifacts, {"sizes": sizes, "classes": cfg.num_classes}


def _stage_train(cfg: RunConfig, out: Path):
    train_set = load_split(cfg, out, "train")
    spec = cfg.model_spec(train_set.images.shape[1:])
    ckpt, history = train(spec, train_set, cfg.hyper())
    save_checkpoint(ckpt, out / "checkpoint.bin")
    with open(out / "history.csv", "w") as fh:
        fh.write("epoch,train_accuracy\n")
        for i, acc in enumerate(history):
            fh.write(f"{i},{acc!r}\n")
    metrics = {"epochs": len(history)}
    for split_name in SPLITS:
        ds = load_split(cfg, out, split_name)
        metrics[f"accuracy_{split_name}"] = evaluate(ckpt, ds) if len(ds) else None
    return ({"checkpoint": "checkpoint.bin", "history": "history.csv"}, metrics)


def _stage_conductance(cfg: RunConfig, out: Path):
    ckpt = load_checkpoint(out / "checkpoint.bin")
    path = PathSpec(steps=cfg.attribution_steps)
    layer = cfg.attribution_layer
    artifacts = {}
    metrics = {"layer": layer or ckpt.spec.conv_layer_names()[-1],
               "steps": cfg.attribution_steps}
    for split_name in SPLITS:
        ds = load_split(cfg, out, split_name)
        matrix, records = conductance_dataset(ckpt, ds, layer=layer, path=path)
        rel = f"conductance_{split_name}.csv"
        write_conductance_csv(out / rel, matrix, records)
        artifacts[split_name] = rel
        metrics[f"wrong_{split_name}"] = int(sum(r.is_wrong for r in records))
    return artifacts, metrics


def _read_scores(path):
    ids, true_c, pred_c, wrong, cols = read_prediction_table(path)
    (name, values), = cols.items()
    return ids, true_c, pred_c, wrong, values


def _stage_detector(cfg: RunConfig, out: Path):
    _, _, _, wrong_tr, matrix_tr = read_conductance_csv(out / "conductance_train.csv")
    settings = cfg.detector_settings
    det = train_error_detector(
        matrix_tr, wrong_tr,
        seed=int(settings.get("seed", 0)),
        epochs=int(settings.get("epochs", 200)),
        learning_rate=float(settings.get("learning_rate", 0.05)),
        patience=int(settings.get("patience", 10)),
    )
    save_detector(det, out / "detector.bin")
    artifacts = {"detector": "detector.bin"}
    metrics = {"holdout_auroc": det.meta.get("holdout_auroc"),
               "epochs_run": det.meta.get("epochs_run")}
    for split_name in SPLITS:
        ids, true_c, pred_c, wrong, matrix = read_conductance_csv(
            out / f"conductance_{split_name}.csv")
        s = score(det, matrix)
        rel = f"cond_scores_{split_name}.csv"
        write_prediction_table(out / rel, ids, true_c, pred_c, wrong, {"score": s})
        artifacts[f"scores_{split_name}"] = rel
        if split_name == "val":
            roc = roc_curve(s, wrong)
            write_roc_csv(out / "roc_conductance_val.csv", roc)
            decision = select_threshold(roc, cfg.threshold_policy, cfg.threshold_target)
            (out / "threshold_conductance.json").write_text(json.dumps({
                "threshold": decision.threshold, "policy": decision.policy,
                "recall_correct": decision.recall_correct,
                "recall_wrong": decision.recall_wrong,
                "target_met": decision.target_met,
            }, sort_keys=True))
            artifacts["roc_val"] = "roc_conductance_val.csv"
            artifacts["threshold"] = "threshold_conductance.json"
            metrics["auroc_val"] = roc.auroc
    return artifacts, metrics


def _stage_mutants(cfg: RunConfig, out: Path):
    ckpt = load_checkpoint(out / "checkpoint.bin")
    val_set = load_split(cfg, out, "val")
    rows = []
    best = None
    for rate in cfg.mutation_rates:
        mconfig = cfg.mutation_config(rate)
        try:
            mset = build_mutant_population(ckpt, mconfig, val_set)
        except MutantYieldError as exc:
            rows.append({"operator": mconfig.operator, "rate": rate, "error": str(exc)})
            continue
        records, labels = lcr_dataset(val_set, ckpt, mset)
        summary = lcr_summary(records, labels)
        rows.append({
            "operator": mconfig.operator, "rate": rate,
            "mean_correct": summary.mean_correct, "std_correct": summary.std_correct,
            "mean_wrong": summary.mean_wrong, "std_wrong": summary.std_wrong,
            "lcr_difference": summary.lcr_difference,
        })
        if summary.lcr_difference is not None and (
                best is None or summary.lcr_difference > best[1]):
            best = (mset, summary.lcr_difference, rate)
    if best is None:
        raise ValueError(
            "no mutation rate produced a measurable LCR separation "
            f"(tried {cfg.mutation_rates}); see lcr_sweep rows: {rows}"
        )
    mset, _, chosen_rate = best
    write_mutant_set(out / "mutants.bin", mset, out / "checkpoint.bin",
                     stored_path="checkpoint.bin")
    with open(out / "lcr_sweep.csv", "w") as fh:
        fh.write("operator,rate,mean_correct,std_correct,mean_wrong,std_wrong,"
                 "lcr_difference,chosen\n")
        for row in rows:
            if "error" in row:
                fh.write(f"{row['operator']},{row['rate']!r},,,,,,0\n")
            else:
                fh.write(
                    f"{row['operator']},{row['rate']!r},{row['mean_correct']!r},"
                    f"{row['std_correct']!r},{row['mean_wrong']!r},{row['std_wrong']!r},"
                    f"{row['lcr_difference']!r},{int(row['rate'] == chosen_rate)}\n"
                )
    metrics = {
        "chosen_rate": chosen_rate,
        "operator": cfg.mutation_config(chosen_rate).operator,
        "count": len(mset),
        "original_val_accuracy": mset.original_val_accuracy,
        "min_mutant_val_accuracy": min(m.val_accuracy for m in mset.mutants),
    }
    return ({"mutants": "mutants.bin", "sweep": "lcr_sweep.csv"}, metrics)


def _stage_lcr(cfg: RunConfig, out: Path):
    mset = read_mutant_set(out / "mutants.bin")
    artifacts = {}
    metrics = {}
    for split_name in SPLITS:
        ds = load_split(cfg, out, split_name)
        records, labels = lcr_dataset(ds, mset.original, mset)
        rel = f"lcr_{split_name}.csv"
        write_lcr_csv(out / rel, records, ds.labels, labels)
        artifacts[split_name] = rel
        if split_name == "val":
            values = np.array([r.lcr for r in records])
            roc = roc_curve(values, labels)
            write_roc_csv(out / "roc_lcr_val.csv", roc)
            decision = select_threshold(roc, cfg.threshold_policy, cfg.threshold_target)
            (out / "threshold_lcr.json").write_text(json.dumps({
                "threshold": decision.threshold, "policy": decision.policy,
                "recall_correct": decision.recall_correct,
                "recall_wrong": decision.recall_wrong,
                "target_met": decision.target_met,
            }, sort_keys=True))
            artifacts["roc_val"] = "roc_lcr_val.csv"
            artifacts["threshold"] = "threshold_lcr.json"
            metrics["auroc_val"] = roc.auroc
            summary = lcr_summary(records, labels)
            metrics["mean_correct"] = summary.mean_correct
            metrics["mean_wrong"] = summary.mean_wrong
            # AUROC as a function of how many mutants vote
            orig_preds = np.array([r.predicted_class for r in predict_dataset(mset.original, ds)])
            dis = disagreement_matrix(ds.images, orig_preds, mset)
            counts = sorted(set(np.linspace(1, len(mset), 10).astype(int).tolist()))
            with open(out / "auroc_vs_mutants.csv", "w") as fh:
                fh.write("mutant_count,auroc\n")
                for m in counts:
                    sub = dis[:m].mean(axis=0)
                    fh.write(f"{m},{roc_curve(sub, labels).auroc!r}\n")
            artifacts["auroc_vs_mutants"] = "auroc_vs_mutants.csv"
    return artifacts, metrics


def _stage_unified(cfg: RunConfig, out: Path):
    features = {}
    for split_name in SPLITS:
        c_ids, true_c, pred_c, c_wrong, c_scores = _read_scores(
            out / f"cond_scores_{split_name}.csv")
        l_ids, _, _, _, l_values = _read_scores(out / f"lcr_{split_name}.csv")
        if c_ids != l_ids:
            raise ValueError(f"{split_name}: conductance and LCR tables disagree on sample ids")
        features[split_name] = (c_ids, true_c, pred_c, c_wrong, c_scores, l_values)
    artifacts = {}
    metrics = {}
    for kind in cfg.unified_kinds:
        _, _, _, y_tr, c_tr, l_tr = features["train"]
        det = train_unified(c_tr, l_tr, y_tr, kind=kind, seed=cfg.unified_seed)
        safe = kind.replace("/", "_")
        save_detector(det, out / f"unified_{safe}.bin")
        artifacts[f"model_{kind}"] = f"unified_{safe}.bin"
        for split_name in SPLITS:
            ids, true_c, pred_c, wrong, c_s, l_s = features[split_name]
            s = score(det, np.column_stack([c_s, l_s]))
            rel = f"unified_{safe}_scores_{split_name}.csv"
            write_prediction_table(out / rel, ids, true_c, pred_c, wrong, {"score": s})
            artifacts[f"scores_{kind}_{split_name}"] = rel
            if split_name == "val":
                roc = roc_curve(s, wrong)
                write_roc_csv(out / f"roc_unified_{safe}_val.csv", roc)
                decision = select_threshold(roc, cfg.threshold_policy, cfg.threshold_target)
                (out / f"threshold_unified_{safe}.json").write_text(json.dumps({
                    "threshold": decision.threshold, "policy": decision.policy,
                    "recall_correct": decision.recall_correct,
                    "recall_wrong": decision.recall_wrong,
                    "target_met": decision.target_met,
                }, sort_keys=True))
                artifacts[f"roc_{kind}_val"] = f"roc_unified_{safe}_val.csv"
                artifacts[f"threshold_{kind}"] = f"threshold_unified_{safe}.json"
                metrics[f"auroc_val_{kind}"] = roc.auroc
    return artifacts, metrics


def _stage_verdicts(cfg: RunConfig, out: Path):
    kind = cfg.unified_kinds[0]
    safe = kind.replace("/", "_")
    decision = json.loads((out / f"threshold_unified_{safe}.json").read_text())
    ids, true_c, pred_c, wrong, s = _read_scores(out / f"unified_{safe}_scores_test.csv")
    flagged = s >= decision["threshold"]
    write_prediction_table(out / "verdicts_test.csv", ids, true_c, pred_c, wrong,
                           {"score": s, "flagged": flagged.astype(float)})
    report = confusion_report(s, wrong, decision["threshold"])
    (out / "confusion_test.json").write_text(json.dumps({
        "classifier": kind,
        "threshold": report.threshold,
        "wrong_caught": report.wrong_caught,
        "wrong_missed": report.wrong_missed,
        "false_alarms": report.false_alarms,
        "correct_passed": report.correct_passed,
        "recall_wrong": report.recall_wrong,
        "recall_correct": report.recall_correct,
        "total": report.total,
    }, sort_keys=True))
    metrics = {"recall_wrong": report.recall_wrong,
               "recall_correct": report.recall_correct,
               "classifier": kind}
    return ({"verdicts": "verdicts_test.csv", "confusion": "confusion_test.json"}, metrics)


def _stage_report(cfg: RunConfig, out: Path):
    from .report import render_report

    files = render_report(out)
    artifacts = {Path(f).name: str(Path(f).relative_to(out)) for f in files}
    return artifacts, {"files": len(files)}


STAGE_ORDER = ["data", "train", "conductance", "detector", "mutants", "lcr",
               "unified", "verdicts", "report"]

_STAGE_FN = {
    "data": _stage_data,
    "train": _stage_train,
    "conductance": _stage_conductance,
    "detector": _stage_detector,
    "mutants": _stage_mutants,
    "lcr": _stage_lcr,
    "unified": _stage_unified,
    "verdicts": _stage_verdicts,
    "report": _stage_report,
}

STAGE_DEPS = {
    "data": [],
    "train": ["data"],
    "conductance": ["data", "train"],
    "detector": ["conductance"],
    "mutants": ["data", "train"],
    "lcr": ["data", "train", "mutants"],
    "unified": ["detector", "lcr"],
    "verdicts": ["unified"],
    "report": ["data", "train", "conductance", "detector", "mutants", "lcr",
               "unified", "verdicts"],
}


def run_stages(cfg: RunConfig, outdir, names: list[str], resume: bool = False,
               log=print) -> RunManifest:
    """Run the named stages in pipeline order, checking prerequisites.

    Stages not in names must already be fresh in the manifest; requested
    stages rerun unless resume is set and their artifacts are intact.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = None
    if (outdir / MANIFEST_NAME).exists():
        loaded = RunManifest.load(outdir)
        if loaded.config_hash == cfg.config_hash:
            manifest = loaded
    if manifest is None:
        manifest = RunManifest(cfg.config_hash)
    requested = [s for s in STAGE_ORDER if s in names]
    if set(names) - set(STAGE_ORDER):
        raise ValueError(f"unknown stages: {sorted(set(names) - set(STAGE_ORDER))}")
    for name in requested:
        missing = [d for d in STAGE_DEPS[name]
                   if d not in requested and not manifest.stage_fresh(d, outdir)]
        if missing:
            raise StageError(name, f"missing prerequisite stages: {', '.join(missing)}; "
                                   f"run them first or use the full pipeline")
    for name in requested:
        if resume and manifest.stage_fresh(name, outdir):
            log(f"[{name}] up to date, skipping")
            continue
        start = time.perf_counter()
        try:
            artifacts, metrics = _STAGE_FN[name](cfg, outdir)
        except StageError:
            manifest.save(outdir)
            raise
        except Exception as exc:
            manifest.save(outdir)
            raise StageError(name, str(exc)) from exc
        seconds = time.perf_counter() - start
        manifest.record_stage(name, outdir, artifacts, metrics, seconds)
        manifest.save(outdir)
        log(f"[{name}] done in {seconds:.1f}s")
    return manifest


def run_pipeline(cfg: RunConfig, outdir, resume: bool = False, log=print) -> RunManifest:
    """Execute every stage from dataset to report."""
    return run_stages(cfg, outdir, STAGE_ORDER, resume=resume, log=log)
