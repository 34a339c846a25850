"""misfire: flag likely-wrong predictions of a small CNN classifier.

Two complementary signals are computed per prediction: the conductance
pattern of the model's last convolutional layer (how the pre-softmax score
decomposes over feature maps) and the Label Change Rate under a population
of weight-mutated model variants. Each feeds an error detector; a unified
classifier combines them. The pipeline module orchestrates the whole run
and the CLI exposes it as subcommands.
"""

from .autodiff import (
    ShapeError,
    Tape,
    backward,
    backward_from,
    conv2d,
    finite_diff_gradient,
    softmax,
    tensor,
)
from .conductance import (
    PathSpec,
    completeness_residual,
    conductance_dataset,
    feature_map_conductance,
    integrated_gradients,
    neuron_conductance_direct,
    neuron_conductance_fast,
    read_conductance_csv,
    write_conductance_csv,
)
from .container import DataFormatError
from .data import Dataset, load_cifar_binary, load_idx, save_idx, split, synth_shapes
from .detector import (
    ConfusionReport,
    DetectorModel,
    RocCurve,
    ThresholdDecision,
    auroc_pair_oracle,
    confusion_report,
    load_detector,
    roc_curve,
    save_detector,
    score,
    select_threshold,
    train_error_detector,
    train_unified,
    write_roc_csv,
)
from .models import (
    Checkpoint,
    Conv,
    Dense,
    Hyper,
    MaxPool,
    ModelSpec,
    PredictionRecord,
    TrainingDivergedError,
    evaluate,
    forward_record,
    init_checkpoint,
    load_checkpoint,
    predict,
    predict_dataset,
    save_checkpoint,
    train,
)
from .mutation import (
    LcrRecord,
    LcrSummary,
    Mutant,
    MutantSet,
    MutantYieldError,
    MutationConfig,
    apply_mutant,
    build_mutant_population,
    generate_mutant,
    kernel_count,
    label_change_rate,
    lcr,
    lcr_dataset,
    lcr_difference,
    lcr_summary,
    read_mutant_set,
    write_mutant_set,
)
from .pipeline import RunConfig, RunManifest, StageError, load_config, run_pipeline
from .report import render_report

__version__ = "0.1.0"

# The mutation-rate grid studied at full scale; desk-scale runs pick their
# own rate by maximizing the LCR separation margin over a configured grid.
DEFAULT_RATE_GRID = (0.001, 0.0015, 0.002, 0.0025)
