"""Anytime predictors from early-exit logits.

Load per-exit logits, turn them into predictive-distribution trajectories
whose quality is encouraged (or forced) to be monotone in depth, and audit
the result: monotonicity counters, calibration, conformal set sizes, and
realized quality under interruption budgets.
"""

from .logit_store import (
    DatasetSplit,
    FormatError,
    LogitDataset,
    load_binary,
    load_csv,
    save_binary,
    save_csv,
    split,
)
from .transforms import (
    ActivationSpec,
    ExitWeights,
    ProbTrajectory,
    ThresholdModel,
    TransformSpec,
    adaptive_threshold_transform,
    caching_anytime,
    clipped_activation,
    fit_threshold_model,
    hard_poe,
    load_trajectory,
    mixture_anytime,
    product_anytime,
    save_trajectory,
    shifted_relu_member,
    softmax_latest,
)
from .metrics import (
    MetricReport,
    TrajectoryQuality,
    build_report,
    count_exceeding,
    ece,
    entropy_per_exit,
    entropy_rows,
    full_model_quality,
    hindsight_improvability,
    learn_forget,
    max_drop,
    max_rise,
    mono_zero_percent,
    oc_auroc,
    overthinking,
    quality,
)
from .conformal import (
    ConformalCalibration,
    RapsConfig,
    calibrate,
    coverage_and_size,
    prediction_set,
    raps_score,
)
from .multi_exit_mlp import (
    IntervalEnsemble,
    MultiExitMLP,
    TrainConfig,
    TrainingDiverged,
    finetune_pa,
    generate_simple1d,
    generate_spirals,
    intersect_intervals,
    train,
    train_standard,
)
from .budget_sim import BudgetModel, ServingPolicy, budget_sweep, interrupt_exit, simulate

__version__ = "0.1.0"
