"""cleanloop: active annotation-error detection with a human-in-the-loop service."""

from .data import (
    Correction,
    CorrectionOutcome,
    Dataset,
    DatasetError,
    Instance,
    LabelSpace,
    ParseError,
    apply_corrections,
    error_mask,
    error_mask_by_id,
    load_dataset,
    perturb_labels,
    write_dataset,
)
from .evaluation import (
    EvaluationReport,
    ExperimentResult,
    SeedAggregate,
    average_precision,
    format_aggregate_table,
    pr_curve,
    run_experiment,
    seed_aggregate,
)
from .features import DEFAULT_DIM, featurize_text, fnv1a_64
from .loop import (
    ActiveLoop,
    AnnotatorAnswer,
    LoopResult,
    SessionState,
    StopConfig,
    run_loop,
    select_batch,
    should_stop,
    simulated_annotator,
)
from .scoring import (
    EnsembleConfig,
    ScoreVector,
    aggregate_sequence,
    aum_logit,
    aum_prob,
    cu,
    dm,
    ensemble_scores,
    single_run_scores,
    write_scores_csv,
)
from .trainer import (
    DynamicsTensor,
    FoldAssignment,
    TrainerConfig,
    assign_folds,
    best_epoch_by_test_loss,
    cross_validate,
    export_dynamics,
    load_dynamics,
    train_fold,
    train_full,
)

__version__ = "0.1.0"
