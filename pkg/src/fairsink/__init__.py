"""Group-fairness regularization for contrastive dual encoders."""

import logging

from .dataspace import AttributeSchema, Dataset, Sample, group_index, load_dataset, save_dataset, split_dataset
from .errors import ConfigurationError, DataError, FairsinkError, MetricError, NumericalError, SchemaError
from .fairmetrics import MetricsReport, auc, deodds, dpd, es_auc, evaluate
from .objective import (
    OFFICIAL_MODE,
    PAIRED_MODE,
    Batch,
    GroupPool,
    LossConfig,
    ScoreMode,
    clip_loss,
    fair_regularizer,
    fairplus_regularizer,
    group_score_distributions,
    similarity_scores,
    total_loss,
)
from .trainer import (
    Checkpoint,
    FairCLIPEstimator,
    LinearProbe,
    ModelParams,
    TrainConfig,
    init_model,
    train,
    train_linear_probe,
    zero_shot_scores,
)
from .transport import (
    DistanceConfig,
    ScoreDistribution,
    TransportPlan,
    distance,
    distance_gradient,
    mmd,
    sinkhorn_divergence,
    sinkhorn_plan,
)

logging.getLogger(__name__).addHandler(logging.NullHandler())

__version__ = "0.1.0"
