"""Speech emotion recognition toolkit: contrastive fine-tuning of a
classifier head over frozen feature embeddings, with kNN-refined inference
over an embedding datastore."""

from .augment import AugmentSpec, Waveform
from .config import RunConfig, load_config, parse_config, serialize_config
from .corpus import (
    Corpus,
    FoldSpec,
    LabeledEmbedding,
    Manifest,
    SyntheticConfig,
    UtteranceMeta,
    generate_synthetic_corpus,
    load_corpus,
    load_embeddings,
    load_manifest,
    make_folds,
    pool_frames,
    save_embeddings,
    save_manifest,
    split_by_fold,
)
from .encoder import HeadParams, forward, forward_batch, init_params, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericsError, SerconError
from .inference import (
    EvalReport,
    PipelineOptions,
    evaluate,
    interpolate,
    predict,
    run_pipeline,
    search_hparams,
)
from .objective import ContrastiveBatch, LossConfig, ce_loss, combined_loss, scl_loss
from .retrieval import Datastore, NeighborSet, build_datastore, knn_distribution, knn_search
from .trainer import TrainConfig, TrainState, build_batch, plateau_schedule, sgd_step, train_fold

__version__ = "0.1.0"
