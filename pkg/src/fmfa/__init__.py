"""Cross-modal text-image alignment losses with analytic gradients."""

from .config import ConfigError, RunConfig, load_run_config, parse_run_config
from .data_io import (
    BadMagicError,
    CountMismatchError,
    EmbeddingFileError,
    ManifestEntry,
    ManifestError,
    PairedDataset,
    TruncatedFileError,
    VersionMismatchError,
    load_dataset,
    make_dataset,
    read_embedding_file,
    read_manifest,
    synthesize_dataset,
    write_dataset,
    write_embedding_file,
    write_manifest,
)
from .global_align import (
    EmbeddingSet,
    adaptive_weight_pair,
    adaptive_weights,
    asdm_loss,
    matching_probabilities,
    sdm_loss,
    true_matching_distribution,
)
from .local_align import (
    LocalFeatureBatch,
    OpCounter,
    ProbeRecord,
    SparseAggregation,
    aggregation_weights,
    build_joint,
    complexity_probe,
    efa_loss,
    efa_triplet_loss,
    group_vision_embeddings,
    hard_similarity,
    hard_similarity_matrix,
    raw_similarity,
    soft_similarity,
    sparsify,
)
from .metrics import RetrievalReport, mean_average_precision, rank_k, retrieval_report
from .numeric import (
    cosine_similarity_matrix,
    lse_pool,
    minmax_normalize_rows,
    row_softmax,
)
from .objectives import (
    ClassifierHead,
    finite_diff_check,
    id_loss,
    run_gradient_check_suite,
    sgd_step,
    total_loss,
    total_loss_with_components,
)
from .params import HyperParams, LossReport, LossSwitches
from .trainer import ToyEncoder, TrainingDivergedError, TrainReport, train_toy

__version__ = "0.1.0"
