"""Post-encoder analysis toolkit for vision-language embeddings."""

from .concepts import (
    ConceptAssignment,
    ConceptBottleneck,
    ConceptFilter,
    SparseLinearModel,
    cbm_predict,
    find_artifact_neurons,
    fit_concept_filter,
    intervene,
    linear_assignment,
    name_concepts,
)
from .exceptions import EmbedlabError
from .metrics import (
    MetricEntry,
    auroc,
    balanced_accuracy,
    bootstrap_ci,
    f1_scores,
    multiclass_auroc,
    paired_t_test,
    sensitivity,
    welch_t_test,
    wilcoxon_signed_rank,
)
from .objectives import ContrastiveBatch, MaskedBatch, infonce_loss, mim_loss
from .probe import LinearProbe, ProbeModel, fit_probe, predict_probe
from .retrieval import RetrievalResult, precision_at_k, recall_at_k, retrieve
from .sae import SaeModel, SaeTrainConfig, SparseAutoencoder, load_sae, sae_decode, sae_encode, sae_train, save_sae
from .store import (
    DatasetManifest,
    EmbeddingMatrix,
    PromptTemplateSet,
    Vocabulary,
    load_embeddings,
    load_manifest,
    load_templates,
    load_vocabulary,
    normalize_rows,
    save_embeddings,
)
from .survival import CoxPH, cox_fit, kaplan_meier, log_rank, time_dependent_auc
from .zeroshot import ClassPrototypeMatrix, ZeroShotClassifier, ZeroShotConfig, build_prototypes, classify

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
