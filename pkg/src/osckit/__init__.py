"""osckit: open-set image classification methods, end to end, at desk scale.

Three training regimes (plain softmax, garbage class, entropic open-set
loss) on a small MLP backbone; five post-processors (MSS, MLS, OpenMax,
EVM, PROSER); the full open-set evaluation stack (OSCR curves, CCR@FPR,
AUROC); synthetic open-set protocols with controllable difficulty; and an
experiment harness with hyperparameter grid search.
"""

from .evt import HIGH, LOW, DegenerateTailError, WeibullModel, weibull_cdf, weibull_fit, weibull_survival
from .harness import (ExperimentConfig, GridResult, PAPER_EVM_GRID,
                      PAPER_OPENMAX_GRID, PAPER_PROSER_GRID, grid_search,
                      run_experiment)
from .metrics import (DEFAULT_ZETAS, OscrCurve, auroc, ccr_at_fpr, ccr_fpr_at,
                      closed_set_accuracy, oscr_curve, score_histogram)
from .numerics import SeededRng, argmax_stable, cosine_distance, sample_beta, softmax
from .postproc import (EvmModel, MlsModel, MssModel, OpenMaxModel, ProserModel,
                       ScoreMatrix, evm_fit, evm_reduce, evm_scores, mls_scores,
                       mss_scores, openmax_fit, openmax_scores, proser_finetune,
                       proser_scores)
from .protocol import (ProtocolData, ProtocolSpec, generate_protocol,
                       load_features_csv, save_features_csv)
from .training import (BackboneModel, TrainingRegime, eos_targets, extract,
                       garbage_class_weights, loss_gradient, one_hot_targets,
                       train, weighted_cce_loss)

__version__ = "0.1.0"
