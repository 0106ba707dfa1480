"""Deep bag-of-words classification of multi-metric volumetric scans.

Patches from masked regions are encoded by a from-scratch convolutional
auto-encoder (or used raw), quantized against k-means codebooks into
per-region histograms, joined with tabular columns, and classified by an
RBF-SVM behind greedy feature selection, under repeated stratified CV and a
heldout ensemble protocol. `deepbow.kernels.BACKEND` reports whether the
compiled kernels are active; set DEEPBOW_DISABLE_NUMBA=1 to force the pure
NumPy fallback.
"""

from . import (cae, cli, dataio, errors, evaluation, features, kernels, learn,
               patches, pipeline, seeding, vocab)
from .cae import CaeArch, TrainConfig, init_model
from .dataio import (Dataset, MetricVolume, PhantomSpec, SubjectRecord,
                     generate_phantom_dataset, load_dataset, read_volume,
                     save_dataset, write_volume)
from .evaluation import (ConfusionCounts, CvConfig, FitLog, HeldoutConfig,
                         confusion_metrics, cohort_histograms,
                         heldout_ensemble_eval, repeated_split_cv)
from .features import FeatureMatrix, FeatureVector, standardize_apply, standardize_fit
from .learn import (SvmModel, SvmParams, correlation_rank, forward_select,
                    grid_search, qp_oracle, rbf_kernel, svm_predict, svm_train)
from .patches import PatchSet, apply_norm, extract_patches, fit_norm, stack_metrics
from .pipeline import PatchConfig, RunConfig, run_cv, run_holdout
from .vocab import Codebook, bow_histogram, kmeans_fit, quantize

__version__ = "0.1.0"
