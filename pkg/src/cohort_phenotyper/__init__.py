"""Longitudinal cohort phenotyping: preprocessing and feature ranking, a
random-intercept logistic model, and t-SNE plus Gaussian-mixture clustering
with divergence and trajectory summaries."""
from .cluster import (GmmConfig, GmmModel, assign_clusters, bic, compare_clusters, gmm_fit_em,
                      kld_gaussian_1d, per_feature_kld, select_k, trajectory_distances)
from .cohort import (Cohort, FeatureSpec, assign_outcome_group, read_cohort, summarize_by_outcome,
                     write_cohort)
from .evaluation import (ConfusionCounts, MetricsReport, confusion_metrics, cross_validate,
                         evaluate_by_stratum)
from .forest import ForestConfig, fit_random_forest, rank_features
from .lgmm import (FitConfig, LgmmDesign, LgmmFit, lgmm_fit, lgmm_loglik, lgmm_loglik_grad,
                   lgmm_predict, wald_table)
from .pipeline import PipelineConfig, run_pipeline
from .preprocess import (augment_quadratic, encode_categoricals, impute_knn, mahalanobis_outliers,
                         smote_oversample)
from .synth import SynthConfig, generate_cohort, reference_config
from .tsne import TsneConfig, perplexity_calibration, tsne_cost_grad, tsne_embed

__version__ = "0.1.0"
