"""Feature-based hierarchical clustering of smart-meter load series.

Pipeline: ingest half-hourly readings, transform to seasonally
differenced log loads, summarize each series by autocorrelations,
partial autocorrelations and quantile autocovariances, cluster the
population from Euclidean dissimilarities with agglomerative linkage,
then validate and explain the clusters.
"""

from .config import PipelineConfig
from .dissimilarity import CondensedMatrix, build_matrix, euclidean
from .errors import LoadClustError
from .evaluate import (
    adjusted_rand_index,
    chi_squared_test,
    cluster_feature_means,
    contingency_table,
    hourly_profile,
    medoid,
)
from .features import (
    FeatureVector,
    acf,
    pacf,
    qac_feature_vector,
    quantile_autocov,
    sample_quantile,
    select_max_lag_bic,
)
from .hclust import Dendrogram, Partition, agglomerate, cut, flag_atypical
from .ingest import LoadSeries, filter_by_missingness, parse_readings
from .preprocess import DiffSeries, LogSeries, impute_short_gaps, log_transform, seasonal_difference
from .treeimportance import (
    DecisionTree,
    TreeParams,
    cv_misclassification,
    fit_tree,
    predict,
    predictor_importance,
)

__version__ = "0.1.0"
