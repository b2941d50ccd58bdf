"""Sample-quality metrics and ex-post latent density baselines."""

from glf.metrics.fid import GaussianStats, fid, fit_gaussian, frechet_distance, matrix_sqrt_psd
from glf.metrics.gmm import GmmModel, fit_gmm_em, gaussian_sample, gmm_log_likelihood, gmm_sample
from glf.metrics.kmeans import kmeans, kmeans_plusplus
from glf.metrics.prd import PrdResult, curve_from_histograms, f_beta, prd

__all__ = [
    "GaussianStats", "GmmModel", "PrdResult", "curve_from_histograms", "f_beta", "fid",
    "fit_gaussian", "fit_gmm_em", "frechet_distance", "gaussian_sample", "gmm_log_likelihood",
    "gmm_sample", "kmeans", "kmeans_plusplus", "matrix_sqrt_psd", "prd",
]
