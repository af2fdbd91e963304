"""Clustering-based unsupervised domain adaptation for recognition embeddings."""
from .adaptation import (AdapterParams, LossBreakdown, TrainConfig, backward, forward, run_cda,
                         softmax_cls_loss, stage2_mmd_adapt, stage4_pseudo_adapt, total_loss)
from .clustering import (ClusterConfig, ClusterGraph, PseudoLabeling, SimplifiedSpectralClustering,
                         assign_scattered, build_graph, cluster_quality, components_to_clusters,
                         compute_prototypes, connected_components, cosine_similarity_matrix,
                         pseudo_label_pipeline)
from .embedding_io import EmbeddingSet, SynthConfig, load_embeddings, save_embeddings, synthesize_domain_pair
from .estimator import ClusteringDomainAdapter
from .evaluation import EvalReport, ScoreSet, cmc, export_projection, pair_scores, tar_at_far, tpir_at_fpir
from .kernels import (KernelSpec, MmdEstimate, bandwidth_ladder, gaussian_kernel, median_bandwidth,
                      mmd_biased, mmd_biased_gradient, mmd_linear_streaming, mmd_unbiased_quadratic,
                      multi_kernel)

__version__ = "0.1.0"
