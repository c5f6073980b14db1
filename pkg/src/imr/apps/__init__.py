"""Workloads built on the public API."""

from .gimv import gimv_app
from .kmeans import kmeans_app, lloyd
from .pagerank import pagerank_app
from .paircount import pair_count_accumulator, pair_count_map
from .sssp import sssp_app
from .wordcount import in_edge_sum_map, sum_reduce, wordcount_map, int_sum_accumulator

APPS = ("pagerank", "sssp", "kmeans", "gimv")

__all__ = [
    "APPS",
    "gimv_app",
    "in_edge_sum_map",
    "int_sum_accumulator",
    "kmeans_app",
    "lloyd",
    "pagerank_app",
    "pair_count_accumulator",
    "pair_count_map",
    "sssp_app",
    "sum_reduce",
    "wordcount_map",
]
