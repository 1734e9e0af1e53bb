"""Sketched alternating nonnegative least squares, distributed and federated."""

from .bench_io import (
    DatasetSpec,
    gen_synthetic,
    read_config,
    read_matrix_market,
    read_matrix_market_header,
    write_matrix_market,
)
from .cluster import AsyncChannel, Envelope, SyncCluster, Tag, all_reduce_sum, dsanls_run
from .estimator import SecureNMF, SketchedNMF
from .exceptions import *  # noqa: F401,F403
from .matcore import OpCounter, Partition, frobenius_norm, make_partition, partition_indices, relative_error
from .sanls import RunConfig, RunTrace, nmf_run, run, sanls_run
from .secure import (
    RelaxationState,
    SecureConfig,
    asyn_server_update,
    privacy_audit,
    run_protocol,
    sketch_recovery_attack,
    syn_sd_run,
    syn_ssd_run,
)
from .sketch import SketchMatrix, gen_gaussian_sketch, gen_sketch, gen_subsampling_sketch

__version__ = "0.1.0"
