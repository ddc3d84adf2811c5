"""Quadripartite RBM toolkit: block-Gibbs sampling, spin-program bridge,
virtual annealer backend, and effective-inverse-temperature calibration."""

from .rbm import (
    PARTITIONS,
    PAIRS,
    PartitionLayout,
    QuadripartiteRBM,
    QuadState,
    SampleBatch,
    activation_field,
    batch_energy,
    block_gibbs_step,
    conditional_prob_one,
    energy,
    fold_condition,
    load_rbm,
    random_rbm,
    sample,
    save_rbm,
)

__version__ = "0.1.0"
