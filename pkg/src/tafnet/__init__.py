"""tafnet: longitudinal paired-volume conversion prediction.

A numpy/scipy implementation of a Siamese 3D CNN encoder with channel
attention, a three-branch temporal fusion module governed by a softmax
adaptive gate, baselines sharing the frozen encoder, a phantom cohort
generator, deterministic preprocessing, a two-phase training harness,
cross-validated evaluation statistics, and interpretability extraction.
"""

__version__ = "0.1.0"
