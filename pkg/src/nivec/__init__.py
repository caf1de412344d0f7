"""Speaker verification toolkit: discriminative frame networks with
GMM-interpretable aggregation, sufficient-statistics extraction,
total-variability i-vectors, and a PLDA + AS-norm scoring backend."""

__version__ = "0.1.0"
