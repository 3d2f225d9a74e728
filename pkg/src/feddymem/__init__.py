"""Federated unsupervised anomaly detection via shared dynamic memory banks.

Clients train a small projection + memory-generator head over frozen
pyramid features, compress per-sample memory features into one bank-sized
tensor (distance-weighted average + round EMA), and the server merges the
client banks by k-means into a single global bank redistributed each round.
Detection queries the bank by nearest-neighbor distance.
"""

__version__ = "0.1.0"
