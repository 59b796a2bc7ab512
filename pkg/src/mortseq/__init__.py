"""Underlying-cause-of-death prediction from multiple-cause records.

Two model families share one data path: n-gram random-forest ensembles
trained shard by shard, and a two-layer LSTM over one-hot ICD-10 codes
whose penultimate features can be embedded with t-SNE.
"""

__version__ = "0.1.0"
