"""annoflow: conditional density models for per-annotator label distributions.

Normalizing flows (additive and affine coupling, masked autoregressive) and
a conditional Gaussian mixture baseline, conditioned on text embeddings and
optional annotator profiles, with discretization back to categorical and
ordinal answers and a small evaluation toolkit.
"""

__version__ = "0.1.0"
