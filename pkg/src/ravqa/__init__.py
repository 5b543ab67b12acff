"""Rationale-augmented visual question answering, desk scale.

Subpackages cover the tensor core (autodiff, tensorstore), the gated
cross-attention model (model), serialization strategies for answers and
rationales (strategies), training and evaluation (training, metrics), dataset
plumbing (data), the human-in-the-loop annotation service (annotate, service),
an sklearn-style estimator facade (estimator), and the command line (cli).
"""

__version__ = "0.1.0"
