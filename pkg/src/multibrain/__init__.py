"""Multi-participant brain-tuning of a toy speech transformer.

Subpackages cover the full loop: synthetic dataset generation with known
ground truth, paired-sample construction, low-rank adapter tuning against
multi-participant responses, voxel-wise ridge encoding with noise-ceiling
normalization, and experiment harnesses (efficiency, scaling,
cross-dataset, probes) behind one CLI.
"""

__version__ = "0.1.0"
