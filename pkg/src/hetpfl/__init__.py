"""Heterogeneous personalized federated learning with shareable PQ-LoRA adapters.

Modules, bottom-up: ``linalg`` (SVD, CCA, CKA helpers), ``model`` (frozen
backbones with exact backprop), ``adapter`` (LoRA / PQ-LoRA, gating,
checkpoints), ``align`` (cross-model adapter alignment), ``client`` and
``server`` (one federated round), ``bench`` (synthetic scenario, run loop,
metrics) and ``cli``.
"""

__version__ = "0.1.0"
