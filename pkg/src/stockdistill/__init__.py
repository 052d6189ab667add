"""Future-aware teacher-student distillation for stock trend prediction.

A teacher network fuses historical spatiotemporal embeddings with an
encoding of realized future trends through multi-channel attention; a
student network sees history only and learns the teacher's future-aware
representations through a kernel-dependence distillation loss.  The package
bundles the tensor/autodiff engine, data handling, both training phases,
evaluation metrics, back-testing, and a synthetic regime-shift generator.
"""

__version__ = "0.1.0"
