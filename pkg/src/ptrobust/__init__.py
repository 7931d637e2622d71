"""Perturbation-robustness harness for multi-label publication-type
classification: corpus tooling, knowledge-guided perturbation, masking and
domain-adversarial training strategies, and the robustness metrics suite."""

__version__ = "0.1.0"
