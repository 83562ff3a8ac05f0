"""Face deidentification with a trained generative network, plus a
reidentification-risk evaluation harness on a procedural face corpus."""

__version__ = "0.1.0"
