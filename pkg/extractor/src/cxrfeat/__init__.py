"""Offline feature exporter for the multi-task engine.

Runs pretrained DenseNet-161 and EfficientNet-B7 over chest X-ray images
and writes one fused 4768-wide feature vector per image in the engine's
feature CSV contract.
"""

__version__ = "0.1.0"
