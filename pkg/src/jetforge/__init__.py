"""jetforge: desk-scale optimization pipeline for darknet UAV detectors.

Parse a darknet detector into a graph IR, fuse and rewrite layers, simulate
f16/i8 quantization with entropy-calibrated ranges, and measure the
consequences with a reference executor, an mAP@0.5 evaluator and a latency
harness.
"""

__version__ = "0.1.0"
