"""splitleak: feature-leakage attacks on split (edge/cloud) DNN inference.

Modules: tensor (differentiable ops), models (presets, splitting, checkpoints),
wire (framed protocol, deployments, sniffer), shape (feature-shape recovery),
surrogate (adapted surrogate + distillation), attacks (PGD and query attacks),
experiments and reports (seeded pipelines and CSV/SVG/PPM output), cli.
"""

__version__ = "0.1.0"
