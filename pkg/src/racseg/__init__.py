"""Reliability-adaptive consistency training for weakly supervised point-cloud segmentation.

Modules:

- :mod:`racseg.pointcloud` clouds, labels, file formats, k-NN
- :mod:`racseg.augment` PointWolf, affine, jitter and per-point mixing
- :mod:`racseg.reliability` view statistics and the reliable/ambiguous split
- :mod:`racseg.losses` losses with analytic logit gradients
- :mod:`racseg.segmodel` a small point network with manual backprop and SGD
- :mod:`racseg.synthdata` procedural scenes and click annotation
- :mod:`racseg.trainer` the training step, evaluation and metrics files
- :mod:`racseg.config` / :mod:`racseg.cli` run files and the ``racseg`` command
"""
__version__ = "0.1.0"
