"""growseg: unsupervised 3D point-cloud semantic segmentation.

Builds geometric superpoints, progressively grows them with learned
features, clusters them into semantic primitives that pseudo-label a small
hand-differentiated feature extractor, and evaluates with Hungarian-matched
clustering metrics. CPU-only, deterministic given a seed.
"""

__version__ = "0.1.0"
