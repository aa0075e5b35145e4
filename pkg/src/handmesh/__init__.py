"""Hand mesh recovery from images and 2D keypoints.

Modules: ``mesh`` (triangle meshes and adjacency), ``spiral`` (spiral
sequences and convolution), ``sampling`` (decimation hierarchy and
upsampling), ``autodiff`` (tensor helpers, Adam, checkpoints),
``hand_model`` (parametric hand), ``fitting`` (2D keypoint fitting),
``network`` (encoder, spiral decoder, training), ``dataset`` (keypoint
ingestion and filtering), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
