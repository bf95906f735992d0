"""Architecture-level attribution of generated images.

Subpackages cover the full experiment loop: dataset manifests and configs
(core), the 170-class transformation bank (transforms), the random-weight
generator zoo (zoo), the encoder/projection/classifier network (model),
contrastive and weighted losses (losses), patch plumbing (sampler), the
two-step training pipeline (trainer), evaluation and robustness harnesses
(evaluation), figure emission (viz) and the command line surface (cli).
"""

__version__ = "0.1.0"
