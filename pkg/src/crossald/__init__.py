"""Cross-adversarial local distribution regularization for semi-supervised segmentation.

Modules: ``autodiff`` (numpy reverse-mode engine), ``segnet`` (tiny
encoder-decoder), ``losses`` (Dice/KL losses and segmentation metrics),
``sampler`` (VAT and Stein particle samplers), ``cross_ald`` (Beta mixing
regularizers), ``trainer``, ``synth_data``, ``experiments`` and ``cli``.
"""

__version__ = "0.1.0"
