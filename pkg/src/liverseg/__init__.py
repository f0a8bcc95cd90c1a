"""Cascaded coarse-to-fine liver and lesion segmentation for volumetric CT.

Three stages share one convolutional encoder-decoder family: a low-resolution
pass localizes the liver, a region-of-interest pass refines its boundary, and
a native-resolution pass delineates lesions inside the refined liver mask.
Everything runs on a small self-contained numpy autodiff engine.
"""

__version__ = "0.1.0"
