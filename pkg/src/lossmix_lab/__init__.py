"""Loss-interpolation data mixing for object detection, at desk scale.

Subpackages map to the pieces of the pipeline: :mod:`tensor` (autodiff),
:mod:`scenegen` (synthetic scenes), :mod:`mixing`, :mod:`detector`,
:mod:`losses`, :mod:`evaluation`, :mod:`da` (mean-teacher adaptation) and
:mod:`harness` (seeded experiment runs).
"""
__version__ = "0.1.0"
