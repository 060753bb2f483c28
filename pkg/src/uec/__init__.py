"""Reference-guided exposure correction trained without paired ground truth.

Submodules: ``tensor`` (autodiff), ``isp`` (exposure synthesis), ``model``,
``training``, ``metrics``, ``gradcheck``, ``cli`` and ``desk``.
"""
__version__ = "0.1.0"
