"""Part-slot text-to-image person retrieval on a synthetic corpus.

Subpackages: ``kernel`` (float64 reverse-mode autodiff, layers, Adam, FD
checks).  Modules: ``corpus``, ``parts`` (part slot attention), ``similarity``
(TDPA and part-aware scores), ``losses``, ``model``, ``train``, ``retrieval``,
``gradcheck``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
