"""Physics-informed transfer learning for gas-sorption prediction.

Modules: ``dataset`` (loading, features, group splits), ``isotherm``
(classical fits), ``network`` (residual multi-head model on a small
autodiff core), ``loss``, ``transfer``, ``trainer``, ``uq``, ``explain``,
``ablation`` and ``cli``.
"""

__version__ = "0.1.0"
