"""Piecewise-linear multi-agent traffic signal control.

Subpackages: :mod:`pwltsc.pwlnet` (BReLU networks), :mod:`pwltsc.ehh`
(hinging-hyperplane network + ANOVA), :mod:`pwltsc.trafficsim` (queue
simulator), :mod:`pwltsc.env`, :mod:`pwltsc.marl`, :mod:`pwltsc.baselines`,
:mod:`pwltsc.forecast` and the :mod:`pwltsc.cli` front end.
"""

__version__ = "0.1.0"
