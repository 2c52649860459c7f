"""Duty-cycle control of a solar energy-harvesting sensor node.

Modules: ``env`` (node simulator), ``harvest`` (traces and forecasts),
``rewards``, ``ppo`` and ``sarsa`` (learners), ``lp`` (offline optimum),
``metrics``, ``experiment``, ``sweep`` and ``cli``.
"""

__version__ = "0.1.0"
