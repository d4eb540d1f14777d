"""Dual-lane (fast Talker / slow Planner) meeting assistant toolkit.

Submodules: ``taxonomy``, ``corpus``, ``synth``, ``router``, ``policy``,
``tools``, ``orchestrator``, ``simulation``, ``evalkit`` and ``cli``.
"""

__version__ = "0.1.0"
