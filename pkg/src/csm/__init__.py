"""Collaborative state machine runtime.

Subpackages cover the description language (model, parsing, validation),
the embedded expression language (expr), scoped data contexts (data),
instance execution (executor), event routing (events), multi-runtime
hosting and placement (runtime, coordinator), and the railway-crossing
benchmark harness (bench).
"""

__version__ = "0.1.0"
