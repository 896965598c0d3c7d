"""Runtime exception handling for agentic workflows.

Classify a raw exception signal against a fixed taxonomy, resolve it to a
handler pattern, execute the pattern, and escalate through log-driven root
cause analysis when local handling fails.
"""

__version__ = "0.1.0"
