"""Energy accounting and early-termination simulation for recorded LLM-agent runs."""

__version__ = "0.1.0"
