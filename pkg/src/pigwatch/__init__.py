"""Pipeline fouling analysis: head loss, PIG indicator regression and acoustic PIG tracking."""

__version__ = "0.1.0"
