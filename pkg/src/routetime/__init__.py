"""Joint estimation of arc travel times and recursive logit route choice."""

__version__ = "0.1.0"
