"""Group-adaptive classifiers for demographic bias mitigation, in plain numpy."""

__version__ = "0.1.0"
