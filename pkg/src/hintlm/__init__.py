"""Query-hint recommendation with plan soft prompts, a causal LM and a pairwise comparator."""

__version__ = "0.1.0"
