"""Causal boosted decision trees for heterogeneous treatment effect estimation."""
