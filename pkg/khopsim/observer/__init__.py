"""Distributed k-hop state and input observers."""
