"""Graph topology and k-hop bookkeeping."""
