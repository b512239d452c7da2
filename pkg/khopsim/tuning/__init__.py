"""Observer gain design and convergence certificates."""
