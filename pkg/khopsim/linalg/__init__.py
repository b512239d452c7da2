"""Dense linear-algebra kernels."""
