"""Transport-regularized greedy module-wise training on a small numpy autograd core."""
__version__ = "0.1.0"
