"""Classical and learned (unrolled primal-dual) 2D CT reconstruction."""

__version__ = "0.1.0"
