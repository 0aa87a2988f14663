"""Multi-granularity visual tokens: global, pooled-local and mask-inverted object tokens."""

__version__ = "0.1.0"
