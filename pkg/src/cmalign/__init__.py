"""Cross-modal feature alignment for re-identification, on a small numpy autograd."""

__version__ = "0.1.0"
