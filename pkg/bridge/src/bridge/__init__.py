"""Neural model bridge: a small pretrained transformer served behind the
reasoning toolkit wire protocol."""

__version__ = "0.1.0"
