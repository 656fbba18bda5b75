"""k-Winners-Take-All networks, attacks and Monte Carlo geometry probes in numpy."""

__version__ = "0.1.0"
