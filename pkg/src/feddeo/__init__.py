"""Desk-scale simulator of description-guided one-shot federated learning.

Clients fit small conditioning vectors ("descriptions") against a frozen
conditional diffusion model and upload only those vectors; the server replays
them to generate synthetic data and trains one aggregated classifier in a
single communication round. The package is organized as a library plus a CLI
(``feddeo``) that runs the staged pipeline and renders figures.
"""

__version__ = "0.1.0"
