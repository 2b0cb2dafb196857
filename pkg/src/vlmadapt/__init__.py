"""Self-contained semi-supervised adaptation pipeline for a miniature
visually-conditioned language model: adapt on a few labelled examples,
self-label an unlabelled pool, filter, and retrain with a weighted loss."""

__version__ = "0.1.0"
