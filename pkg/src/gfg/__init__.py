"""Generative flow graphs: model IR, factorization and variational inference."""

__version__ = "0.1.0"
