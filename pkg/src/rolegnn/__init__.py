"""Relational deep learning with learnable table-as-node / table-as-edge roles.

The pipeline: ingest a relational database bundle, build its schema graph and a
full-resolution entity graph, sample temporal mini-batches, train a two-branch
GNN whose branch mixture per relation triple is a learned gate, regularized by
functional-dependency losses, and export the learned structure.
"""

__version__ = "0.1.0"
