"""rgnn: a relation-aware region-graph classification head, end to end.

Self-contained fp64 stack: tensor tape with reverse-mode differentiation,
HOG-style region proposals, bilinear region pooling over a toy convolutional
backbone, personalized-PageRank message passing with gated attentional
readout, pairwise attentional context refinement, SGD training on a
synthetic fine-grained shape dataset, and analysis/ablation tooling.
"""

__version__ = "0.1.0"
