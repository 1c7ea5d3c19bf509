"""Desk-scale graph-conditioned diffusion lab.

Pipeline: synthetic (image, labeled mask) pairs -> proxy graph extraction
(centers of mass + segment-visibility edges) -> per-node features ->
adjacency-masked graph encoder -> cascaded diffusion conditioned on graph
tokens -> graph interventions -> fidelity and segmentation metrics.
"""

__version__ = "0.1.0"
