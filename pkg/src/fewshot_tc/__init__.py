"""Few-shot encrypted-traffic classification workbench.

Monolithic, transfer, meta- and contrastive learning over packet time
series, compared under class-disjoint episodic evaluation.
"""
__version__ = "0.1.0"
