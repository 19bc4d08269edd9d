"""warmadapt: tree-guided warm-start adaptation for tiny CTC recognizers.

Desk-scale toolkit: synthetic language families laid out on a tree,
similarity-based source selection, multi-task / first-order meta-learning
warm-up of adapter and downstream parameters over a frozen backbone, and
per-target fine-tuning evaluated by character error rate.
"""

__version__ = "0.1.0"
