"""Invariant learning with a contrastive diversity term.

Modules: ``autograd`` (tape-based reverse-mode AD), ``models`` (MLP
featurizer, classifier, projector), ``data`` (Gaussian environments,
ColoredMNIST, IDX parsing), ``losses`` (cross-entropy, IRMv1, VREx, Fishr,
contrastive loss), ``training``, ``probes`` (feature strength scans) and
``cli``.
"""

__version__ = "0.1.0"
