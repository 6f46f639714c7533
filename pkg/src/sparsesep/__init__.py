"""Target speech separation with a personal-VAD branch.

Time-domain separation trained on sparsely overlapped mixtures: weighted
SI-SNR loss, joint VAD learning, mixture simulation, and early-exit
inference with RTF benchmarking.
"""

__version__ = "0.1.0"
