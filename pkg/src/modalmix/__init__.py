"""Desk-scale mixed-modality masked cluster prediction.

A single encoder is pre-trained on synthetic two-modality frame sequences
with modality dropout and a shared K-means target codebook, then fine-tuned
on one modality and evaluated on all of them. Everything runs on CPU in
float64 on top of a small reverse-mode autodiff core, so every number in
the pipeline is reproducible bit-for-bit from a config and a seed.
"""

__version__ = "0.1.0"
