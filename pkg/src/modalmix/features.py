"""Encoder feature extraction from corpus utterances.

Shared by target building, cluster-quality metrics and projections. All
extraction runs without masking, noise or modality sampling; the stream
subset is explicit ("full" = everything the utterance has).
"""

import numpy as np

from . import model as mdl

SUBSETS = ("full", "ab", "a", "b")


def modality_input(utt, subset: str = "full") -> mdl.ModalityInput:
    """Build the encoder input for one utterance under a stream subset.

    "a"/"b" keep only that stream (the other is zero-filled inside the
    encoder); "ab" requires both streams; "full" uses whatever is present.
    """
    if subset not in SUBSETS:
        raise ValueError(f"unknown subset {subset!r}")
    a, b = utt.features_a, utt.features_b
    if subset == "a":
        b = None
    elif subset == "b":
        a = None
    elif subset == "ab":
        if utt.features_a is None or utt.features_b is None:
            raise ValueError(f"utterance {utt.id} lacks a stream for subset 'ab'")
    if subset != "full":
        if (subset in ("a", "ab") and a is None) or (subset in ("b", "ab") and b is None):
            raise ValueError(f"utterance {utt.id} lacks a stream for subset {subset!r}")
    return mdl.ModalityInput(features_a=a, features_b=b)


def final_features(params: mdl.ModelParams, utt, subset: str = "full") -> np.ndarray:
    """(T, dim_embed) final-layer encoder output, no masking."""
    _, final = mdl.encode(params, modality_input(utt, subset), collect_layers=False)
    return final.data


def layer_features(params: mdl.ModelParams, utt, subset: str = "full") -> list:
    """Per-depth feature sequences: [embedding, block1, ..., final].

    The last entry is the layer-normed final output (what every consumer of
    "final" features sees); earlier entries are raw residual-stream states.
    """
    layers, final = mdl.encode(params, modality_input(utt, subset), collect_layers=True)
    return [t.data for t in layers[:-1]] + [final.data]


def pooled_features(params: mdl.ModelParams, utts, subset: str = "full") -> np.ndarray:
    """Stack final features over utterances: (sum T_i, dim_embed)."""
    return np.concatenate([final_features(params, u, subset) for u in utts], axis=0)
