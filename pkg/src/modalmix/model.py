"""Two-frontend fusion encoder with cluster and task heads.

Per-frame MLP frontends map each modality to a common width; an absent
modality is zero-filled at the frontend-output level before frame-wise
concatenation and linear projection into the shared pre-norm transformer.
Masked frames are replaced by a learned embedding after fusion, then fixed
sinusoidal positions are added. The encoder exposes every intermediate
layer so representations can be analyzed depth-wise.

Parameters live in a flat name -> Tensor dict with stable dotted paths
(e.g. "encoder.block.0.attn.wq") so freeze lists and checkpoints can
address layers by name.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .seeding import rng_for


class ModelError(ValueError):
    """Invalid model configuration or input."""


@dataclass
class ModelConfig:
    dim_a: int = 16        # raw modality-A width
    dim_b: int = 24        # raw modality-B width
    dim_front: int = 32    # frontend output width (per modality)
    dim_embed: int = 64    # shared encoder width
    layers: int = 3
    heads: int = 4
    dim_ffn: int = 128
    n_clusters: int = 40   # cluster head output size
    decoder_layers: int = 1
    vocab_size: int = 23   # transcript alphabet + sos/eos/pad

    def __post_init__(self):
        if self.layers < 1:
            raise ModelError(f"need layers >= 1, got {self.layers}")
        if self.n_clusters < 2:
            raise ModelError(f"need n_clusters >= 2, got {self.n_clusters}")
        if self.dim_embed % self.heads != 0:
            raise ModelError(f"dim_embed {self.dim_embed} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "dim_a", "dim_b", "dim_front", "dim_embed", "layers", "heads",
            "dim_ffn", "n_clusters", "decoder_layers", "vocab_size")}


@dataclass
class ModalityInput:
    """Raw features for one utterance; at least one stream present."""

    features_a: np.ndarray = None  # (T, D_a) or None
    features_b: np.ndarray = None  # (T, D_b) or None

    def __post_init__(self):
        if self.features_a is None and self.features_b is None:
            raise ModelError("at least one modality must be present")
        if (self.features_a is not None and self.features_b is not None
                and self.features_a.shape[0] != self.features_b.shape[0]):
            raise ModelError(
                f"modality lengths differ: {self.features_a.shape[0]} vs {self.features_b.shape[0]}")

    @property
    def frames(self) -> int:
        ref = self.features_a if self.features_a is not None else self.features_b
        return ref.shape[0]


class ModelParams:
    """Flat named parameter store plus the config that shaped it."""

    def __init__(self, config: ModelConfig, tensors: dict):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> nc.Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self):
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {
            n: nc.parameter(n, t.data.copy()) for n, t in self.tensors.items()})

    def drop_prefix(self, prefix: str):
        self.tensors = {n: t for n, t in self.tensors.items() if not n.startswith(prefix)}

    def frozen_names(self, l_frz: int) -> set:
        """Names frozen permanently when the first l_frz encoder blocks are.

        Freezing any block also freezes everything below it (frontends,
        fusion, mask embedding); freezing all blocks freezes the final
        layer norm too, i.e. the whole pre-trained encoder stack.
        """
        cfg = self.config
        if not (0 <= l_frz <= cfg.layers):
            raise ModelError(f"l_frz must be in [0, {cfg.layers}], got {l_frz}")
        if l_frz == 0:
            return set()
        frozen = {n for n in self.tensors
                  if n.startswith(("frontend_a.", "frontend_b.", "fusion.")) or n == "mask_embed"}
        for i in range(l_frz):
            frozen |= {n for n in self.tensors if n.startswith(f"encoder.block.{i}.")}
        if l_frz == cfg.layers:
            frozen |= {n for n in self.tensors if n.startswith("encoder.final_ln.")}
        return frozen

    def task_head_names(self) -> set:
        return {n for n in self.tensors if n.startswith(("frame_head.", "decoder."))}

    def pretrained_names(self) -> set:
        """Everything that came from pre-training (excludes task heads)."""
        return set(self.tensors) - self.task_head_names()


def _linear_init(rng, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(size=(fan_in, fan_out)) / math.sqrt(fan_in)


def _add_linear(tensors: dict, name: str, rng, fan_in: int, fan_out: int):
    tensors[f"{name}.w"] = nc.parameter(f"{name}.w", _linear_init(rng, fan_in, fan_out))
    tensors[f"{name}.b"] = nc.parameter(f"{name}.b", np.zeros(fan_out))


def _add_block(tensors: dict, name: str, rng_of, d: int, d_ffn: int):
    for ln in ("ln1", "ln2"):
        tensors[f"{name}.{ln}.g"] = nc.parameter(f"{name}.{ln}.g", np.ones(d))
        tensors[f"{name}.{ln}.b"] = nc.parameter(f"{name}.{ln}.b", np.zeros(d))
    for proj in ("wq", "wk", "wv", "wo"):
        pname = f"{name}.attn.{proj}"
        tensors[pname] = nc.parameter(pname, _linear_init(rng_of(pname), d, d))
        bname = f"{name}.attn.{proj.replace('w', 'b')}"
        tensors[bname] = nc.parameter(bname, np.zeros(d))
    _add_linear(tensors, f"{name}.ffn.lin1", rng_of(f"{name}.ffn.lin1"), d, d_ffn)
    _add_linear(tensors, f"{name}.ffn.lin2", rng_of(f"{name}.ffn.lin2"), d_ffn, d)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Pre-training parameter set: frontends, fusion, encoder, cluster head.

    Every tensor is drawn from its own named stream so adding parameters
    never shifts the initialization of existing ones.
    """
    t = {}
    rng_of = lambda name: rng_for(seed, "init", name)

    for mod, dim_in in (("frontend_a", config.dim_a), ("frontend_b", config.dim_b)):
        _add_linear(t, f"{mod}.lin1", rng_of(f"{mod}.lin1"), dim_in, config.dim_front)
        _add_linear(t, f"{mod}.lin2", rng_of(f"{mod}.lin2"), config.dim_front, config.dim_front)
    _add_linear(t, "fusion", rng_of("fusion"), 2 * config.dim_front, config.dim_embed)
    t["mask_embed"] = nc.parameter("mask_embed", 0.1 * rng_of("mask_embed").normal(size=config.dim_embed))
    for i in range(config.layers):
        _add_block(t, f"encoder.block.{i}", rng_of, config.dim_embed, config.dim_ffn)
    t["encoder.final_ln.g"] = nc.parameter("encoder.final_ln.g", np.ones(config.dim_embed))
    t["encoder.final_ln.b"] = nc.parameter("encoder.final_ln.b", np.zeros(config.dim_embed))
    _add_linear(t, "cluster_head", rng_of("cluster_head"), config.dim_embed, config.n_clusters)
    return ModelParams(config, t)


def add_frame_head(params: ModelParams, n_classes: int, seed: int):
    """Per-frame classifier head over transcript symbols."""
    rng = rng_for(seed, "init", "frame_head")
    t = params.tensors
    t["frame_head.w"] = nc.parameter("frame_head.w", _linear_init(rng, params.config.dim_embed, n_classes))
    t["frame_head.b"] = nc.parameter("frame_head.b", np.zeros(n_classes))


def add_decoder(params: ModelParams, seed: int):
    """Autoregressive token decoder with cross-attention to the encoder."""
    cfg = params.config
    t = params.tensors
    rng_of = lambda name: rng_for(seed, "init", name)
    t["decoder.embed"] = nc.parameter(
        "decoder.embed", rng_of("decoder.embed").normal(size=(cfg.vocab_size, cfg.dim_embed))
        / math.sqrt(cfg.dim_embed))
    for i in range(cfg.decoder_layers):
        name = f"decoder.block.{i}"
        _add_block(t, name, rng_of, cfg.dim_embed, cfg.dim_ffn)
        t[f"{name}.ln_cross.g"] = nc.parameter(f"{name}.ln_cross.g", np.ones(cfg.dim_embed))
        t[f"{name}.ln_cross.b"] = nc.parameter(f"{name}.ln_cross.b", np.zeros(cfg.dim_embed))
        for proj in ("wq", "wk", "wv", "wo"):
            pname = f"{name}.cross.{proj}"
            t[pname] = nc.parameter(pname, _linear_init(rng_of(pname), cfg.dim_embed, cfg.dim_embed))
            bname = f"{name}.cross.{proj.replace('w', 'b')}"
            t[bname] = nc.parameter(bname, np.zeros(cfg.dim_embed))
    t["decoder.final_ln.g"] = nc.parameter("decoder.final_ln.g", np.ones(cfg.dim_embed))
    t["decoder.final_ln.b"] = nc.parameter("decoder.final_ln.b", np.zeros(cfg.dim_embed))
    _add_linear(t, "decoder.out", rng_of("decoder.out"), cfg.dim_embed, cfg.vocab_size)


_POS_CACHE = {}


def positional_encoding(t: int, d: int) -> np.ndarray:
    """Fixed sinusoidal table (t, d)."""
    key = (t, d)
    if key not in _POS_CACHE:
        pos = np.arange(t)[:, None]
        i = np.arange(d // 2)[None, :]
        angles = pos / np.power(10000.0, 2.0 * i / d)
        table = np.zeros((t, d))
        table[:, 0::2] = np.sin(angles)
        table[:, 1::2] = np.cos(angles)
        _POS_CACHE[key] = table
    return _POS_CACHE[key]


def _linear(params, name: str, x: nc.Tensor) -> nc.Tensor:
    return nc.add(nc.matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def frontend(params: ModelParams, which: str, x: nc.Tensor) -> nc.Tensor:
    """Per-frame two-layer MLP: (T, D_in) -> (T, dim_front)."""
    h = nc.gelu(_linear(params, f"{which}.lin1", x))
    return _linear(params, f"{which}.lin2", h)


def fuse(params: ModelParams, h_a, h_b, frames: int = None) -> nc.Tensor:
    """Frame-wise concat + linear projection; None streams become zeros.

    h_a/h_b are (T, dim_front) tensors or None (at most one None). The
    zero-fill happens here, at the frontend-output level, so feeding an
    explicit all-zero tensor is bitwise identical to omitting the stream.
    """
    if h_a is None and h_b is None:
        raise ModelError("fuse: both streams absent")
    d = params.config.dim_front
    if frames is None:
        frames = (h_a if h_a is not None else h_b).data.shape[0]
    if h_a is None:
        h_a = nc.constant(np.zeros((frames, d)))
    if h_b is None:
        h_b = nc.constant(np.zeros((frames, d)))
    return _linear(params, "fusion", nc.concat_lastdim(h_a, h_b))


def _attention(params: ModelParams, prefix: str, q_in: nc.Tensor, kv_in: nc.Tensor,
               attn_mask: np.ndarray = None, segments=None) -> nc.Tensor:
    """Multi-head attention, optionally restricted to row segments.

    segments: list of (start, stop) row ranges; attention runs within each
    range independently (queries of one utterance never see keys of
    another). attn_mask is an additive (Tq, Tk) mask applied per segment
    (used for decoder causality, where there is a single segment).
    """
    cfg = params.config
    h, d = cfg.heads, cfg.dim_embed
    dh = d // h
    tq, tk = q_in.data.shape[0], kv_in.data.shape[0]
    q = nc.add(nc.matmul(q_in, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = nc.add(nc.matmul(kv_in, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = nc.add(nc.matmul(kv_in, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])

    def split_heads(x, t):
        return nc.transpose(nc.reshape(x, (t, h, dh)), (1, 0, 2))  # (H, t, dh)

    def one(qs, ks, vs):
        nq, nk = qs.data.shape[0], ks.data.shape[0]
        scores = nc.scale(nc.matmul(split_heads(qs, nq), nc.transpose(split_heads(ks, nk), (0, 2, 1))),
                          1.0 / math.sqrt(dh))
        if attn_mask is not None:
            scores = nc.add(scores, nc.constant(np.broadcast_to(attn_mask, (h, nq, nk))))
        ctx = nc.matmul(nc.softmax(scores), split_heads(vs, nk))  # (H, nq, dh)
        return nc.reshape(nc.transpose(ctx, (1, 0, 2)), (nq, d))

    if segments is None or (len(segments) == 1 and segments[0] == (0, tq)):
        merged = one(q, k, v)
    else:
        merged = nc.concat_rows([
            one(nc.row_slice(q, s, e), nc.row_slice(k, s, e), nc.row_slice(v, s, e))
            for s, e in segments])
    return nc.add(nc.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _ln(params: ModelParams, name: str, x: nc.Tensor) -> nc.Tensor:
    return nc.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def _encoder_block(params: ModelParams, name: str, x: nc.Tensor, segments=None) -> nc.Tensor:
    normed = _ln(params, f"{name}.ln1", x)
    h = nc.add(x, _attention(params, f"{name}.attn", normed, normed, segments=segments))
    ff = nc.gelu(_linear(params, f"{name}.ffn.lin1", _ln(params, f"{name}.ln2", h)))
    return nc.add(h, _linear(params, f"{name}.ffn.lin2", ff))


def encode_stack(params: ModelParams, inputs, masks=None, use_positional: bool = True,
                 collect_layers: bool = False):
    """Encode a list of utterances as one concatenated sequence.

    inputs: list of ModalityInput. masks: per-utterance index arrays of
    frames whose fused vectors are replaced by the learned mask embedding.
    Attention runs within each utterance's segment only (equivalent to a
    block-diagonal attention mask over the concatenation, and bitwise
    identical to encoding each utterance alone); positions restart at each
    utterance. Returns (layers, final, offsets) where layers is [fused
    input, block outputs...] (length layers+1) and final is the layer-normed
    last block output.
    """
    cfg = params.config
    lengths = [inp.frames for inp in inputs]
    total = int(np.sum(lengths))
    offsets = np.cumsum([0] + lengths)

    raw_a = np.zeros((total, cfg.dim_a))
    raw_b = np.zeros((total, cfg.dim_b))
    gate_a = np.zeros(total)
    gate_b = np.zeros(total)
    for i, inp in enumerate(inputs):
        sl = slice(offsets[i], offsets[i + 1])
        if inp.features_a is not None:
            raw_a[sl] = inp.features_a
            gate_a[sl] = 1.0
        if inp.features_b is not None:
            raw_b[sl] = inp.features_b
            gate_b[sl] = 1.0

    h_a = nc.scale_rows(frontend(params, "frontend_a", nc.constant(raw_a)), gate_a)
    h_b = nc.scale_rows(frontend(params, "frontend_b", nc.constant(raw_b)), gate_b)
    x = fuse(params, h_a, h_b)

    if masks is not None:
        gidx = []
        for i, m in enumerate(masks):
            m = np.asarray(m, dtype=np.int64)
            if m.size and (m.min() < 0 or m.max() >= lengths[i]):
                raise ModelError(f"mask index out of range for utterance of {lengths[i]} frames")
            gidx.append(m + offsets[i])
        gidx = np.concatenate(gidx) if gidx else np.empty(0, dtype=np.int64)
        if gidx.size:
            x = nc.replace_rows(x, params["mask_embed"], gidx)

    if use_positional and total > 0:
        pos = np.concatenate([positional_encoding(t, cfg.dim_embed) for t in lengths]) \
            if lengths else np.zeros((0, cfg.dim_embed))
        x = nc.add(x, nc.constant(pos))

    segments = [(int(offsets[i]), int(offsets[i + 1])) for i in range(len(lengths))]
    layers = [x]
    for i in range(cfg.layers):
        x = _encoder_block(params, f"encoder.block.{i}", x, segments)
        layers.append(x)
    final = _ln(params, "encoder.final_ln", x)
    if not collect_layers:
        layers = [layers[0], layers[-1]]
    return layers, final, offsets


def encode(params: ModelParams, inp: ModalityInput, mask=None, use_positional: bool = True,
           collect_layers: bool = True):
    """Single-utterance encode; returns (layers, final).

    layers[0] is the encoder input embedding (after fusion, masking and
    positions), layers[i] the output of block i, so there are layers+1
    sequences for depth-wise analysis.
    """
    masks = [mask if mask is not None else np.empty(0, dtype=np.int64)]
    layers, final, _ = encode_stack(params, [inp], masks, use_positional, collect_layers)
    return layers, final


def cluster_logits(params: ModelParams, feats: nc.Tensor) -> nc.Tensor:
    """(T, dim_embed) -> (T, n_clusters) affine map."""
    return _linear(params, "cluster_head", feats)


def frame_logits(params: ModelParams, feats: nc.Tensor) -> nc.Tensor:
    """(T, dim_embed) -> (T, n_classes) affine map of the frame task head."""
    if "frame_head.w" not in params:
        raise ModelError("model has no frame head (add_frame_head first)")
    return _linear(params, "frame_head", feats)


def causal_mask(s: int) -> np.ndarray:
    mask = np.full((s, s), nc.NEG_MASK)
    return np.triu(mask, k=1)


def decode_logits(params: ModelParams, enc_final: nc.Tensor, tokens) -> nc.Tensor:
    """Teacher-forced decoder pass: token ids (S,) -> logits (S, vocab).

    Causal: position t sees tokens <= t plus the encoder features.
    """
    cfg = params.config
    if "decoder.embed" not in params:
        raise ModelError("model has no decoder (add_decoder first)")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ModelError(f"token id out of vocabulary [0,{cfg.vocab_size})")
    s = tokens.shape[0]
    x = nc.embedding_lookup(params["decoder.embed"], tokens)
    x = nc.add(x, nc.constant(positional_encoding(s, cfg.dim_embed)))
    cmask = causal_mask(s)
    for i in range(cfg.decoder_layers):
        name = f"decoder.block.{i}"
        ln_in = _ln(params, f"{name}.ln1", x)
        x = nc.add(x, _attention(params, f"{name}.attn", ln_in, ln_in, cmask))
        x = nc.add(x, _attention(params, f"{name}.cross", _ln(params, f"{name}.ln_cross", x),
                                 enc_final))
        ff = nc.gelu(_linear(params, f"{name}.ffn.lin1", _ln(params, f"{name}.ln2", x)))
        x = nc.add(x, _linear(params, f"{name}.ffn.lin2", ff))
    x = _ln(params, "decoder.final_ln", x)
    return _linear(params, "decoder.out", x)


def decode_logprobs(params: ModelParams, enc_final: nc.Tensor, tokens) -> nc.Tensor:
    """Per-position next-token log-probabilities (rows logsumexp to 0)."""
    return nc.log_softmax(decode_logits(params, enc_final, tokens))


def decoder_step(params: ModelParams, enc_final: nc.Tensor, prev_tokens, sos_id: int) -> np.ndarray:
    """Next-token log-probabilities after a prefix that must start with sos."""
    prev_tokens = np.asarray(prev_tokens, dtype=np.int64)
    if prev_tokens.size == 0 or prev_tokens[0] != sos_id:
        raise ModelError("prefix must begin with the start-of-sequence token")
    return decode_logprobs(params, enc_final, prev_tokens).data[-1]
