"""Unified self-supervised pre-training on mixed unimodal/multimodal data.

Each step draws a batch of utterances, samples an input-modality subset for
every multimodal utterance (unimodal data is used as-is and never consumes
dropout randomness), optionally corrupts the A stream with colored noise,
masks random spans, and trains the encoder to predict the cluster ids of
the masked frames with cross-entropy. Gradients are globally clipped, the
optimizer is Adam under a warmup + linear-decay schedule, and every random
choice comes from a purpose-named stream so runs are bitwise reproducible.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import clustering, model as mdl, numcore as nc
from .datagen import add_noise
from .seeding import rng_for, subseed


class PretrainError(RuntimeError):
    """Aborted pre-training run (with step diagnostics)."""


@dataclass
class ModalityDropoutConfig:
    """Categorical probabilities over input subsets {both, A-only, B-only}."""

    p_av: float = 0.5
    p_a: float = 0.25
    p_b: float = 0.25

    def __post_init__(self):
        probs = (self.p_av, self.p_a, self.p_b)
        if any(p < 0 or p > 1 for p in probs):
            raise ValueError(f"probabilities must be in [0,1]: {probs}")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1: {probs}")


NO_DROPOUT = ModalityDropoutConfig(1.0, 0.0, 0.0)


def sample_modalities(config: ModalityDropoutConfig, profile: str,
                      rng: np.random.Generator) -> str:
    """Input subset for one utterance.

    Multimodal ("ab") utterances draw from {ab, a, b}; unimodal utterances
    pass through unchanged without consuming any randomness.
    """
    if profile in ("a", "b"):
        return profile
    if profile != "ab":
        raise ValueError(f"unknown profile {profile!r}")
    u = rng.uniform()
    if u < config.p_av:
        return "ab"
    if u < config.p_av + config.p_a:
        return "a"
    return "b"


@dataclass
class MaskSpec:
    """Realized span mask: each frame starts a span of l frames w.p. p."""

    p_start: float
    span: int
    indices: np.ndarray  # sorted unique frame indices

    @property
    def size(self) -> int:
        return int(self.indices.size)


def sample_mask(t: int, p_start: float, span: int, rng: np.random.Generator) -> MaskSpec:
    """Union of spans [s, s+span) over Bernoulli(p_start) start frames."""
    if t < 0:
        raise ValueError(f"negative length {t}")
    starts = np.flatnonzero(rng.random(t) < p_start) if t > 0 else np.empty(0, np.int64)
    covered = np.zeros(t, dtype=bool)
    for s in starts:
        covered[s:s + span] = True
    return MaskSpec(p_start=p_start, span=span, indices=np.flatnonzero(covered).astype(np.int64))


def expected_mask_coverage(p_start: float, span: int) -> float:
    """Probability a frame is covered (ignoring edges): 1 - (1-p)^l."""
    return 1.0 - (1.0 - p_start) ** span


def masked_prediction_loss(logits: nc.Tensor, targets: np.ndarray, mask_indices: np.ndarray,
                           unmasked_weight: float = 0.0):
    """Mean cross-entropy over masked frames (+ optional unmasked term).

    Returns (loss Tensor, stats). An empty mask yields (None, stats) and
    the caller counts the skip; perturbing logits at unmasked frames cannot
    change the loss when unmasked_weight is 0.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask_indices = np.asarray(mask_indices, dtype=np.int64)
    t = logits.data.shape[0]
    if targets.shape[0] != t:
        raise ValueError(f"targets length {targets.shape[0]} vs logits rows {t}")
    stats = {"n_masked": int(mask_indices.size), "masked_acc": 0.0}
    if mask_indices.size == 0:
        return None, stats
    picked = nc.row_gather(logits, mask_indices)
    loss = nc.mean_all(nc.cross_entropy(picked, targets[mask_indices]))
    if unmasked_weight > 0.0:
        unmasked = np.setdiff1d(np.arange(t), mask_indices)
        if unmasked.size:
            rest = nc.mean_all(nc.cross_entropy(nc.row_gather(logits, unmasked), targets[unmasked]))
            loss = nc.add(loss, nc.scale(rest, unmasked_weight))
    pred = logits.data[mask_indices].argmax(axis=1)
    stats["masked_acc"] = float((pred == targets[mask_indices]).mean())
    return loss, stats


@dataclass
class PretrainConfig:
    updates: int = 2000
    lr_peak: float = 2e-3
    warmup_frac: float = 0.08
    batch_frames: int = 320
    dropout: ModalityDropoutConfig = field(default_factory=ModalityDropoutConfig)
    p_mask: float = 0.08
    mask_span: int = 5
    noise_enabled: bool = True
    noise_snr_db: float = 0.0
    noise_prob: float = 0.25
    grad_clip: float = 1.0
    unmasked_weight: float = 0.0
    log_interval: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.updates < 0 or self.batch_frames <= 0:
            raise ValueError("updates must be >= 0 and batch_frames positive")
        if not (0.0 <= self.warmup_frac < 1.0):
            raise ValueError(f"warmup_frac must be in [0,1), got {self.warmup_frac}")


def lr_schedule(step: int, updates: int, peak: float, warmup_frac: float) -> float:
    """Piecewise-linear warmup then linear decay to 0 at the final step.

    lr(0) = 0 whenever warmup is enabled; the peak sits at the end of
    warmup. `step` is the 1-based update index.
    """
    if updates <= 0:
        return 0.0
    warmup = int(round(warmup_frac * updates))
    if warmup > 0 and step <= warmup:
        return peak * step / warmup
    if updates == warmup:
        return peak
    return peak * max(0.0, (updates - step) / (updates - warmup))


@dataclass
class _Streams:
    order: np.random.Generator
    modality: np.random.Generator
    mask: np.random.Generator
    noise: np.random.Generator

    @classmethod
    def create(cls, seed: int, scope: str):
        return cls(*(rng_for(seed, scope, name) for name in ("order", "modality", "mask", "noise")))


def _epoch_stream(utts, rng: np.random.Generator):
    """Endless walk over seeded epoch permutations."""
    while True:
        for i in rng.permutation(len(utts)):
            yield utts[int(i)]


def assemble_step(utts_stream, batch_frames: int):
    """Pack utterances until the frame budget is reached (at least one)."""
    batch = []
    frames = 0
    while frames < batch_frames:
        u = next(utts_stream)
        batch.append(u)
        frames += u.frames
    return batch


def _prepare_batch(batch, targets, config: PretrainConfig, streams: _Streams):
    """Modality sampling, noise and masking for one batch."""
    inputs, masks, target_rows, skipped = [], [], [], 0
    for u in batch:
        subset = sample_modalities(config.dropout, u.profile, streams.modality)
        feats_a = u.features_a if "a" in subset else None
        feats_b = u.features_b if "b" in subset else None
        if feats_a is not None and config.noise_enabled:
            feats_a, _ = add_noise(feats_a, config.noise_snr_db, config.noise_prob, streams.noise)
        mask = sample_mask(u.frames, config.p_mask, config.mask_span, streams.mask)
        if mask.size == 0:
            skipped += 1
            continue
        inputs.append(mdl.ModalityInput(features_a=feats_a, features_b=feats_b))
        masks.append(mask.indices)
        target_rows.append(targets[u.id])
    return inputs, masks, target_rows, skipped


def _forward_loss(params, inputs, masks, target_rows, unmasked_weight: float):
    layers, final, offsets = mdl.encode_stack(params, inputs, masks, collect_layers=False)
    logits = mdl.cluster_logits(params, final)
    gidx = np.concatenate([m + offsets[i] for i, m in enumerate(masks)])
    flat_targets = np.concatenate(target_rows)
    return masked_prediction_loss(logits, flat_targets, gidx, unmasked_weight)


def pretrain(params: mdl.ModelParams, corpus, targets: clustering.TargetSet,
             config: PretrainConfig, metrics_hook=None):
    """Run the masked cluster prediction loop; mutates and returns params.

    Returns (params, metrics) where metrics is a list of per-interval
    records {step, loss, masked_acc, lr, grad_norm}. Aborts with step and
    utterance diagnostics if the loss goes non-finite.
    """
    trainable = [u for u in corpus.utterances if u.id in targets.assignments]
    if not trainable and config.updates > 0:
        raise PretrainError("no trainable utterances (no targets)")
    streams = _Streams.create(config.seed, "pretrain")
    stream = _epoch_stream(trainable, streams.order)
    state = nc.AdamState()
    metrics = []
    skipped_total = 0

    for step in range(1, config.updates + 1):
        batch = assemble_step(stream, config.batch_frames)
        inputs, masks, target_rows, skipped = _prepare_batch(batch, targets.assignments,
                                                             config, streams)
        skipped_total += skipped
        if not inputs:
            continue
        try:
            with nc.Graph() as graph:
                loss, stats = _forward_loss(params, inputs, masks, target_rows,
                                            config.unmasked_weight)
                grads = nc.backward(graph, loss)
        except nc.NonFiniteError as e:
            ids = [u.id for u in batch]
            raise PretrainError(f"non-finite loss at step {step} (utterances {ids}): {e}") from e
        grads, grad_norm = nc.clip_grad_norm(grads, config.grad_clip)
        lr = lr_schedule(step, config.updates, config.lr_peak, config.warmup_frac)
        nc.adam_step(params.tensors, grads, state, lr)
        if step % config.log_interval == 0 or step == config.updates:
            entry = {"step": step, "loss": loss.item(), "masked_acc": stats["masked_acc"],
                     "lr": lr, "grad_norm": grad_norm}
            metrics.append(entry)
            if metrics_hook:
                metrics_hook(entry)
    if skipped_total and metrics:
        metrics[-1]["empty_mask_skips"] = skipped_total
    return params, metrics


def masked_eval(params: mdl.ModelParams, corpus, targets: dict, config: PretrainConfig,
                seed: int = 0) -> dict:
    """Deterministic held-out masked-prediction accuracy.

    Uses the full available streams of each utterance (no dropout or
    noise); masks are drawn from a dedicated stream of the given seed.
    """
    rng = rng_for(seed, "masked_eval")
    losses, correct, total = [], 0, 0
    for u in corpus.utterances:
        if u.id not in targets:
            continue
        mask = sample_mask(u.frames, config.p_mask, config.mask_span, rng)
        if mask.size == 0:
            continue
        inp = mdl.ModalityInput(features_a=u.features_a, features_b=u.features_b)
        _, final = mdl.encode(params, inp, collect_layers=False)
        logits = mdl.cluster_logits(params, final)
        loss, stats = masked_prediction_loss(logits, targets[u.id], mask.indices)
        losses.append(loss.item())
        correct += stats["masked_acc"] * stats["n_masked"]
        total += stats["n_masked"]
    if total == 0:
        raise PretrainError("held-out evaluation saw no masked frames")
    return {"loss": float(np.mean(losses)), "masked_acc": correct / total, "n_masked": total}


@dataclass
class CycleResult:
    params: mdl.ModelParams
    codebooks: list
    target_sets: list
    metrics: list


def run_iteration_cycle(corpus, n_iterations: int, model_config: mdl.ModelConfig,
                        config: PretrainConfig, k: int = None, seed: int = 0) -> CycleResult:
    """Iterative pseudo-label refinement.

    Iteration 1 clusters raw anchor frames (utterances without the anchor
    modality are excluded); each later iteration refits the shared codebook
    on final-layer features of the complete multimodal input and retrains
    the model from a fresh initialization.
    """
    if n_iterations < 1:
        raise PretrainError(f"need n_iterations >= 1, got {n_iterations}")
    k = k or model_config.n_clusters
    codebooks, target_sets, all_metrics = [], [], []
    params = None
    for it in range(1, n_iterations + 1):
        targets = clustering.build_targets(params, corpus, it, k,
                                           seed=subseed(seed, "targets", it))
        params = mdl.init_params(model_config, subseed(seed, "init", it))
        it_config = replace(config, seed=subseed(seed, "pretrain", it))
        params, metrics = pretrain(params, corpus, targets, it_config)
        codebooks.append(targets.codebook)
        target_sets.append(targets)
        all_metrics.append(metrics)
    return CycleResult(params=params, codebooks=codebooks, target_sets=target_sets,
                       metrics=all_metrics)
