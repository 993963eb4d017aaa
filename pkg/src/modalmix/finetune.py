"""Supervised fine-tuning with partial modalities, freezing and decoding.

The cluster prediction head is discarded and a task head is trained on
labeled transcripts: either a per-frame classifier whose outputs are
run-length collapsed, or a one-layer autoregressive decoder driven by beam
search. Catastrophic forgetting is controlled two ways: for the first
n_frz updates only the head trains, and the first l_frz encoder blocks
(plus everything below them) stay frozen for the whole run. Evaluation
reports WER on any stream subset, with zero-fill standing in for absent
test modalities.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import model as mdl, numcore as nc
from .datagen import ALPHABET, add_noise, collapse_runs
from .pretrain import ModalityDropoutConfig, _epoch_stream, assemble_step, sample_modalities
from .seeding import rng_for, subseed


class FinetuneError(RuntimeError):
    """Invalid fine-tuning or evaluation request."""


TASKS = ("frame", "seq2seq")
TEST_CONDITIONS = (("ab", False), ("ab", True), ("a", False), ("a", True), ("b", False))


def special_tokens(n_units: int) -> dict:
    """Token ids appended after the transcript alphabet."""
    return {"sos": n_units, "eos": n_units + 1, "pad": n_units + 2}


@dataclass
class DecodeConfig:
    mode: str = "frame"   # "frame" | "greedy" | "beam"
    beam_size: int = 4
    alpha: float = 1.0
    max_len: int = 64


@dataclass
class FinetuneConfig:
    task: str = "frame"
    ft_modality: str = "a"          # "ab" | "a" | "b"
    ab_dropout: ModalityDropoutConfig = None  # applied to AB data when set
    lr: float = 1e-3
    phase_ratio: tuple = (0.33, 0.0, 0.67)    # warmup / hold / decay fractions
    updates: int = 600
    n_frz: int = 300                # steps with the whole pre-trained model frozen
    l_frz: int = 1                  # encoder blocks frozen throughout
    batch_frames: int = 320
    grad_clip: float = 1.0
    noise_enabled: bool = False
    noise_snr_db: float = 0.0
    noise_prob: float = 0.25
    log_interval: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise FinetuneError(f"unknown task {self.task!r}")
        if self.ft_modality not in ("ab", "a", "b"):
            raise FinetuneError(f"unknown fine-tune modality {self.ft_modality!r}")
        if abs(sum(self.phase_ratio) - 1.0) > 1e-9 or len(self.phase_ratio) != 3:
            raise FinetuneError(f"phase ratio must be 3 fractions summing to 1: {self.phase_ratio}")
        if not (0 <= self.n_frz <= self.updates):
            raise FinetuneError(f"need 0 <= n_frz <= updates, got n_frz={self.n_frz}")


def tri_stage_lr(step: int, updates: int, peak: float, ratio) -> float:
    """Warmup / hold / linear-decay schedule over 1-based update steps."""
    if updates <= 0:
        return 0.0
    w = int(round(ratio[0] * updates))
    h = int(round(ratio[1] * updates))
    if w > 0 and step <= w:
        return peak * step / w
    if step <= w + h:
        return peak
    d = updates - w - h
    if d <= 0:
        return peak
    return peak * max(0.0, (updates - step) / d)


def _select_streams(utt, subset: str):
    a = utt.features_a if "a" in subset else None
    b = utt.features_b if "b" in subset else None
    if a is None and b is None:
        raise FinetuneError(f"utterance {utt.id} has no stream for subset {subset!r}")
    return a, b


def _utterance_tokens(utt) -> np.ndarray:
    """Reference transcript as token ids (collapsed unit path)."""
    return np.asarray(collapse_runs(list(utt.unit_labels)), dtype=np.int64)


def finetune(pretrained: mdl.ModelParams, corpus, config: FinetuneConfig) -> mdl.ModelParams:
    """Fine-tune a copy of the pre-trained model on labeled transcripts.

    The cluster head is dropped, the task head is freshly initialized from
    the config seed, and the freeze schedule follows n_frz / l_frz. The
    input stream subset per utterance follows ft_modality (with optional
    modality dropout on AB data).
    """
    n_units = corpus.config.n_units
    params = pretrained.copy()
    params.drop_prefix("cluster_head.")
    if config.task == "frame":
        mdl.add_frame_head(params, n_units, subseed(config.seed, "head"))
    else:
        if params.config.vocab_size != n_units + 3:
            raise FinetuneError(
                f"decoder vocab {params.config.vocab_size} != alphabet+specials {n_units + 3}")
        mdl.add_decoder(params, subseed(config.seed, "head"))
    specials = special_tokens(n_units)

    usable = [u for u in corpus.utterances if _usable_for(u, config.ft_modality)]
    if not usable and config.updates > 0:
        raise FinetuneError(f"no utterances usable for fine-tune modality {config.ft_modality!r}")

    order_rng = rng_for(config.seed, "finetune", "order")
    mod_rng = rng_for(config.seed, "finetune", "modality")
    noise_rng = rng_for(config.seed, "finetune", "noise")
    stream = _epoch_stream(usable, order_rng)
    state = nc.AdamState()
    head_names = params.task_head_names()
    unfrozen_later = head_names | (params.pretrained_names() - params.frozen_names(config.l_frz))

    for step in range(1, config.updates + 1):
        batch = assemble_step(stream, config.batch_frames)
        inputs, refs = [], []
        for u in batch:
            subset = config.ft_modality
            if subset == "ab" and config.ab_dropout is not None:
                subset = sample_modalities(config.ab_dropout, "ab", mod_rng)
            a, b = _select_streams(u, subset)
            if a is not None and config.noise_enabled:
                a, _ = add_noise(a, config.noise_snr_db, config.noise_prob, noise_rng)
            inputs.append(mdl.ModalityInput(features_a=a, features_b=b))
            refs.append(u)
        with nc.Graph() as graph:
            loss = _supervised_loss(params, inputs, refs, config.task, specials)
            grads = nc.backward(graph, loss)
        grads, _ = nc.clip_grad_norm(grads, config.grad_clip)
        lr = tri_stage_lr(step, config.updates, config.lr, config.phase_ratio)
        trainable = head_names if step <= config.n_frz else unfrozen_later
        nc.adam_step(params.tensors, grads, state, lr, trainable=trainable)
    return params


def _usable_for(utt, ft_modality: str) -> bool:
    if ft_modality == "ab":
        return utt.profile == "ab"
    return ft_modality in utt.profile


def _supervised_loss(params, inputs, utts, task: str, specials: dict):
    _, final, offsets = mdl.encode_stack(params, inputs, collect_layers=False)
    if task == "frame":
        logits = mdl.frame_logits(params, final)
        labels = np.concatenate([u.unit_labels for u in utts])
        return nc.mean_all(nc.cross_entropy(logits, labels))
    parts = []
    total_tokens = 0
    for i, u in enumerate(utts):
        enc = nc.row_slice(final, int(offsets[i]), int(offsets[i + 1]))
        tokens = _utterance_tokens(u)
        dec_in = np.concatenate([[specials["sos"]], tokens])
        dec_out = np.concatenate([tokens, [specials["eos"]]])
        logits = mdl.decode_logits(params, enc, dec_in)
        parts.append(nc.sum_all(nc.cross_entropy(logits, dec_out)))
        total_tokens += len(dec_out)
    total = parts[0]
    for p in parts[1:]:
        total = nc.add(total, p)
    return nc.scale(total, 1.0 / total_tokens)


# ---------------------------------------------------------------------------
# WER
# ---------------------------------------------------------------------------


def wer_counts(ref, hyp) -> dict:
    """Levenshtein alignment counts between token sequences.

    Returns substitutions, insertions, deletions, matches and the distance;
    ties during backtrace prefer match/substitution, then deletion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dp[i, j] = min(sub, dp[i - 1, j] + 1, dp[i, j - 1] + 1)
    i, j = n, m
    subs = ins = dels = matches = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            if ref[i - 1] == hyp[j - 1]:
                matches += 1
            else:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return {"sub": subs, "ins": ins, "del": dels, "match": matches, "dist": int(dp[n, m])}


def wer(ref, hyp) -> float:
    """(S + I + D) / len(ref); may exceed 1. Empty reference is an error."""
    ref = list(ref)
    if not ref:
        raise FinetuneError("WER needs a non-empty reference")
    return wer_counts(ref, hyp)["dist"] / len(ref)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


@dataclass
class Hypothesis:
    tokens: tuple        # emitted tokens after sos (incl. eos when found)
    logp: float          # raw sum of token log-probs
    forced: bool = False  # hit max length without end token

    def score(self, alpha: float) -> float:
        return self.logp / (len(self.tokens) ** alpha) if self.tokens else -np.inf


def beam_search(params: mdl.ModelParams, enc_final: nc.Tensor, beam_size: int,
                alpha: float, max_len: int, n_units: int):
    """Beam expansion on raw log-prob sums, final ranking by logp / T^alpha.

    T counts emitted tokens including the end token. Ties break by
    token-id lexicographic order so results are fully deterministic. If no
    hypothesis ends by max_len the best forced-ended one is returned,
    flagged. beam_size=1 reproduces greedy decoding token for token.
    """
    if beam_size < 1:
        raise FinetuneError(f"beam size must be >= 1, got {beam_size}")
    if alpha < 0:
        raise FinetuneError(f"length weight must be >= 0, got {alpha}")
    specials = special_tokens(n_units)
    sos, eos, pad = specials["sos"], specials["eos"], specials["pad"]
    expandable = [t for t in range(params.config.vocab_size) if t not in (sos, pad)]

    active = [Hypothesis(tokens=(), logp=0.0)]
    pool = []
    for _ in range(max_len):
        candidates = []
        for hyp in active:
            lp = mdl.decoder_step(params, enc_final, np.array((sos,) + hyp.tokens), sos)
            for t in expandable:
                candidates.append(Hypothesis(hyp.tokens + (t,), hyp.logp + float(lp[t])))
        candidates.sort(key=lambda h: (-h.logp, h.tokens))
        selected = candidates[:beam_size]
        active = []
        for h in selected:
            if h.tokens[-1] == eos:
                pool.append(h)
            else:
                active.append(h)
        if not active:
            break
    for h in active:  # length limit reached without eos
        pool.append(Hypothesis(h.tokens, h.logp, forced=True))
    pool.sort(key=lambda h: (-h.score(alpha), h.tokens))
    best = pool[0]
    content = tuple(t for t in best.tokens if t != eos)
    return content, best.score(alpha), best.forced


def greedy_decode(params: mdl.ModelParams, enc_final: nc.Tensor, max_len: int, n_units: int):
    """Argmax decoding (lowest token id on ties); reference for beam=1."""
    specials = special_tokens(n_units)
    sos, eos, pad = specials["sos"], specials["eos"], specials["pad"]
    tokens = []
    for _ in range(max_len):
        lp = mdl.decoder_step(params, enc_final, np.array([sos] + tokens), sos)
        lp = lp.copy()
        lp[[sos, pad]] = -np.inf
        nxt = int(np.argmax(lp))
        tokens.append(nxt)
        if nxt == eos:
            break
    return tuple(t for t in tokens if t != eos)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _decode_utterance(params, utt, subset: str, noise: bool, decode: DecodeConfig,
                      n_units: int, seed: int):
    a, b = _select_streams(utt, subset)
    if a is not None and noise:
        a, _ = add_noise(a, 0.0, 1.0, rng_for(seed, "eval-noise", utt.id))
    inp = mdl.ModalityInput(features_a=a, features_b=b)
    _, final = mdl.encode(params, inp, collect_layers=False)
    if decode.mode == "frame":
        pred = mdl.frame_logits(params, final).data.argmax(axis=1)
        return collapse_runs(list(pred))
    if decode.mode == "greedy":
        return list(greedy_decode(params, final, decode.max_len, n_units))
    hyp, _, _ = beam_search(params, final, decode.beam_size, decode.alpha,
                            decode.max_len, n_units)
    return list(hyp)


def evaluate(params: mdl.ModelParams, corpus, test_modality: str, noise: bool = False,
             decode: DecodeConfig = None, seed: int = 0) -> dict:
    """WER and token accuracy of a fine-tuned model on one test condition.

    Absent test modalities are zero-filled inside the encoder. Results are
    deterministic: the noisy condition derives its noise from (seed,
    utterance id).
    """
    decode = decode or DecodeConfig()
    n_units = corpus.config.n_units
    usable = [u for u in corpus.utterances if _usable_for(u, test_modality)]
    if not usable:
        raise FinetuneError(f"corpus has no utterances with modality {test_modality!r}")
    edits = ref_len = match = 0
    for u in usable:
        hyp = _decode_utterance(params, u, test_modality, noise, decode, n_units, seed)
        ref = list(_utterance_tokens(u))
        counts = wer_counts(ref, hyp)
        edits += counts["dist"]
        match += counts["match"]
        ref_len += len(ref)
    return {
        "test_modality": test_modality,
        "noise": bool(noise),
        "wer": edits / ref_len,
        "token_acc": match / ref_len,
        "n_utts": len(usable),
        "decode": decode.mode,
    }


def transfer_matrix(pretrained: mdl.ModelParams, ft_corpus, eval_corpus,
                    config: FinetuneConfig, decode: DecodeConfig = None, seed: int = 0) -> dict:
    """Fine-tune on AB / A / B labels and evaluate each model on all five

    test conditions (AB clean, AB noisy, A clean, A noisy, B). Returns
    {ft_modality: {condition key: report}} plus per-row averages.
    """
    grid = {}
    for profile in ("ab", "a", "b"):
        cfg = replace(config, ft_modality=profile, seed=subseed(seed, "ft", profile))
        tuned = finetune(pretrained, ft_corpus, cfg)
        row = {}
        for modality, noisy in TEST_CONDITIONS:
            key = f"{modality}{'-noisy' if noisy else ''}"
            row[key] = evaluate(tuned, eval_corpus, modality, noisy, decode, seed=seed)
        row["avg_wer"] = float(np.mean([r["wer"] for r in row.values()]))
        grid[profile] = row
    return grid
