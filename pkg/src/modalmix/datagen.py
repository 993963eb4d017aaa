"""Synthetic frame-aligned two-modality corpora with known latent units.

A hidden Markov unit path (geometric dwell) drives both modalities:
modality A emits a noisy linear map of the unit embedding, modality B emits
a noisy linear map of the embedding of the unit's *viseme* class, a
many-to-one merge that makes B informative but lossy. Everything is
deterministic given (config seed, utterance id), so parallel and serial
generation produce identical corpora.
"""

import hashlib
import json
import string
from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import rng_for

ALPHABET = string.ascii_lowercase + string.ascii_uppercase + string.digits

PROFILES = ("ab", "a", "b")


class GeneratorError(ValueError):
    """Invalid generator configuration or degenerate inputs."""


@dataclass
class GeneratorConfig:
    """Latent-unit Markov chain plus per-modality emission settings."""

    n_units: int = 20
    n_visemes: int = 10
    dim_a: int = 16
    dim_b: int = 24
    mean_dwell: float = 4.0
    sigma_a: float = 0.5
    sigma_b: float = 0.4
    min_len: int = 40
    max_len: int = 120
    latent_dim: int = 8
    seed: int = 0
    transition: np.ndarray = None  # (U, U) row-stochastic; built from seed if None

    def __post_init__(self):
        if self.transition is None:
            self.transition = build_transition(
                rng_for(self.seed, "transition"), self.n_units, self.mean_dwell
            )
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.validate()

    def validate(self):
        u = self.n_units
        if not (2 <= self.n_visemes <= u):
            raise GeneratorError(f"need 2 <= V <= U, got V={self.n_visemes} U={u}")
        if u > len(ALPHABET):
            raise GeneratorError(f"U={u} exceeds transcript alphabet size {len(ALPHABET)}")
        if self.sigma_a <= 0 or self.sigma_b <= 0:
            raise GeneratorError("emission noise scales must be positive")
        if not (0 < self.min_len <= self.max_len):
            raise GeneratorError(f"bad length range [{self.min_len}, {self.max_len}]")
        t = self.transition
        if t.shape != (u, u):
            raise GeneratorError(f"transition shape {t.shape} != ({u}, {u})")
        rows = t.sum(axis=1)
        if not np.isfinite(t).all() or (t < 0).any() or not np.allclose(rows, 1.0, atol=1e-9):
            raise GeneratorError("transition rows must be non-negative and sum to 1")

    def fingerprint(self) -> str:
        """Stable hash of every generative setting."""
        payload = {
            k: getattr(self, k)
            for k in ("n_units", "n_visemes", "dim_a", "dim_b", "mean_dwell",
                      "sigma_a", "sigma_b", "min_len", "max_len", "latent_dim", "seed")
        }
        blob = json.dumps(payload, sort_keys=True).encode() + self.transition.tobytes()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_transition(rng: np.random.Generator, n_units: int, mean_dwell: float,
                     alpha: float = 0.3) -> np.ndarray:
    """Row-stochastic matrix: geometric dwell on the diagonal, Dirichlet jumps off it."""
    if mean_dwell < 1.0:
        raise GeneratorError(f"mean dwell must be >= 1 frame, got {mean_dwell}")
    p_stay = 1.0 - 1.0 / mean_dwell
    jumps = rng.dirichlet(np.full(n_units - 1, alpha), size=n_units)
    t = np.zeros((n_units, n_units))
    for u in range(n_units):
        t[u, u] = p_stay
        others = [v for v in range(n_units) if v != u]
        t[u, others] = (1.0 - p_stay) * jumps[u]
    return t


@dataclass
class EmissionMaps:
    """Fixed random maps shared by every utterance of one generator."""

    z: np.ndarray        # (U, latent) unit embeddings; visemes index the first V rows
    w_a: np.ndarray      # (latent, D_a)
    w_b: np.ndarray      # (latent, D_b)
    viseme: np.ndarray   # (U,) unit -> viseme class id in [0, V)


def emission_maps(config: GeneratorConfig) -> EmissionMaps:
    """Draw z, W_a, W_b once from the config seed (independent of transitions)."""
    rng = rng_for(config.seed, "emissions")
    z = rng.normal(size=(config.n_units, config.latent_dim))
    w_a = rng.normal(size=(config.latent_dim, config.dim_a)) / np.sqrt(config.latent_dim)
    w_b = rng.normal(size=(config.latent_dim, config.dim_b)) / np.sqrt(config.latent_dim)
    viseme = np.arange(config.n_units, dtype=np.int64) % config.n_visemes
    return EmissionMaps(z=z, w_a=w_a, w_b=w_b, viseme=viseme)


@dataclass
class MultimodalUtterance:
    """Frame-aligned features for up to two modalities plus ground truth."""

    id: str
    features_a: np.ndarray  # (T, D_a) or None
    features_b: np.ndarray  # (T, D_b) or None
    unit_labels: np.ndarray  # (T,) int64, evaluation only
    transcript: str
    profile: str  # "ab" | "a" | "b"

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise GeneratorError(f"unknown profile {self.profile!r}")
        t = len(self.unit_labels)
        for feats, present in ((self.features_a, "a" in self.profile),
                               (self.features_b, "b" in self.profile)):
            if present and (feats is None or feats.shape[0] != t):
                raise GeneratorError(f"utterance {self.id}: modality length mismatch")
            if not present and feats is not None:
                raise GeneratorError(f"utterance {self.id}: modality present but profile is {self.profile}")
        if t > 0 and not self.transcript:
            raise GeneratorError(f"utterance {self.id}: empty transcript")

    @property
    def frames(self) -> int:
        return len(self.unit_labels)


@dataclass
class Corpus:
    utterances: list
    config: GeneratorConfig
    fingerprint: str = ""

    def __post_init__(self):
        if not self.fingerprint:
            counts = {p: sum(1 for u in self.utterances if u.profile == p) for p in PROFILES}
            blob = self.config.fingerprint() + json.dumps(counts, sort_keys=True)
            self.fingerprint = hashlib.sha256(blob.encode()).hexdigest()[:16]

    def __len__(self):
        return len(self.utterances)

    def by_profile(self, profile: str):
        return [u for u in self.utterances if u.profile == profile]

    @property
    def total_frames(self) -> int:
        return sum(u.frames for u in self.utterances)


def collapse_runs(seq) -> list:
    """Run-length collapse; idempotent."""
    out = []
    for x in seq:
        if not out or out[-1] != x:
            out.append(x)
    return out


def units_to_transcript(units) -> str:
    return "".join(ALPHABET[u] for u in collapse_runs(list(units)))


def _sample_units(rng: np.random.Generator, transition: np.ndarray, t: int) -> np.ndarray:
    n = transition.shape[0]
    cum = np.cumsum(transition, axis=1)
    draws = rng.random(t)
    units = np.empty(t, dtype=np.int64)
    u = int(rng.integers(0, n))
    for i in range(t):
        units[i] = u
        u = min(int(np.searchsorted(cum[u], draws[i], side="right")), n - 1)
    return units


def generate_utterance(config: GeneratorConfig, maps: EmissionMaps, utt_id: str,
                       profile: str) -> MultimodalUtterance:
    """Deterministic given (config.seed, utt_id); profile only selects which

    streams are attached, not the underlying draws, so the same id yields
    the same content under any profile.
    """
    rng = rng_for(config.seed, "utt", utt_id)
    t = int(rng.integers(config.min_len, config.max_len + 1))
    units = _sample_units(rng, config.transition, t)
    mean_a = maps.z[units] @ maps.w_a
    mean_b = maps.z[maps.viseme[units]] @ maps.w_b
    feats_a = mean_a + config.sigma_a * rng.normal(size=mean_a.shape)
    feats_b = mean_b + config.sigma_b * rng.normal(size=mean_b.shape)
    return MultimodalUtterance(
        id=utt_id,
        features_a=feats_a if "a" in profile else None,
        features_b=feats_b if "b" in profile else None,
        unit_labels=units,
        transcript=units_to_transcript(units),
        profile=profile,
    )


def generate_corpus(config: GeneratorConfig, counts: dict, id_prefix: str = "utt") -> Corpus:
    """Generate a corpus with the given per-profile utterance counts.

    counts e.g. {"ab": 100, "a": 20, "b": 10}. Utterance ids are sequential;
    profiles are assigned in ab/a/b blocks (which block an id falls in does
    not change its content, only which streams are attached).
    """
    unknown = set(counts) - set(PROFILES)
    if unknown:
        raise GeneratorError(f"unknown profiles in counts: {sorted(unknown)}")
    maps = emission_maps(config)
    utts = []
    idx = 0
    for profile in PROFILES:
        for _ in range(int(counts.get(profile, 0))):
            utts.append(generate_utterance(config, maps, f"{id_prefix}{idx:05d}", profile))
            idx += 1
    return Corpus(utterances=utts, config=config)


def make_ood_config(config: GeneratorConfig, perturbation: float = 0.8,
                    sigma_scale: float = 1.25) -> GeneratorConfig:
    """Same unit inventory and emission maps, shifted transition statistics.

    The jump structure is mixed with freshly drawn Dirichlet rows at the
    given perturbation weight (0 reproduces the base statistics exactly)
    and the modality-A emission noise is rescaled. The seed is kept so
    emission maps stay identical to the base corpus.
    """
    if not (0.0 <= perturbation <= 1.0):
        raise GeneratorError(f"perturbation must be in [0,1], got {perturbation}")
    fresh = build_transition(rng_for(config.seed, "ood-transition"), config.n_units,
                             config.mean_dwell)
    mixed = (1.0 - perturbation) * config.transition + perturbation * fresh
    mixed /= mixed.sum(axis=1, keepdims=True)
    return replace(config, transition=mixed, sigma_a=config.sigma_a * sigma_scale)


def make_ood_corpus(config: GeneratorConfig, counts: dict, perturbation: float = 0.8,
                    sigma_scale: float = 1.25, id_prefix: str = "ood") -> Corpus:
    """Out-of-domain corpus analog: perturbed dynamics, same emission maps."""
    ood = make_ood_config(config, perturbation, sigma_scale)
    return generate_corpus(ood, counts, id_prefix=id_prefix)


def stationary_distribution(transition: np.ndarray, iters: int = 500) -> np.ndarray:
    """Left fixed point of a row-stochastic matrix by power iteration."""
    n = transition.shape[0]
    p = np.full(n, 1.0 / n)
    for _ in range(iters):
        p_next = p @ transition
        if np.abs(p_next - p).max() < 1e-13:
            p = p_next
            break
        p = p_next
    return p / p.sum()


def transition_kl(t_new: np.ndarray, t_base: np.ndarray) -> float:
    """Mean over rows of KL(new row || base row), natural log."""
    eps = 1e-12
    a = np.clip(t_new, eps, None)
    b = np.clip(t_base, eps, None)
    return float((t_new * (np.log(a) - np.log(b))).sum(axis=1).mean())


def add_noise(features: np.ndarray, snr_db: float, p_apply: float,
              rng: np.random.Generator):
    """Additive colored noise at a target SNR, applied with probability p_apply.

    The noise is an order-1 autoregressive Gaussian process over time
    (rho=0.9) scaled so that 10*log10(signal power / noise power) equals
    snr_db exactly on this realization. Returns (features, info) where info
    records whether noise was applied and any warning. A zero-power signal
    with a finite SNR request is returned unchanged with a warning.
    """
    if not np.isfinite(snr_db):
        raise GeneratorError(f"snr_db must be finite, got {snr_db}")
    if not (0.0 <= p_apply <= 1.0):
        raise GeneratorError(f"p_apply must be in [0,1], got {p_apply}")
    info = {"applied": False, "warning": None}
    if p_apply <= 0.0:
        return features, info
    if rng.uniform() >= p_apply:
        return features, info
    p_signal = float((features ** 2).mean())
    if p_signal == 0.0:
        info["warning"] = "zero-power signal, noise skipped"
        return features, info
    t, d = features.shape
    rho = 0.9
    g = rng.normal(size=(t, d))
    noise = np.empty_like(g)
    noise[0] = g[0]
    scale_in = np.sqrt(1.0 - rho * rho)
    for i in range(1, t):
        noise[i] = rho * noise[i - 1] + scale_in * g[i]
    p_noise = float((noise ** 2).mean())
    target = p_signal / (10.0 ** (snr_db / 10.0))
    noise *= np.sqrt(target / p_noise)
    info["applied"] = True
    return features + noise, info


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    """Recompute the realized SNR from a clean/noisy pair."""
    noise = noisy - clean
    return 10.0 * np.log10(float((clean ** 2).mean()) / float((noise ** 2).mean()))
