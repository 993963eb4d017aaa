"""Synthetic corpus generator: determinism, information asymmetry, noise, OOD shift."""

import numpy as np
import pytest

from modalmix import clustering, corpus_io, datagen
from modalmix.seeding import rng_for


def small_config(**kw):
    defaults = dict(seed=3, min_len=20, max_len=40)
    defaults.update(kw)
    return datagen.GeneratorConfig(**defaults)


def test_same_seed_and_id_is_bitwise_identical():
    cfg = small_config()
    maps = datagen.emission_maps(cfg)
    u1 = datagen.generate_utterance(cfg, maps, "utt7", "ab")
    u2 = datagen.generate_utterance(cfg, maps, "utt7", "ab")
    assert np.array_equal(u1.features_a, u2.features_a)
    assert np.array_equal(u1.features_b, u2.features_b)
    assert np.array_equal(u1.unit_labels, u2.unit_labels)
    assert u1.transcript == u2.transcript


def test_profile_only_selects_streams_not_content():
    cfg = small_config()
    maps = datagen.emission_maps(cfg)
    ab = datagen.generate_utterance(cfg, maps, "x", "ab")
    a_only = datagen.generate_utterance(cfg, maps, "x", "a")
    b_only = datagen.generate_utterance(cfg, maps, "x", "b")
    assert np.array_equal(ab.features_a, a_only.features_a)
    assert np.array_equal(ab.features_b, b_only.features_b)
    assert a_only.features_b is None and b_only.features_a is None


def test_corpus_regeneration_is_bitwise_reproducible():
    cfg = small_config()
    c1 = datagen.generate_corpus(cfg, {"ab": 5, "a": 3, "b": 2})
    c2 = datagen.generate_corpus(small_config(), {"ab": 5, "a": 3, "b": 2})
    assert c1.fingerprint == c2.fingerprint
    for u1, u2 in zip(c1.utterances, c2.utterances):
        assert u1.profile == u2.profile
        assert np.array_equal(u1.unit_labels, u2.unit_labels)
        if u1.features_a is not None:
            assert np.array_equal(u1.features_a, u2.features_a)


def test_noiseless_invertible_emissions_recover_labels_exactly():
    # effectively noiseless (see config invariant: scales stay positive)
    cfg = small_config(n_visemes=20, sigma_a=1e-12, sigma_b=1e-12)
    maps = datagen.emission_maps(cfg)
    corpus = datagen.generate_corpus(cfg, {"ab": 6})
    mean_a = maps.z @ maps.w_a                      # (U, D_a) per-unit emissions
    mean_b = maps.z[maps.viseme] @ maps.w_b          # V == U so this is per-unit too
    for u in corpus.utterances:
        pred_a = np.argmin(((u.features_a[:, None, :] - mean_a[None]) ** 2).sum(-1), axis=1)
        pred_b = np.argmin(((u.features_b[:, None, :] - mean_b[None]) ** 2).sum(-1), axis=1)
        assert np.array_equal(pred_a, u.unit_labels)
        assert np.array_equal(pred_b, u.unit_labels)


def test_viseme_merge_makes_modality_b_less_informative():
    # brute-force MI oracle over quantized frames, natural log histograms
    cfg = small_config(n_visemes=10, sigma_a=0.4, sigma_b=0.4, min_len=40, max_len=80)
    corpus = datagen.generate_corpus(cfg, {"ab": 60})
    labels = np.concatenate([u.unit_labels for u in corpus.utterances])

    def quantized_mi(stack):
        book = clustering.kmeans_fit(stack, cfg.n_units, seed=0)
        q = clustering.assign(book, stack)
        joint = np.zeros((cfg.n_units, cfg.n_units))
        for y, c in zip(labels, q):
            joint[y, c] += 1
        joint /= joint.sum()
        py, pc = joint.sum(1), joint.sum(0)
        nz = joint > 0
        return float((joint[nz] * (np.log(joint[nz])
                                   - np.log(np.outer(py, pc))[nz])).sum())

    mi_a = quantized_mi(np.concatenate([u.features_a for u in corpus.utterances]))
    mi_b = quantized_mi(np.concatenate([u.features_b for u in corpus.utterances]))
    assert mi_b < mi_a


def test_all_streams_follow_one_latent_path():
    cfg = small_config(sigma_a=1e-9, sigma_b=1e-9)
    maps = datagen.emission_maps(cfg)
    u = datagen.generate_utterance(cfg, maps, "u", "ab")
    mean_b = maps.z[: cfg.n_visemes] @ maps.w_b
    pred_v = np.argmin(((u.features_b[:, None, :] - mean_b[None]) ** 2).sum(-1), axis=1)
    assert np.array_equal(pred_v, maps.viseme[u.unit_labels])


def test_transcript_is_collapsed_units_and_collapse_is_idempotent():
    cfg = small_config()
    corpus = datagen.generate_corpus(cfg, {"ab": 4})
    for u in corpus.utterances:
        runs = datagen.collapse_runs(list(u.unit_labels))
        assert u.transcript == "".join(datagen.ALPHABET[i] for i in runs)
        assert datagen.collapse_runs(runs) == runs


def test_transition_rows_validated():
    cfg = small_config()
    bad = cfg.transition.copy()
    bad[0] *= 0.5
    with pytest.raises(datagen.GeneratorError, match="sum to 1"):
        datagen.GeneratorConfig(seed=1, transition=bad)


def test_mean_dwell_matches_geometric_expectation():
    cfg = small_config(mean_dwell=5.0, min_len=200, max_len=200)
    corpus = datagen.generate_corpus(cfg, {"ab": 40})
    run_lengths = []
    for u in corpus.utterances:
        run_lengths.extend(np.diff(np.flatnonzero(np.diff(u.unit_labels) != 0)))
    # interior runs are geometric with mean ~5; allow generous sampling slack
    assert abs(np.mean(run_lengths) - 5.0) < 0.6


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


def test_add_noise_p_zero_is_identity():
    x = rng_for(0, "t").normal(size=(30, 8))
    out, info = datagen.add_noise(x, 0.0, 0.0, rng_for(0, "n"))
    assert out is x and not info["applied"]


def test_add_noise_hits_target_snr():
    x = rng_for(1, "t").normal(size=(100, 12))
    for snr in (0.0, 5.0, -3.0):
        out, info = datagen.add_noise(x, snr, 1.0, rng_for(2, "n"))
        assert info["applied"]
        assert abs(datagen.measured_snr_db(x, out) - snr) < 0.1


def test_add_noise_zero_power_signal_skips_with_warning():
    out, info = datagen.add_noise(np.zeros((10, 4)), 0.0, 1.0, rng_for(3, "n"))
    assert not info["applied"]
    assert "zero-power" in info["warning"]
    assert np.array_equal(out, np.zeros((10, 4)))


def test_noise_is_colored_not_white():
    x = np.zeros((4000, 1)) + 1.0
    out, _ = datagen.add_noise(x, 0.0, 1.0, rng_for(4, "n"))
    noise = (out - x)[:, 0]
    lag1 = np.corrcoef(noise[:-1], noise[1:])[0, 1]
    assert lag1 > 0.7  # AR(1) with rho=0.9


def test_paper_default_noise_settings():
    from modalmix.pretrain import PretrainConfig

    cfg = PretrainConfig()
    assert cfg.noise_snr_db == 0.0
    assert cfg.noise_prob == 0.25


# ---------------------------------------------------------------------------
# out-of-domain variant
# ---------------------------------------------------------------------------


def test_ood_zero_perturbation_matches_base_statistics():
    cfg = small_config()
    ood_cfg = datagen.make_ood_config(cfg, perturbation=0.0, sigma_scale=1.0)
    assert np.allclose(ood_cfg.transition, cfg.transition, atol=1e-15)
    assert datagen.transition_kl(ood_cfg.transition, cfg.transition) == pytest.approx(0.0, abs=1e-12)


def test_ood_perturbed_transitions_have_positive_kl():
    cfg = small_config()
    ood_cfg = datagen.make_ood_config(cfg)
    assert datagen.transition_kl(ood_cfg.transition, cfg.transition) > 0.0


def test_ood_shares_emission_maps_with_base():
    cfg = small_config()
    base_maps = datagen.emission_maps(cfg)
    ood_maps = datagen.emission_maps(datagen.make_ood_config(cfg))
    assert np.array_equal(base_maps.z, ood_maps.z)
    assert np.array_equal(base_maps.w_a, ood_maps.w_a)
    assert np.array_equal(base_maps.w_b, ood_maps.w_b)


def test_ood_frame_marginal_shifts_measurably():
    cfg = small_config(min_len=120, max_len=160)
    base = datagen.generate_corpus(cfg, {"a": 250})
    ood = datagen.make_ood_corpus(cfg, {"a": 250})
    same = datagen.make_ood_corpus(cfg, {"a": 250}, perturbation=0.0, sigma_scale=1.0)

    def marginal(c):
        counts = np.bincount(np.concatenate([u.unit_labels for u in c.utterances]),
                             minlength=cfg.n_units)
        return counts / counts.sum()

    tv_perturbed = 0.5 * np.abs(marginal(ood) - marginal(base)).sum()
    tv_same = 0.5 * np.abs(marginal(same) - marginal(base)).sum()
    assert tv_perturbed > 0.05
    assert tv_same < 0.05


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------


def test_corpus_roundtrip_through_files(tmp_path):
    cfg = small_config()
    corpus = datagen.generate_corpus(cfg, {"ab": 3, "a": 2, "b": 1})
    corpus_io.write_corpus(corpus, tmp_path / "c")
    loaded = corpus_io.load_corpus(tmp_path / "c")
    assert loaded.fingerprint == corpus.fingerprint
    assert len(loaded) == len(corpus)
    for orig, back in zip(corpus.utterances, loaded.utterances):
        assert back.id == orig.id and back.profile == orig.profile
        assert np.array_equal(back.unit_labels, orig.unit_labels)
        assert back.transcript == orig.transcript
        if orig.features_a is not None:
            assert np.array_equal(back.features_a,
                                  orig.features_a.astype(np.float32).astype(np.float64))
        else:
            assert back.features_a is None


def test_tensor_file_header_layout(tmp_path):
    path = tmp_path / "t.umod"
    arr = np.arange(6.0, dtype=np.float64).reshape(2, 3)
    corpus_io.write_tensor(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"UMOD"
    assert np.array_equal(corpus_io.read_tensor(path), arr)
    with pytest.raises(corpus_io.CorpusFormatError, match="magic"):
        corpus_io.read_tensor(__file__)


def test_tensor_file_int64_roundtrip(tmp_path):
    path = tmp_path / "u.umod"
    arr = np.array([0, 5, 19], dtype=np.int64)
    corpus_io.write_tensor(path, arr)
    back = corpus_io.read_tensor(path)
    assert back.dtype == np.int64
    assert np.array_equal(back, arr)
