import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from npsd import dataset, dsp
from npsd.dataset import SequenceBatch
from npsd.errors import (
    ConfigurationError,
    DegenerateInputError,
    FormatError,
    InsufficientHistoryError,
    UnsupportedVersionError,
)


def closed_form_psd(power, alpha):
    """Brute-force geometric sum for every (k, l)."""
    K, L = power.shape
    out = np.empty_like(power)
    for l in range(L):
        acc = alpha**l * power[:, 0]
        for j in range(1, l + 1):
            acc = acc + (1 - alpha) * alpha ** (l - j) * power[:, j]
        out[:, l] = acc
    return out


class TestMixAtSnr:
    def test_unit_gain_at_zero_db(self):
        s = dsp.WaveBuffer(np.array([1.0, -1.0, 1.0, -1.0]))
        u = dsp.WaveBuffer(np.array([-1.0, -1.0, 1.0, 1.0]))
        _, scaled = dataset.mix_at_snr(s, u, 0.0)
        np.testing.assert_allclose(scaled.samples, u.samples, rtol=1e-15)

    def test_gain_at_ten_db(self):
        s = dsp.WaveBuffer(np.array([1.0, -1.0]))
        u = dsp.WaveBuffer(np.array([1.0, 1.0]))
        _, scaled = dataset.mix_at_snr(s, u, 10.0)
        assert scaled.samples[0] == pytest.approx(10 ** -0.5, rel=1e-12)

    def test_achieved_snr(self):
        rng = np.random.default_rng(0)
        s = dsp.WaveBuffer(rng.standard_normal(5000))
        u = dsp.WaveBuffer(3 * rng.standard_normal(5000))
        mix, scaled = dataset.mix_at_snr(s, u, 5.0)
        achieved = 10 * np.log10(np.mean(s.samples**2) / np.mean(scaled.samples**2))
        assert achieved == pytest.approx(5.0, abs=1e-9)
        np.testing.assert_allclose(mix.samples, s.samples + scaled.samples)

    def test_zero_power_rejected(self):
        with pytest.raises(DegenerateInputError):
            dataset.mix_at_snr(dsp.WaveBuffer(np.zeros(10)), dsp.WaveBuffer(np.ones(10)), 0.0)


class TestGroundTruthPsd:
    def test_constant_fixed_point(self):
        p = np.full((3, 20), 2.5)
        np.testing.assert_allclose(dataset.ground_truth_psd(np.sqrt(p), 0.8).lambda_u, p)

    def test_alpha_zero_is_periodogram(self):
        c = np.random.default_rng(1).standard_normal((4, 10)) + 0j
        np.testing.assert_array_equal(dataset.ground_truth_psd(c, 0.0).lambda_u, np.abs(c) ** 2)

    def test_hand_recursion(self):
        lam = dataset.ground_truth_psd(np.array([[1.0, 0.0]]), 0.8).lambda_u
        assert lam[0, 0] == 1.0
        assert lam[0, 1] == pytest.approx(0.8)

    def test_closed_form(self):
        power = np.random.default_rng(2).exponential(size=(2, 200))
        gt = dataset.ground_truth_psd(np.sqrt(power), 0.8).lambda_u
        np.testing.assert_allclose(gt, closed_form_psd(power, 0.8), rtol=1e-9)


class TestInputSequence:
    def test_edge_bin_duplicates_neighbour(self):
        mag = np.random.default_rng(0).uniform(0.1, 1, (257, 200))
        seq, _ = dataset.extract_input_sequence(mag, 0, 150)
        np.testing.assert_array_equal(seq[:, 0], seq[:, 1])
        seq, _ = dataset.extract_input_sequence(mag, 256, 150)
        np.testing.assert_array_equal(seq[:, 2], seq[:, 1])

    def test_constant_window_is_all_ones(self):
        seq, mu = dataset.extract_input_sequence(np.full((5, 130), 3.0), 2, 129)
        assert mu == 3.0
        np.testing.assert_array_equal(seq, np.ones((128, 3)))

    def test_scale_cancels(self):
        mag = np.random.default_rng(1).uniform(0.1, 1, (10, 140))
        a, mu_a = dataset.extract_input_sequence(mag, 4, 139)
        b, mu_b = dataset.extract_input_sequence(7 * mag, 4, 139)
        assert mu_b == pytest.approx(7 * mu_a, rel=1e-14)
        np.testing.assert_allclose(b, a, rtol=1e-12)

    def test_rows_are_neighbour_magnitudes(self):
        mag = np.arange(5 * 130, dtype=float).reshape(5, 130) + 1
        seq, mu = dataset.extract_input_sequence(mag, 2, 129)
        assert mu == pytest.approx(mag[2, 2:130].mean())
        np.testing.assert_allclose(seq[-1] * mu, mag[1:4, 129])

    def test_insufficient_history(self):
        with pytest.raises(InsufficientHistoryError):
            dataset.extract_input_sequence(np.ones((3, 200)), 1, 126)

    def test_zero_mean_rejected(self):
        with pytest.raises(DegenerateInputError):
            dataset.extract_input_sequence(np.zeros((3, 200)), 1, 150)

    def test_vectorised_matches_single(self):
        mag = np.random.default_rng(3).uniform(0.1, 1, (257, 300))
        ends = dataset.window_ends(300)
        raw, mu = dataset.windowed_inputs(mag, ends)
        for k in (0, 1, 100, 256):
            for j, l_end in enumerate(ends):
                seq, m = dataset.extract_input_sequence(mag, k, int(l_end))
                assert mu[k, j] == pytest.approx(m, rel=1e-14)
                np.testing.assert_allclose(raw[k, j] / mu[k, j], seq, rtol=1e-14)


class TestTargetSequence:
    def test_equal_to_mu_squared(self):
        lam = np.full((2, 130), 4.0)
        np.testing.assert_allclose(dataset.extract_target_sequence(lam, 1, 129, 128, 2.0), 0.0, atol=1e-15)

    def test_e_times_mu_squared(self):
        lam = np.full((2, 130), math.e * 4.0)
        np.testing.assert_allclose(dataset.extract_target_sequence(lam, 1, 129, 128, 2.0), 1.0, rtol=1e-15)

    def test_direct_value(self):
        lam = np.ones((1, 128))
        assert dataset.extract_target_sequence(lam, 0, 127, 128, 2.0)[0] == pytest.approx(-1.3862943611198906)

    def test_zero_psd_floored(self):
        t = dataset.extract_target_sequence(np.zeros((1, 128)), 0, 127, 128, 1.0)
        np.testing.assert_allclose(t, np.log(dataset.PSD_FLOOR))


class TestSequenceCounts:
    @pytest.mark.parametrize("n_frames, per_bin", [(256, 3), (128, 1), (127, 0), (300, 3), (319, 3), (320, 4)])
    def test_window_ends(self, n_frames, per_bin):
        assert dataset.window_ends(n_frames).size == per_bin

    @given(st.integers(min_value=128, max_value=5000), st.integers(min_value=1, max_value=200))
    def test_count_formula(self, L, stride):
        assert dataset.window_ends(L, 128, stride).size == (L - 128) // stride + 1

    def test_mixture_of_256_frames(self):
        rng = np.random.default_rng(0)
        n = 255 * 256 + 512
        spec = dsp.stft(rng.standard_normal(n))
        gt = dataset.ground_truth_psd(dsp.stft(rng.standard_normal(n)))
        batch = dataset.sequences_from_mixture(spec, gt)
        assert len(batch) == 771
        assert sorted(set(batch.l_end.tolist())) == [127, 191, 255]

    def test_short_mixture_warns(self, caplog):
        rng = np.random.default_rng(0)
        n = 126 * 256 + 512
        spec = dsp.stft(rng.standard_normal(n))
        with caplog.at_level(logging.WARNING):
            batch = dataset.sequences_from_mixture(spec, dataset.ground_truth_psd(spec))
        assert len(batch) == 0
        assert "shorter" in caplog.text


class TestScaleEquivariance:
    def test_mixture_scaling(self):
        rng = np.random.default_rng(9)
        s = rng.standard_normal(40000)
        u = rng.standard_normal(40000)
        mix, noise = dataset.mix_at_snr(dsp.WaveBuffer(s), dsp.WaveBuffer(u), 3.0)
        base = dataset.sequences_from_mixture(dsp.stft(mix), dataset.ground_truth_psd(dsp.stft(noise)))
        c = 37.0
        scaled = dataset.sequences_from_mixture(dsp.stft(mix.scaled(c)), dataset.ground_truth_psd(dsp.stft(noise.scaled(c))))
        np.testing.assert_allclose(scaled.inputs, base.inputs, rtol=1e-6)
        np.testing.assert_allclose(scaled.mu, c * base.mu, rtol=1e-6)
        np.testing.assert_allclose(scaled.targets, base.targets, atol=1e-5)

    def test_float64_inputs_unchanged(self):
        mag = np.random.default_rng(1).uniform(0.1, 2, (20, 200))
        ends = dataset.window_ends(200)
        raw1, mu1 = dataset.windowed_inputs(mag, ends)
        raw2, mu2 = dataset.windowed_inputs(0.01 * mag, ends)
        np.testing.assert_allclose(raw2 / mu2[..., None, None], raw1 / mu1[..., None, None], rtol=1e-9)


class TestManifest:
    def test_noise_sections_disjoint(self, demo_manifest):
        n = 123457
        ranges = [demo_manifest.noise_section(n, s) for s in dataset.SPLITS]
        assert ranges[0][0] == 0 and ranges[-1][1] == n
        for (a0, a1), (b0, b1) in zip(ranges, ranges[1:]):
            assert a1 == b0 and a0 < a1

    def test_bad_fractions(self, demo_manifest):
        with pytest.raises(ConfigurationError):
            dataset.CorpusManifest(demo_manifest.speech_files, demo_manifest.noise_files, (0.5, 0.1, 0.1))

    def test_overlapping_speech_rejected(self, demo_manifest):
        files = dict(demo_manifest.speech_files)
        files["test"] = files["test"] + files["train"][:1]
        with pytest.raises(ConfigurationError):
            dataset.CorpusManifest(files, demo_manifest.noise_files)

    def test_single_glob_is_split_by_file(self, demo_corpus):
        cfg = {"speech": "speech/*/*.wav", "noise": "noise/*.wav"}
        m = dataset.CorpusManifest.from_config(cfg, str(demo_corpus))
        sizes = [len(m.speech_files[s]) for s in dataset.SPLITS]
        assert sum(sizes) == len(list(demo_corpus.glob("speech/*/*.wav")))
        assert all(sizes)

    def test_empty_split(self, demo_manifest):
        files = dict(demo_manifest.speech_files)
        files["train"] = []
        m = dataset.CorpusManifest(files, demo_manifest.noise_files)
        with pytest.raises(ConfigurationError):
            next(dataset.build_training_set(m, [0.0], 5.0))

    def test_noise_excerpts_stay_in_split(self, demo_manifest):
        cache = dataset.AudioCache()
        n_noise = len(cache.get(demo_manifest.noise_files[0]))
        for split in dataset.SPLITS:
            start, stop = demo_manifest.noise_section(n_noise, split)
            rng = np.random.default_rng(0)
            for _ in range(5):
                mixture = dataset.synthesize_mixture(demo_manifest, cache, split, 0, 0.0, 16000 * 5, rng)
                for off in mixture.spec.noise_offsets:
                    assert start <= off < stop


class TestBuildTrainingSet:
    def test_condition_counts(self, demo_manifest):
        n = 255 * 256 + 512
        out = list(dataset.build_training_set(demo_manifest, [0.0, 5.0], n / 16000, seed=3))
        assert len(out) == 2 * len(demo_manifest.noise_files)
        for c in out:
            assert c.n_frames == 256
            assert len(c.batch) == 771
            assert np.all(c.batch.inputs >= 0) and np.all(np.isfinite(c.batch.targets)) and np.all(c.batch.mu > 0)

    def test_threads_do_not_change_output(self, demo_manifest):
        a = list(dataset.build_training_set(demo_manifest, [0.0, 9.0], 3.0, seed=5, threads=1))
        b = list(dataset.build_training_set(demo_manifest, [0.0, 9.0], 3.0, seed=5, threads=3))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.batch.inputs, y.batch.inputs)
            np.testing.assert_array_equal(x.batch.targets, y.batch.targets)


class TestNseq:
    def _batch(self, n=5, T=128):
        rng = np.random.default_rng(0)
        return SequenceBatch(rng.random((n, T, 3), dtype=np.float32), rng.random((n, T), dtype=np.float32),
                             rng.random(n, dtype=np.float32) + 0.1, np.arange(n, dtype=np.uint16), np.arange(n))

    def test_round_trip(self, tmp_path):
        b = self._batch()
        dataset.write_sequences(tmp_path / "x.nseq", b)
        back = dataset.read_sequences(tmp_path / "x.nseq")
        for f in ("inputs", "targets", "mu", "k"):
            np.testing.assert_array_equal(getattr(back, f), getattr(b, f))

    def test_layout(self, tmp_path):
        dataset.write_sequences(tmp_path / "x.nseq", self._batch(2, 4))
        blob = (tmp_path / "x.nseq").read_bytes()
        assert blob[:4] == b"NSEQ"
        assert int.from_bytes(blob[4:8], "little") == 1
        assert len(blob) == 8 + 2 * (2 + 2 + 4 + 4 * 12 + 4 * 4)

    def test_truncated(self, tmp_path):
        dataset.write_sequences(tmp_path / "x.nseq", self._batch())
        blob = (tmp_path / "x.nseq").read_bytes()
        (tmp_path / "y.nseq").write_bytes(blob[:-3])
        with pytest.raises(FormatError):
            dataset.read_sequences(tmp_path / "y.nseq")

    def test_version(self, tmp_path):
        (tmp_path / "z.nseq").write_bytes(b"NSEQ" + (7).to_bytes(4, "little"))
        with pytest.raises(UnsupportedVersionError):
            dataset.read_sequences(tmp_path / "z.nseq")
