import numpy as np
import pytest

from violinmotion import metrics
from violinmotion.errors import ConfigError
from violinmotion.labels import STREAMS, concat_bf
from violinmotion.synth_data import (FINGER_STEP, MOTION_NOISE, POSITION_STEP,
                                     STRING_STEP, SynthConfig,
                                     generate_corpus, min_tuple_separation,
                                     region_bins, sf_band, _rest_pose)
from violinmotion.motion_model import default_skeleton


def _small(seed=0, **overrides):
    kwargs = dict(n_pieces=6, piece_frames=90, n_mels=48, seed=seed, snr=0.1)
    kwargs.update(overrides)
    return SynthConfig(**kwargs)


class TestConfig:
    def test_too_few_frames(self):
        with pytest.raises(ConfigError):
            SynthConfig(piece_frames=10)

    def test_negative_noise(self):
        with pytest.raises(ConfigError):
            SynthConfig(snr=-0.5)

    def test_too_few_mels_for_slots(self):
        with pytest.raises(ConfigError):
            SynthConfig(n_mels=16)


class TestDeterminism:
    def test_same_seed_byte_identical(self):
        a, _ = generate_corpus(_small(seed=0))
        b, _ = generate_corpus(_small(seed=0))
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.mel.data, sb.mel.data)
            assert np.array_equal(sa.motion.data, sb.motion.data)
            assert np.array_equal(sa.labels.bow, sb.labels.bow)

    def test_different_seed_differs(self):
        a, _ = generate_corpus(_small(seed=0))
        b, _ = generate_corpus(_small(seed=1))
        assert not np.array_equal(a[0].mel.data, b[0].mel.data)


class TestStructure:
    def test_shapes_and_split(self):
        config = SynthConfig(n_pieces=32, piece_frames=120, n_mels=48)
        samples, split = generate_corpus(config)
        assert len(samples) == 32
        assert (len(split.train), len(split.val), len(split.test)) == (24, 4, 4)
        for s in samples:
            assert s.mel.data.shape == (120, 48)
            assert s.motion.data.shape == (120, 75, 3)
            assert s.labels.n_frames == 120

    def test_label_invariants_hold(self):
        samples, _ = generate_corpus(_small())
        for s in samples:
            for name in STREAMS:
                stream = s.labels.stream(name)
                assert np.array_equal(stream.sum(axis=1),
                                      np.ones(s.labels.n_frames))
            bf = concat_bf(s.labels)
            assert np.array_equal(bf.data.sum(axis=1),
                                  np.full(s.labels.n_frames, 4.0))

    def test_performers_cycle(self):
        samples, _ = generate_corpus(_small())
        assert {s.performer_id for s in samples} == {"P1", "P2", "P3"}


class TestNoiselessSeparability:
    def test_templates_decode_exactly(self):
        """At snr=0, region amplitudes recover str/fing/pos per frame."""
        samples, _ = generate_corpus(_small(snr=0.0))
        for s in samples[:3]:
            feats = s.mel.data
            f = feats.shape[1]
            silence = s.labels.silence_mask()
            str_cls = s.labels.str.argmax(axis=1) + 1
            fing_cls = s.labels.fing.argmax(axis=1) + 1
            pos_cls = s.labels.pos.argmax(axis=1) + 1
            str_amp = feats[:, region_bins("string", f)].mean(axis=1)
            fing_amp = feats[:, region_bins("finger", f)].mean(axis=1)
            pos_amp = feats[:, region_bins("position", f)].mean(axis=1)
            for t in range(s.labels.n_frames):
                if silence[t]:
                    assert np.all(feats[t] == 0.0)
                    continue
                assert round(str_amp[t] / STRING_STEP) == str_cls[t]
                assert round(fing_amp[t] / FINGER_STEP) == fing_cls[t]
                assert round(pos_amp[t] / POSITION_STEP) == pos_cls[t]
                band_energy = [feats[t, sf_band(st, fg, f)].mean()
                               for st in range(1, 5) for fg in range(1, 6)]
                best = int(np.argmax(band_energy))
                assert best // 5 + 1 == str_cls[t]
                assert best % 5 + 1 == fing_cls[t]

    def test_bow_ramp_direction(self):
        """Within a note the ramp slope sign encodes the bow direction."""
        samples, _ = generate_corpus(_small(snr=0.0))
        s = samples[0]
        f = s.mel.data.shape[1]
        ramp = s.mel.data[:, region_bins("bow", f)].mean(axis=1)
        bow_cls = s.labels.bow.argmax(axis=1) + 1
        silence = s.labels.silence_mask()
        checked = 0
        for t in range(1, s.labels.n_frames):
            if silence[t] or silence[t - 1] or bow_cls[t] != bow_cls[t - 1]:
                continue
            if ramp[t] == ramp[t - 1]:
                continue  # note boundary within same direction
            expected_up = ramp[t] > ramp[t - 1]
            if (bow_cls[t] == 1) == expected_up:
                checked += 1
        assert checked > 20


class TestMotionProperties:
    def test_jerk_below_noisy_version(self):
        samples, _ = generate_corpus(_small())
        motion = samples[0].motion.data
        base = metrics.jerk(motion)
        noisy = motion + np.random.default_rng(0).normal(0, 0.1, motion.shape)
        assert np.isfinite(base)
        assert base < metrics.jerk(noisy)

    def test_tuple_separation_positive(self):
        delta = min_tuple_separation()
        assert delta > 0.05

    def test_silence_maps_to_rest_pose(self):
        samples, _ = generate_corpus(_small())
        rest = _rest_pose(default_skeleton())
        for s in samples[:3]:
            silence = s.labels.silence_mask()
            # erode: only frames whose neighbours are silent too, so the
            # 3-frame smoothing window saw no note pose
            interior = silence.copy()
            interior[1:] &= silence[:-1]
            interior[:-1] &= silence[1:]
            if not interior.any():
                continue
            dev = np.abs(s.motion.data[interior] - rest[None])
            assert dev.mean() < 4 * MOTION_NOISE
