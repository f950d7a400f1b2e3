"""Tests for the synthetic corpus and mixture simulation."""

import json

import numpy as np
import pytest
from scipy import stats

from pytsr.config import CorpusConfig, MfccConfig
from pytsr.corpus import (
    NoiseBank,
    build_manifest,
    make_rir,
    manifest_digest,
    mixture_components,
    read_manifest,
    render_corpus,
    render_record,
    render_utterance,
    simulate_mixture,
    speaker_pool,
    speaker_profile,
    synth_utterance,
    write_manifest,
)
from pytsr.dsp import compute_mfcc, power_ratio_db, read_wav
from pytsr.errors import ManifestError, SignalError
from pytsr.models import TokenSequence


@pytest.fixture
def dry_config(tiny_config):
    """Corpus config with identity room responses and two interferers per record."""
    return tiny_config.corpus.model_copy(update={"reverberant": False, "interferer_counts": [2]})


def _sources(record, config):
    return [render_utterance(record.target, config)] + [
        render_utterance(ref, config) for ref in record.interferers
    ]


@pytest.mark.unit
class TestSpeakers:
    """Test speaker pools and voice profiles."""

    def test_pools_are_disjoint(self, tiny_config):
        """Test no speaker appears in two splits."""
        pools = [set(speaker_pool(s, tiny_config.corpus)) for s in ("train", "dev", "test")]

        assert not pools[0] & pools[1]
        assert not pools[0] & pools[2]
        assert not pools[1] & pools[2]
        assert len(pools[0]) == tiny_config.corpus.num_train_speakers

    def test_profiles_are_deterministic(self):
        """Test a speaker id always maps to the same voice."""
        assert speaker_profile(7) == speaker_profile(7)
        assert speaker_profile(7) != speaker_profile(8)


@pytest.mark.unit
class TestSynthUtterance:
    """Test utterance synthesis."""

    def test_bit_identical_reruns(self, tiny_config):
        """Test the same inputs render identical samples."""
        profile = speaker_profile(1)
        text = TokenSequence.from_text("abca")

        first = synth_utterance(profile, text, 5, tiny_config.corpus)
        second = synth_utterance(profile, text, 5, tiny_config.corpus)

        assert np.array_equal(first.samples, second.samples)

    def test_seed_changes_samples(self, tiny_config):
        """Test a different seed gives a different rendering."""
        profile = speaker_profile(1)
        text = TokenSequence.from_text("abca")

        first = synth_utterance(profile, text, 5, tiny_config.corpus)
        second = synth_utterance(profile, text, 6, tiny_config.corpus)

        assert not np.array_equal(first.samples, second.samples)

    def test_duration_proportional_to_length(self, tiny_config):
        """Test six tokens last exactly twice as long as three."""
        profile = speaker_profile(2)

        short = synth_utterance(profile, TokenSequence.from_text("abc"), 1, tiny_config.corpus)
        long = synth_utterance(profile, TokenSequence.from_text("abcabc"), 1, tiny_config.corpus)

        assert long.num_samples == 2 * short.num_samples

    def test_peak_and_finiteness(self, tiny_config):
        """Test the rendering is finite and peaks at 0.5."""
        signal = synth_utterance(
            speaker_profile(3), TokenSequence.from_text("dcba"), 0, tiny_config.corpus
        )

        assert np.all(np.isfinite(signal.samples))
        assert np.max(np.abs(signal.samples)) == pytest.approx(0.5)

    def test_empty_transcript(self, tiny_config):
        """Test an empty transcript is refused."""
        with pytest.raises(SignalError) as exc_info:
            synth_utterance(speaker_profile(0), TokenSequence(), 0, tiny_config.corpus)

        assert exc_info.value.code == "empty_transcript"

    def test_unknown_token(self, tiny_config):
        """Test a token outside the vocabulary is refused."""
        transcript = TokenSequence.from_text("az")

        with pytest.raises(SignalError) as exc_info:
            synth_utterance(speaker_profile(0), transcript, 0, tiny_config.corpus)

        assert exc_info.value.code == "unknown_token"

    def test_speakers_are_separable(self):
        """Test nearest-centroid speaker classification on MFCC means."""
        config = CorpusConfig()
        features = MfccConfig()
        rng = np.random.default_rng(0)
        texts = ["".join(rng.choice(list(config.vocabulary), size=6)) for _ in range(6)]

        def mean_mfcc(speaker, index):
            signal = synth_utterance(
                speaker_profile(speaker), TokenSequence.from_text(texts[index]), index, config
            )
            return compute_mfcc(signal, features).mean(dim=0).numpy()

        speakers = list(range(6))
        centroids = {s: np.mean([mean_mfcc(s, i) for i in range(3)], axis=0) for s in speakers}
        correct = total = 0
        for speaker in speakers:
            for index in range(3, 6):
                query = mean_mfcc(speaker, index)
                guess = min(speakers, key=lambda s: np.linalg.norm(centroids[s] - query))
                correct += guess == speaker
                total += 1

        assert correct / total >= 0.9


@pytest.mark.unit
class TestManifest:
    """Test manifest construction and persistence."""

    def test_same_seed_same_manifest(self, tiny_config):
        """Test manifests are a pure function of their inputs."""
        first = build_manifest("train", 10, 7, tiny_config.corpus)
        second = build_manifest("train", 10, 7, tiny_config.corpus)

        assert [r.model_dump() for r in first] == [r.model_dump() for r in second]

    def test_records_respect_pools(self, tiny_config):
        """Test every speaker of a record comes from the split's pool."""
        pool = set(speaker_pool("test", tiny_config.corpus))

        for record in build_manifest("test", 30, 1, tiny_config.corpus):
            ids = [record.target_speaker_id] + [i.speaker_id for i in record.interferers]
            assert set(ids) <= pool
            assert len(set(ids)) == len(ids)
            assert record.enrollment.speaker_id == record.target_speaker_id
            assert record.enrollment != record.target
            assert record.sir_db in tiny_config.corpus.sir_choices_db
            assert record.snr_db in tiny_config.corpus.snr_choices_db

    def test_train_and_test_speakers_disjoint(self, tiny_config):
        """Test train and test manifests share no speaker."""
        def speakers(records):
            return {r.target_speaker_id for r in records} | {
                i.speaker_id for r in records for i in r.interferers
            }

        train = build_manifest("train", 40, 0, tiny_config.corpus)
        test = build_manifest("test", 40, 0, tiny_config.corpus)

        assert not speakers(train) & speakers(test)

    @pytest.mark.slow
    def test_interferer_counts_roughly_uniform(self, tiny_config):
        """Test every interferer count share holds 1/3 inside a 99% binomial interval."""
        records = build_manifest("train", 10000, 2, tiny_config.corpus)
        counts = np.bincount([r.interferer_count for r in records], minlength=3)

        for count in counts:
            interval = stats.binomtest(int(count), len(records), 1 / 3).proportion_ci(0.99)
            assert interval.low <= 1 / 3 <= interval.high

    def test_size_must_be_positive(self, tiny_config):
        """Test an empty manifest cannot be requested."""
        with pytest.raises(ManifestError):
            build_manifest("train", 0, 0, tiny_config.corpus)

    def test_write_and_read(self, tmp_path, tiny_config):
        """Test a written manifest reads back to equal records."""
        records = build_manifest("dev", 5, 0, tiny_config.corpus)

        loaded = read_manifest(write_manifest(records, tmp_path / "dev.json"))

        assert loaded == records

    def test_empty_manifest_file(self, tmp_path):
        """Test an empty file is an invalid manifest."""
        path = tmp_path / "empty.json"
        path.write_text("\n", encoding="utf-8")

        with pytest.raises(ManifestError):
            read_manifest(path)

    def test_missing_manifest(self, tmp_path):
        """Test a missing file is an invalid manifest."""
        with pytest.raises(ManifestError):
            read_manifest(tmp_path / "nope.json")

    def test_foreign_schema_version(self, tmp_path, tiny_config):
        """Test a record of another schema version is refused."""
        record = build_manifest("dev", 1, 0, tiny_config.corpus)[0]
        data = record.model_dump(mode="json")
        data["schema_version"] = 99
        path = tmp_path / "old.json"
        path.write_text(json.dumps(data) + "\n", encoding="utf-8")

        with pytest.raises(ManifestError):
            read_manifest(path)

    def test_digest_depends_on_order(self, tiny_config):
        """Test the digest covers record order."""
        records = build_manifest("dev", 3, 0, tiny_config.corpus)

        assert manifest_digest(records) == manifest_digest(list(records))
        assert manifest_digest(records) != manifest_digest(records[::-1])


@pytest.mark.unit
class TestMixing:
    """Test noise, room responses and mixing."""

    def test_noise_has_unit_power(self):
        """Test every noise kind is rendered at unit power."""
        bank = NoiseBank()

        for kind in bank.kinds:
            noise = bank.render(kind, 8000, seed=4)
            assert np.mean(noise**2) == pytest.approx(1.0)

    def test_unknown_noise_kind(self):
        """Test an unknown noise kind is refused."""
        with pytest.raises(ManifestError):
            NoiseBank(["white"])

    def test_rir_identity_when_dry(self, dry_config):
        """Test dry corpora use the identity room response."""
        assert make_rir(3, dry_config).tolist() == [1.0]

    def test_rir_direct_path(self, tiny_config):
        """Test reverberant responses start with a unit direct path."""
        rir = make_rir(1, tiny_config.corpus)

        assert rir[0] == 1.0
        assert rir.shape[0] == int(tiny_config.corpus.max_rir_s * 16000)

    def test_measured_sir_and_snr(self, dry_config):
        """Test re-measured SIR and SNR land within 0.01 dB of the record."""
        bank = NoiseBank(dry_config.noise_kinds)
        for record in build_manifest("train", 5, 11, dry_config):
            components = mixture_components(record, _sources(record, dry_config), bank, dry_config)
            for interferer in components.interferers:
                measured = power_ratio_db(components.target, interferer)
                assert measured == pytest.approx(record.sir_db, abs=0.01)
            measured = power_ratio_db(components.speech, components.noise)
            assert measured == pytest.approx(record.snr_db, abs=0.01)

    def test_equal_power_interferer_without_noise(self, dry_config):
        """Test a 0 dB interferer mixes in at the target's power."""
        record = build_manifest("train", 1, 0, dry_config)[0].model_copy(
            update={"sir_db": 0.0, "snr_db": None}
        )
        sources = _sources(record, dry_config)

        mixture, clean = simulate_mixture(record, sources, NoiseBank(), config=dry_config)
        components = mixture_components(record, sources, NoiseBank(), dry_config)

        assert np.allclose(mixture.samples, clean.samples + sum(components.interferers))
        for interferer in components.interferers:
            assert np.mean(interferer**2) == pytest.approx(np.mean(clean.samples**2))

    def test_source_count_mismatch(self, dry_config):
        """Test a record needs one source per speaker."""
        record = build_manifest("train", 1, 0, dry_config)[0]

        with pytest.raises(ManifestError):
            mixture_components(record, _sources(record, dry_config)[:1], NoiseBank(), dry_config)

    def test_clean_render_is_identity(self, tiny_config, tiny_system, train_manifest):
        """Test clean renderings return the target alone."""
        item = render_record(
            train_manifest[0],
            tiny_config.corpus,
            tiny_config.stft,
            tiny_system.label_index,
            clean=True,
        )

        assert item.is_clean
        assert np.array_equal(item.mixture.samples, item.clean.samples)
        assert not item.overlap.any()

    def test_frame_labels_follow_stft_framing(self, tiny_config, rendered):
        """Test there is one label and overlap flag per STFT frame."""
        frames = tiny_config.stft.num_frames(rendered.mixture.num_samples)

        assert rendered.labels.shape == (frames,)
        assert rendered.overlap.shape == (frames,)
        assert rendered.labels.max() < tiny_config.corpus.num_train_speakers


@pytest.mark.unit
class TestRenderCorpus:
    """Test WAV rendering of a manifest."""

    def test_content_addressed_wavs(self, tmp_path, tiny_config):
        """Test every record gets readable WAVs named by their content hash."""
        records = build_manifest("dev", 2, 0, tiny_config.corpus)

        rendered = render_corpus(records, tmp_path, tiny_config.corpus, progress=False)

        for record in rendered:
            for path in (record.mixture_path, record.clean_path, record.enrollment_path):
                assert path is not None
                signal = read_wav(path)
                assert np.max(np.abs(signal.samples)) <= tiny_config.corpus.peak_level + 1e-4
                assert len(path.rsplit("/", 1)[-1]) == 64 + len(".wav")
        assert rendered[0].mixture_id == records[0].mixture_id
