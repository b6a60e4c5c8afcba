import shutil
import tempfile
from pathlib import Path

import numpy as np
import pytest

from dcls_audio.audio import load_wav
from dcls_audio.datasets import (
    Manifest,
    ManifestEntry,
    ManifestError,
    class_frequency,
    class_name,
    gen_synthetic,
    load_manifest,
    save_manifest,
    synth_clip,
)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for manifests and clips."""
    path = tempfile.mkdtemp()
    yield Path(path)
    shutil.rmtree(path, ignore_errors=True)


def write_manifest(directory, rows, n_labels=4):
    csv_path = directory / "manifest.csv"
    labels_path = directory / "labels.txt"
    csv_path.write_text("path,labels\n" + "".join(row + "\n" for row in rows))
    labels_path.write_text("".join(f"class_{k}\n" for k in range(n_labels)))
    return csv_path, labels_path


class TestLoadManifest:
    """Test cases for manifest parsing and validation."""

    def test_valid_rows(self, temp_dir):
        """Test multi-label, single-label and empty-label rows."""
        manifest = load_manifest(*write_manifest(temp_dir, ["a.wav,0;3", "b.wav,2", "c.wav,"]))
        assert manifest.entries == [
            ManifestEntry("a.wav", (0, 3)),
            ManifestEntry("b.wav", (2,)),
            ManifestEntry("c.wav", ()),
        ]
        assert manifest.num_classes == 4
        np.testing.assert_array_equal(manifest.targets()[0], [1, 0, 0, 1])
        assert not manifest.targets()[2].any()

    def test_label_out_of_range(self, temp_dir):
        """Test that the row number of a bad label index is reported."""
        with pytest.raises(ManifestError, match="label index out of range at row 2"):
            load_manifest(*write_manifest(temp_dir, ["a.wav,0;3", "b.wav,9"]))

    def test_duplicate_path(self, temp_dir):
        """Test that a repeated path is rejected with its row."""
        with pytest.raises(ManifestError, match="duplicate path 'a.wav' at row 3"):
            load_manifest(*write_manifest(temp_dir, ["a.wav,0", "b.wav,1", "a.wav,2"]))

    def test_non_integer_labels(self, temp_dir):
        """Test that label tokens must be integers."""
        with pytest.raises(ManifestError, match="malformed row 1"):
            load_manifest(*write_manifest(temp_dir, ["a.wav,dog"]))

    def test_extra_field(self, temp_dir):
        """Test that a row with too many fields is malformed."""
        with pytest.raises(ManifestError, match="malformed row 2"):
            load_manifest(*write_manifest(temp_dir, ["a.wav,0", "b.wav,1,2"]))

    def test_wrong_header(self, temp_dir):
        """Test that the header must be path,labels."""
        csv_path, labels_path = write_manifest(temp_dir, [])
        csv_path.write_text("file,tags\na.wav,0\n")
        with pytest.raises(ManifestError, match="header"):
            load_manifest(csv_path, labels_path)

    def test_missing_files(self, temp_dir):
        """Test missing manifest and vocabulary files."""
        csv_path, labels_path = write_manifest(temp_dir, ["a.wav,0"])
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(temp_dir / "absent.csv", labels_path)
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(csv_path, temp_dir / "absent.txt")

    def test_round_trip(self, temp_dir):
        """Test that save then load reproduces the manifest."""
        manifest = Manifest(
            [ManifestEntry("x/1.wav", (0, 2)), ManifestEntry("2.wav", ()), ManifestEntry("3.wav", (1,))],
            ["dog", "cat", "bird"],
            temp_dir,
        )
        save_manifest(manifest, temp_dir / "m.csv", temp_dir / "l.txt")
        loaded = load_manifest(temp_dir / "m.csv", temp_dir / "l.txt")
        assert loaded.entries == manifest.entries
        assert loaded.vocabulary == manifest.vocabulary
        assert loaded.resolve("x/1.wav") == temp_dir / "x/1.wav"


class TestSyntheticData:
    """Test cases for the synthetic tagging dataset."""

    def test_class_frequencies(self):
        """Test the 200 * 2^(k/2) Hz tone ladder and chirp names."""
        assert class_frequency(0) == 200.0
        assert class_frequency(2) == 400.0
        assert class_name(0) == "tone_200hz"
        assert class_name(12).startswith("chirp_")

    def test_generation_writes_manifest(self, temp_dir):
        """Test the files and the manifest produced by gen_synthetic."""
        manifest = gen_synthetic(temp_dir, n_clips=6, n_classes=4, seed=1, duration=0.5)
        assert len(manifest) == 6
        assert (temp_dir / "manifest.csv").is_file() and (temp_dir / "labels.txt").is_file()
        loaded = load_manifest(temp_dir / "manifest.csv", temp_dir / "labels.txt")
        assert loaded.entries == manifest.entries
        for entry in manifest.entries:
            assert 1 <= len(entry.labels) <= 3
            assert (temp_dir / entry.path).is_file()

    def test_same_seed_is_bitwise_identical(self, temp_dir):
        """Test determinism across runs and thread counts."""
        first = gen_synthetic(temp_dir / "a", n_clips=4, n_classes=4, seed=3, duration=0.25, threads=1)
        gen_synthetic(temp_dir / "b", n_clips=4, n_classes=4, seed=3, duration=0.25, threads=3)
        for entry in first.entries:
            assert (temp_dir / "a" / entry.path).read_bytes() == (temp_dir / "b" / entry.path).read_bytes()

    def test_different_seed_differs(self):
        """Test that the seed changes the clips."""
        assert not np.array_equal(synth_clip(0, 4, 1, 0.1)[0], synth_clip(0, 4, 2, 0.1)[0])

    def test_single_label_clip_peaks_at_class_frequency(self, temp_dir):
        """Test the FFT peak of clips labeled with one tone class."""
        manifest = gen_synthetic(temp_dir, n_clips=24, n_classes=6, seed=0, duration=1.0)
        singles = [entry for entry in manifest.entries if len(entry.labels) == 1]
        assert singles
        for entry in singles:
            clip = load_wav(temp_dir / entry.path)
            spectrum = np.abs(np.fft.rfft(clip.samples))
            peak_hz = np.argmax(spectrum) * clip.sample_rate / len(clip.samples)
            assert peak_hz == pytest.approx(class_frequency(entry.labels[0]), abs=2.0)

    def test_wav_round_trip_precision(self, temp_dir):
        """Test that stored samples are within one quantization step of the signal."""
        gen_synthetic(temp_dir, n_clips=2, n_classes=4, seed=5, duration=0.25)
        samples, _ = synth_clip(1, 4, 5, 0.25)
        loaded = load_wav(temp_dir / "clip_00001.wav").samples
        np.testing.assert_allclose(loaded, samples, atol=1 / 32768)

    def test_label_marginals_are_uniform(self):
        """Test a chi-square bound on per-class label counts over 4096 clips."""
        n_classes = 8
        counts = np.zeros(n_classes)
        for index in range(4096):
            _, labels = synth_clip(index, n_classes, seed=0, duration=0.001)
            counts[list(labels)] += 1
        expected = counts.sum() / n_classes
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        # 99.9th percentile of chi-square with 7 degrees of freedom
        assert chi2 < 24.32

    def test_chirp_classes(self):
        """Test that 16 classes (tones plus chirps) can be synthesized."""
        samples, labels = synth_clip(0, 16, 0, 0.1)
        assert np.max(np.abs(samples)) == pytest.approx(0.9)
        assert all(0 <= k < 16 for k in labels)

    def test_too_many_classes(self, temp_dir):
        """Test the class-count limit."""
        with pytest.raises(ManifestError):
            gen_synthetic(temp_dir, n_clips=1, n_classes=17)

    def test_unwritable_directory(self, temp_dir):
        """Test that a file in place of the output directory is reported."""
        blocker = temp_dir / "file"
        blocker.write_text("x")
        with pytest.raises(ManifestError, match="cannot write"):
            gen_synthetic(blocker / "out", n_clips=1, n_classes=2, duration=0.1)
