import numpy as np
import pytest

from silentwear.config import SynthSpec
from silentwear.emgio import CommandLabel, Condition, load_manifest, read_recording
from silentwear.errors import InvalidSpec
from silentwear.synth import session_shift, subject_patterns, synth_dataset, synth_recording


class TestSynthRecording:
    def test_event_layout(self, tiny_spec):
        rec = synth_recording(tiny_spec, seed=1, subject=0, session=1,
                              condition=Condition.VOCALIZED, batch=1)
        assert rec.n_channels == 14 and rec.fs_hz == 500
        labels = [ev.label for ev in rec.events]
        assert len(labels) == 2 * 8 * tiny_spec.reps_per_command
        assert labels[1::2] == [CommandLabel.REST] * 16
        for cmd in CommandLabel:
            if cmd is not CommandLabel.REST:
                assert labels[0::2].count(cmd) == 2
        prod = int(tiny_spec.production_s * 500)
        assert all(ev.length == prod for ev in rec.events[0::2])

    def test_seeded(self, tiny_spec):
        a = synth_recording(tiny_spec, 5, 0, 1, Condition.SILENT, 2)
        b = synth_recording(tiny_spec, 5, 0, 1, Condition.SILENT, 2)
        np.testing.assert_array_equal(a.samples, b.samples)
        c = synth_recording(tiny_spec, 6, 0, 1, Condition.SILENT, 2)
        assert not np.array_equal(a.samples, c.samples)

    def test_contains_mains_and_drift(self, tiny_spec):
        rec = synth_recording(tiny_spec, 1, 0, 1, Condition.VOCALIZED, 1)
        spectrum = np.abs(np.fft.rfft(rec.samples[0]))
        freqs = np.fft.rfftfreq(rec.n_samples, 1 / rec.fs_hz)
        mains = spectrum[np.argmin(np.abs(freqs - 50.0))]
        assert mains > 5 * np.median(spectrum)

    def test_invalid_spec(self):
        with pytest.raises(InvalidSpec):
            synth_recording(SynthSpec(n_channels=4), 0, 0, 1, Condition.VOCALIZED, 1)
        with pytest.raises(InvalidSpec):
            synth_recording(SynthSpec(reps_per_command=0), 0, 0, 1, Condition.VOCALIZED, 1)


class TestPatterns:
    def test_spatial_patterns_distinct(self, tiny_spec):
        p = subject_patterns(tiny_spec, 0, 0)
        assert p.spatial.shape == (9, 14)
        assert np.all(p.spatial >= 0) and np.allclose(p.spatial.max(axis=1), 1.0)
        assert len(set(np.round(p.delays_s, 6))) == 9

    @pytest.mark.parametrize("subject", [0, 1, 2, 3])
    def test_spatial_patterns_orthogonal(self, tiny_spec, subject):
        spatial = subject_patterns(tiny_spec, 3, subject).spatial
        unit = spatial / np.linalg.norm(spatial, axis=1, keepdims=True)
        cos = np.abs(unit @ unit.T)
        np.testing.assert_allclose(np.diag(cos), 1.0)
        off = cos[~np.eye(9, dtype=bool)]
        assert off.max() < 1e-6
        # every channel belongs to exactly one class
        assert np.all((spatial > 0).sum(axis=0) == 1)

    def test_patterns_differ_between_subjects(self, tiny_spec):
        a = subject_patterns(tiny_spec, 3, 0).spatial
        b = subject_patterns(tiny_spec, 3, 1).spatial
        assert not np.array_equal(a, b)

    def test_no_shift_is_identity(self, tiny_spec):
        shift = session_shift(tiny_spec, 0, 0, 2)
        np.testing.assert_array_equal(shift.permutation, np.arange(14))
        assert shift.pace == 1.0

    def test_shift_perturbs_sessions(self, tiny_spec):
        spec = tiny_spec.model_copy(update={"session_shift_strength": 1.0})
        a, b = session_shift(spec, 0, 0, 1), session_shift(spec, 0, 0, 2)
        assert not np.array_equal(a.gains, b.gains)
        assert sorted(a.permutation.tolist()) == list(range(14))

    def test_no_shift_keeps_channel_rms(self):
        spec = SynthSpec(n_subjects=1, n_sessions=2, n_batches=1,
                         conditions=[Condition.VOCALIZED])
        first = synth_recording(spec, 4, 0, 1, Condition.VOCALIZED, 1)
        second = synth_recording(spec, 4, 0, 2, Condition.VOCALIZED, 1)
        rms = [np.sqrt(np.mean(r.samples.astype(np.float64) ** 2, axis=1))
               for r in (first, second)]
        ratio = rms[1] / rms[0]
        assert np.all(np.abs(ratio - 1.0) <= 0.05), ratio


class TestSynthDataset:
    def test_manifest_and_files(self, tiny_dataset):
        manifest = load_manifest(tiny_dataset.root)
        assert manifest.subject_ids() == ["S01"]
        assert len(manifest.refs("S01", Condition.VOCALIZED)) == 15
        rec = read_recording(manifest.path_for(manifest.refs()[0]))
        assert sum(e.label is CommandLabel.REST for e in rec.events) == 16

    def test_byte_identical_reruns(self, tmp_path, tiny_spec):
        spec = tiny_spec.model_copy(update={"n_sessions": 1, "n_batches": 1})
        synth_dataset(spec, 7, tmp_path / "a")
        synth_dataset(spec, 7, tmp_path / "b")
        for path in sorted((tmp_path / "a").rglob("*")):
            if path.is_file():
                twin = tmp_path / "b" / path.relative_to(tmp_path / "a")
                assert path.read_bytes() == twin.read_bytes()
