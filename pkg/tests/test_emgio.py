import json

import numpy as np
import pytest

from silentwear.emgio import (
    HEADER,
    BatchRef,
    CommandLabel,
    Condition,
    EmgRecording,
    Event,
    balance_rest,
    class_counts,
    extract_window,
    load_manifest,
    parse_recording,
    read_recording,
    segment,
    serialize_recording,
    sidecar_path,
    stack_windows,
    windows_from_recording,
    write_recording,
)
from silentwear.errors import (
    BadMagic,
    Corrupt,
    EventOutOfRange,
    IncompleteManifest,
    InsufficientRest,
    SegmentTooShort,
    TruncatedPayload,
    VersionMismatch,
)


def _recording(n_samples=2000, n_channels=14, events=None, fs=500):
    rng = np.random.default_rng(0)
    if events is None:
        events = [
            Event(onset_sample=100, end_sample=900, label=CommandLabel.UP),
            Event(onset_sample=900, end_sample=1700, label=CommandLabel.REST),
        ]
    return EmgRecording(fs_hz=fs, samples=rng.standard_normal((n_channels, n_samples)),
                        events=tuple(events))


class TestContainer:
    def test_serialized_size(self):
        rec = _recording()
        data = serialize_recording(rec)
        assert len(data) == HEADER.size + 4 * 14 * 2000
        assert data[:4] == b"SWR1"

    def test_file_round_trip_keeps_events(self, tmp_path):
        rec = _recording()
        path = write_recording(rec, tmp_path / "a" / "rec.swr1")
        assert sidecar_path(path).exists()
        back = read_recording(path)
        np.testing.assert_array_equal(back.samples, rec.samples)
        assert back.events == rec.events
        assert back.fs_hz == 500

    def test_sidecar_uses_label_names(self, tmp_path):
        path = write_recording(_recording(), tmp_path / "rec.swr1")
        events = json.loads(sidecar_path(path).read_text())
        assert [e["label"] for e in events] == ["up", "rest"]

    def test_bad_magic(self):
        data = bytearray(serialize_recording(_recording()))
        data[:4] = b"XXXX"
        with pytest.raises(BadMagic):
            parse_recording(bytes(data))

    def test_version_mismatch(self):
        data = bytearray(serialize_recording(_recording()))
        data[4] = 9
        with pytest.raises(VersionMismatch):
            parse_recording(bytes(data))

    def test_truncated_header(self):
        with pytest.raises(TruncatedPayload):
            parse_recording(b"SWR1\x01")

    def test_truncated_payload_reports_offset(self):
        data = serialize_recording(_recording())
        with pytest.raises(TruncatedPayload, match=str(len(data) - 4)):
            parse_recording(data[:-4])

    def test_trailing_bytes(self):
        with pytest.raises(Corrupt):
            parse_recording(serialize_recording(_recording()) + b"\x00" * 4)

    def test_samples_are_read_only(self):
        rec = _recording()
        with pytest.raises(ValueError):
            rec.samples[0, 0] = 1.0


class TestEvents:
    def test_event_past_end(self):
        with pytest.raises(EventOutOfRange, match="event 0"):
            _recording(events=[Event(onset_sample=0, end_sample=5000, label=CommandLabel.UP)])

    def test_overlapping_events(self):
        events = [
            Event(onset_sample=0, end_sample=500, label=CommandLabel.UP),
            Event(onset_sample=400, end_sample=900, label=CommandLabel.REST),
        ]
        with pytest.raises(EventOutOfRange, match="event 1"):
            _recording(events=events)

    def test_empty_span_is_rejected(self):
        with pytest.raises(EventOutOfRange):
            _recording(events=[{"onset_sample": 10, "end_sample": 10, "label": "up"}])

    def test_label_from_name(self):
        assert CommandLabel.from_name("Backward") is CommandLabel.BACKWARD
        with pytest.raises(ValueError):
            CommandLabel.from_name("jump")


class TestWindowing:
    def test_window_anchored_at_onset(self):
        rec = _recording()
        seg = segment(rec)[0]
        win = extract_window(seg, 1400, rec.fs_hz)
        assert win.data.shape == (14, 700)
        np.testing.assert_array_equal(win.data, rec.samples[:, 100:800])
        assert win.label == CommandLabel.UP

    def test_segment_too_short(self):
        rec = _recording()
        with pytest.raises(SegmentTooShort):
            windows_from_recording(rec, 2000)

    def test_windows_carry_provenance(self):
        ref = BatchRef("S01", 1, 2, Condition.SILENT)
        windows = windows_from_recording(_recording(), 800, meta=ref)
        assert [w.meta for w in windows] == [ref, ref]

    def test_stack_shapes(self):
        x, y = stack_windows(windows_from_recording(_recording(), 800))
        assert x.shape == (2, 14, 400) and x.dtype == np.float32
        assert y.tolist() == [CommandLabel.UP, CommandLabel.REST]


def _labeled(labels):
    from silentwear.emgio import LabeledWindow

    return [LabeledWindow(np.zeros((14, 10), dtype=np.float32), int(lab)) for lab in labels]


class TestBalanceRest:
    def test_rest_downsampled_to_largest_command(self):
        labels = [0] * 3 + [1] * 5 + [CommandLabel.REST] * 12
        out = balance_rest(_labeled(labels), seed=1)
        counts = class_counts(out)
        assert counts[CommandLabel.REST] == 5
        assert counts[0] == 3 and counts[1] == 5

    def test_deterministic_for_seed(self):
        labels = [0] * 4 + [CommandLabel.REST] * 10
        windows = _labeled(labels)
        a = balance_rest(windows, seed=3)
        b = balance_rest(windows, seed=3)
        assert [id(w) for w in a] == [id(w) for w in b]

    def test_order_preserved(self):
        windows = _labeled([CommandLabel.REST, 0, CommandLabel.REST, 1, CommandLabel.REST])
        out = balance_rest(windows, seed=0)
        positions = [windows.index(w) for w in out]
        assert positions == sorted(positions)

    def test_insufficient_rest(self):
        with pytest.raises(InsufficientRest):
            balance_rest(_labeled([0] * 4 + [CommandLabel.REST] * 2), seed=0)


class TestManifest:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IncompleteManifest):
            load_manifest(tmp_path)

    def test_missing_recording(self, tmp_path, make_manifest):
        from silentwear.emgio import save_manifest

        save_manifest(make_manifest(), tmp_path / "manifest.json")
        with pytest.raises(IncompleteManifest, match="missing recording"):
            load_manifest(tmp_path)

    def test_unparsable_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text("{not json")
        with pytest.raises(Corrupt):
            load_manifest(tmp_path)

    def test_refs_and_paths(self, make_manifest):
        manifest = make_manifest(n_sessions=2, n_batches=5)
        refs = manifest.refs("S01", Condition.VOCALIZED)
        assert len(refs) == 10
        assert manifest.path_for(refs[0]).name == "vocalized_batch1.swr1"
        with pytest.raises(IncompleteManifest):
            manifest.path_for(BatchRef("S09", 1, 1, Condition.VOCALIZED))
