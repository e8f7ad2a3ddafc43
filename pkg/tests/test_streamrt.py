import numpy as np
import pytest

from silentwear.config import StreamConfig
from silentwear.emgio import EmgRecording
from silentwear.errors import ChannelMismatch, SampleRateMismatch, SourceUnderrun
from silentwear.quantize import save_quantized
from silentwear.streamrt import (
    RingBuffer,
    StreamClassifier,
    batch_classify,
    bench_throughput,
    stream_classify,
    window_ends,
)

CFG = StreamConfig(window_ms=800, step_ms=100)


def _recording(n_samples, fs_hz=500, seed=0):
    rng = np.random.default_rng(seed)
    return EmgRecording(fs_hz=fs_hz, samples=rng.standard_normal((14, n_samples)))


class TestRingBuffer:
    def test_oldest_first(self):
        buf = RingBuffer(1, 4)
        buf.write(np.array([[1, 2, 3]]))
        buf.write(np.array([[4, 5]]))
        assert buf.latest().ravel().tolist() == [2, 3, 4, 5]
        assert buf.count == 5

    def test_chunk_longer_than_capacity(self):
        buf = RingBuffer(1, 3)
        buf.write(np.array([[9]]))
        buf.write(np.arange(7).reshape(1, 7))
        assert buf.latest().ravel().tolist() == [4, 5, 6]
        buf.write(np.array([[7]]))
        assert buf.latest().ravel().tolist() == [5, 6, 7]


class TestGrid:
    def test_ten_seconds(self):
        ends = window_ends(5000, 400, 50)
        assert len(ends) == 93
        assert ends[0] == 400 and ends[-1] == 5000

    def test_shorter_than_window(self):
        assert window_ends(399, 400, 50) == []


class TestStreamClassify:
    def test_matches_batch(self, quantized_model):
        rec = _recording(5000)
        streamed = list(stream_classify(CFG, rec, quantized_model))
        batched = batch_classify(CFG, rec, quantized_model)
        assert len(streamed) == 93
        assert [p.end_sample for p in streamed] == [end for end, _ in batched]
        for pred, (_, logits) in zip(streamed, batched):
            np.testing.assert_array_equal(pred.logits, logits)
            assert pred.label == int(np.argmax(logits))

    @pytest.mark.parametrize("chunk", [1, 37, 400, 5000])
    def test_chunk_size_independent(self, quantized_model, chunk):
        rec = _recording(1200, seed=3)
        reference = [p.logits for p in stream_classify(CFG, rec, quantized_model)]
        got = [p.logits for p in stream_classify(CFG, rec, quantized_model, chunk_samples=chunk)]
        assert len(got) == len(reference) == 17
        for a, b in zip(got, reference):
            np.testing.assert_array_equal(a, b)

    def test_loads_model_from_path(self, quantized_model, tmp_path):
        path = save_quantized(quantized_model, tmp_path / "m.swq1")
        cfg = CFG.model_copy(update={"model_path": str(path)})
        rec = _recording(600)
        preds = list(stream_classify(cfg, rec))
        assert [p.end_sample for p in preds] == [400, 450, 500, 550, 600]

    def test_sample_rate_mismatch(self, quantized_model):
        with pytest.raises(SampleRateMismatch):
            list(stream_classify(CFG, _recording(1000, fs_hz=1000), quantized_model))

    def test_channel_mismatch(self, quantized_model):
        feed = [np.zeros((8, 100), dtype=np.float32)]
        with pytest.raises(ChannelMismatch):
            list(stream_classify(CFG, feed, quantized_model))


class TestUnderrun:
    def test_partial_window_dropped(self, quantized_model, caplog_loguru):
        clf = StreamClassifier(quantized_model, CFG)
        preds = clf.push(_recording(420).samples)
        clf.finish()
        assert [p.end_sample for p in preds] == [400]
        assert "20 samples" in clf.underrun
        assert "underrun" in caplog_loguru.text

    def test_short_stream(self, quantized_model):
        clf = StreamClassifier(quantized_model, CFG)
        assert clf.push(_recording(300).samples) == []
        clf.finish()
        assert "300 samples" in clf.underrun

    def test_strict_raises(self, quantized_model):
        with pytest.raises(SourceUnderrun):
            list(stream_classify(CFG, _recording(300), quantized_model, strict=True))

    def test_exact_grid_is_clean(self, quantized_model):
        clf = StreamClassifier(quantized_model, CFG)
        clf.push(_recording(450).samples)
        clf.finish()
        assert clf.underrun is None


class TestPredictionRecord:
    def test_to_dict(self, quantized_model):
        (pred,) = stream_classify(CFG, _recording(400), quantized_model)
        data = pred.to_dict()
        assert set(data) == {"end_sample", "label", "probabilities", "latency_ms"}
        assert data["end_sample"] == 400
        assert len(data["probabilities"]) == 9
        assert sum(data["probabilities"]) == pytest.approx(1.0, abs=1e-4)
        assert data["label"] == pred.label.label_name


class TestBench:
    def test_throughput(self, quantized_model):
        report = bench_throughput(CFG, n_windows=20, qmodel=quantized_model, warmup=2)
        assert report.n_timed == 20
        assert report.inferences_per_s >= 10
        data = report.to_dict()
        assert data["valid"] == report.valid


@pytest.mark.slow
class TestReplay:
    def test_synthetic_replay_accuracy(self):
        from silentwear.config import RunConfig, SynthSpec
        from silentwear.dsp import get_preprocessor
        from silentwear.emgio import Condition, balance_rest, stack_windows, windows_from_recording
        from silentwear.evalharness import train_on_pool
        from silentwear.metrics import balanced_accuracy
        from silentwear.quantize import calibrate_and_quantize
        from silentwear.synth import synth_recording

        spec = SynthSpec(n_subjects=1, n_sessions=1, n_batches=5,
                         conditions=[Condition.VOCALIZED])
        recordings = [synth_recording(spec, 11, 0, 1, Condition.VOCALIZED, b)
                      for b in range(1, 6)]
        # train on windows cut from the raw feed and filtered one by one, as the stream does
        pool = []
        for rec in recordings[:4]:
            pool.extend(windows_from_recording(rec, CFG.window_ms))
        x, y = stack_windows(balance_rest(pool, seed=0))
        x = get_preprocessor(CFG.fs_hz).apply(x)
        cfg = RunConfig()
        model, _ = train_on_pool(x, y, cfg.model, cfg.train.model_copy(update={"max_epochs": 20}),
                                 0, "replay")
        qmodel = calibrate_and_quantize(model, x, cfg.quant)

        replay = recordings[4]
        by_end = {p.end_sample: p for p in stream_classify(CFG, replay, qmodel, chunk_samples=250)}
        w = CFG.window_samples
        preds, labels = [], []
        for ev in replay.events:
            pred = by_end[ev.onset_sample + w]
            preds.append(int(pred.label))
            labels.append(int(ev.label))
        assert balanced_accuracy(preds, labels) >= 0.9
