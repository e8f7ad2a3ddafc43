import json

from silentwear.reporter import ReportGenerator, render_markdown


def _fold(i):
    matrix = [[0] * 9 for _ in range(9)]
    matrix[i][i] = 3
    return {"fold_id": i, "test_refs": [{"session": 1, "batch": i + 1}],
            "balanced_accuracy": 0.5, "n_test": 3, "epochs": 4, "itr": None,
            "confusion": matrix}


EVAL = {"setting": "global", "subject": "S01", "condition": "vocalized", "window_ms": 1400,
        "mean": 0.5, "std": 0.0, "folds": [_fold(0), _fold(1)]}


class TestReportGenerator:
    def test_save_report(self, tmp_path):
        gen = ReportGenerator(str(tmp_path / "out"))
        paths = gen.save_report(EVAL, "report")
        assert json.loads(open(paths["json"], encoding="utf-8").read()) == EVAL
        assert "s1b1" in open(paths["markdown"], encoding="utf-8").read()
        assert gen.read_report(paths["json"])["setting"] == "global"


class TestRenderMarkdown:
    def test_eval_sums_confusion(self):
        text = render_markdown(EVAL)
        assert text.startswith("# global - S01 / vocalized")
        assert "| up | 3 |" in text
        assert "| down | 0 | 3 |" in text
        assert "| 0 | s1b1 | 50.0 | 3 | 4 | - |" in text

    def test_ablation(self):
        data = {"subject": "S01", "condition": "silent", "accuracy_non_decreasing": True,
                "rows": [{"window_ms": 400, "mean_accuracy": 0.6, "std_accuracy": 0.1,
                          "mean_itr": 40.0, "below_chance_folds": 0}]}
        text = render_markdown(data)
        assert "| 400 | 60.0 | 10.0 | 40.00 | 0 |" in text
        assert "单调不减" in text

    def test_incremental(self):
        data = {"setting": "incremental-a", "subject": "S01", "condition": "vocalized",
                "curves": [{"kind": "finetuned", "session": 2, "batches": [1, 2],
                            "accuracies": [0.5, 0.75]}],
                "mean_curves": {"finetuned": {"1": 0.5, "2": 0.75}}}
        text = render_markdown(data)
        assert "- finetuned (session 2): b1: 50.0, b2: 75.0" in text
        assert "| finetuned | 50.0 | 75.0 | - | - | - |" in text

    def test_accounting(self):
        data = {"input_shape": [14, 400], "footprint_bytes": 16_102, "macs": 2_086_176,
                "macs_per_layer": {"block1": 100},
                "footprint_breakdown": {
                    "block1": {"weights": 32, "biases": 32, "weight_scales": 32},
                    "activations": {"tensors": 7, "total": 56}},
                "deployed_reference": {"macs": 2_145_984, "macs_gap_percent": 2.79,
                                       "footprint_bytes": 15_493, "footprint_ratio": 1.039}}
        text = render_markdown(data)
        assert "| block1 | 32 | 32 | 32 | 100 |" in text
        assert "16102 B" in text and "2145984" in text

    def test_subjects(self):
        text = render_markdown({"setting": "global", "subjects": {"S01": 0.8, "S02": 0.6},
                                "mean": 0.7, "std": 0.1})
        assert "| S02 | 60.0 |" in text
        assert "70.0 ± 10.0" in text

    def test_unknown_shape_is_json(self):
        assert render_markdown({"a": 1}).startswith("```json")
