"""Report generator: JSON documents and Markdown summaries for every run type."""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional

from silentwear.emgio import CommandLabel


def _pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{100 * value:.1f}"


def _num(value: Optional[float], digits: int = 2) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


class ReportGenerator:
    """Write run reports into an output directory."""

    def __init__(self, reports_dir: str = "runs"):
        self.reports_dir = Path(reports_dir)
        self.reports_dir.mkdir(parents=True, exist_ok=True)

    def save_markdown(self, content: str, filename: str) -> str:
        file_path = self.reports_dir / f"{filename}.md"
        file_path.write_text(content, encoding="utf-8")
        return str(file_path)

    def save_json(self, data: Dict[str, Any], filename: str) -> str:
        file_path = self.reports_dir / f"{filename}.json"
        with open(file_path, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2)
            f.write("\n")
        return str(file_path)

    def save_report(self, data: Dict[str, Any], filename: str = "report") -> Dict[str, str]:
        """Save ``data`` as JSON plus its Markdown rendering."""
        return {
            "json": self.save_json(data, filename),
            "markdown": self.save_markdown(render_markdown(data), filename),
        }

    def read_report(self, file_path: str) -> Dict[str, Any]:
        return json.loads(Path(file_path).read_text(encoding="utf-8"))


# Markdown rendering

def _confusion_table(matrix: List[List[int]]) -> str:
    names = [label.label_name for label in CommandLabel][: len(matrix)]
    lines = ["| true \\ pred | " + " | ".join(names) + " |",
             "|---" * (len(names) + 1) + "|"]
    for name, row in zip(names, matrix):
        lines.append(f"| {name} | " + " | ".join(str(v) for v in row) + " |")
    return "\n".join(lines)


def render_eval(data: Dict[str, Any]) -> str:
    lines = [
        f"# {data['setting']} - {data['subject']} / {data['condition']}",
        "",
        f"窗口: {data['window_ms']} ms  ",
        f"平衡准确率: {_pct(data['mean'])} ± {_pct(data['std'])} %",
        "",
        "| fold | test batches | balanced acc (%) | n_test | epochs | ITR (bit/min) |",
        "|---|---|---|---|---|---|",
    ]
    total = None
    for fold in data["folds"]:
        tests = ", ".join(f"s{r['session']}b{r['batch']}" for r in fold["test_refs"])
        lines.append(
            f"| {fold['fold_id']} | {tests} | {_pct(fold['balanced_accuracy'])} | "
            f"{fold['n_test']} | {fold['epochs']} | {_num(fold.get('itr'))} |"
        )
        m = fold["confusion"]
        total = m if total is None else [[a + b for a, b in zip(r1, r2)]
                                         for r1, r2 in zip(total, m)]
    if total is not None:
        lines += ["", "## 混淆矩阵 (all folds)", "", _confusion_table(total)]
    return "\n".join(lines) + "\n"


def render_ablation(data: Dict[str, Any]) -> str:
    lines = [
        f"# 窗口长度消融 - {data['subject']} / {data['condition']}",
        "",
        "| window (ms) | balanced acc (%) | std | mean ITR (bit/min) | below chance |",
        "|---|---|---|---|---|",
    ]
    for row in data["rows"]:
        lines.append(
            f"| {row['window_ms']} | {_pct(row['mean_accuracy'])} | "
            f"{_pct(row['std_accuracy'])} | {_num(row['mean_itr'])} | "
            f"{row['below_chance_folds']} |"
        )
    trend = "单调不减" if data.get("accuracy_non_decreasing") else "非单调"
    lines += ["", f"准确率随窗口长度变化: {trend}"]
    return "\n".join(lines) + "\n"


def render_incremental(data: Dict[str, Any]) -> str:
    lines = [f"# {data['setting']} - {data['subject']} / {data['condition']}", ""]
    for curve in data["curves"]:
        points = ", ".join(
            f"b{b}: {_pct(a)}" for b, a in zip(curve["batches"], curve["accuracies"])
        )
        lines.append(f"- {curve['kind']} (session {curve['session']}): {points}")
    means = data.get("mean_curves", {})
    if means:
        lines += ["", "| curve | " + " | ".join(f"batch {b}" for b in range(1, 6)) + " |",
                  "|---" * 6 + "|"]
        for kind, curve in means.items():
            cells = [_pct(curve.get(str(b), curve.get(b))) for b in range(1, 6)]
            lines.append(f"| {kind} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_accounting(data: Dict[str, Any]) -> str:
    lines = [
        "# 量化模型统计",
        "",
        f"输入: {data['input_shape'][0]} x {data['input_shape'][1]}  ",
        f"模型常量: {data['footprint_bytes']} B  ",
        f"MACs: {data['macs']}",
        "",
        "| layer | weights (B) | biases (B) | scales (B) | MACs |",
        "|---|---|---|---|---|",
    ]
    for name, entry in data["footprint_breakdown"].items():
        if name == "activations":
            continue
        lines.append(
            f"| {name} | {entry['weights']} | {entry['biases']} | "
            f"{entry['weight_scales']} | {data['macs_per_layer'].get(name, '-')} |"
        )
    acts = data["footprint_breakdown"]["activations"]
    lines.append(f"| activations ({acts['tensors']} tensors) | - | - | {acts['total']} | - |")
    ref = data.get("deployed_reference")
    if ref:
        lines += [
            "",
            f"部署参考: MACs {ref['macs']} (差距 {ref['macs_gap_percent']}%), "
            f"常量 {ref['footprint_bytes']} B (比例 {ref['footprint_ratio']})",
        ]
    return "\n".join(lines) + "\n"


def render_subjects(data: Dict[str, Any]) -> str:
    lines = [f"# 多被试汇总 - {data.get('setting', '')}", "",
             "| subject | mean (%) |", "|---|---|"]
    for sid, mean in data["subjects"].items():
        lines.append(f"| {sid} | {_pct(mean)} |")
    lines += ["", f"平均: {_pct(data['mean'])} ± {_pct(data['std'])} %"]
    return "\n".join(lines) + "\n"


def render_markdown(data: Dict[str, Any]) -> str:
    """Pick the renderer from the document's shape."""
    if "folds" in data:
        return render_eval(data)
    if "rows" in data:
        return render_ablation(data)
    if "curves" in data:
        return render_incremental(data)
    if "footprint_breakdown" in data:
        return render_accounting(data)
    if "subjects" in data:
        return render_subjects(data)
    return "```json\n" + json.dumps(data, ensure_ascii=False, indent=2) + "\n```\n"
