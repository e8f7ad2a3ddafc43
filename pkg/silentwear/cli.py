"""Command line interface for the SilentWear pipeline."""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from loguru import logger

from silentwear import __version__
from silentwear.config import ConfigManager, RunConfig, apply_overrides, get_settings
from silentwear.database import get_registry
from silentwear.dsp import preprocess_recording
from silentwear.emgio import (
    BatchRef,
    Condition,
    balance_rest,
    load_manifest,
    read_recording,
    save_manifest,
    stack_windows,
    write_recording,
)
from silentwear.errors import IncompleteManifest, SilentWearError
from silentwear.evalharness import (
    Setting,
    WindowSource,
    run_incremental_a,
    run_incremental_b,
    run_setting,
    summarize_subjects,
    train_on_pool,
    window_ablation,
)
from silentwear.importer import ImportSpec, import_dataset
from silentwear.quantize import (
    accounting_report,
    calibrate_and_quantize,
    load_quantized,
    qpredict_logits,
    save_quantized,
)
from silentwear.reporter import ReportGenerator, render_markdown
from silentwear.seeding import derive_seed
from silentwear.speechnet import load, normalize_windows, predict_logits, save
from silentwear.streamrt import bench_throughput, stream_classify
from silentwear.synth import synth_dataset
from silentwear.training import fine_tune, with_seed


def print_header():
    """Print CLI header."""
    print("=" * 60)
    print(f"  SilentWear - CLI  v{__version__}")
    print("  可穿戴颈部 EMG 静默语音识别流水线")
    print("=" * 60)
    print()


def setup_logging(args) -> None:
    level = get_settings().log_level
    if getattr(args, "verbose", False):
        level = "DEBUG"
    elif getattr(args, "quiet", False):
        level = "WARNING"
    logger.remove()
    logger.add(sys.stderr, level=level.upper(),
               format="<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {message}")


def load_run_config(args) -> RunConfig:
    """Config file, then command-line overrides."""
    cfg = ConfigManager(getattr(args, "config", None)).load()
    overrides = {"seed": getattr(args, "seed", None)}
    for key, dest in getattr(args, "overrides", {}).items():
        overrides[key] = getattr(args, dest, None)
    return apply_overrides(cfg, overrides)


def output_dir(args, cfg: RunConfig) -> Path:
    out = getattr(args, "out", None) or cfg.out_dir
    if out is None:
        out = str(Path(get_settings().out_dir) / args.command)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_config_echo(out: Path, cfg: RunConfig, args) -> Path:
    """``config.json``: version, command and merged config; no timestamps."""
    echo = {
        "version": __version__,
        "command": args.command,
        "config": cfg.model_dump(mode="json"),
    }
    path = out / "config.json"
    path.write_text(json.dumps(echo, indent=2) + "\n", encoding="utf-8")
    return path


def _subjects(manifest, subject: Optional[str]) -> List[str]:
    if subject in (None, "all"):
        return manifest.subject_ids()
    if subject not in manifest.subject_ids():
        raise IncompleteManifest(f"subject {subject!r} not in manifest")
    return [subject]


def _register_run(args, command: str, summary: dict, report_path: str, cfg: RunConfig) -> None:
    if getattr(args, "no_registry", False):
        return
    get_registry().save_eval_run(command, summary, report_path, cfg.model_dump(mode="json"))


def _register_artifact(args, path: Path, kind: str, **fields) -> None:
    if getattr(args, "no_registry", False):
        return
    get_registry().save_artifact(str(path), kind, **fields)


# Commands

def cmd_synth(args) -> int:
    cfg = load_run_config(args)
    out = output_dir(args, cfg)
    print(f"[1/2] 正在生成合成数据集 (seed={cfg.seed})...")
    print(f"  被试: {cfg.synth.n_subjects}, 会话: {cfg.synth.n_sessions}, "
          f"批次: {cfg.synth.n_batches}, 重复: {cfg.synth.reps_per_command}")
    manifest = synth_dataset(cfg.synth, cfg.seed, out)
    print(f"[2/2] 写入清单: {out / 'manifest.json'}")
    write_config_echo(out, cfg, args)
    print(f"[完成] 共 {len(manifest.refs())} 个批次")
    return 0


def cmd_import(args) -> int:
    cfg = load_run_config(args)
    out = output_dir(args, cfg)
    spec_data = {"fs_hz": args.fs_hz, "n_channels": cfg.model.n_channels}
    if args.pattern:
        spec_data["path_pattern"] = args.pattern
    if args.trigger_column:
        spec_data["trigger_column"] = args.trigger_column
    print(f"[1/1] 正在导入 {args.src} ...")
    manifest = import_dataset(args.src, out, ImportSpec(**spec_data))
    write_config_echo(out, cfg, args)
    print(f"[完成] 共导入 {len(manifest.refs())} 个批次, 被试: {', '.join(manifest.subject_ids())}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = load_run_config(args)
    src = Path(args.input)
    if src.suffix == ".swr1":
        target = Path(args.out) if args.out else src.with_name(f"{src.stem}_filtered.swr1")
        write_recording(preprocess_recording(read_recording(src)), target)
        print(f"[完成] {src} -> {target}")
        return 0
    manifest = load_manifest(src)
    out = output_dir(args, cfg)
    refs = manifest.refs()
    for i, ref in enumerate(refs, 1):
        rel = manifest.path_for(ref).relative_to(manifest.root)
        write_recording(preprocess_recording(read_recording(manifest.path_for(ref))), out / rel)
        print(f"  [{i}/{len(refs)}] {rel}")
    save_manifest(manifest, out / "manifest.json")
    write_config_echo(out, cfg, args)
    print(f"[完成] 共处理 {len(refs)} 个批次")
    return 0


def _training_refs(manifest, subject: str, condition: Condition,
                   sessions: Optional[List[int]]) -> List[BatchRef]:
    refs = [r for r in manifest.refs(subject, condition)
            if sessions is None or r.session in sessions]
    if not refs:
        raise IncompleteManifest(f"no batches for {subject}/{condition.value}")
    return refs


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    out = output_dir(args, cfg)
    manifest = load_manifest(args.data)
    condition = Condition(args.condition)
    window_ms = args.window_ms or cfg.eval.window_ms

    print("[1/3] 正在加载数据...")
    refs = _training_refs(manifest, args.subject, condition, args.sessions)
    source = WindowSource(manifest)
    pool = balance_rest(source.pool(refs, window_ms),
                        derive_seed(cfg.seed, "balance", "train", args.subject))
    x, y = stack_windows(pool)
    print(f"  批次: {len(refs)}, 窗口: {len(y)}")

    print("[2/3] 正在训练 SpeechNet...")
    model, history = train_on_pool(x, y, cfg.model, cfg.train, cfg.seed, "train", args.subject)
    print(f"  轮数: {len(history)}, 最佳轮: {history.best_epoch}")

    print("[3/3] 正在保存模型...")
    path = save(model, out / "model.swnm")
    (out / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n",
                                      encoding="utf-8")
    write_config_echo(out, cfg, args)
    _register_artifact(args, path, "float", param_count=model.param_count)
    print(f"[完成] 模型: {path} ({model.param_count} 参数)")
    return 0


def cmd_finetune(args) -> int:
    cfg = load_run_config(args)
    out = output_dir(args, cfg)
    manifest = load_manifest(args.data)
    ref = BatchRef(args.subject, args.session, args.batch, Condition(args.condition))
    window_ms = args.window_ms or cfg.eval.window_ms

    print("[1/2] 正在微调...")
    model = load(args.model)
    source = WindowSource(manifest)
    x, y = stack_windows(balance_rest(source.windows(ref, window_ms),
                                      derive_seed(cfg.seed, "balance", "finetune", *ref)))
    ft_cfg = with_seed(cfg.fine_tune, cfg.seed, "finetune", *ref)
    model, history = fine_tune(model, (x, y), ft_cfg)

    print("[2/2] 正在保存模型...")
    path = save(model, out / "model.swnm")
    (out / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n",
                                      encoding="utf-8")
    write_config_echo(out, cfg, args)
    _register_artifact(args, path, "float", param_count=model.param_count)
    print(f"[完成] 模型: {path}")
    return 0


def cmd_quantize(args) -> int:
    cfg = load_run_config(args)
    out = output_dir(args, cfg)
    manifest = load_manifest(args.data)
    condition = Condition(args.condition)
    window_ms = args.window_ms or cfg.stream.window_ms

    print("[1/3] 正在准备校准数据...")
    model = load(args.model)
    refs = _training_refs(manifest, args.subject, condition, args.sessions)
    pool = balance_rest(WindowSource(manifest).pool(refs, window_ms),
                        derive_seed(cfg.seed, "balance", "quantize", args.subject))
    x, _ = stack_windows(pool)

    print("[2/3] 正在量化 (BN 折叠 + int8)...")
    qmodel = calibrate_and_quantize(model, x, cfg.quant, seed=cfg.seed)
    xn = normalize_windows(x)
    agreement = float(np.mean(predict_logits(model, xn).argmax(axis=1)
                              == qpredict_logits(qmodel, xn).argmax(axis=1)))

    print("[3/3] 正在保存...")
    path = save_quantized(qmodel, out / "model.swq1")
    report = accounting_report(qmodel, t=400)
    report["top1_agreement"] = agreement
    ReportGenerator(str(out)).save_report(report, "accounting")
    write_config_echo(out, cfg, args)
    _register_artifact(args, path, "quantized", param_count=model.param_count,
                       footprint_bytes=report["footprint_bytes"])
    print(f"  模型常量: {report['footprint_bytes']} B, MACs(14x400): {report['macs']}")
    print(f"  int8/float top-1 一致率: {100 * agreement:.1f}%")
    print(f"[完成] 量化模型: {path}")
    return 0


def _eval_summary(data: dict) -> dict:
    return {
        "setting": data.get("setting"),
        "subject": data.get("subject"),
        "condition": data.get("condition"),
        "window_ms": data.get("window_ms"),
        "mean": data.get("mean"),
        "std": data.get("std"),
        "n_folds": len(data.get("folds", [])),
        "mean_itr": data.get("mean_itr"),
    }


def cmd_eval(args) -> int:
    cfg = load_run_config(args)
    out = output_dir(args, cfg)
    manifest = load_manifest(args.data)
    condition = Condition(args.condition)
    setting = Setting(args.setting)
    window_ms = args.window_ms or cfg.eval.window_ms
    subjects = _subjects(manifest, args.subject)
    reporter = ReportGenerator(str(out))
    source = WindowSource(manifest)

    means: Dict[str, float] = {}
    for i, subject in enumerate(subjects, 1):
        print(f"[{i}/{len(subjects)}] {setting.value} - {subject} / {condition.value}")
        if setting in (Setting.GLOBAL, Setting.INTERSESSION):
            report = run_setting(setting, manifest, subject, condition, window_ms, cfg,
                                 source=source, jobs=args.jobs)
            data = report.to_dict()
            means[subject] = report.mean
            print(f"  平衡准确率: {100 * report.mean:.1f} ± {100 * report.std:.1f} %")
        elif setting is Setting.INCR_A:
            report = run_incremental_a(manifest, subject, condition, args.session, window_ms,
                                       cfg, source=source)
            if args.compare_scratch:
                run_incremental_b(manifest, subject, condition, args.session, window_ms, cfg,
                                  source=source, report=report)
            data = report.to_dict()
            means[subject] = report.mean_accuracy("finetuned", batches=range(2, 6))
            print(f"  微调: {100 * means[subject]:.1f} %, 未适配: "
                  f"{100 * report.mean_accuracy('baseline', batches=range(2, 6)):.1f} %")
        else:
            report = run_incremental_b(manifest, subject, condition, args.session, window_ms,
                                       cfg, source=source)
            data = report.to_dict()
            means[subject] = report.mean_accuracy("scratch")
            print(f"  从零训练: {100 * means[subject]:.1f} %")
        paths = reporter.save_report(data, f"{setting.value}_{subject}_{condition.value}")
        _register_run(args, "eval", {**_eval_summary(data), "mean": means[subject]},
                      paths["json"], cfg)
        source.clear()

    if len(subjects) > 1:
        summary = summarize_subjects(means)
        summary["setting"] = setting.value
        reporter.save_report(summary, f"{setting.value}_summary_{condition.value}")
        print(f"[汇总] {100 * summary['mean']:.1f} ± {100 * summary['std']:.1f} %")
    write_config_echo(out, cfg, args)
    print(f"[完成] 报告目录: {out}")
    return 0


def cmd_itr_ablation(args) -> int:
    cfg = load_run_config(args)
    out = output_dir(args, cfg)
    manifest = load_manifest(args.data)
    condition = Condition(args.condition)
    sizes = args.sizes or cfg.eval.ablation_sizes
    reporter = ReportGenerator(str(out))
    for i, subject in enumerate(_subjects(manifest, args.subject), 1):
        print(f"[{i}] 窗口消融 - {subject} / {condition.value}: {sizes}")
        report = window_ablation(manifest, subject, condition, sizes, cfg, jobs=args.jobs)
        for row in report.rows:
            itr_text = "-" if row.mean_itr is None else f"{row.mean_itr:.1f}"
            print(f"  {row.window_ms:>5} ms  acc {100 * row.mean_accuracy:5.1f}%  "
                  f"ITR {itr_text} bit/min")
        paths = reporter.save_report(report.to_dict(), f"ablation_{subject}_{condition.value}")
        best = max(report.rows, key=lambda r: r.mean_accuracy)
        _register_run(args, "itr-ablation", {
            "setting": Setting.INTERSESSION.value, "subject": subject,
            "condition": condition.value, "window_ms": best.window_ms,
            "mean": best.mean_accuracy, "std": best.std_accuracy,
            "n_folds": len(best.fold_itr), "mean_itr": best.mean_itr,
        }, paths["json"], cfg)
    write_config_echo(out, cfg, args)
    print(f"[完成] 报告目录: {out}")
    return 0


def cmd_stream(args) -> int:
    cfg = load_run_config(args)
    stream_cfg = cfg.stream.model_copy(update={"model_path": args.model})
    qmodel = load_quantized(args.model)
    recording = read_recording(args.input)
    for pred in stream_classify(stream_cfg, recording, qmodel, strict=args.strict):
        sys.stdout.write(json.dumps(pred.to_dict()) + "\n")
    sys.stdout.flush()
    return 0


def cmd_bench(args) -> int:
    cfg = load_run_config(args)
    stream_cfg = cfg.stream.model_copy(update={"model_path": args.model})
    print(f"[1/1] 正在测速 ({args.n_windows} 次, 预热 {args.warmup} 次)...")
    report = bench_throughput(stream_cfg, args.n_windows, load_quantized(args.model),
                              warmup=args.warmup, seed=cfg.seed)
    print(f"  {report.mean_ms:.2f} ± {report.std_ms:.2f} ms/次, "
          f"{report.inferences_per_s:.1f} 次/秒, 有效: {report.valid}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ReportGenerator(str(out)).save_json(report.to_dict(), "bench")
        write_config_echo(out, cfg, args)
    return 0


def cmd_report(args) -> int:
    if args.path:
        data = json.loads(Path(args.path).read_text(encoding="utf-8"))
        print(render_markdown(data))
        return 0
    registry = get_registry()
    print("[评估记录]")
    for run in registry.get_eval_runs(limit=args.limit):
        mean = "-" if run["mean"] is None else f"{100 * run['mean']:.1f}%"
        print(f"  {run['id'][:8]}  {run['command']:<13} {run['setting'] or '-':<13} "
              f"{run['subject'] or '-':<6} {run['condition'] or '-':<10} {mean}")
    print("\n[模型文件]")
    for art in registry.get_artifacts(limit=args.limit):
        print(f"  {art['id'][:8]}  {art['kind']:<10} {art['path']}")
    stats = registry.get_stats()
    print(f"\n共 {stats['total_runs']} 次评估, {stats['total_artifacts']} 个模型文件")
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(RunConfig.model_json_schema(), indent=2, ensure_ascii=False))
    return 0


# Parser

def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="JSON/YAML 配置文件")
    p.add_argument("--seed", type=int, help="全局随机种子")
    if out:
        p.add_argument("--out", help="输出目录（默认 $SILENTWEAR_OUT_DIR/<命令>）")
    p.add_argument("--no-registry", action="store_true", help="不写入运行记录数据库")
    p.add_argument("-v", "--verbose", action="store_true", help="输出调试日志")
    p.add_argument("-q", "--quiet", action="store_true", help="只输出警告和错误")


def _data_args(p: argparse.ArgumentParser, subject_required: bool = False) -> None:
    p.add_argument("--data", required=True, help="数据集目录或 manifest.json")
    p.add_argument("--subject", required=subject_required,
                   help="被试 ID（默认全部被试）" if not subject_required else "被试 ID")
    p.add_argument("--condition", choices=[c.value for c in Condition],
                   default=Condition.VOCALIZED.value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="silentwear",
        description="SilentWear - 可穿戴 EMG 静默语音识别流水线",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
示例:
  python -m silentwear synth --seed 7 --out data/synth
  python -m silentwear eval --setting global --data data/synth --subject S01
  python -m silentwear itr-ablation --data data/synth --subject S01 --condition silent
  python -m silentwear stream --model runs/quantize/model.swq1 --input rec.swr1
        """,
    )
    parser.add_argument("--version", action="version", version=f"silentwear {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="生成合成数据集")
    _common(p)
    p.add_argument("--subjects", dest="n_subjects", type=int)
    p.add_argument("--sessions", dest="n_sessions", type=int)
    p.add_argument("--batches", dest="n_batches", type=int)
    p.add_argument("--reps", dest="reps_per_command", type=int)
    p.add_argument("--shift", dest="session_shift_strength", type=float)
    p.set_defaults(func=cmd_synth, overrides={
        "synth.n_subjects": "n_subjects", "synth.n_sessions": "n_sessions",
        "synth.n_batches": "n_batches", "synth.reps_per_command": "reps_per_command",
        "synth.session_shift_strength": "session_shift_strength",
    })

    p = sub.add_parser("import", help="导入外部数据集 (CSV/NPZ)")
    _common(p)
    p.add_argument("--src", required=True)
    p.add_argument("--pattern", help="相对路径正则（含 subject/session/condition/batch 分组）")
    p.add_argument("--trigger-column")
    p.add_argument("--fs-hz", type=int, default=500)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("preprocess", help="高通 + 陷波滤波")
    _common(p)
    p.add_argument("--input", required=True, help=".swr1 文件或数据集目录")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="训练 SpeechNet")
    _common(p)
    _data_args(p, subject_required=True)
    p.add_argument("--sessions", type=_int_list, help="训练会话，如 1,2")
    p.add_argument("--window-ms", type=int)
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.set_defaults(func=cmd_train, overrides={"train.max_epochs": "max_epochs"})

    p = sub.add_parser("finetune", help="在新批次上微调")
    _common(p)
    _data_args(p, subject_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--session", type=int, required=True)
    p.add_argument("--batch", type=int, required=True)
    p.add_argument("--window-ms", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("quantize", help="int8 训练后量化")
    _common(p)
    _data_args(p, subject_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--sessions", type=_int_list)
    p.add_argument("--window-ms", type=int)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="评估协议")
    _common(p)
    _data_args(p)
    p.add_argument("--setting", required=True, choices=[s.value for s in Setting])
    p.add_argument("--window-ms", type=int)
    p.add_argument("--session", type=int, help="incr-a 的留出会话 / incr-b 的会话（默认全部）")
    p.add_argument("--compare-scratch", action="store_true", help="incr-a 同时运行从零训练")
    p.add_argument("--jobs", type=int, help="并行折数")
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.set_defaults(func=cmd_eval, overrides={"train.max_epochs": "max_epochs",
                                             "eval.jobs": "jobs"})

    p = sub.add_parser("itr-ablation", help="窗口长度 / ITR 消融")
    _common(p)
    _data_args(p)
    p.add_argument("--sizes", type=_int_list, help="窗口长度 (ms)，如 400,800,1400")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_itr_ablation)

    p = sub.add_parser("stream", help="滑动窗口流式推理 (NDJSON 输出)")
    _common(p, out=False)
    p.add_argument("--model", required=True, help="量化模型 .swq1")
    p.add_argument("--input", required=True, help="录音 .swr1")
    p.add_argument("--window-ms", type=int)
    p.add_argument("--step-ms", type=int)
    p.add_argument("--strict", action="store_true", help="末尾不完整窗口视为错误")
    p.set_defaults(func=cmd_stream, overrides={"stream.window_ms": "window_ms",
                                               "stream.step_ms": "step_ms"})

    p = sub.add_parser("bench", help="推理吞吐测试")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--n-windows", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--window-ms", type=int)
    p.set_defaults(func=cmd_bench, overrides={"stream.window_ms": "window_ms"})

    p = sub.add_parser("report", help="查看报告或运行记录")
    p.add_argument("path", nargs="?", help="报告 JSON 文件")
    p.add_argument("--limit", type=int, default=20)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("schema", help="输出配置 JSON Schema")
    p.set_defaults(func=cmd_schema)
    return parser


MACHINE_OUTPUT = {"stream", "schema"}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point. Returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args)
    if args.command not in MACHINE_OUTPUT:
        print_header()
    try:
        return args.func(args) or 0
    except SilentWearError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\n\n用户中断操作")
        return 1
    except Exception as e:
        logger.opt(exception=e).debug("unhandled error")
        print(f"error: InternalError: {type(e).__name__}: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
