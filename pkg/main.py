"""
═══════════════════════════════════════════════════════════════════
    HAPS HARDENING PIPELINE - Main Entry Point
    search → harden → evaluate → report (+ sweep, gradcheck)
═══════════════════════════════════════════════════════════════════
"""
import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np

import config
from services import errors
from services import nn
from services.arch_search import SearchSpace, search
from services.eval_report import (
    epsilon_sweep, evaluate, model_fingerprint, parse_report_csv, render_report, render_sweep,
)
from services.haps_trainer import haps_run
from services.pipeline_config import PipelineConfig, load_pipeline_config
from services.storage import atomic_write_text, ensure_dir, file_sha256
from services.tensor import finite_diff_check

# conv → relu → maxpool → dense → relu → dense on 1×8×8, used when gradcheck gets no model
GRADCHECK_SPEC = {
    "input_shape": [1, 8, 8],
    "num_classes": 10,
    "layers": [
        {"type": "conv2d", "filters": 4, "kernel": 3, "stride": 1, "padding": 1},
        {"type": "relu"},
        {"type": "maxpool2d", "kernel": 2, "stride": 2},
        {"type": "dense", "units": 16},
        {"type": "relu"},
        {"type": "dense", "units": 10},
    ],
}


def display_banner():
    """Hiển thị banner khởi động"""
    banner = """
╔══════════════════════════════════════════════════════════════╗
║                                                              ║
║   🛡️  HAPS - Hardening As Post-processing Step 🛡️             ║
║                                                              ║
║   NAS → PGD adversarial training → robustness report        ║
║                                                              ║
╚══════════════════════════════════════════════════════════════╝
    """
    print(banner)


def emit_error(exc: BaseException, exit_code: int):
    """Human line on stdout, one machine-readable JSON line on stderr"""
    print(f"❌ {type(exc).__name__}: {exc}")
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "exit_code": exit_code,
                                 "message": str(exc)}) + "\n")


def write_manifest(directory: str, command: str, cfg: PipelineConfig, artifacts: List[str], **extra):
    """
    manifest.json is the only place an artifact is tied to its config:
    CSVs keep their fixed columns and model files their fixed container.
    """
    manifest = {"command": command, "config_hash": cfg.hash(), "seed": cfg.seed,
                "artifacts": {os.path.basename(a): file_sha256(a) for a in sorted(artifacts)}, **extra}
    atomic_write_text(os.path.join(directory, "manifest.json"),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _model_path(args, cfg: PipelineConfig, default: str) -> str:
    path = args.model or os.path.join(cfg.output_dir, default)
    if not os.path.exists(path):
        raise errors.ConfigurationError(f"model file not found: {path}")
    return path


# ============== COMMANDS ==============

def cmd_search(cfg: PipelineConfig, args) -> int:
    cfg.dataset.check_paths(need_test=False)
    data = cfg.dataset.load_train(cfg.seed)
    space = SearchSpace.from_dict(cfg.search.space, data.image_shape, cfg.dataset.num_classes)
    result = search(space, data, cfg.search.budget, cfg.seed, epochs=cfg.search.proxy_epochs,
                    eta_init=cfg.search.eta_init, valid_fraction=cfg.dataset.valid_fraction,
                    batch_size=cfg.search.batch_size, workers=cfg.search.workers)

    out = ensure_dir(os.path.join(cfg.output_dir, "search"))
    artifacts = [
        nn.save(result.best_model, os.path.join(out, "best_model.haps")),
        nn.save_architecture(result.best_spec, os.path.join(out, "best_spec.json")),
    ]
    ledger_path = os.path.join(out, "ledger.csv")
    result.to_csv(ledger_path)
    artifacts.append(ledger_path)
    write_manifest(out, "search", cfg, artifacts)
    print(f"✅ Search artifacts in {out}")
    return 0


def cmd_harden(cfg: PipelineConfig, args) -> int:
    model_path = _model_path(args, cfg, os.path.join("search", "best_model.haps"))
    if args.resume and not os.path.exists(args.resume):
        raise errors.ConfigurationError(f"checkpoint not found: {args.resume}")
    cfg.dataset.check_paths(need_test=False)
    model = nn.load(model_path)
    data = cfg.dataset.load_train(cfg.seed)

    out = ensure_dir(os.path.join(cfg.output_dir, "harden"))
    hardened, log = haps_run(model, data, cfg.haps, checkpoint_dir=os.path.join(out, "checkpoints"),
                             resume_from=args.resume)
    model_out = nn.save(hardened, os.path.join(out, "hardened_model.haps"))
    log_path = os.path.join(out, "training_log.csv")
    log.to_csv(log_path)
    write_manifest(out, "harden", cfg, [model_out, log_path])
    print(f"✅ Hardened model {model_fingerprint(hardened)} in {out}")
    return 0


def cmd_evaluate(cfg: PipelineConfig, args) -> int:
    model_path = _model_path(args, cfg, os.path.join("harden", "hardened_model.haps"))
    cfg.dataset.check_paths(need_test=True)
    model = nn.load(model_path)
    test = cfg.dataset.load_test(cfg.seed)
    report = evaluate(model, test, cfg.eval, cfg.dataset.name, phase=args.phase)

    out = ensure_dir(os.path.join(cfg.output_dir, "eval"))
    path = os.path.join(out, f"report_{args.phase}.csv")
    atomic_write_text(path, render_report([report], "csv"))
    write_manifest(out, "evaluate", cfg, [path], eps_step=cfg.eval.attack.step)
    print(f"✅ Report written to {path}")
    return 0


def cmd_sweep(cfg: PipelineConfig, args) -> int:
    model_path = _model_path(args, cfg, os.path.join("harden", "hardened_model.haps"))
    cfg.dataset.check_paths(need_test=True)
    model = nn.load(model_path)
    test = cfg.dataset.load_test(cfg.seed)
    print(f"🎯 Sweep over ε ∈ {list(cfg.eval.sweep_ladder)} (scale {cfg.eval.epsilon_scale:g})")
    rows = epsilon_sweep(model, test, cfg.eval.sweep_ladder, cfg.eval.attack, cfg.eval.epsilon_scale,
                         cfg.eval.epsilon_step, cfg.eval.batch_size, cfg.eval.threads)

    out = ensure_dir(os.path.join(cfg.output_dir, "sweep"))
    path = os.path.join(out, "sweep.csv")
    atomic_write_text(path, render_sweep(model_fingerprint(model), rows))
    write_manifest(out, "sweep", cfg, [path])
    print(f"✅ Sweep written to {path}")
    return 0


def cmd_report(args) -> int:
    if not args.reports:
        raise errors.ConfigurationError("report needs at least one report CSV")
    reports = []
    for path in args.reports:
        if not os.path.exists(path):
            raise errors.ConfigurationError(f"report file not found: {path}")
        with open(path, "r", encoding="utf-8") as handle:
            reports.extend(parse_report_csv(handle.read()))
    text = render_report(reports, "text")

    out = ensure_dir(os.path.join(args.out or config.OUTPUT_DIR, "report"))
    atomic_write_text(os.path.join(out, "report.csv"), render_report(reports, "csv"))
    atomic_write_text(os.path.join(out, "paired.csv"), render_report(reports, "paired_csv"))
    atomic_write_text(os.path.join(out, "report.txt"), text)
    print("=" * 60)
    print(text)
    print("=" * 60)
    return 0


def cmd_gradcheck(args) -> int:
    """Exit 1 when any parameter exceeds the tolerance"""
    seed = config.SEED if args.seed is None else args.seed
    if args.model:
        model = nn.load(args.model)
    else:
        model = nn.build(nn.ArchitectureSpec.from_dict(GRADCHECK_SPEC), seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(8,) + tuple(model.spec.input_shape))
    y = rng.integers(0, model.spec.num_classes, size=8)
    print(f"🔧 Gradient check on {model.parameter_count()} parameters (h={args.fd_step:g})")
    report = finite_diff_check(model, (x, y), h=args.fd_step, tolerance=args.tolerance)
    print(report.to_frame().to_string(index=False))
    if args.out:
        ensure_dir(args.out)
        atomic_write_text(os.path.join(args.out, "gradcheck.csv"),
                          report.to_frame().to_csv(index=False, lineterminator="\n"))
    status = "✅ passed" if report.passed else "❌ failed"
    print(f"{status}: max relative error {report.worst:.3e} (tolerance {args.tolerance:g})")
    return 0 if report.passed else 1


# ============== ENTRY ==============

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="haps", description="Adversarial hardening pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config, help="pipeline config JSON")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="base seed (overrides config)")

    common(sub.add_parser("search", help="select the architecture α*"))
    p = sub.add_parser("harden", help="run HAPS on a trained model")
    common(p)
    p.add_argument("--model", help="input model container")
    p.add_argument("--resume", help="stage checkpoint sidecar JSON to resume from")
    for name in ("evaluate", "sweep"):
        p = sub.add_parser(name, help=f"{name} a model under PGD")
        common(p)
        p.add_argument("--model", help="model container to evaluate")
        p.add_argument("--threads", type=int, help="evaluation threads")
        if name == "evaluate":
            p.add_argument("--phase", choices=("pre", "post"), default="post")
    p = sub.add_parser("report", help="render report CSVs as a paired table")
    p.add_argument("reports", nargs="*", help="report CSV files")
    p.add_argument("--out", help="output directory")
    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p, needs_config=False)
    p.add_argument("--model", help="model container (default: small reference CNN)")
    p.add_argument("--fd-step", type=float, default=1e-5, help="finite-difference step h")
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def run(args) -> int:
    if args.command == "report":
        return cmd_report(args)
    if args.command == "gradcheck":
        return cmd_gradcheck(args)
    cfg = load_pipeline_config(args.config, seed=args.seed, output_dir=args.out,
                               threads=getattr(args, "threads", None))
    print(f"🔧 Config {cfg.hash()} seed={cfg.seed} → {cfg.output_dir}")
    print("-" * 50)
    handlers = {"search": cmd_search, "harden": cmd_harden, "evaluate": cmd_evaluate, "sweep": cmd_sweep}
    return handlers[args.command](cfg, args)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    display_banner()
    try:
        return run(args)
    except errors.HapsError as exc:
        emit_error(exc, exc.exit_code)
        return exc.exit_code
    except OSError as exc:
        emit_error(exc, 4)
        return 4


if __name__ == "__main__":
    sys.exit(main())
