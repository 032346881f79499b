"""depthup command line.

Subcommands::

    depthup config   --out CONFIG.json
    depthup pretrain --config CONFIG.json --out DIR
    depthup upscale  --base DIR/base.ckpt --out DIR [--strategy S] [--m M] [--kind K] [--v-speech V]
    depthup adapt    --checkpoint CKPT --mode {depth,full_ft,lora} --out RUN [--base BASE.ckpt] [--rank R|auto]
    depthup eval     --run RUN
    depthup compare  RUN [RUN ...] [--out table.csv]

Exit codes: 0 success, 2 config error, 3 preservation/recovery check
failed, 4 I/O or digest error, 1 anything else (including incomplete runs
in ``compare``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from depthup import checkpoint as ckpt_io
from depthup import config as config_io
from depthup import evaluation as E
from depthup import experiment as X
from depthup import surgery as S
from depthup.config import ConfigError, ExperimentConfig

log = logging.getLogger("depthup")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INVARIANT, EXIT_IO = 0, 1, 2, 3, 4

CSV_HELP = "CSV columns: " + ", ".join(E.CSV_COLUMNS)


class InvariantError(RuntimeError):
    pass


def _load_config(args) -> ExperimentConfig:
    cfg = config_io.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_config(args) -> int:
    text = ExperimentConfig().to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    datasets = X.build_datasets(cfg)
    model, train_log = X.pretrain(cfg, datasets)
    ppl = E.perplexity(model, datasets.text_eval)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    (out / "train_log.jsonl").write_text(train_log.to_jsonl())
    manifest = S.manifest_for(model)
    digest = ckpt_io.save(out / "base.ckpt", ckpt_io.Checkpoint(model, manifest, meta={"stage": "pretrain"}))
    _write_json(out / "pretrain_eval.json", {"text_ppl": ppl, "uniform_ppl": cfg.model.vocab_text, "digest": digest})
    print(f"base checkpoint {out / 'base.ckpt'} digest {digest} text ppl {ppl:.4f}")
    return EXIT_OK


def _surgery_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    sg = cfg.surgery
    changes = {}
    for flag, key in (("strategy", "strategy"), ("m", "m"), ("kind", "kind"), ("v_speech", "v_speech")):
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    if changes:
        cfg = replace(cfg, surgery=replace(sg, **changes))
    if "v_speech" in changes:
        data = cfg.data
        cfg = replace(cfg, data=replace(data, codebook=replace(data.codebook, vocab_speech=changes["v_speech"])))
    return config_io.from_dict(cfg.to_dict())


def cmd_upscale(args) -> int:
    cfg = _surgery_overrides(_load_config(args), args)
    base = ckpt_io.load(args.base).model
    try:
        model, manifest, plan = X.upscale(base, cfg)
    except S.SurgeryError as exc:
        raise ConfigError("surgery", str(exc)) from exc
    diff = E.check_function_preservation(base, model, cfg.eval.preservation_trials, cfg.eval.preservation_T)
    if diff > cfg.eval.preservation_tol:
        raise InvariantError(f"function preservation failed: max |diff| {diff:.3e} > {cfg.eval.preservation_tol}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "stage": "upscale",
        "base_checkpoint": str(Path(args.base).resolve()),
        "base_digest": ckpt_io.digest(args.base),
        "strategy": plan.strategy,
        "after": plan.after,
        "kind": cfg.surgery.kind,
        "preservation_max_abs_diff": diff,
    }
    digest = ckpt_io.save(out / "adapted.ckpt", ckpt_io.Checkpoint(model, manifest, meta=meta))
    (out / "manifest.json").write_text(manifest.to_json())
    _write_json(out / "config.json", cfg.to_dict())
    trainable, total = S.count_trainable(manifest), S.count_total(manifest)
    print(f"layers {len(base.layers)} -> {len(model.layers)} (insert after {plan.after})")
    print(f"trainable {trainable} / total {total}; preservation max |diff| {diff:.3e}; digest {digest}")
    return EXIT_OK


def _resolve_base(args, meta: dict, own_path: str | None = None) -> Path:
    if args.base:
        return Path(args.base)
    if "base_checkpoint" in meta:
        return Path(meta["base_checkpoint"])
    if meta.get("stage") == "pretrain" and own_path is not None:
        return Path(own_path)
    raise ConfigError("--base", "needed: the checkpoint does not record its base")


def cmd_adapt(args) -> int:
    cfg = _surgery_overrides(_load_config(args), args)
    if args.rank is not None:
        rank = args.rank if args.rank == "auto" else int(args.rank)
        cfg = replace(cfg, lora=replace(cfg.lora, rank=rank))
    if args.steps is not None:
        cfg = replace(cfg, adapt=replace(cfg.adapt, total_steps=args.steps, warmup_steps=min(cfg.adapt.warmup_steps, args.steps)))
    loaded = ckpt_io.load(args.checkpoint)
    base_path = _resolve_base(args, loaded.meta, args.checkpoint)
    base = ckpt_io.load(base_path).model
    if loaded.meta.get("stage") == "upscale":
        cfg = replace(cfg, surgery=replace(cfg.surgery, strategy=loaded.meta["strategy"], kind=loaded.meta["kind"]))
    try:
        model, manifest = X.prepare(loaded.model, cfg, args.mode)
    except S.SurgeryError as exc:
        raise ConfigError("--mode", str(exc)) from exc
    datasets = X.build_datasets(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    eval_every = cfg.adapt.eval_every

    def recovery(step, m):
        return E.check_recovery(base, m, manifest)

    hooks = {
        "text_ppl_kept": lambda step, m: E.perplexity(m, datasets.text_eval),
        "text_ppl_dropped": lambda step, m: E.perplexity(S.drop_added_layers(m, manifest), datasets.text_eval),
        "recovery_exact": recovery,
        "speech_ter": lambda step, m: E.corpus_error_rate(m, datasets.asr_eval[:32]),
    }
    failures = []

    def on_checkpoint(step, m, opt):
        ok = E.check_recovery(base, m, manifest)
        if args.mode != "full_ft" and not ok:
            failures.append(step)
        state = {"step": opt.step_count, "m": dict(opt.m), "v": dict(opt.v)}
        meta = {"stage": "adapt", "mode": args.mode, "step": step, "base_checkpoint": str(base_path.resolve())}
        ckpt_io.save(out / "model.ckpt", ckpt_io.Checkpoint(m, manifest, state, meta))

    train_cfg = cfg.adapt if eval_every else replace(cfg.adapt, eval_every=0)
    train_log, _ = X.adapt(model, manifest, cfg, datasets, train_cfg, hooks if eval_every else None, on_checkpoint)
    (out / "train_log.jsonl").write_text(train_log.to_jsonl())
    (out / "manifest.json").write_text(manifest.to_json())
    _write_json(out / "config.json", cfg.to_dict())
    strategy = cfg.surgery.strategy if args.mode == "depth" else ""
    kind = cfg.surgery.kind if args.mode == "depth" else ""
    preservation = loaded.meta.get("preservation_max_abs_diff", float("nan"))
    report = X.evaluate(base, model, manifest, datasets, args.mode, strategy, kind, preservation)
    (out / "eval.json").write_text(report.to_json())
    print(report.to_json())
    if failures:
        raise InvariantError(f"recovery check failed at steps {failures}")
    if args.mode != "full_ft" and not report.recovery_exact:
        raise InvariantError("recovery check failed after training")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg = config_io.load(run / "config.json") if (run / "config.json").exists() else ExperimentConfig()
    loaded = ckpt_io.load(run / "model.ckpt")
    base = ckpt_io.load(_resolve_base(args, loaded.meta)).model
    datasets = X.build_datasets(cfg)
    mode = loaded.meta.get("mode", "")
    strategy = cfg.surgery.strategy if mode == "depth" else ""
    kind = cfg.surgery.kind if mode == "depth" else ""
    report = X.evaluate(base, loaded.model, loaded.manifest, datasets, mode, strategy, kind)
    (run / "eval.json").write_text(report.to_json())
    print(report.to_json())
    return EXIT_OK


def cmd_compare(args) -> int:
    if not args.runs:
        raise ConfigError("runs", "at least one run directory is required")
    rows, incomplete = [], []
    for run in args.runs:
        path = Path(run) / "eval.json"
        if not path.exists():
            incomplete.append(run)
            rows.append({c: "" for c in E.CSV_COLUMNS} | {"run": run, "method": "INCOMPLETE"})
            continue
        report = E.EvalReport.from_dict(json.loads(path.read_text()))
        rows.append(E.csv_record(report, run))
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=E.CSV_COLUMNS, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    print(format_table(rows))
    if incomplete:
        print(f"incomplete runs (no eval.json): {', '.join(incomplete)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def format_table(rows: list[dict]) -> str:
    cols = E.CSV_COLUMNS
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) for c in cols}
    lines = ["  ".join(c.ljust(widths[c]) for c in cols)]
    lines.append("  ".join("-" * widths[c] for c in cols))
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthup", description="Multimodal depth up-scaling at toy scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="experiment config JSON (defaults used when omitted)")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        if out:
            p.add_argument("--out", required=True, help="output directory")

    def surgery_flags(p):
        p.add_argument("--strategy", choices=[s.value for s in S.PlacementStrategy])
        p.add_argument("--m", type=int, help="number of layers to add")
        p.add_argument("--kind", choices=["standard", "ebranchformer"])
        p.add_argument("--v-speech", dest="v_speech", type=int, help="speech vocabulary rows to append")

    p = sub.add_parser("config", help="print or write the default config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("pretrain", help="train the toy base LM on synthetic text")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("upscale", help="grow vocabulary and insert function-preserving layers")
    common(p)
    p.add_argument("--base", required=True, help="base checkpoint")
    surgery_flags(p)
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("adapt", help="speech continual pre-training in depth, full_ft or lora mode")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", required=True, choices=X.MODES)
    p.add_argument("--base", help="pre-surgery base checkpoint (default: recorded in the checkpoint)")
    p.add_argument("--rank", help="LoRA rank or 'auto'")
    p.add_argument("--steps", type=int, help="override adapt.total_steps")
    surgery_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="re-evaluate a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--base")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="tabulate evaluated runs", epilog=CSV_HELP)
    p.add_argument("runs", nargs="*")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as exc:
        print(f"invariant check failed: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ckpt_io.CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
