"""Command-line entry points. Exit codes: 0 success, 1 validation error, 2 runtime or numeric failure."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import torch
import yaml

from .config import TASK_TYPES, ConfigError
from .encoder import NumericError
from .metrics import EvalReport, validate_report
from .runconfig import load_run_config
from .scenegen.loaders import DataError, load_dataset
from .scenegen.samples import synthetic_dataset
from .scenegen.writers import TASK_FORMAT, write_synthetic
from .trainer.checkpoint import CheckpointError, load_checkpoint, restore_model, restore_trainer_state, \
    save_checkpoint, snapshot
from .trainer.data import positive_ratio
from .trainer.evaluate import evaluate_task, headline
from .trainer.loop import DatasetSource, Trainer
from .trainer.model import build_model, component_counts, param_share_report, resolve_trainable, \
    trainable_mask_report

log = logging.getLogger("hcpercept")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


# ---------------------------------------------------------------- helpers

class Outputs:
    """Tracks files written under --out and records them in MANIFEST.json."""

    def __init__(self, root, config_echo: dict):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config = config_echo
        self.files = []

    def path(self, name: str) -> Path:
        return self.root / name

    def add(self, path):
        self.files.append(Path(path))

    def write_json(self, name: str, obj) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
        self.add(p)
        return p

    def finish(self, command: str):
        cfg = self.path("resolved_config.yaml")
        cfg.write_text(yaml.safe_dump(self.config, sort_keys=True))
        self.add(cfg)
        entries = []
        for p in sorted(set(self.files)):
            entries.append({"path": str(p.relative_to(self.root)), "bytes": p.stat().st_size,
                            "sha256": hashlib.sha256(p.read_bytes()).hexdigest()})
        m = self.path("MANIFEST.json")
        m.write_text(json.dumps({"command": command, "files": entries, "config": self.config},
                                indent=2, sort_keys=True, default=str) + "\n")


def load_sources(cfg) -> tuple:
    """Materialize every configured dataset; returns (sources, slots per task, skip counts)."""
    sources, slots, skipped = [], {}, {}
    sizes = cfg.size_policy()
    for i, m in enumerate(cfg.datasets):
        if m.format == "synthetic":
            n = int(m.options.get("samples", cfg.synthetic.get("samples", 16)))
            samples = synthetic_dataset(m.task_type, n, seed=cfg.seed + int(m.options.get("seed_offset", 0)),
                                        sizes=sizes, dataset_id=m.dataset_id,
                                        identities=int(m.options.get("identities", cfg.synthetic.get("identities", 4))))
            n_slots = None
            skipped[m.dataset_id] = 0
        else:
            res = load_dataset(m, sizes, cfg.data_root)
            samples, n_slots = res.samples, res.slots
            skipped[m.dataset_id] = res.skipped
            if res.skipped:
                log.info("%s: skipped %d records without labels", m.dataset_id, res.skipped)
        if not samples:
            raise DataError(m.root, f"dataset {m.dataset_id!r} produced no samples")
        if m.task_type in ("seg", "pose", "par") and n_slots:
            slots[m.task_id] = n_slots
        sources.append((m, samples))
    return sources, slots, skipped


def make_sources(cfg, model, loaded) -> list:
    out = []
    for m, samples in loaded:
        n_cls = model.tasks[m.task_id].num_queries if m.task_type == "seg" else None
        ratio = positive_ratio(samples) if m.task_type == "par" else None
        out.append(DatasetSource(m.dataset_id, m.task_id, samples, n_cls, ratio))
    return out


def evaluate_all(model, loaded, batch_size: int) -> EvalReport:
    report = EvalReport()
    for m, samples in loaded:
        res = evaluate_task(model, m.task_id, samples, batch_size)
        for k in headline(m.task_type):
            report.metrics[f"{m.dataset_id}/{k}"] = float(res[k])
        per = res.get("per_class_iou") or res.get("per_attribute")
        if per is not None:
            report.per_class[m.dataset_id] = {str(i): v for i, v in enumerate(per)}
        report.counts[m.dataset_id] = len(samples)
    return report


def _hash_params(model, names) -> str:
    h = hashlib.sha256()
    for n, p in sorted(model.named_parameters()):
        if n not in names:
            h.update(n.encode())
            h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _trainer(cfg, model, loaded, log_path, prompt_task_ids=None) -> Trainer:
    plan = cfg.train_plan()
    return Trainer(model, plan, make_sources(cfg, model, loaded), cfg.loss_weights(), log_path, prompt_task_ids)


def _print_table(rows):
    w = max(len(r[0]) for r in rows)
    for name, value in rows:
        print(f"{name:<{w}}  {value}")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config, flags={"seed": args.seed, "preset": args.preset})
    out = Outputs(args.out or "generated", cfg.to_dict())
    n = int(cfg.synthetic.get("samples", 16))
    ids = int(cfg.synthetic.get("identities", 4))
    entries = []
    for tt in TASK_TYPES:
        for p in write_synthetic(tt, out.path(tt), n, cfg.seed, cfg.size_policy(), ids):
            out.add(p)
        entries.append({"dataset_id": f"{tt}-generated", "task_type": tt, "root": tt, "format": TASK_FORMAT[tt],
                        "batch_size": 8})
    mp = out.path("datasets.yaml")
    mp.write_text(yaml.safe_dump({"datasets": entries}, sort_keys=False))
    out.add(mp)
    out.finish("gen-data")
    print(f"wrote {len(TASK_TYPES)} datasets ({n} samples each) to {out.root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, flags=_flags(args))
    if not cfg.datasets:
        raise ConfigError("train needs at least one dataset")
    loaded, slots, skipped = load_sources(cfg)
    out = Outputs(args.out or "run", cfg.to_dict())
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        model = restore_model(ck)
    else:
        ck = None
        model = build_model(cfg.model_config(), cfg.task_list(slots), cfg.sharing_mode, cfg.seed)
    log_path = out.path("metrics.jsonl")
    if ck is None and log_path.exists():
        log_path.unlink()
    trainer = _trainer(cfg, model, loaded, log_path)
    if ck is not None:
        restore_trainer_state(trainer, ck)
    out.add(log_path)
    total = trainer.plan.total_steps
    every = cfg.checkpoint_every
    try:
        while trainer.step < total:
            rec = trainer.train_step()
            if rec["step"] % max(1, total // 20) == 0 or rec["step"] == total:
                print(f"step {rec['step']}/{total} lr {rec['lr']:.2e} loss {rec['loss']:.4f}", flush=True)
            if every and rec["step"] % every == 0:
                save_checkpoint(out.path("checkpoint.pt"), snapshot(model, trainer=trainer))
    except NumericError as e:
        out.write_json("failure.json", {"step": trainer.step + 1, "error": str(e),
                                        "losses": getattr(e, "losses", None)})
        out.finish("train")
        raise
    save_checkpoint(out.path("checkpoint.pt"), snapshot(model, trainer=trainer))
    out.add(out.path("checkpoint.pt"))
    out.write_json("train_summary.json", {"steps": trainer.step, "skipped_records": skipped,
                                          "loss_weights": trainer.dataset_w})
    out.finish("train")
    print(f"finished at step {trainer.step}; checkpoint {out.path('checkpoint.pt')}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ck = load_checkpoint(args.checkpoint)
    cfg = load_run_config(args.config, flags=_flags(args))
    model = restore_model(ck)
    loaded, _, _ = load_sources(cfg)
    for m, _ in loaded:
        if m.task_id not in model.tasks:
            raise ConfigError(f"checkpoint has no task {m.task_id!r}")
    report = evaluate_all(model, loaded, cfg.eval_batch_size)
    report.config = {"checkpoint": str(args.checkpoint), "step": ck.step, "mode": "direct evaluation",
                     **cfg.to_dict()}
    validate_report(report.to_dict())
    out = Outputs(args.out or "eval", cfg.to_dict())
    out.write_json("eval_report.json", report.to_dict())
    out.finish("eval")
    _print_table([(k, f"{v:.4f}") for k, v in sorted(report.metrics.items())])
    return EXIT_OK


def param_table(cfg) -> dict:
    model = build_model(cfg.model_config(), cfg.task_list(), cfg.sharing_mode, device="meta")
    counts = component_counts(model)
    share = param_share_report(model)
    return {"preset": cfg.preset, "sharing_mode": cfg.sharing_mode, "tasks": len(model.tasks), **counts,
            "task_agnostic": share["task_agnostic"], "task_agnostic_ratio": share["ratio"]}


def cmd_inspect_params(args) -> int:
    cfg = load_run_config(args.config, flags=_flags(args))
    t = param_table(cfg)
    rows = [("Encoder", f"{t['encoder'] / 1e6:.2f}M"), ("Decoder", f"{t['decoder'] / 1e6:.2f}M"),
            ("Interpreter", f"{t['interpreter'] / 1e6:.2f}M"), ("Task queries", f"{t['queries']:,}"),
            ("Total", f"{t['total'] / 1e6:.2f}M"),
            ("Task-agnostic / total", f"{100 * t['task_agnostic_ratio']:.3f}%")]
    _print_table(rows)
    if args.out:
        out = Outputs(args.out, cfg.to_dict())
        out.write_json("params.json", t)
        out.finish("inspect-params")
    return EXIT_OK


def cmd_prompt_tune(args) -> int:
    """Tune only the masked-in parameters; new tasks in the config get fresh queries."""
    flags = _flags(args)
    if flags.get("mask_mode") is None:
        flags["mask_mode"] = "prompt_queries"
    cfg = load_run_config(args.config, flags=flags)
    if cfg.mask_mode == "full":
        raise ConfigError("prompt-tune needs a prompt mask mode")
    if not cfg.datasets:
        raise ConfigError("prompt-tune needs at least one dataset")
    loaded, slots, _ = load_sources(cfg)
    if args.checkpoint:
        model = restore_model(load_checkpoint(args.checkpoint))
    else:
        log.warning("no checkpoint given; tuning a freshly initialized model")
        model = build_model(cfg.model_config(), [], cfg.sharing_mode, cfg.seed)
    tasks = {t.task_id: t for t in cfg.task_list(slots)}
    targets = sorted({m.task_id for m, _ in loaded})
    for tid in targets:
        if tid not in model.tasks:
            model.add_task(tasks[tid], torch.Generator().manual_seed(cfg.seed))
    out = Outputs(args.out or "prompt", cfg.to_dict())
    before = evaluate_all(model, loaded, cfg.eval_batch_size)
    trainer = _trainer(cfg, model, loaded, out.path("metrics.jsonl"), targets)
    out.add(out.path("metrics.jsonl"))
    frozen = set(trainer.trainable)
    h0 = _hash_params(model, frozen)
    ratio = trainable_mask_report(model, resolve_trainable(model, cfg.mask_mode, targets))
    while trainer.step < trainer.plan.total_steps:
        trainer.train_step()
    h1 = _hash_params(model, frozen)
    after = evaluate_all(model, loaded, cfg.eval_batch_size)
    save_checkpoint(out.path("checkpoint.pt"), snapshot(model, trainer=trainer))
    out.add(out.path("checkpoint.pt"))
    result = {"mask_mode": cfg.mask_mode, "learnable": ratio["learnable"], "total": ratio["total"],
              "learnable_ratio": ratio["ratio"], "frozen_unchanged": h0 == h1,
              "direct": before.metrics, "tuned": after.metrics, "steps": trainer.step}
    out.write_json("prompt_tune.json", result)
    out.finish("prompt-tune")
    rows = [("Learnable parameters", f"{ratio['learnable']:,} / {ratio['total']:,} "
                                     f"({100 * ratio['ratio']:.4f}%)"),
            ("Frozen weights unchanged", str(h0 == h1))]
    rows += [(f"{k} direct -> tuned", f"{before.metrics[k]:.4f} -> {after.metrics[k]:.4f}")
             for k in sorted(after.metrics)]
    _print_table(rows)
    if h0 != h1:
        raise NumericError("frozen parameters changed during prompt tuning")
    return EXIT_OK


def cmd_export_report(args) -> int:
    """Collect the artifacts of a run directory into report.json and report.md."""
    if not args.out:
        raise ConfigError("export-report needs --out pointing at a run directory")
    root = Path(args.out)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    report = {}
    for name in ("params.json", "train_summary.json", "eval_report.json", "prompt_tune.json"):
        p = root / name
        if p.exists():
            report[name[:-5]] = json.loads(p.read_text())
    log_path = root / "metrics.jsonl"
    if log_path.exists():
        lines = [json.loads(x) for x in log_path.read_text().splitlines() if x.strip()]
        if lines:
            report["training"] = {"steps_logged": len(lines), "first_loss": lines[0]["loss"],
                                  "last_loss": lines[-1]["loss"], "last_step": lines[-1]["step"]}
    if not report:
        raise ConfigError(f"{root} holds no run artifacts")
    if "eval_report" in report:
        validate_report(report["eval_report"])
    (root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    md = ["# Run report", ""]
    if "params" in report:
        t = report["params"]
        md += ["## Parameters", "", "| component | count |", "|---|---|"]
        md += [f"| {k} | {t[k]:,} |" for k in ("encoder", "decoder", "interpreter", "queries", "total")]
        md += [f"| task-agnostic ratio | {100 * t['task_agnostic_ratio']:.3f}% |", ""]
    if "training" in report:
        t = report["training"]
        md += ["## Training", "", f"{t['steps_logged']} logged steps; loss {t['first_loss']:.4f} -> "
               f"{t['last_loss']:.4f}", ""]
    for key in ("eval_report",):
        if key in report:
            md += ["## Evaluation", "", "| metric | value |", "|---|---|"]
            md += [f"| {k} | {v:.4f} |" for k, v in sorted(report[key]["metrics"].items())]
            md += [""]
    if "prompt_tune" in report:
        t = report["prompt_tune"]
        md += ["## Prompt tuning", "", f"mask {t['mask_mode']}, learnable ratio {100 * t['learnable_ratio']:.4f}%, "
               f"frozen weights unchanged: {t['frozen_unchanged']}", ""]
    (root / "report.md").write_text("\n".join(md))
    print(f"wrote {root / 'report.md'} and {root / 'report.json'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _flags(args) -> dict:
    return {"seed": args.seed, "preset": args.preset, "sharing_mode": args.sharing_mode,
            "mask_mode": args.mask_mode, "steps": args.steps}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "inspect-params": cmd_inspect_params,
            "prompt-tune": cmd_prompt_tune, "export-report": cmd_export_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcpercept", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").split("\n")[0] or None)
        p.add_argument("--config", help="run config (YAML)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint")
        p.add_argument("--preset", choices=["full", "toy"])
        p.add_argument("--sharing-mode", choices=["baseline", "per_task_interpreter", "encoder_only", "per_task_type"])
        p.add_argument("--mask-mode", choices=["full", "prompt_queries", "prompt_deep"])
        p.add_argument("--steps", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, OSError, ValueError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
