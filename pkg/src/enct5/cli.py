"""Command-line driver: pretrain, surgery, finetune, eval, params, pack-inspect, step-time, rerun.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
Every command that writes files also writes a ``manifest.json`` recording the
resolved configs, a content hash of the inputs and per-step timing; ``rerun``
replays a manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import model as M
from .adafactor import AdafactorState
from .config import (ConfigFileError, format_flat, load_task_spec, load_train_config, parse_flat,
                     model_config_from_text)
from .packing import pack, packing_stats, render_mask
from .tasks import TaskError, load_task, topic_corpus
from .training import (ExampleStream, PretrainResult, TrainConfig, cast_params, default_tokenizer, encode_examples,
                       evaluate, finetune, layout, plan_rows_from_stream, precision, pretrain, train_step,
                       write_history_csv)

log = logging.getLogger("enct5")

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# -- helpers -------------------------------------------------------------------

def _sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_hash(configs: dict, files: list[str]) -> str:
    """Content hash over the resolved configs and every input file's bytes."""
    h = hashlib.sha256(json.dumps(configs, sort_keys=True, default=str).encode())
    for f in sorted(files):
        h.update(f.encode())
        h.update(_sha256_file(f).encode())
    return h.hexdigest()


def write_manifest(path: Path, command: str, argv: list[str], configs: dict, files: list[str],
                   outputs: list[str], timing: dict, seed: int | None) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "configs": configs,
        "seed": seed,
        "input_hash": input_hash(configs, files),
        "inputs": sorted(files),
        "outputs": outputs,
        "timing": timing,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _timing(times: list[float]) -> dict:
    if not times:
        return {"steps": 0}
    a = np.asarray(times)
    return {"steps": len(times), "mean_s": float(a.mean()), "median_s": float(np.median(a)),
            "total_s": float(a.sum())}


def model_config_for(path: str | None, tokenizer, **overrides) -> M.ModelConfig:
    values = parse_flat(Path(path).read_text(), path) if path else {}
    values.setdefault("vocab_size", str(tokenizer.vocab_size))
    for k, v in overrides.items():
        values[k] = str(v)
    cfg = model_config_from_text(format_flat(values), path or "<model config>")
    if cfg.vocab_size < tokenizer.vocab_size:
        raise ConfigFileError(path or "<model config>",
                              [f"vocab_size {cfg.vocab_size} is smaller than the tokenizer's {tokenizer.vocab_size}"])
    return cfg


def load_corpus(arg: str, tokenizer) -> tuple[list[list[int]], list[str]]:
    """``synthetic:topics[:lines[:seed]]`` or a text file with one example per line."""
    if arg.startswith("synthetic:"):
        parts = arg.split(":")
        if parts[1] != "topics":
            raise UsageError(f"unknown synthetic corpus {parts[1]!r}; use synthetic:topics")
        size = int(parts[2]) if len(parts) > 2 and parts[2] else 20000
        seed = int(parts[3]) if len(parts) > 3 else 0
        lines = topic_corpus(seed, size)
        files = []
    else:
        lines = [l for l in Path(arg).read_text(encoding="utf-8").splitlines() if l.strip()]
        files = [arg]
    return [tokenizer.encode(l, add_eos=False) for l in lines], files


def _task_files(spec) -> list[str]:
    return list(spec.files.values())


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# -- commands ------------------------------------------------------------------

def cmd_pretrain(args, argv) -> int:
    tok = default_tokenizer()
    mcfg = model_config_for(args.model_config, tok, variant="t5")
    tcfg = load_train_config(args.train_config)
    if args.seed is not None:
        tcfg = tcfg.replace(seed=args.seed)
    corpus, files = load_corpus(args.corpus, tok)
    out = Path(args.out)
    result: PretrainResult = pretrain(tcfg, mcfg, corpus, tok, out_dir=out)
    write_history_csv(out / "loss.csv", [{"step": s, "loss": l} for s, l in result.losses])
    files += [f for f in (args.model_config,) if f and Path(f).is_file()]
    if Path(args.train_config).is_file():
        files.append(args.train_config)
    configs = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "corpus": args.corpus}
    write_manifest(out / MANIFEST, "pretrain", argv, configs, files,
                   [str(p) for p in result.checkpoints] + [str(out / "loss.csv")], _timing(result.step_times),
                   tcfg.seed)
    first, last = result.losses[0][1], result.losses[-1][1]
    print(f"pretrained {len(result.losses)} steps; loss {first:.4f} -> {last:.4f}; "
          f"checkpoint {result.checkpoints[-1]}")
    return 0


def cmd_surgery(args, argv) -> int:
    source = ckpt.load(args.source)
    if args.variant == "1dect5":
        target, report = ckpt.surgery_1dect5(source)
    else:
        target, report = ckpt.surgery_enct5(source, args.classes, args.task_kind, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save_checkpoint(out, target)
    report_path = out.with_suffix(".report.txt")
    report_path.write_text(report.to_text() + "\n")
    print(report.to_text())
    configs = {"model": target.config.to_dict(), "variant": args.variant, "classes": args.classes,
               "task_kind": args.task_kind}
    write_manifest(out.with_suffix(".manifest.json"), "surgery", argv, configs, [args.source],
                   [str(out), str(report_path)], {}, args.seed)
    return 0


def _init_checkpoint(arg: str):
    return None if arg == "random" else ckpt.load(arg)


def cmd_finetune(args, argv) -> int:
    tok = default_tokenizer()
    tcfg = load_train_config(args.train_config)
    if args.seed is not None:
        tcfg = tcfg.replace(seed=args.seed)
    spec = load_task_spec(args.task)
    task = load_task(spec)
    init = _init_checkpoint(args.init)
    mcfg = model_config_for(args.model_config, tok) if init is None else None
    result = finetune(tcfg, args.variant, init, task, tok, model_config=mcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "best.bin", result.params, result.config, tcfg.seed)
    ckpt.save(out / "final.bin", result.final_params, result.config, tcfg.seed)
    write_history_csv(out / "history.csv", result.history)
    outputs = [str(out / "best.bin"), str(out / "final.bin"), str(out / "history.csv")]
    if result.report is not None:
        (out / "surgery_report.txt").write_text(result.report.to_text() + "\n")
        outputs.append(str(out / "surgery_report.txt"))
    files = _task_files(spec) + ([args.init] if init is not None else [])
    files += [f for f in (args.model_config, args.train_config) if f and Path(f).is_file()]
    configs = {"model": result.config.to_dict(), "train": tcfg.to_dict(), "task": spec.to_dict(),
               "variant": args.variant, "init": args.init}
    write_manifest(out / MANIFEST, "finetune", argv, configs, files, outputs, result.timing(), tcfg.seed)
    print(f"{args.variant}: best validation score {result.best_score:.4f} at step {result.best_step}")
    return 0


def cmd_eval(args, argv) -> int:
    tok = default_tokenizer()
    c = ckpt.load(args.ckpt)
    if c.config.variant != args.variant:
        raise UsageError(f"checkpoint holds a {c.config.variant} model, not {args.variant}")
    spec = load_task_spec(args.task)
    task = load_task(spec)
    bundle = evaluate(c.config, c.params, task, args.split, tok, args.max_len)
    _print({"task": spec.name, "split": args.split, "variant": args.variant, "metrics": bundle,
            "score": bundle["score"]})
    return 0


def cmd_params(args, argv) -> int:
    tok = default_tokenizer()
    base = model_config_for(args.model_config, tok)
    cfg = base.replace(variant=args.variant, num_classes=args.classes)
    total, groups = M.count_parameters(cfg)
    t5_total = M.count_parameters(base.replace(variant="t5"))[0]
    enc_total = M.count_parameters(base.replace(variant="enct5", num_classes=args.classes))[0]
    print(f"variant {args.variant}: {total} parameters")
    for k, v in groups.items():
        print(f"  {k:18s} {v}")
    print(f"enct5/t5 ratio: {enc_total / t5_total:.4f} ({enc_total} / {t5_total})")
    return 0


def cmd_pack_inspect(args, argv) -> int:
    tok = default_tokenizer()
    spec = load_task_spec(args.task)
    task = load_task(spec)
    enc = encode_examples(spec, task[args.split], tok, "enct5", args.max_len)
    batch = pack([e.inputs for e in enc], args.max_len)
    stats = packing_stats(batch)
    for k, v in stats.items():
        print(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    row = batch.segment_ids[0]
    print("segment ids (row 0):", " ".join(str(int(s)) for s in row))
    print(render_mask(row))
    return 0


def _time_steps(cfg: M.ModelConfig, tcfg: TrainConfig, items, steps: int) -> list[float]:
    with precision(tcfg.dtype):
        params = cast_params(M.init_params(cfg, tcfg.seed), tcfg.dtype)
        stream = ExampleStream(items, tcfg.seed)
        state = AdafactorState()
        times = []
        for _ in range(steps):
            t0 = time.perf_counter()
            rows = plan_rows_from_stream(stream, tcfg, tcfg.packing_enabled, use_targets=cfg.variant != "enct5",
                                         max_segments=cfg.max_segments)
            train_step(cfg, params, layout(cfg, rows, tcfg), state, tcfg.learning_rate)
            times.append(time.perf_counter() - t0)
    return times


def cmd_step_time(args, argv) -> int:
    tok = default_tokenizer()
    base = model_config_for(args.model_config, tok)
    tcfg = load_train_config(args.train_config)
    spec = load_task_spec(args.task)
    task = load_task(spec)
    rows = {}
    for variant in ("t5", "1dect5", "enct5"):
        cfg = base.replace(variant=variant, num_classes=max(spec.num_classes, 1), task_kind=spec.kind)
        items = encode_examples(spec, task["train"], tok, variant, tcfg.max_input_len)
        times = _time_steps(cfg, tcfg, items, args.warmup + args.steps)[args.warmup:]
        rows[variant] = float(np.median(times))
    print(f"median seconds per training step ({args.steps} steps, {tcfg.dtype}, batch {tcfg.batch_size}):")
    for v, t in rows.items():
        print(f"  {v:7s} {t:.4f}")
    print(f"t5 / enct5 step-time ratio: {rows['t5'] / rows['enct5']:.2f}x "
          "(informational; depends on hardware and config)")
    return 0


def cmd_rerun(args, argv) -> int:
    manifest = json.loads(Path(args.manifest).read_text())
    old = list(manifest["argv"])
    if "--out" not in old:
        raise UsageError("manifest command has no --out to redirect")
    i = old.index("--out")
    old[i + 1] = args.out
    print("rerunning:", " ".join(old))
    return main(old)


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="enct5", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="span-corruption pretraining of the full encoder-decoder")
    s.add_argument("--model-config", help="flat model config file (vocab_size defaults to the tokenizer's)")
    s.add_argument("--train-config", required=True, help="preset name (desk, published) or config file")
    s.add_argument("--corpus", required=True, help="text file, or synthetic:topics[:lines[:seed]]")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("surgery", help="derive a 1decT5 or EncT5 checkpoint from a T5 checkpoint")
    s.add_argument("--from", dest="source", required=True)
    s.add_argument("--variant", required=True, choices=["1dect5", "enct5"])
    s.add_argument("--classes", type=int, default=2)
    s.add_argument("--task-kind", default="classification", choices=["classification", "regression"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_surgery)

    s = sub.add_parser("finetune", help="fine-tune a variant on one task")
    s.add_argument("--variant", required=True, choices=list(M.VARIANTS))
    s.add_argument("--init", required=True, help="checkpoint path or 'random'")
    s.add_argument("--task", required=True, help="task file or synthetic:<generator>[:size[:seed]]")
    s.add_argument("--train-config", required=True)
    s.add_argument("--model-config", help="needed with --init random")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="metric bundle for a checkpoint on a task split")
    s.add_argument("--variant", required=True, choices=list(M.VARIANTS))
    s.add_argument("--ckpt", required=True)
    s.add_argument("--task", required=True)
    s.add_argument("--split", default="validation")
    s.add_argument("--max-len", type=int, default=64)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("params", help="exact parameter counts and the enct5/t5 ratio")
    s.add_argument("--model-config")
    s.add_argument("--variant", required=True, choices=list(M.VARIANTS))
    s.add_argument("--classes", type=int, default=2)
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("pack-inspect", help="packing statistics and the first row's attention mask")
    s.add_argument("--task", required=True)
    s.add_argument("--max-len", type=int, required=True)
    s.add_argument("--split", default="train")
    s.set_defaults(func=cmd_pack_inspect)

    s = sub.add_parser("step-time", help="per-step training time of each variant at a matched config")
    s.add_argument("--model-config")
    s.add_argument("--train-config", default="desk")
    s.add_argument("--task", default="synthetic:majority:200")
    s.add_argument("--steps", type=int, default=5)
    s.add_argument("--warmup", type=int, default=1)
    s.set_defaults(func=cmd_step_time)

    s = sub.add_parser("rerun", help="replay the command recorded in a manifest into a new output")
    s.add_argument("manifest")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rerun)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, ConfigFileError) as err:
        print(f"enct5 {args.command}: error: {err}", file=sys.stderr)
        return 2
    except (ckpt.CheckpointError, ckpt.SurgeryError, TaskError, OSError, ValueError, FloatingPointError) as err:
        print(f"enct5 {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
