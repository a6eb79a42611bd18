"""Command-line entry point.

Subcommands: caption one image, run a manifest batch, evaluate predictions
against references, run the synthetic benchmark, manage the response
cache. Exit codes are stable: 0 success, 1 usage/config error, 2 partial
failure, 3 total failure. With --json, stdout carries machine-readable
output only; everything human-readable goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from enum import IntEnum
from pathlib import Path
from typing import Optional

from . import pipeline
from .config import (
    ENV_CACHE_DIR,
    MODE_NAMES,
    RunConfig,
    apply_env_overrides,
    parse_mode,
)
from .errors import ConfigError, PatchCapError
from .imaging import load_image
from .metrics import ObjectVocabulary, bleu, chair, cider, length_stats, rouge_l
from .synthbench import ErrorModel, render_bench_table, run_bench


class ExitStatus(IntEnum):
    OK = 0
    USAGE = 1
    PARTIAL = 2
    FAILURE = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; our exit-code table
    # reserves 2 for partial failures, so usage errors become 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ExitStatus.USAGE, f"{self.prog}: error: {message}\n")


def _human(message: str, json_mode: bool) -> None:
    print(message, file=sys.stderr if json_mode else sys.stdout)


def _machine(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="patchcap",
        description="Patch-based image captioning: split, describe, filter, merge",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_caption = sub.add_parser("caption", help="caption a single image")
    p_caption.add_argument("image", help="path to a PNG/JPEG image or scene blob")
    p_caption.add_argument("--config", required=True, help="run config JSON file")
    p_caption.add_argument("--mode", help=f"pipeline mode ({', '.join(MODE_NAMES)})")
    p_caption.add_argument("--out", help="where to write the caption record JSON")
    p_caption.add_argument("--cache-dir", help="response cache directory")
    p_caption.add_argument("--json", action="store_true", help="machine-readable stdout")

    p_batch = sub.add_parser("batch", help="caption a JSONL manifest of images")
    p_batch.add_argument("manifest", help="JSONL manifest of {image_id, path}")
    p_batch.add_argument("--config", required=True)
    p_batch.add_argument("--mode", help=f"pipeline mode ({', '.join(MODE_NAMES)})")
    p_batch.add_argument("--out-dir", default="patchcap-batch")
    p_batch.add_argument("--workers", type=int, help="parallel images (default from config)")
    p_batch.add_argument("--cache-dir", help="response cache directory")
    p_batch.add_argument("--json", action="store_true")

    p_eval = sub.add_parser("eval", help="score predictions against references")
    p_eval.add_argument("predictions", help="JSONL of {image_id, caption}")
    p_eval.add_argument("references", help="JSONL of {image_id, references[], gt_objects[]}")
    p_eval.add_argument(
        "--metrics",
        default="bleu,rouge_l,cider,length",
        help="comma list from: bleu, rouge_l, cider, chair, length",
    )
    p_eval.add_argument("--vocab", help="JSON object vocabulary (required for chair)")
    p_eval.add_argument("--out", help="write the metric report JSON here")
    p_eval.add_argument("--json", action="store_true")

    p_bench = sub.add_parser("bench", help="run the synthetic-scene benchmark")
    p_bench.add_argument("--scenes", type=int, default=50)
    p_bench.add_argument("--seed", type=int, default=17)
    p_bench.add_argument("--objects", type=int, default=6)
    p_bench.add_argument(
        "--error-model",
        default="{}",
        help='JSON, e.g. {"hallucination_rate": 0.3, "scorer_noise": 0.05}',
    )
    p_bench.add_argument(
        "--modes",
        default=",".join(MODE_NAMES),
        help=f"comma list of modes (default: all of {', '.join(MODE_NAMES)})",
    )
    p_bench.add_argument("--workers", type=int, default=4)
    p_bench.add_argument("--config", help="optional run config JSON for thresholds")
    p_bench.add_argument("--out-dir", default="patchcap-bench")
    p_bench.add_argument("--json", action="store_true")

    p_cache = sub.add_parser("cache", help="inspect or clear the response cache")
    p_cache.add_argument("action", choices=["info", "clear"])
    p_cache.add_argument("--config", help="run config JSON file")
    p_cache.add_argument("--cache-dir", help="cache directory (overrides config/env)")
    p_cache.add_argument("--json", action="store_true")

    return parser


def _load_config(args, require: bool = True) -> RunConfig:
    if getattr(args, "config", None):
        config = RunConfig.from_file(args.config)
    elif require:
        raise ConfigError("a --config file is required")
    else:
        config = RunConfig()
    apply_env_overrides(config)
    if getattr(args, "cache_dir", None):
        config.cache_dir = args.cache_dir
    if getattr(args, "mode", None):
        config.mode = parse_mode(args.mode)
    if getattr(args, "workers", None):
        config.batch_workers = args.workers
    return config


def cmd_caption(args) -> int:
    config = _load_config(args)
    try:
        img = load_image(args.image)
    except PatchCapError as exc:
        record = pipeline.CaptionRecord(
            image_id=Path(args.image).stem,
            config_digest=config.digest(),
            mode=config.mode.value,
            status="failed",
            error=f"{type(exc).__name__}: {exc}",
        )
    else:
        record = pipeline.run_image(config, img)

    out_path = Path(args.out) if args.out else Path(f"{record.image_id}.caption.json")
    out_path.write_text(record.to_json() + "\n")
    if record.status != "ok":
        _human(f"captioning failed: {record.error} (record: {out_path})", args.json)
        if args.json:
            _machine({"status": record.status, "error": record.error, "record": str(out_path)})
        return ExitStatus.FAILURE
    if args.json:
        _machine(
            {
                "status": "ok",
                "image_id": record.image_id,
                "final_caption": record.final_caption,
                "record": str(out_path),
            }
        )
        _human(f"record written to {out_path}", True)
    else:
        print(record.final_caption)
        _human(f"record written to {out_path}", False)
    return ExitStatus.OK


def cmd_batch(args) -> int:
    config = _load_config(args)
    manifest = pipeline.read_manifest(args.manifest)
    report, records = pipeline.run_batch(config, manifest, workers=args.workers)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "records.jsonl"
    pipeline.write_records_jsonl(records, records_path)
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")

    summary = (
        f"batch: {report.succeeded}/{report.total} succeeded, "
        f"{report.failed} failed, cache hit rate {report.cache_hit_rate:.2f}"
    )
    _human(summary, args.json)
    if report.failed_ids:
        _human("failed images: " + ", ".join(report.failed_ids), args.json)
    _human(f"records: {records_path}\nreport: {report_path}", args.json)
    if args.json:
        _machine(report.to_dict())
    if report.total == 0 or report.failed == 0:
        return ExitStatus.OK
    if report.succeeded == 0:
        return ExitStatus.FAILURE
    return ExitStatus.PARTIAL


def _read_jsonl(path: str) -> list[dict]:
    entries = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            entries.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
    return entries


def cmd_eval(args) -> int:
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    known = {"bleu", "rouge_l", "cider", "chair", "length"}
    unknown = set(wanted) - known
    if unknown:
        raise ConfigError(f"unknown metrics: {sorted(unknown)}; valid: {sorted(known)}")
    if "chair" in wanted and not args.vocab:
        raise ConfigError("chair requires --vocab")

    predictions = _read_jsonl(args.predictions)
    references = _read_jsonl(args.references)
    preds_by_id = {}
    for entry in predictions:
        caption = entry.get("caption", entry.get("candidate", entry.get("final_caption")))
        if "image_id" not in entry or caption is None:
            raise ConfigError(f"prediction entry needs image_id and caption: {entry}")
        preds_by_id[str(entry["image_id"])] = caption
    refs_by_id = {}
    for entry in references:
        if "image_id" not in entry:
            raise ConfigError(f"reference entry needs image_id: {entry}")
        refs_by_id[str(entry["image_id"])] = entry
    if set(preds_by_id) != set(refs_by_id):
        missing = sorted(set(refs_by_id) - set(preds_by_id))[:5]
        extra = sorted(set(preds_by_id) - set(refs_by_id))[:5]
        raise ConfigError(
            f"predictions and references are misaligned "
            f"(missing: {missing}, extra: {extra})"
        )

    ids = sorted(preds_by_id)
    candidates = [preds_by_id[i] for i in ids]
    ref_lists = [refs_by_id[i].get("references", []) for i in ids]

    report: dict = {"items": len(ids)}
    if "bleu" in wanted or "rouge_l" in wanted or "cider" in wanted:
        if any(not refs for refs in ref_lists):
            raise ConfigError("every reference entry needs a nonempty references list")
    if "bleu" in wanted:
        for n in range(1, 5):
            scores = [bleu(c, refs, max_n=n) for c, refs in zip(candidates, ref_lists)]
            report[f"bleu_{n}"] = sum(scores) / len(scores) if scores else 0.0
    if "rouge_l" in wanted:
        scores = [
            max(rouge_l(c, ref) for ref in refs) for c, refs in zip(candidates, ref_lists)
        ]
        report["rouge_l"] = sum(scores) / len(scores) if scores else 0.0
    if "cider" in wanted and candidates:
        report["cider"] = cider(candidates, ref_lists).mean
    if "chair" in wanted:
        vocab = ObjectVocabulary.from_file(args.vocab)
        gt = [refs_by_id[i].get("gt_objects", []) for i in ids]
        result = chair(candidates, gt, vocab)
        report["chairs"] = result.chairs
        report["chairi"] = result.chairi
    if "length" in wanted:
        report["length"] = length_stats(candidates).to_dict()

    table_lines = [f"{key:<12} {value}" for key, value in sorted(report.items())]
    _human("\n".join(table_lines), args.json)
    if args.out:
        Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
        _human(f"report written to {args.out}", args.json)
    if args.json:
        _machine(report)
    return ExitStatus.OK


def cmd_bench(args) -> int:
    if args.scenes < 0:
        raise ConfigError(f"--scenes must be >= 0, got {args.scenes}")
    try:
        error_model_data = json.loads(args.error_model)
        if not isinstance(error_model_data, dict):
            raise ValueError("error model must be a JSON object")
        error_model = ErrorModel(**error_model_data)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad --error-model: {exc}") from exc
    modes = [parse_mode(m) for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise ConfigError("at least one mode is required")
    config = _load_config(args, require=False)

    report, _ = run_bench(
        config,
        n_scenes=args.scenes,
        error_model=error_model,
        modes=modes,
        seed=args.seed,
        n_objects=args.objects,
        workers=args.workers,
    )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_json = out_dir / "report.json"
    report_json.write_text(report.to_json())
    table = render_bench_table(report)
    (out_dir / "report.txt").write_text(table)

    _human(table, args.json)
    _human(f"report written to {report_json}", args.json)
    if args.json:
        print(report.to_json(), end="")
    failures = sum(stats["failures"] for stats in report.per_mode.values())
    return ExitStatus.PARTIAL if failures else ExitStatus.OK


def cmd_cache(args) -> int:
    from .store import ResponseCache

    cache_dir: Optional[str] = args.cache_dir
    if not cache_dir and args.config:
        config = RunConfig.from_file(args.config)
        apply_env_overrides(config)
        cache_dir = config.cache_dir
    if not cache_dir:
        cache_dir = os.environ.get(ENV_CACHE_DIR)
    if not cache_dir:
        raise ConfigError("no cache directory: pass --cache-dir, set it in --config, or export " + ENV_CACHE_DIR)

    cache = ResponseCache(cache_dir)
    if args.action == "info":
        payload = {"cache_dir": str(cache.root), "entries": cache.entry_count()}
        _human(f"cache {payload['cache_dir']}: {payload['entries']} entries", args.json)
        if args.json:
            _machine(payload)
        return ExitStatus.OK
    removed = cache.clear()
    _human(f"cleared {removed} entries from {cache.root}", args.json)
    if args.json:
        _machine({"cache_dir": str(cache.root), "removed": removed})
    return ExitStatus.OK


_COMMANDS = {
    "caption": cmd_caption,
    "batch": cmd_batch,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "cache": cmd_cache,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    json_mode = getattr(args, "json", False)
    try:
        return int(_COMMANDS[args.command](args))
    except ConfigError as exc:
        _human(f"error: {exc}", json_mode)
        return ExitStatus.USAGE
    except PatchCapError as exc:
        _human(f"error: {type(exc).__name__}: {exc}", json_mode)
        return ExitStatus.FAILURE


if __name__ == "__main__":
    sys.exit(main())
