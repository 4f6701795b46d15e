"""Command-line surface.

Subcommands: synth-data, pretrain, align, train-classifier, evaluate,
localize, routing-map. Every subcommand takes --config, --seed, and --out;
exit status 0 on success, 1 on validation errors (including usage), 2 on
runtime failures.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 with usage on the error stream
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="astralab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, ckpt=False):
        p.add_argument("--config", required=True, help="run config path")
        p.add_argument("--seed", required=True, type=int, help="master seed")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="slide archive directory")
        if ckpt:
            p.add_argument("--checkpoint", required=True, help="checkpoint path")

    common(sub.add_parser("synth-data", help="generate a synthetic cohort archive"))
    common(sub.add_parser("pretrain", help="masked reconstruction stage"), data=True)
    common(sub.add_parser("align", help="prompt alignment stage"), data=True, ckpt=True)
    common(
        sub.add_parser("train-classifier", help="downstream classification"),
        data=True,
        ckpt=True,
    )
    common(
        sub.add_parser("evaluate", help="raw-vs-contextualized comparison"),
        data=True,
        ckpt=True,
    )
    common(sub.add_parser("localize", help="text-guided tumor masks"), data=True, ckpt=True)
    common(sub.add_parser("routing-map", help="expert partition maps"), data=True, ckpt=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        args = _build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1

    from .config import load_config

    try:
        config = load_config(args.config)
    except FileNotFoundError:
        print(f"config not found: {args.config}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        return _dispatch(args, config, out_dir)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def _dispatch(args, config, out_dir: Path) -> int:
    from . import archive
    from .checkpoint import load_checkpoint, save_checkpoint

    command = args.command
    seed = args.seed

    if command == "synth-data":
        from .synth import generate_cohort

        slides = generate_cohort(config.synth_config(), seed, config.data.slides)
        archive.save_cohort(slides, out_dir)
        print(f"wrote {len(slides)} slides to {out_dir}")
        return 0

    slides = archive.load_cohort(args.data)

    if command == "pretrain":
        from .trainer import pretrain

        result = pretrain(slides, config, seed, trace_path=out_dir / "pretrain_trace.jsonl")
        save_checkpoint(result.checkpoint, out_dir / "pretrain.ckpt")
        print(f"pretrained {result.checkpoint.step} steps -> {out_dir / 'pretrain.ckpt'}")
        return 0

    ckpt = load_checkpoint(args.checkpoint)
    from .trainer import model_from_checkpoint

    model = model_from_checkpoint(ckpt, config)

    if command == "align":
        from .trainer import align as run_align

        result = run_align(slides, model, config, seed, trace_path=out_dir / "align_trace.jsonl")
        save_checkpoint(result.checkpoint, out_dir / "align.ckpt")
        print(f"aligned {result.checkpoint.step} steps -> {out_dir / 'align.ckpt'}")
        return 0

    if command == "train-classifier":
        from .evaluation import write_kv_report
        from .trainer import train_classifier

        report = train_classifier(slides, model, config)
        (out_dir / "classification_report.txt").write_text(report.to_text() + "\n")
        write_kv_report(report.to_kv(), out_dir / "classification_summary.txt")
        print(report.to_text())
        return 0

    if command == "evaluate":
        from .evaluation import write_kv_report
        from .trainer import train_classifier

        texts = []
        pairs = []
        for representation in ("raw", "astra"):
            config.downstream.representation = representation
            report = train_classifier(slides, model, config)
            texts.append(report.to_text())
            pairs += [
                (f"{representation}.{k}", v) for k, v in report.to_kv()
            ]
        (out_dir / "evaluate_report.txt").write_text("\n\n".join(texts) + "\n")
        write_kv_report(pairs, out_dir / "evaluate_summary.txt")
        print("\n\n".join(texts))
        return 0

    if command == "localize":
        from .evaluation import localize, stratified_summary, write_kv_report
        from .text import build_prompt, get_text_encoder
        from .viz import save_heatmap

        encoder_fn = get_text_encoder(config.align.text_encoder, seed=config.align.text_seed)
        input_model = config.input_model_id(config.localize.input_model)
        results = []
        for grid in slides:
            if grid.record is None:
                continue
            prompt_vec = encoder_fn.encode(build_prompt(grid.record))
            res = localize(
                grid,
                model,
                prompt_vec,
                threshold=config.localize.threshold,
                input_model=input_model,
                exclusion_floor=config.localize.exclusion_floor,
            )
            results.append(res)
            if config.localize.emit_heatmaps:
                save_heatmap(res, grid, out_dir / f"{grid.slide_id}_heatmap.png",
                             cell_px=config.localize.cell_px)
        report = stratified_summary(results, exclusion_floor=config.localize.exclusion_floor)
        (out_dir / "dice_report.txt").write_text(report.to_text() + "\n")
        write_kv_report(report.to_kv(), out_dir / "dice_summary.txt")
        print(report.to_text())
        return 0

    if command == "routing-map":
        from .routing import expert_map, top_tiles_per_expert
        from .viz import save_exemplar_table, save_expert_map

        input_model = config.input_model_id(config.localize.input_model)
        maps = [expert_map(grid, model, input_model=input_model) for grid in slides]
        for emap in maps:
            save_expert_map(emap, out_dir / f"{emap.slide_id}_experts.png",
                            cell_px=config.routing.cell_px)
        exemplars = top_tiles_per_expert(
            maps, m=config.routing.top_tiles, margin_floor=config.routing.margin_floor
        )
        save_exemplar_table(exemplars, out_dir / "expert_exemplars.tsv")
        print(f"wrote {len(maps)} expert maps to {out_dir}")
        return 0

    raise ValueError(f"unknown command {command!r}")


if __name__ == "__main__":
    sys.exit(main())
