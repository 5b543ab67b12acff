"""Command line interface.

Subcommands cover the whole desk workflow: synthesize a corpus, inspect
manifest statistics, train and evaluate models, generate single answers,
clean inconsistent annotations, run the review service, and export reviewed
rationales. Every failure maps to a stable exit code so scripts can branch:

    0  success
    2  usage errors (argument parsing)
    3  malformed data or manifests
    4  unreadable or mismatched checkpoints
    5  training diverged
    6  transport or concurrency conflicts
    1  anything else
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from . import data as dat
from .annotate import (
    AnnotationStore,
    HttpGeneratorClient,
    MockGeneratorClient,
    detect_inconsistencies,
    record_from_sample,
)
from .errors import (
    CheckpointError,
    DataError,
    DivergenceError,
    RavqaError,
    TransportError,
    VersionConflictError,
)
from .metrics import evaluate_model
from .model import GatedFusionModel, ModelConfig
from .service import make_server, seed_demo
from .strategies import Strategy
from .training import TrainConfig, fit, fit_two_stage, parse_config_file, preset_epochs, resume

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_DIVERGED = 5
EXIT_CONFLICT = 6


def _stage2_path(path: Path) -> Path:
    return path.with_name(f"{path.stem}.stage2{path.suffix}")


def _load_rows(manifest: str, split: str | None = None) -> list[dat.VqaSample]:
    rows = dat.load_manifest(manifest)
    if split is not None:
        rows = [s for s in rows if s.split == split]
        if not rows:
            raise DataError(f"{manifest}: no rows with split {split!r}")
    return rows


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    samples = dat.synth_generate(args.n, seed=args.seed, grid=args.grid,
                                 open_fraction=args.open_fraction)
    dat.save_manifest(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    paths = list(args.manifests)
    if args.bundled:
        paths.extend(str(p) for _, p in sorted(dat.fixture_manifest_paths().items()))
    if not paths:
        raise DataError("stats needs manifest paths or --bundled")
    samples: list[dat.VqaSample] = []
    for path in paths:
        samples.extend(dat.load_manifest(path))
    print(dat.dataset_stats(samples).to_text())
    return EXIT_OK


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def _merge_train_config(args) -> TrainConfig:
    """defaults < config-file preset < config file < CLI preset < CLI flags."""
    values = {f.name: f.default for f in fields(TrainConfig)}
    if args.config:
        from_file = parse_config_file(args.config)
        preset = from_file.pop("preset", None)
        if preset is not None:
            values["epochs"] = preset_epochs(preset)
        values.update(from_file)
    if args.preset:
        values["epochs"] = preset_epochs(args.preset)
    for key in _TRAIN_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return TrainConfig(**values)


def _save_model(model: GatedFusionModel, path: Path, vocab: dat.Vocab,
                strategy: str, stage: int | None) -> None:
    model.save(path, extra_meta={"vocab": vocab.tokens, "strategy": strategy, "stage": stage})
    print(f"saved: {path} (params={model.param_count()}, hash={model.param_hash()[:12]})")


def cmd_train(args) -> int:
    rows = _load_rows(args.manifest, split="train")
    vocab = dat.build_vocab(rows, min_count=args.min_count)
    out = Path(args.out)

    if args.resume:
        model, report = resume(args.resume, vocab, rows, epochs=args.epochs)
        print(f"resumed: {args.resume}")
        print(f"trained: {report.echo()}")
        _save_model(model, out, vocab, report.strategy, report.stage)
        return EXIT_OK

    config = _merge_train_config(args)
    clip = "none" if config.grad_clip is None else f"{config.grad_clip:g}"
    print(
        f"config: strategy={config.strategy} epochs={config.epochs} "
        f"batch_size={config.batch_size} lr={config.lr:g} seed={config.seed} grad_clip={clip}"
    )

    def model_for(seed: int) -> GatedFusionModel:
        return GatedFusionModel(ModelConfig(
            vocab_size=len(vocab), d=args.d, n_max=args.n_max, m=args.m,
            enc_layers=args.enc_layers, dec_layers=args.dec_layers,
            heads=args.heads, image_size=args.image_size, seed=seed,
        ))

    if Strategy(config.strategy) is Strategy.TWO_STAGE:
        stage1, stage2 = model_for(config.seed), model_for(config.seed + 1)
        r1, r2 = fit_two_stage(stage1, stage2, vocab, rows, config)
        print(f"trained: {r1.echo()}")
        print(f"trained: {r2.echo()}")
        _save_model(stage1, out, vocab, config.strategy, 1)
        _save_model(stage2, _stage2_path(out), vocab, config.strategy, 2)
    else:
        model = model_for(config.seed)
        report = fit(model, vocab, rows, config, checkpoint_path=args.checkpoint)
        print(f"trained: {report.echo()}")
        _save_model(model, out, vocab, config.strategy, None)
    return EXIT_OK


def _load_models(model_path: str, model2_path: str | None, strategy_override: str | None):
    """Model(s) plus vocab and strategy recorded at training time."""
    model, meta = GatedFusionModel.load(model_path)
    tokens = meta.get("vocab")
    if not isinstance(tokens, list):
        raise CheckpointError(f"{model_path}: no vocabulary stored; retrain with this tool")
    vocab = dat.Vocab(tokens)
    strategy = Strategy(strategy_override or meta.get("strategy") or Strategy.NO_RATIONALE.value)
    if strategy is not Strategy.TWO_STAGE:
        return model, vocab, strategy
    second = model2_path or str(_stage2_path(Path(model_path)))
    if not Path(second).exists():
        raise CheckpointError(f"two-stage evaluation needs the answer-stage model; {second} not found")
    stage2, meta2 = GatedFusionModel.load(second)
    if meta2.get("vocab") != tokens:
        raise CheckpointError("the two stages were trained with different vocabularies")
    return (model, stage2), vocab, strategy


def cmd_eval(args) -> int:
    models, vocab, strategy = _load_models(args.model, args.model2, args.strategy)
    rows = _load_rows(args.manifest, split=args.split)
    if args.limit:
        rows = rows[: args.limit]
    report, _ = evaluate_model(models, vocab, rows, strategy)
    print(report.to_kv() if args.kv else report.to_text())
    return EXIT_OK


def cmd_generate(args) -> int:
    from .strategies import generate, two_stage_generate

    models, vocab, strategy = _load_models(args.model, args.model2, args.strategy)
    rows = dat.load_manifest(args.manifest)
    matches = [s for s in rows if s.id == args.id]
    if not matches:
        raise DataError(f"{args.manifest}: no sample with id {args.id!r}")
    sample = matches[0]
    if strategy is Strategy.TWO_STAGE:
        out = two_stage_generate(models[0], models[1], vocab, sample.question, sample.grid())
    else:
        out = generate(models, vocab, strategy, sample.question, sample.grid())
    print(f"question: {sample.question}")
    print(f"answer: {out.answer}")
    if out.rationale is not None:
        print(f"rationale: {out.rationale}")
    print(f"raw: {out.raw}")
    print(f"parse_ok: {str(out.parse_ok).lower()}")
    return EXIT_OK


def cmd_annotate_clean(args) -> int:
    samples = dat.load_manifest(args.manifest)
    findings = detect_inconsistencies([record_from_sample(s) for s in samples])
    dropped = {rid for f in findings for rid in f.record_ids}
    for finding in findings:
        print(f"conflict [{finding.rule}]: {finding.message}")
    kept = [s for s in samples if s.id not in dropped]
    dat.save_manifest(args.out, kept)
    print(f"kept {len(kept)} of {len(samples)} samples -> {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    store = AnnotationStore(args.log)
    if args.demo:
        seed_demo(store, args.demo, seed=args.seed)
    if args.generator_url:
        client = HttpGeneratorClient(args.generator_url)
    elif args.generator_mock:
        client = MockGeneratorClient(seed=args.seed)
    else:
        client = None
    server = make_server(store, client, host=args.host, port=args.port)
    print(f"listening on http://{args.host}:{server.port} ({len(store)} records)", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def cmd_export(args) -> int:
    log = Path(args.log)
    if not log.exists():
        raise DataError(f"no event log at {log}")
    store = AnnotationStore(log)
    samples = store.export_annotated(args.mode)
    dat.save_manifest(args.out, samples)
    print(f"exported {len(samples)} annotated samples ({args.mode}) to {args.out}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ravqa",
        description="Rationale-augmented visual question answering workbench.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic corpus manifest")
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--n", required=True, type=int, metavar="N")
    p.add_argument("--seed", type=int, default=0, metavar="N")
    p.add_argument("--grid", type=int, default=4, metavar="N")
    p.add_argument("--open-fraction", type=float, default=0.0, metavar="X")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("stats", help="print dataset statistics for manifests")
    p.add_argument("manifests", nargs="*", metavar="MANIFEST")
    p.add_argument("--bundled", action="store_true", help="include the bundled manifests")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model on a manifest's train split")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--epochs", type=int, metavar="N")
    p.add_argument("--batch-size", dest="batch_size", type=int, metavar="N")
    p.add_argument("--lr", type=float, metavar="X")
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--grad-clip", dest="grad_clip", type=float, metavar="X")
    p.add_argument("--stage2-lr", dest="stage2_lr", type=float, metavar="X")
    p.add_argument("--stage2-epochs", dest="stage2_epochs", type=int, metavar="N")
    p.add_argument("--preset", metavar="NAME", help="dataset epoch preset")
    p.add_argument("--config", metavar="PATH", help="key=value settings file")
    p.add_argument("--checkpoint", metavar="PATH", help="write a resumable checkpoint each epoch")
    p.add_argument("--resume", metavar="PATH", help="continue from a checkpoint")
    p.add_argument("--min-count", dest="min_count", type=int, default=1, metavar="N")
    p.add_argument("--d", type=int, default=32, metavar="N")
    p.add_argument("--n-max", dest="n_max", type=int, default=24, metavar="N")
    p.add_argument("--m", type=int, default=4, metavar="N")
    p.add_argument("--heads", type=int, default=4, metavar="N")
    p.add_argument("--image-size", dest="image_size", type=int, default=4, metavar="N")
    p.add_argument("--enc-layers", dest="enc_layers", type=int, default=1, metavar="N")
    p.add_argument("--dec-layers", dest="dec_layers", type=int, default=1, metavar="N")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained model on a manifest split")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--model2", metavar="PATH", help="answer-stage model (two-stage)")
    p.add_argument("--split", default="test", metavar="NAME")
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--limit", type=int, metavar="N")
    p.add_argument("--kv", action="store_true", help="machine-readable key=value lines")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="answer one manifest sample with a trained model")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--model2", metavar="PATH")
    p.add_argument("--strategy", choices=[s.value for s in Strategy])
    p.add_argument("--id", required=True, metavar="SAMPLE_ID")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("annotate-clean", help="drop answer-inconsistent samples from a manifest")
    p.add_argument("--manifest", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_annotate_clean)

    p = sub.add_parser("serve", help="run the annotation review HTTP service")
    p.add_argument("--host", default="127.0.0.1", metavar="HOST")
    p.add_argument("--port", type=int, default=8765, metavar="N")
    p.add_argument("--log", metavar="PATH", help="append-only event log (omit for in-memory)")
    p.add_argument("--demo", type=int, default=0, metavar="N", help="seed N synthetic records")
    p.add_argument("--seed", type=int, default=0, metavar="N")
    p.add_argument("--generator-mock", dest="generator_mock", action="store_true")
    p.add_argument("--generator-url", dest="generator_url", metavar="URL")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("export", help="write reviewed rationales from an event log")
    p.add_argument("--log", required=True, metavar="PATH")
    p.add_argument("--out", required=True, metavar="PATH")
    p.add_argument("--mode", choices=["strict", "permissive"], default="strict")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (TransportError, VersionConflictError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFLICT
    except RavqaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
