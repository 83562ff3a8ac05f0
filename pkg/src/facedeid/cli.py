"""Command-line entry point.

Subcommands cover the whole workflow: synth-data, train-gen, train-embed,
build-gallery, deidentify, evaluate, report.  Every subcommand accepts
--config/--seed/--threads/--out plus --print (echo the effective config
and exit), and is idempotent: rerunning with identical inputs and seeds
reproduces bit-identical artifacts.
"""

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import corpus as corpus_mod
from . import encoder as encoder_mod
from . import evaluation as eval_mod
from . import generator as generator_mod
from . import pipeline as pipeline_mod
from .config import ConfigError, RunConfig
from .geometry import RobustFitConfig
from .imgops import crop, load_image, save_image
from .layers import TrainConfig
from .store import CheckpointError

logger = logging.getLogger(__name__)

COMMANDS = (
    "synth-data",
    "train-gen",
    "train-embed",
    "build-gallery",
    "deidentify",
    "evaluate",
    "report",
)


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="path to a JSON run configuration")
    sub.add_argument("--seed", type=int, help="override every section seed")
    sub.add_argument("--threads", type=int, default=1, help="worker thread cap")
    sub.add_argument("--out", help="override paths.workdir")
    sub.add_argument(
        "--print", action="store_true", dest="print_config",
        help="echo the effective configuration as JSON and exit",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="facedeid",
        description="Face deidentification pipeline and verification harness.",
    )
    sub = parser.add_subparsers(dest="command")
    helps = {
        "synth-data": "generate the procedural face corpus with manifests and sidecars",
        "train-gen": "train the surrogate-face generator on the corpus",
        "train-embed": "train the identity-embedding encoder on the corpus",
        "build-gallery": "build the gallery of identity templates",
        "deidentify": "deidentify a directory of frames with .faces sidecars",
        "evaluate": "run the verification experiment grid and write the report",
        "report": "summarize an emitted report and rebuild the ROC plot",
    }
    for name in COMMANDS:
        _add_common_flags(sub.add_parser(name, help=helps[name]))
    return parser


def _effective_config(args) -> RunConfig:
    cfg = config_mod.load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.override_seed(args.seed)
    if args.out is not None:
        cfg.override_workdir(args.out)
    return cfg


def _pipeline_config(cfg: RunConfig) -> pipeline_mod.PipelineConfig:
    p = cfg.pipeline
    return pipeline_mod.PipelineConfig(
        k=p.k,
        weight_mode=p.weight_mode,
        expression=p.expression,
        skin_bounds=pipeline_mod.SkinBounds(tuple(p.skin_lower), tuple(p.skin_upper)),
        morph_radius=p.morph_radius,
        robust=RobustFitConfig(
            iterations=p.ransac_iterations,
            inlier_threshold=p.ransac_threshold,
            seed=p.ransac_seed,
        ),
        identity_lock=p.identity_lock,
    )


def _train_config(section) -> TrainConfig:
    return TrainConfig(
        epochs=section.epochs,
        batch_size=section.batch_size,
        learning_rate=section.learning_rate,
        seed=section.seed,
    )


def _read_corpus(paths) -> list:
    return corpus_mod.read_manifest(paths["corpus_dir"] / "manifest.csv")


def cmd_synth_data(cfg: RunConfig, args) -> None:
    paths = cfg.resolved_paths()
    samples = corpus_mod.generate_corpus(
        seed=cfg.corpus.seed,
        num_identities=cfg.corpus.identities,
        expressions=tuple(cfg.corpus.expressions),
        poses=tuple(cfg.corpus.poses),
        illuminations=tuple(cfg.corpus.illuminations),
    )
    manifest = corpus_mod.write_corpus(samples, paths["corpus_dir"])
    lines = manifest.read_text().splitlines()[1:]
    for sample, line in zip(samples, lines):
        image_name = line.split(",", 1)[0]
        sidecar = paths["corpus_dir"] / (image_name + ".faces")
        pipeline_mod.write_annotation(
            pipeline_mod.annotation_for_sample(sample), sidecar
        )
    logger.info("wrote %d samples to %s", len(samples), paths["corpus_dir"])


def cmd_train_gen(cfg: RunConfig, args) -> None:
    paths = cfg.resolved_paths()
    samples = _read_corpus(paths)
    train_set = corpus_mod.build_generator_corpus(samples)
    model, curve = generator_mod.train_generator(train_set, _train_config(cfg.generator))
    paths["generator_checkpoint"].parent.mkdir(parents=True, exist_ok=True)
    generator_mod.save_generator(model, paths["generator_checkpoint"])
    logger.info(
        "saved generator (%d params, final loss %.6f) to %s",
        model.param_count, model.final_loss, paths["generator_checkpoint"],
    )


def cmd_train_embed(cfg: RunConfig, args) -> None:
    paths = cfg.resolved_paths()
    samples = _read_corpus(paths)
    train_set = corpus_mod.build_encoder_corpus(samples)
    model = encoder_mod.train_encoder(train_set, _train_config(cfg.encoder))
    paths["encoder_checkpoint"].parent.mkdir(parents=True, exist_ok=True)
    encoder_mod.save_encoder(model, paths["encoder_checkpoint"])
    logger.info(
        "saved encoder (accuracy %.3f) to %s",
        model.final_accuracy, paths["encoder_checkpoint"],
    )


def cmd_build_gallery(cfg: RunConfig, args) -> None:
    paths = cfg.resolved_paths()
    samples = _read_corpus(paths)
    model = encoder_mod.load_encoder(paths["encoder_checkpoint"])
    frontal, _ = corpus_mod.split_by_pose(samples)
    groups: dict[str, list] = {}
    for s in frontal:
        groups.setdefault(s.identity, []).append(crop(s.image, s.context))
    ordered = {identity: groups[identity] for identity in sorted(groups)}
    db = encoder_mod.build_gallery(model, ordered)
    paths["gallery"].parent.mkdir(parents=True, exist_ok=True)
    encoder_mod.save_featdb(db, paths["gallery"])
    logger.info("saved gallery of %d identities to %s", db.size, paths["gallery"])


def _load_models(paths):
    generator = generator_mod.load_generator(paths["generator_checkpoint"])
    enc = encoder_mod.load_encoder(paths["encoder_checkpoint"])
    db = encoder_mod.load_featdb(paths["gallery"])
    return enc, db, generator


def cmd_deidentify(cfg: RunConfig, args) -> None:
    paths = cfg.resolved_paths()
    frames_dir = paths["frames_dir"] or paths["corpus_dir"]
    out_dir = paths["deidentified_dir"]
    out_dir.mkdir(parents=True, exist_ok=True)
    enc, db, generator = _load_models(paths)
    pipe_cfg = _pipeline_config(cfg)
    frame_paths = sorted(
        p for p in Path(frames_dir).iterdir()
        if p.suffix in (".ppm", ".pgm") and p.with_name(p.name + ".faces").exists()
    )
    if not frame_paths:
        raise FileNotFoundError(f"no frames with .faces sidecars in {frames_dir}")

    def _process(path: Path):
        frame = load_image(path)
        annotation = pipeline_mod.read_annotation(path.with_name(path.name + ".faces"))
        return pipeline_mod.deidentify_frame(frame, annotation, enc, db, generator, pipe_cfg)

    workers = max(1, args.threads)
    if workers == 1 or cfg.pipeline.identity_lock:
        outputs = [_process(p) for p in frame_paths]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_process, frame_paths))
    for path, out in zip(frame_paths, outputs):
        save_image(out, out_dir / path.name)
    logger.info("deidentified %d frames into %s", len(frame_paths), out_dir)


def cmd_evaluate(cfg: RunConfig, args) -> None:
    paths = cfg.resolved_paths()
    samples = _read_corpus(paths)
    enc, db, generator = _load_models(paths)
    pipe_cfg = _pipeline_config(cfg)
    ev = cfg.evaluation
    results = []
    cache: dict = {}
    for cell in ev.experiments:
        for context in ev.contexts:
            spec = eval_mod.ExperimentSpec(
                probe_condition=cell["probe"],
                reference_split=cell.get("reference", "original"),
                parrot=cell.get("parrot", False),
                context_mode=context,
                folds=ev.folds,
                legit_pairs=ev.legit_pairs,
                impostor_pairs=ev.impostor_pairs,
                seed=ev.seed,
            )
            results.append(
                eval_mod.run_experiment(
                    spec, samples, enc, db, generator, pipe_cfg, probe_cache=cache
                )
            )
    metrics_path = eval_mod.write_report(results, paths["report_dir"])
    logger.info("wrote report to %s", metrics_path.parent)


def cmd_report(cfg: RunConfig, args) -> None:
    paths = cfg.resolved_paths()
    report_dir = paths["report_dir"]
    metrics = eval_mod.read_metrics(report_dir / "metrics.csv")
    print(f"{'experiment':<28} {'context':<10} {'EER':>14} {'VER-1':>14} {'AUC':>14}")
    results = []
    for (name, context), rec in metrics.items():
        mean, std = rec["mean"], rec["std"]
        print(
            f"{name:<28} {context:<10}"
            f" {mean['eer'] * 100:6.1f}+-{std['eer'] * 100:<5.1f}"
            f" {mean['ver1'] * 100:6.1f}+-{std['ver1'] * 100:<5.1f}"
            f" {mean['auc']:6.3f}+-{std['auc']:<6.3f}"
        )
        folds = sorted(rec["folds"])
        roc0 = report_dir / "roc" / f"{name}__{context}__fold{folds[0]}.csv"
        if roc0.is_file():
            points = np.array(
                [
                    [float(v) for v in line.split(",")]
                    for line in roc0.read_text().splitlines()[1:]
                ]
            )
            summary = eval_mod.MetricsSummary(
                eer=np.array([rec["folds"][f]["eer"] for f in folds]),
                ver1=np.array([rec["folds"][f]["ver1"] for f in folds]),
                auc=np.array([rec["folds"][f]["auc"] for f in folds]),
            )
            results.append(
                eval_mod.ExperimentResult(
                    name=name, context_mode=context, summary=summary, rocs=[points]
                )
            )
    if results:
        eval_mod.write_roc_plot(results, report_dir / "roc_plot.svg")


_DISPATCH = {
    "synth-data": cmd_synth_data,
    "train-gen": cmd_train_gen,
    "train-embed": cmd_train_embed,
    "build-gallery": cmd_build_gallery,
    "deidentify": cmd_deidentify,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles --help and usage errors
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        cfg = _effective_config(args)
        if args.print_config:
            print(config_mod.dump_config(cfg))
            return 0
        _DISPATCH[args.command](cfg, args)
    except (
        ConfigError,
        CheckpointError,
        corpus_mod.ManifestError,
        pipeline_mod.AnnotationError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"facedeid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
