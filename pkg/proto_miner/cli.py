"""
Command-line front end of `proto_miner`.

Subcommands: ``synth``, ``sparsify``, ``cluster``, ``mine``, ``refine``,
``stats``, ``export-bank`` and ``sweep``. Every run is deterministic given
its configuration, seed and inputs; exit code 0 means success, 1 a
validation or I/O error and 2 a broken internal invariant.
"""
from __future__ import annotations
import argparse
from dataclasses import dataclass
import logging
import sys
from pathlib import Path
import numpy as np
import pandas as pd
from proto_miner import settings
from proto_miner.data_io import (Corpus, SynthSpec, export_bank_csv,
                                 label_path, load_corpus,
                                 read_bank, read_labels, read_prediction_dir,
                                 save_corpus, sparsify, synth_corpus,
                                 write_bank, write_labels)
from proto_miner.label_mine import mine_prototype_labels
from proto_miner.label_stats import (evaluate_corpus, family_key,
                                     label_histogram, report_to_text,
                                     threshold_sweep)
from proto_miner.model import (LabelSet, MiningConfig, normalize_features,
                               validate_config)
from proto_miner.proto_bank import (PrototypeBank, init_bank, is_warmed_up,
                                    process_scene)
from proto_miner.refine import (cooperate, make_pseudo_labels,
                                predictions_from_proposals)
from proto_miner.utils import (ConfigError, DimensionError, InvariantError,
                               parallel_map, read_config_file, setup_logging)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CliInvocation:
    """
    The parts of a command line shared by every subcommand.
    """

    subcommand: str
    config: str | None
    corpus: str | None
    out: str | None
    seed: int | None
    verbosity: int

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> CliInvocation:
        return cls(subcommand=args.command, config=args.config,
                   corpus=getattr(args, "corpus", None),
                   out=getattr(args, "out", None), seed=args.seed,
                   verbosity=args.verbose)


def _format_float(value: float) -> str:
    return f"{value:.4f}"


def load_config(args: argparse.Namespace,
                corpus: Corpus | None = None) -> MiningConfig:
    """
    Builds the validated configuration of a run.

    File values override the defaults, flags override the file and
    ``--seed`` overrides both. K and C come from the corpus manifest when a
    corpus is given.

    Raises
    ------
    ConfigError
        On an invalid configuration or a K/C clash with the corpus.
    """
    raw = read_config_file(args.config) if args.config else {}
    cfg = MiningConfig.from_mapping(raw)
    if corpus is not None:
        manifest = corpus.manifest
        for name, value in (("K", manifest.K), ("C", manifest.C)):
            if name in raw and getattr(cfg, name) != value:
                logger.info(f"Configuration {name} clashes with the corpus")
                raise ConfigError(f"configuration {name}="
                                  f"{getattr(cfg, name)} disagrees with the "
                                  f"corpus {name}={value}")
        cfg = cfg.with_overrides(K=manifest.K, C=manifest.C)
    cfg = cfg.with_overrides(
        seed=args.seed,
        collision_metric=getattr(args, "collision_metric", None),
        recall_iou_thresh=getattr(args, "iou_thresh", None))
    return validate_config(cfg)


def _load_bank(path: str, cfg: MiningConfig) -> PrototypeBank:
    bank = read_bank(path)
    if bank.shape[0] != cfg.K or bank.shape[2] != cfg.C:
        raise DimensionError(f"bank {path} has K={bank.shape[0]}, "
                             f"C={bank.shape[2]}; the corpus has K={cfg.K}, "
                             f"C={cfg.C}")
    return bank


def _check_unit_norm(bank: PrototypeBank) -> None:
    norms = np.linalg.norm(bank.prototypes, axis=-1)
    if np.any(np.abs(norms - 1.0) > settings.NORM_TOL):
        raise InvariantError("a prototype left the unit sphere")


def _warn_warmup(bank: PrototypeBank, cfg: MiningConfig) -> None:
    if not is_warmed_up(bank, cfg):
        logger.warning(f"Bank at iteration {bank.iteration} is still warming "
                       f"up ({cfg.warmup_iters} scenes needed); no prototype "
                       f"labels will be written")


def _predictions(args: argparse.Namespace, corpus: Corpus) -> list:
    if args.predictions:
        found = read_prediction_dir(args.predictions, corpus.scene_ids,
                                    corpus.manifest.K)
    else:
        found = corpus.predictions or {}
    return [found[scene.scene_id] if scene.scene_id in found
            else predictions_from_proposals(scene)
            for scene in corpus.scenes]


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(n_scenes=args.n_scenes, n_objects=args.n_objects,
                     n_classes=args.n_classes, feature_dim=args.feature_dim,
                     feature_noise=args.feature_noise,
                     score_noise=args.score_noise, rotated=args.rotated,
                     centerness=args.centerness)
    seed = args.seed if args.seed is not None else settings.SEED
    corpus = synth_corpus(spec, seed)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.scenes)} scenes (K={spec.n_classes}, "
          f"C={spec.feature_dim}) to {args.out}")
    return settings.EXIT_OK


def cmd_sparsify(args: argparse.Namespace) -> int:
    """
    Keeps a few ground-truth objects per scene as sparse labels and prints
    the per-class label histogram.
    """
    corpus = load_corpus(args.corpus, args.jobs)
    cfg = load_config(args, corpus)
    sparse = sparsify(corpus, args.mode, cfg.seed, args.n)
    save_corpus(sparse, args.out)
    histogram = label_histogram(sparse.scenes, corpus.manifest.class_names)
    print(histogram.to_string())
    return settings.EXIT_OK


def cmd_cluster(args: argparse.Namespace) -> int:
    """
    Streams the scenes through class-aware prototype clustering for a number
    of epochs and writes the bank.
    """
    corpus = load_corpus(args.corpus, args.jobs)
    cfg = load_config(args, corpus)
    bank = _load_bank(args.bank, cfg) if args.bank else init_bank(cfg)
    if not corpus.scenes:
        logger.warning("Empty corpus; the bank is written unchanged")
    scenes = [normalize_features(scene) for scene in corpus.scenes]
    for epoch in range(args.epochs):
        logger.info(f"Clustering epoch {epoch + 1}/{args.epochs}")
        for scene in scenes:
            bank, _ = process_scene(bank, scene, cfg)
    _check_unit_norm(bank)
    write_bank(bank, args.out)
    print(f"iteration {bank.iteration} warmed_up "
          f"{str(is_warmed_up(bank, cfg)).lower()}")
    counts = pd.Series(bank.class_update_counts,
                       index=corpus.manifest.class_names, name="updates")
    print(counts.to_string())
    return settings.EXIT_OK


def _write_label_sets(corpus: Corpus, label_sets: list[LabelSet],
                      out: str) -> None:
    for scene, labels in zip(corpus.scenes, label_sets, strict=True):
        write_labels(labels, label_path(out, scene.scene_id))
    totals = {family: sum(ls.counts()[family] for ls in label_sets)
              for family in settings.FAMILIES}
    print(" ".join(f"{family} {count}" for family, count in totals.items()))


def cmd_mine(args: argparse.Namespace) -> int:
    """
    Writes the prototype labels of every scene and nothing else; a bank
    still warming up gives empty label files.
    """
    corpus = load_corpus(args.corpus, args.jobs)
    cfg = load_config(args, corpus)
    bank = _load_bank(args.bank, cfg)
    _warn_warmup(bank, cfg)

    def mine(scene):
        result = mine_prototype_labels(normalize_features(scene), bank, cfg)
        return LabelSet(prototype=result.kept)

    _write_label_sets(corpus, parallel_map(mine, corpus.scenes, args.jobs),
                      args.out)
    return settings.EXIT_OK


def cmd_refine(args: argparse.Namespace) -> int:
    """
    Filters detector predictions into pseudo labels and merges them with the
    sparse and prototype labels of every scene.
    """
    corpus = load_corpus(args.corpus, args.jobs)
    cfg = load_config(args, corpus)
    bank = _load_bank(args.bank, cfg)
    _warn_warmup(bank, cfg)
    pairs = list(zip(corpus.scenes, _predictions(args, corpus)))

    def refine(pair):
        scene = normalize_features(pair[0])
        pseudo = make_pseudo_labels(pair[1], scene, cfg)
        return cooperate(scene, pseudo, bank, cfg)

    _write_label_sets(corpus, parallel_map(refine, pairs, args.jobs),
                      args.out)
    return settings.EXIT_OK


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)
    else:
        print(text, end="")


def cmd_stats(args: argparse.Namespace) -> int:
    """
    Prints the quality report of a label directory.
    """
    corpus = load_corpus(args.corpus, args.jobs)
    cfg = load_config(args, corpus)
    families = None
    if args.families is not None:
        families = [f.strip() for f in args.families.split(",") if f.strip()]
        family_key(families)
    label_sets = [read_labels(label_path(args.labels, scene_id))
                  for scene_id in corpus.scene_ids]
    report = evaluate_corpus(corpus.scenes, label_sets, cfg.K,
                             corpus.manifest.class_names,
                             cfg.recall_iou_thresh, args.jobs)
    text = report_to_text(report)
    if families is not None:
        text += (f"mAR {family_key(families)} "
                 f"{_format_float(report.mar(families))}\n")
    _emit(text, args.out)
    return settings.EXIT_OK


def cmd_export_bank(args: argparse.Namespace) -> int:
    bank = read_bank(args.bank)
    if args.corpus:
        names = load_corpus(args.corpus).manifest.class_names
    else:
        names = [f"class_{k}" for k in range(bank.shape[0])]
    table = export_bank_csv(bank, names, args.out)
    print(f"wrote {len(table)} prototypes to {args.out}")
    return settings.EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """
    Prints label counts and recall for every swept threshold value.
    """
    corpus = load_corpus(args.corpus, args.jobs)
    cfg = load_config(args, corpus)
    bank = _load_bank(args.bank, cfg)
    _warn_warmup(bank, cfg)
    scenes = [normalize_features(scene) for scene in corpus.scenes]
    predictions = _predictions(args, corpus)
    parameters = (["alpha_pro", "alpha_cls"] if args.parameter == "both"
                  else [args.parameter])
    sections = []
    for parameter in parameters:
        table = threshold_sweep(scenes, predictions, bank, cfg, parameter,
                                jobs=args.jobs)
        sections.append(f"# {parameter}\n"
                        + table.to_string(index=False,
                                          float_format=_format_float))
    _emit("\n\n".join(sections) + "\n", args.out)
    return settings.EXIT_OK


class CliParser(argparse.ArgumentParser):
    """
    Argument parser raising `ConfigError` on a bad command line.
    """

    def error(self, message: str):
        logger.info(f"Bad command line: {message}")
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    """
    Builds the argument parser with one sub-parser per subcommand.
    """
    common = CliParser(add_help=False)
    common.add_argument("--config", help="Flat key = value configuration")
    common.add_argument("--seed", type=int, default=None,
                        help="Seed, overrides the configuration")
    common.add_argument("--jobs", type=int, default=1,
                        help="Worker threads over scenes")
    common.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for info, -vv for debug messages")
    common.add_argument("--log-file", default=None, help="Log file path")

    parser = CliParser(
        prog="proto-miner",
        description="Prototype label mining for sparse-supervised 3D "
                    "detection")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", parents=[common],
                                help="Generate a synthetic corpus")
    synth.add_argument("--out", required=True, help="Corpus directory")
    synth.add_argument("--n-scenes", type=int, default=100)
    synth.add_argument("--n-objects", type=int, default=12)
    synth.add_argument("--n-classes", type=int, default=4)
    synth.add_argument("--feature-dim", type=int, default=16)
    synth.add_argument("--feature-noise", type=float, default=0.3)
    synth.add_argument("--score-noise", type=float, default=0.03)
    synth.add_argument("--rotated", action="store_true",
                       help="Yawed boxes")
    synth.add_argument("--centerness", action="store_true",
                       help="Attach centerness to proposals")
    synth.set_defaults(handler=cmd_synth)

    sparse = commands.add_parser("sparsify", parents=[common],
                                 help="Build a sparse split")
    sparse.add_argument("--corpus", required=True)
    sparse.add_argument("--out", required=True, help="Output corpus")
    sparse.add_argument("--mode", choices=settings.SPARSIFY_MODES,
                        default=settings.SPARSIFY_MODES[0])
    sparse.add_argument("--n", type=int, default=1,
                        help="Objects per scene for n_per_scene")
    sparse.set_defaults(handler=cmd_sparsify)

    cluster = commands.add_parser("cluster", parents=[common],
                                  help="Class-aware prototype clustering")
    cluster.add_argument("--corpus", required=True)
    cluster.add_argument("--out", required=True, help="Bank file")
    cluster.add_argument("--bank", help="Bank file to resume from")
    cluster.add_argument("--epochs", type=int, default=1)
    cluster.set_defaults(handler=cmd_cluster)

    for name, handler, text in (
            ("mine", cmd_mine, "Prototype label matching"),
            ("refine", cmd_refine, "Multi-label cooperative refinement"),
            ("sweep", cmd_sweep, "Threshold sweep")):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument("--corpus", required=True)
        sub.add_argument("--bank", required=True)
        sub.add_argument("--out", required=name != "sweep")
        if name != "mine":
            sub.add_argument("--predictions",
                             help="Directory of <scene_id>.jsonl predictions")
            sub.add_argument("--collision-metric",
                             choices=settings.COLLISION_METRICS)
        if name == "sweep":
            sub.add_argument("--parameter", default="both",
                             choices=["alpha_pro", "alpha_cls", "both"])
            sub.add_argument("--iou-thresh", type=float)
        sub.set_defaults(handler=handler)

    stats = commands.add_parser("stats", parents=[common],
                                help="Label quality report")
    stats.add_argument("--corpus", required=True)
    stats.add_argument("--labels", required=True, help="Label directory")
    stats.add_argument("--families",
                       help="Comma-separated families for an extra mAR line")
    stats.add_argument("--iou-thresh", type=float)
    stats.add_argument("--out", help="Report file, standard output if unset")
    stats.set_defaults(handler=cmd_stats)

    export = commands.add_parser("export-bank", parents=[common],
                                 help="Dump prototypes to CSV")
    export.add_argument("--bank", required=True)
    export.add_argument("--out", required=True, help="CSV file")
    export.add_argument("--corpus", help="Corpus giving the class names")
    export.set_defaults(handler=cmd_export_bank)
    return parser


def main(argv: list[str] | None = None) -> int:
    """
    Runs one subcommand and returns its exit code.

    Example
    -------
    >>> main(["cluster", "--corpus", "corpus", "--out", "bank.txt"])
    ... # doctest: +SKIP
    0
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return settings.EXIT_ERROR
    setup_logging(args.verbose, args.log_file)
    logger.debug(f"Running {CliInvocation.from_args(args)}")
    try:
        return args.handler(args)
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return settings.EXIT_INVARIANT
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return settings.EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
