# BSD 3-Clause License
#
# Copyright (c) 2022, the medvqa authors. All rights reserved.
# See the LICENSE file for the full license text.

"""cli.py: the medvqa command line"""

## IMPORTS

import argparse
import glob
import logging
import os
import re
import sys
import typing as t
from dataclasses import dataclass, field

from termcolor import colored

import src.backbones as backbones
import src.contrastive as contrastive
import src.exporter as exporter
import src.harness as harness
import src.ingest as ingest
import src.settings as settings
from src.errors import ConfigError, ConfigInvalid, MissingFile, UsageError
from src.vqa_model import VqaModel

## Constants

SUBCOMMANDS = ("pretrain", "train", "evaluate", "analyze", "dump-examples", "plot-types")

DEFAULT_OUTPUT_DIR = "output"
"""Directory run directories are created in by default."""

LOG_FILE = "run.log"
"""Name of the full-detail log written into every run directory."""

DEFAULT_TOP_K = 5
"""Number of question types kept by the histogram subcommands."""

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

REQUIRED_SETTINGS = {
    "pretrain": ("data.caption_manifest", "assets.tokenizer_vocab", "assets.tokenizer_merges"),
    "train": ("data.vqa_root", "assets.word_embeddings"),
    "evaluate": ("data.vqa_root",),
    "analyze": ("data.vqa_root",),
    "dump-examples": ("data.vqa_root",),
    "plot-types": ("data.vqa_root",),
}
"""Settings each subcommand needs, checked before any work starts."""

CHECKPOINT_SETTINGS = {"pretrain": "pretrain.checkpoint_in", "train": "vqa.checkpoint_in"}
"""Checkpoint settings that, when null, make a subcommand read assets.weights_dir."""


# Command Line Arguments

class ArgumentParser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting on bad arguments."""

    def error(self, message: str):
        raise UsageError(message)


common = ArgumentParser(add_help=False)

common.add_argument("-c",
                    "--config",
                    metavar="FILE",
                    default=None,
                    help="read the settings from the given JSON file; any "
                         "given settings override the defaults. bin/config.json "
                         "is read when omitted.")

common.add_argument("-s",
                    "--set",
                    action="append",
                    default=[],
                    metavar="KEY=VALUE",
                    help="override one setting, addressed by its dotted key "
                         "(e.g. vqa.epochs=5). May be repeated.")

common.add_argument("-o",
                    "--output",
                    default=DEFAULT_OUTPUT_DIR,
                    metavar="DIR",
                    help="directory in which a new run directory is created.")

common.add_argument("--deterministic",
                    action="store_true",
                    default=False,
                    help="use deterministic algorithms only.")

common.add_argument("--seed",
                    type=int,
                    default=None,
                    metavar="INT",
                    help="seed for fine-tuning and of the first VQA repetition.")

common.add_argument("-v",
                    "--verbose",
                    action="store_true",
                    default=False,
                    help="print debug output to the console.")

common.add_argument("-q",
                    "--quiet",
                    action="store_true",
                    default=False,
                    help="print warnings and errors only.")

parser = ArgumentParser(
    prog="medvqa",
    description="Contrastive fine-tuning of visual encoders on radiology captions "
                "and medical visual question answering on top of them.")

subparsers = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

subparsers.add_parser("pretrain", parents=[common],
                      help="fine-tune a dual encoder on an image-caption manifest.")

subparsers.add_parser("train", parents=[common],
                      help="train and evaluate VQA models over seeded repetitions.")

evaluate_parser = subparsers.add_parser("evaluate", parents=[common],
                                        help="score VQA checkpoints on the test split.")
evaluate_parser.add_argument("--checkpoint",
                             action="append",
                             default=[],
                             metavar="FILE",
                             help="VQA checkpoint to evaluate. May be repeated to "
                                  "compare several models. Defaults to the final "
                                  "checkpoints of the latest train run in the output "
                                  "directory.")

analyze_parser = subparsers.add_parser("analyze", parents=[common],
                                       help="report split overlap and question types.")

dump_parser = subparsers.add_parser("dump-examples", parents=[common],
                                    help="write per-question predictions to CSV.")
dump_parser.add_argument("--checkpoint",
                         action="append",
                         default=[],
                         metavar="FILE",
                         help="VQA checkpoint to predict with. May be repeated. "
                              "Defaults as for evaluate.")
dump_parser.add_argument("--failures-only",
                         action="store_true",
                         default=False,
                         help="keep only incorrectly answered questions; with "
                              "several checkpoints, also write the questions "
                              "all of them got wrong.")

plot_parser = subparsers.add_parser("plot-types", parents=[common],
                                    help="draw the most frequent question types.")

for p in (analyze_parser, plot_parser):
    p.add_argument("--top-k",
                   type=int,
                   default=DEFAULT_TOP_K,
                   metavar="NUM",
                   help="number of question types to keep.")


@dataclass
class CliInvocation:
    subcommand: str
    config_path: t.Optional[str]
    overrides: t.List[str] = field(default_factory=list)
    output_dir: str = DEFAULT_OUTPUT_DIR
    checkpoints: t.List[str] = field(default_factory=list)
    failures_only: bool = False
    top_k: int = DEFAULT_TOP_K
    verbose: bool = False
    quiet: bool = False


# Functions

def _check_module_config_(subcommand: str, config: settings.RootConfig):
    if subcommand == "pretrain":
        section, build = "pretrain", contrastive.PretrainConfig.from_settings
    elif subcommand == "train":
        section, build = "vqa", harness.ExperimentConfig.from_settings
    else:
        return
    try:
        build(config).validate()
    except ConfigInvalid as e:
        key = "{}.{}".format(section, e.setting) if e.setting else section
        raise ConfigError(key, str(e)) from e


def required_settings(subcommand: str, config: settings.RootConfig) -> t.List[str]:
    """Keys of the settings a subcommand reads from disk."""
    keys = list(REQUIRED_SETTINGS[subcommand])
    checkpoint_key = CHECKPOINT_SETTINGS.get(subcommand)
    if checkpoint_key is not None and config.get(checkpoint_key) is None:
        keys.append("assets.weights_dir")
    return keys


def parse_and_validate(argv: t.Optional[t.Sequence[str]] = None) \
        -> t.Tuple[CliInvocation, settings.RootConfig]:
    """
    Parse command line arguments, build the configuration they describe and
    check it is complete for the chosen subcommand.

    Raises:
      UsageError: unknown flags or subcommand.
      ConfigError: an invalid, unknown or missing setting, naming its key.
    """
    args = parser.parse_args(argv)
    if args.subcommand is None:
        raise UsageError("a subcommand is required: {}".format(", ".join(SUBCOMMANDS)))

    overrides = list(args.set)
    if args.deterministic:
        overrides.append("runtime.deterministic=true")
    if args.seed is not None:
        overrides += ["runtime.seed={}".format(args.seed), "vqa.seed_base={}".format(args.seed)]

    config = settings.import_config(args.config, overrides)
    required = required_settings(args.subcommand, config)
    for key in required:
        if config.get(key) is None:
            raise ConfigError(key, "required by {}".format(args.subcommand))
    config.check_paths(required)
    _check_module_config_(args.subcommand, config)

    invocation = CliInvocation(
        subcommand=args.subcommand,
        config_path=args.config,
        overrides=overrides,
        output_dir=args.output,
        checkpoints=getattr(args, "checkpoint", None) or [],
        failures_only=getattr(args, "failures_only", False),
        top_k=getattr(args, "top_k", DEFAULT_TOP_K),
        verbose=args.verbose,
        quiet=args.quiet,
    )
    return invocation, config


def allocate_run_dir(output_dir: str, name: str) -> str:
    """
    Create and return a new directory ``output_dir/name``, or
    ``output_dir/name-1``, ``name-2``... if that already exists.
    """
    os.makedirs(output_dir, exist_ok=True)
    candidate, i = os.path.join(output_dir, name), 0
    while True:
        try:
            os.mkdir(candidate)
            return candidate
        except FileExistsError:
            i += 1
            candidate = os.path.join(output_dir, "{}-{}".format(name, i))


def configure_logging(level: int, log_file: str) -> t.List[logging.Handler]:
    """
    Attach a console handler at the given level and a debug-level file
    handler to the root logger. Returns the handlers so they can be removed.
    """
    console = logging.StreamHandler()
    console.setLevel(level)
    console.setFormatter(logging.Formatter("%(message)s"))
    logfile = logging.FileHandler(log_file, encoding="utf-8")
    logfile.setLevel(logging.DEBUG)
    logfile.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))

    root = logging.getLogger()
    root.setLevel(logging.DEBUG)
    root.addHandler(console)
    root.addHandler(logfile)
    return [console, logfile]


def _console_level_(invocation: CliInvocation, config: settings.RootConfig) -> int:
    if invocation.verbose:
        return logging.DEBUG
    if invocation.quiet:
        return logging.WARNING
    return getattr(logging, config.get("runtime.log_level").upper())


def _load_splits_(config: settings.RootConfig):
    dialect = config.get("vqa.dataset") or config.get("data.dialect")
    return ingest.load_vqa_dataset(config.get("data.vqa_root"), dialect,
                                   config.get("data.train_file"), config.get("data.test_file"))


def _load_test_split_(config: settings.RootConfig):
    dialect = config.get("vqa.dataset") or config.get("data.dialect")
    return ingest.load_split(config.get("data.vqa_root"), dialect, "test",
                             config.get("data.test_file"))


def _checkpoint_labels_(paths: t.Sequence[str]) -> t.List[str]:
    """Short, distinct labels for checkpoint paths: parent directory and file stem."""
    labels = []
    for path in paths:
        parent = os.path.basename(os.path.dirname(os.path.abspath(path)))
        stem = os.path.splitext(os.path.basename(path))[0]
        label = "{}_{}".format(parent, stem) if parent else stem
        while label in labels:
            label += "_"
        labels.append(label)
    return labels


def _latest_train_checkpoints_(output_dir: str) -> t.List[str]:
    """Final checkpoints of every repetition of the most recent train run in output_dir."""
    runs = [os.path.join(output_dir, d) for d in os.listdir(output_dir)
            if re.fullmatch(r"train(-\d+)?", d)] if os.path.isdir(output_dir) else []
    for run in sorted(runs, key=os.path.getmtime, reverse=True):
        found = sorted(glob.glob(os.path.join(run, "run_*", "final.pt")))
        if found:
            logging.info("Using the %s final checkpoints of %s", len(found), run)
            return found
    raise MissingFile("No --checkpoint given and no train run with checkpoints in {}"
                      .format(output_dir))


def _print_table_(table: str):
    head, _, body = table.partition("\n")
    print(colored(head, attrs=["bold"]))
    print(body, end="")


def run_pretrain(invocation: CliInvocation, config: settings.RootConfig, run_dir: str):
    pc = contrastive.PretrainConfig.from_settings(config)
    image_root = config.get("data.caption_image_root")
    corpus = ingest.load_image_caption_corpus(config.get("data.caption_manifest"), image_root)
    validation = None
    if config.get("data.caption_val_manifest") is not None:
        validation = ingest.load_image_caption_corpus(config.get("data.caption_val_manifest"),
                                                      image_root)
    tokenizer = ingest.CaptionTokenizer(config.get("assets.tokenizer_vocab"),
                                        config.get("assets.tokenizer_merges"))

    checkpoint_in = config.get("pretrain.checkpoint_in")
    if checkpoint_in is not None:
        model = contrastive.load_checkpoint(checkpoint_in)
    else:
        model = contrastive.DualEncoder.from_pretrained(
            backbones.get(pc.backbone), config.get("assets.weights_dir"),
            logit_scale_init=pc.logit_scale_init, max_logit_scale=pc.max_logit_scale)

    result = contrastive.run_pretraining(pc, corpus, model, tokenizer, run_dir, validation)
    print("Fine-tuned checkpoint: {} (best: {}, epoch {})".format(
        colored(result.final.path, "green"), result.best.path, result.best.epoch))


def run_train(invocation: CliInvocation, config: settings.RootConfig, run_dir: str):
    experiment = harness.ExperimentConfig.from_settings(config)
    train, test = _load_splits_(config)
    aggregate = harness.repeat_and_average(experiment, train, test, run_dir)
    _print_table_(harness.comparison_table([("{} ({} runs)".format(experiment.backbone,
                                                                    aggregate.run_count),
                                             aggregate)]))


def run_evaluate(invocation: CliInvocation, config: settings.RootConfig, run_dir: str):
    test = _load_test_split_(config)
    rows, reports = [], {}
    paths = invocation.checkpoints or _latest_train_checkpoints_(invocation.output_dir)
    for label, path in zip(_checkpoint_labels_(paths), paths):
        model = VqaModel.load(path)
        report, dump = harness.evaluate(model, test)
        exporter.PredictionCsvExporter(dump).export(os.path.join(run_dir, label, "predictions.csv"))
        reports[label] = report
        rows.append(("{} [{}]".format(model.spec.name, label), report))

    exporter.MetricsJsonExporter(reports).export(os.path.join(run_dir, "metrics.json"))
    table = harness.comparison_table(rows)
    with open(os.path.join(run_dir, "metrics.txt"), "w") as f:
        f.write(table)
    _print_table_(table)


def _histograms_(config: settings.RootConfig, top_k: int):
    train, test = _load_splits_(config)
    return train, test, {s.name: ingest.question_type_histogram(s, top_k) for s in (train, test)}


def run_analyze(invocation: CliInvocation, config: settings.RootConfig, run_dir: str):
    train, test, histograms = _histograms_(config, invocation.top_k)
    overlap = ingest.verify_split_images(train, test)
    exporter.HistogramTsvExporter(histograms).export(os.path.join(run_dir, "question_types.tsv"))
    exporter.write_json(os.path.join(run_dir, "splits.json"), {
        "train_questions": len(train),
        "test_questions": len(test),
        "train_images": len(train.image_ids),
        "test_images": len(test.image_ids),
        "test_images_in_train": overlap.test_images_in_train,
        "disjoint": overlap.disjoint,
    })
    logging.info("%s of the test images also appear in the train split%s.",
                 "{:.1%}".format(overlap.test_images_in_train),
                 "; the splits are disjoint" if overlap.disjoint else "")
    for name, hist in histograms.items():
        print(colored("{} ({} of the top {} types)".format(name, hist.total, invocation.top_k),
                      attrs=["bold"]))
        for qtype, count in hist.items():
            print("  {:<20} {}".format(qtype, count))


def run_dump_examples(invocation: CliInvocation, config: settings.RootConfig, run_dir: str):
    test = _load_test_split_(config)
    dumps = []
    paths = invocation.checkpoints or _latest_train_checkpoints_(invocation.output_dir)
    for label, path in zip(_checkpoint_labels_(paths), paths):
        dumps.append(harness.dump_qualitative(path, test.records,
                                              os.path.join(run_dir, "{}.csv".format(label)),
                                              invocation.failures_only))
    if invocation.failures_only and len(dumps) > 1:
        shared = harness.common_failures(dumps)
        exporter.PredictionCsvExporter(shared).export(os.path.join(run_dir, "common_failures.csv"))


def run_plot_types(invocation: CliInvocation, config: settings.RootConfig, run_dir: str):
    _, _, histograms = _histograms_(config, invocation.top_k)
    exporter.HistogramTsvExporter(histograms).export(os.path.join(run_dir, "question_types.tsv"))
    exporter.HistogramPlotExporter(histograms).export(os.path.join(run_dir, "question_types.png"))


COMMANDS = {
    "pretrain": run_pretrain,
    "train": run_train,
    "evaluate": run_evaluate,
    "analyze": run_analyze,
    "dump-examples": run_dump_examples,
    "plot-types": run_plot_types,
}


def dispatch(invocation: CliInvocation, config: settings.RootConfig) -> int:
    """
    Run a validated invocation in a fresh run directory under its output
    directory, and return the process exit code.
    """
    try:
        run_dir = allocate_run_dir(invocation.output_dir, invocation.subcommand)
        log_file = os.path.join(run_dir, LOG_FILE)
        handlers = configure_logging(_console_level_(invocation, config), log_file)
    except OSError as e:
        print(colored("error: cannot create a run directory in {}: {}"
                      .format(invocation.output_dir, e.strerror or e), "red"), file=sys.stderr)
        return EXIT_FAILURE
    try:
        logging.info("Run directory %s", run_dir)
        exporter.RunManifestExporter(config.to_dict()).export(
            os.path.join(run_dir, "manifest.json"), subcommand=invocation.subcommand,
            overrides=invocation.overrides, checkpoints=invocation.checkpoints)
        COMMANDS[invocation.subcommand](invocation, config, run_dir)
        return EXIT_OK
    except (UsageError, ConfigError) as e:
        logging.error("%s", e)
        return EXIT_USAGE
    except Exception as e:
        logging.debug("Failure details:", exc_info=True)
        print(colored("error: {} (see {})".format(e, log_file), "red"), file=sys.stderr)
        return EXIT_FAILURE
    finally:
        root = logging.getLogger()
        for h in handlers:
            root.removeHandler(h)
            h.close()


def main(argv: t.Optional[t.Sequence[str]] = None) -> int:
    try:
        invocation, config = parse_and_validate(argv)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(colored("usage error: {}".format(e), "red"), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(colored("configuration error: {}".format(e), "red"), file=sys.stderr)
        return EXIT_USAGE
    return dispatch(invocation, config)
