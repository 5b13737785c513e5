# MIT License (see LICENSE or https://opensource.org/licenses/MIT)

"""
Command line entry point, 'pyrepack <subcommand>'.

Every subcommand writes a '<out>.manifest.json' next to its output (eval
writes 'manifest.json' into its output directory) that records the resolved
parameters and the sha256 of every input and output. Reruns with the same
inputs and flags produce byte identical files, manifests included.
"""

import argparse
import json
import logging
import os
import sys
import typing

import yaml

from pyrepack import __version__
from pyrepack._utils import check_seed, file_digest, format_float
from pyrepack.classifier import (
    DecisionThreshold,
    TrainConfig,
    load_model,
    save_model,
    train,
)
from pyrepack.datagen import GenConfig, generate, write_provenance
from pyrepack.evaluation import (
    DEFAULT_BINS,
    SCORES_FILE,
    Metrics,
    best_k,
    classifier_metrics,
    delta_histogram,
    emit_report,
    emit_scores,
    maliciousness_scores,
    sweep_k,
)
from pyrepack.exceptions import ConfigError, RepackError
from pyrepack.explainer import ExplainConfig, explain_all, write_explanations
from pyrepack.features import (
    FeatureSchema,
    Label,
    default_schema,
    load_schema,
    parse_dataset,
    split_dataset,
    write_dataset,
)
from pyrepack.metamorphic import DEFAULT_K, detect_batch, write_detection_report
from pyrepack.ranking import load_rank, rank_benign_features, save_rank

log = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"
DEFAULT_K_MAX = 10


class _Run(object):
    """
    Collects what a subcommand read and wrote for its manifest.
    """

    def __init__(self, subcommand: str, args: argparse.Namespace) -> None:
        self.subcommand = subcommand
        self.parameters: typing.Dict[str, typing.Any] = {}
        self.inputs: typing.Dict[str, typing.Dict[str, str]] = {}
        self.outputs: typing.Dict[str, typing.Dict[str, str]] = {}
        self.seed: typing.Optional[int] = None
        if getattr(args, "schema", None):
            self.add_input("schema", args.schema)

    def add_input(self, name: str, path: str) -> None:
        self.inputs[name] = {"path": path, "sha256": file_digest(path)}

    def add_output(self, name: str, path: str) -> None:
        self.outputs[name] = {"path": path, "sha256": file_digest(path)}

    def write(self, path: str) -> None:
        manifest = {
            "inputs": self.inputs,
            "outputs": self.outputs,
            "parameters": self.parameters,
            "seed": self.seed,
            "subcommand": self.subcommand,
            "version": __version__,
        }
        with open(path, "wb") as fd:
            fd.write((json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8"))
        log.info("Wrote run manifest '%s'" % path)


def _seed(value: str) -> int:
    try:
        return check_seed(int(value, 10))
    except (ValueError, ConfigError) as err:
        raise argparse.ArgumentTypeError("invalid seed '%s': %s" % (value, err)) from err


def _non_negative(value: str) -> int:
    try:
        number = int(value, 10)
    except ValueError:
        raise argparse.ArgumentTypeError("invalid integer '%s'" % value) from None
    if number < 0:
        raise argparse.ArgumentTypeError("'%s' cannot be negative" % value)
    return number


def _positive(value: str) -> int:
    number = _non_negative(value)
    if number == 0:
        raise argparse.ArgumentTypeError("'%s' must be positive" % value)
    return number


def _load_yaml(path: str) -> typing.Dict[str, typing.Any]:
    with open(path, "rb") as fd:
        try:
            data = yaml.safe_load(fd)
        except yaml.YAMLError as err:
            raise ConfigError("Invalid YAML config '%s': %s" % (path, err)) from err

    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("Config '%s' must be a mapping of settings" % path)
    return data


def _schema(args: argparse.Namespace) -> FeatureSchema:
    return load_schema(args.schema) if args.schema else default_schema()


def _metrics_text(metrics: Metrics) -> str:
    values = []
    for name in ("accuracy", "precision", "recall", "f1", "benign_accuracy", "malware_accuracy"):
        value = getattr(metrics, name)
        values.append("%s=%s" % (name, "undefined" if value is None else "%.4f" % value))
    return " ".join(values)


def _explain_config(args: argparse.Namespace) -> ExplainConfig:
    return ExplainConfig(
        num_samples=args.explain_samples,
        kernel_width=args.kernel_width,
        top_m=args.top_m,
        ridge_penalty=args.ridge_penalty,
        seed=args.seed,
    )


def _explain_parameters(cfg: ExplainConfig, threads: int) -> typing.Dict[str, typing.Any]:
    return {
        "explain_samples": cfg.num_samples,
        "kernel_width": "auto" if cfg.kernel_width is None else format_float(cfg.kernel_width),
        "ridge_penalty": format_float(cfg.ridge_penalty),
        "threads": threads,
        "top_m": cfg.top_m,
    }


def cmd_gen(args: argparse.Namespace) -> int:
    run = _Run("gen", args)
    schema = _schema(args)

    data = _load_yaml(args.config) if args.config else {}
    if args.config:
        run.add_input("config", args.config)
    for name in ("n_benign", "n_malware", "n_repackaged"):
        if getattr(args, name) is not None:
            data[name] = getattr(args, name)
    if args.seed is not None:
        data["seed"] = args.seed

    cfg = GenConfig.from_dict(data, schema)
    dataset = generate(cfg)
    write_dataset(dataset, args.out)
    provenance = args.out + ".provenance.json"
    write_provenance(cfg, provenance)

    run.parameters = cfg.to_dict()
    run.seed = cfg.seed
    run.add_output("dataset", args.out)
    run.add_output("provenance", provenance)
    run.write(args.out + MANIFEST_SUFFIX)

    print("Generated %d samples into %s" % (len(dataset), args.out))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    run = _Run("train", args)
    schema = _schema(args)

    data = _load_yaml(args.config) if args.config else {}
    if args.config:
        run.add_input("config", args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = TrainConfig.from_dict(data)

    dataset = parse_dataset(args.data, schema)
    run.add_input("data", args.data)
    train_part, held_out = split_dataset(dataset, args.holdout, seed=cfg.seed)

    model = train(train_part, cfg)
    save_model(model, args.out)

    run.parameters = dict(cfg.to_dict(), holdout=format_float(args.holdout))
    run.seed = cfg.seed
    run.add_output("model", args.out)
    run.write(args.out + MANIFEST_SUFFIX)

    print("final_loss=%s" % model.training_meta["final_loss"])
    if len(held_out):
        print("holdout samples=%d %s" % (len(held_out), _metrics_text(classifier_metrics(model, held_out))))
    return 0


def cmd_rank(args: argparse.Namespace) -> int:
    run = _Run("rank", args)
    schema = _schema(args)
    cfg = _explain_config(args)

    model = load_model(args.model)
    run.add_input("model", args.model)
    dev = parse_dataset(args.dev, schema)
    run.add_input("dev", args.dev)

    ranking = rank_benign_features(model, dev, cfg, threads=args.threads)
    save_rank(ranking, schema, args.out)

    run.parameters = _explain_parameters(cfg, args.threads)
    run.seed = cfg.seed
    run.add_output("rank", args.out)
    run.write(args.out + MANIFEST_SUFFIX)

    print("Ranked %d benign features over %d samples, skipped %d" % (len(ranking), len(dev), ranking.skipped))
    return 0


def cmd_detect(args: argparse.Namespace) -> int:
    run = _Run("detect", args)
    schema = _schema(args)
    threshold = DecisionThreshold(args.delta)

    model = load_model(args.model)
    run.add_input("model", args.model)
    ranking = load_rank(args.rank, schema)
    run.add_input("rank", args.rank)
    dataset = parse_dataset(args.data, schema)
    run.add_input("data", args.data)

    results = detect_batch(model, dataset, ranking, args.k, threshold)
    write_detection_report(
        results,
        args.out,
        args.k,
        threshold,
        model_digest=run.inputs["model"]["sha256"],
        rank_digest=run.inputs["rank"]["sha256"],
    )

    run.parameters = {"delta": format_float(threshold.delta), "k": args.k}
    run.add_output("report", args.out)
    run.write(args.out + MANIFEST_SUFFIX)

    flagged = sum(1 for r in results if r.final_label == Label.MALWARE)
    diverged = sum(1 for r in results if r.diverged)
    print("samples=%d malware=%d diverged=%d" % (len(results), flagged, diverged))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    run = _Run("eval", args)
    schema = _schema(args)
    threshold = DecisionThreshold(args.delta)

    model = load_model(args.model)
    run.add_input("model", args.model)
    ranking = load_rank(args.rank, schema)
    run.add_input("rank", args.rank)
    dataset = parse_dataset(args.data, schema)
    run.add_input("data", args.data)

    hist_k = min(DEFAULT_K, args.k_max) if args.hist_k is None else args.hist_k
    if hist_k > args.k_max:
        raise ConfigError("--hist-k %d cannot be larger than --k-max %d" % (hist_k, args.k_max))

    fingerprints = {
        "data": run.inputs["data"]["sha256"],
        "model": run.inputs["model"]["sha256"],
        "rank": run.inputs["rank"]["sha256"],
        "schema": schema.fingerprint,
    }
    sweep = sweep_k(model, dataset, ranking, args.k_max, threshold)
    histograms = [delta_histogram(model, dataset, ranking, hist_k, bins=args.bins)]

    written = emit_report(sweep, histograms, args.out_dir, fingerprints)
    scores_path = os.path.join(args.out_dir, SCORES_FILE)
    emit_scores(maliciousness_scores(model, dataset), scores_path, fingerprints)
    written.append(scores_path)

    run.parameters = {
        "bins": args.bins,
        "delta": format_float(threshold.delta),
        "hist_k": hist_k,
        "k_max": args.k_max,
    }
    for path in written:
        run.add_output(os.path.basename(path), path)
    run.write(os.path.join(args.out_dir, "manifest.json"))

    for point in sweep:
        print("k=%d %s" % (point.k, _metrics_text(point.metrics)))
    chosen = best_k(sweep)
    print("best_k=%s" % ("none" if chosen is None else chosen))
    return 0


def cmd_explain(args: argparse.Namespace) -> int:
    run = _Run("explain", args)
    schema = _schema(args)
    cfg = _explain_config(args)

    model = load_model(args.model)
    run.add_input("model", args.model)
    dataset = parse_dataset(args.data, schema)
    run.add_input("data", args.data)

    explanations = [e for e in explain_all(model, dataset.samples, cfg, threads=args.threads) if e is not None]
    write_explanations(explanations, schema, args.out)

    run.parameters = _explain_parameters(cfg, args.threads)
    run.seed = cfg.seed
    run.add_output("explanations", args.out)
    run.write(args.out + MANIFEST_SUFFIX)

    print("Explained %d of %d samples" % (len(explanations), len(dataset)))
    return 0


def _add_explain_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--explain-samples", type=_positive, default=1000, help="Perturbations per explanation")
    parser.add_argument("--top-m", type=_positive, default=10, help="Contributions kept per explanation")
    parser.add_argument("--kernel-width", type=float, default=None, help="Kernel width, default scales with the app")
    parser.add_argument("--ridge-penalty", type=float, default=1e-3, help="Surrogate L2 penalty")
    parser.add_argument("--seed", type=_seed, default=0, help="Explanation seed")
    parser.add_argument("--threads", type=_positive, default=1, help="Concurrent explanations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyrepack",
        description="Detect repackaged malware by switching off benign-indicative features.",
    )
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="Log to stderr, repeat for debug output")
    sub = parser.add_subparsers(dest="subcommand", metavar="<subcommand>")
    sub.required = True

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--schema", default=None, help="Feature schema file, defaults to the bundled schema")
        return p

    gen = add("gen", "Generate a synthetic dataset")
    gen.add_argument("--config", help="YAML generator config")
    gen.add_argument("--seed", type=_seed, default=None, help="Overrides the config seed")
    gen.add_argument("--n-benign", type=_non_negative, default=None)
    gen.add_argument("--n-malware", type=_non_negative, default=None)
    gen.add_argument("--n-repackaged", type=_non_negative, default=None)
    gen.add_argument("--out", required=True, help="Dataset file to write")
    gen.set_defaults(func=cmd_gen)

    train_p = add("train", "Train the classifier")
    train_p.add_argument("--data", required=True, help="Labeled training dataset")
    train_p.add_argument("--config", help="YAML training config")
    train_p.add_argument("--seed", type=_seed, default=None, help="Overrides the config seed")
    train_p.add_argument("--holdout", type=float, default=0.1, help="Share of the data held out for metrics")
    train_p.add_argument("--out", required=True, help="Model file to write")
    train_p.set_defaults(func=cmd_train)

    rank = add("rank", "Rank benign features over a development set")
    rank.add_argument("--model", required=True)
    rank.add_argument("--dev", required=True, help="Development dataset")
    _add_explain_args(rank)
    rank.add_argument("--out", required=True, help="Rank file to write")
    rank.set_defaults(func=cmd_rank)

    detect = add("detect", "Run the metamorphic detection")
    detect.add_argument("--model", required=True)
    detect.add_argument("--rank", required=True)
    detect.add_argument("--data", required=True)
    detect.add_argument("-k", type=_non_negative, default=DEFAULT_K, help="Top benign features to switch off")
    detect.add_argument("--delta", type=float, default=0.5, help="Decision threshold")
    detect.add_argument("--out", required=True, help="Detection report to write")
    detect.set_defaults(func=cmd_detect)

    evaluate = add("eval", "Sweep k and write the evaluation tables")
    evaluate.add_argument("--model", required=True)
    evaluate.add_argument("--rank", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--k-max", type=_non_negative, default=DEFAULT_K_MAX)
    evaluate.add_argument("--hist-k", type=_non_negative, default=None, help="k of the delta histogram")
    evaluate.add_argument("--bins", type=_positive, default=DEFAULT_BINS)
    evaluate.add_argument("--delta", type=float, default=0.5, help="Decision threshold")
    evaluate.add_argument("--out-dir", required=True)
    evaluate.set_defaults(func=cmd_eval)

    explain_p = add("explain", "Export the local explanations of a dataset")
    explain_p.add_argument("--model", required=True)
    explain_p.add_argument("--data", required=True)
    _add_explain_args(explain_p)
    explain_p.add_argument("--out", required=True)
    explain_p.set_defaults(func=cmd_explain)

    return parser


def _setup_verbose(verbosity: int) -> None:
    package_log = logging.getLogger("pyrepack")
    if not verbosity or any(getattr(h, "_pyrepack_cli", False) for h in package_log.handlers):
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    setattr(handler, "_pyrepack_cli", True)
    package_log.addHandler(handler)
    package_log.setLevel(logging.DEBUG if verbosity > 1 else logging.INFO)


def main(argv: typing.Optional[typing.List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_verbose(args.verbose)

    try:
        return args.func(args)
    except (RepackError, OSError) as err:
        print("pyrepack %s: error: %s" % (args.subcommand, err), file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
