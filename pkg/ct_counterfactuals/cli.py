"""Command-line front end: `ctcf <command> [options]`.

Results go to stdout as one JSON line, logs to stderr. Failures print a single
JSON error line to stderr and exit with the status mapped from the error code.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from collections.abc import Callable, Sequence
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np

from .config import BUILDABLE_SCORER_KINDS, RunConfig, load_config
from .const import (
    CONF_DATASET,
    CONF_EVALUATION,
    CONF_SCAN,
    CONF_SCORER,
    EXIT_CODES,
)
from .coordinator import CounterfactualCoordinator
from .evaluation import (
    GROUP_CF_POSITIVES,
    GROUP_NEGATIVES,
    GROUP_POSITIVES,
    check_both_classes,
    check_sweep_sizes,
    classification_metrics,
    compare_localization,
    histograms_from_records,
    holdout_split,
    permutation_test,
    reduction_table,
    sweep_from_records,
    timing_model,
)
from .exceptions import ConfigError, CounterfactualError, ShapeMismatchError, TrainingError
from .fileio import (
    export_slices,
    load_autoencoder,
    load_scorer,
    read_dataset,
    read_volume,
    save_model,
    write_cf_result,
    write_csv,
    write_dataset,
    write_histograms_csv,
    write_json,
    write_localization_csv,
    write_loss_csv,
    write_records_csv,
    write_reduction_csv,
    write_scan_csv,
    write_sweep_csv,
    write_volume,
)
from .latent_shift import generate_cf
from .localization import diff_heatmap
from .models import Label, ScorerKind
from .networks import (
    SliceAutoencoder,
    VolumeScorer,
    encode_volume,
    reconstruct,
    score,
    seg_mask,
    train_autoencoder,
    train_scorer,
)
from .phantoms import demo_phantom, make_dataset
from .plotting import plot_chunk_sweep, plot_histograms, plot_lambda_sweep, plot_scan_profile

_LOGGER = logging.getLogger(__name__)

AUTOENCODER_FILE = "autoencoder.ckpt"
SCORER_FILE = "scorer.ckpt"
EFFECTIVE_CONFIG_FILE = "effective_config.json"
_OVERRIDE_PREFIX = "cfg:"


@lru_cache(maxsize=1)
def translations() -> dict[str, Any]:
    """User-facing strings."""
    path = Path(__file__).parent / "translations" / "en.json"
    return json.loads(path.read_text(encoding="utf-8"))


def _flag(parser: argparse.ArgumentParser, name: str, key: str, **kwargs: Any) -> None:
    """A flag that overrides configuration key `key` when given."""
    kwargs.setdefault("default", None)
    parser.add_argument(name, dest=f"{_OVERRIDE_PREFIX}{key}", **kwargs)


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {
        dest[len(_OVERRIDE_PREFIX) :]: value
        for dest, value in vars(args).items()
        if dest.startswith(_OVERRIDE_PREFIX)
    }


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    _flag(common, "--output-dir", "output_dir", help="directory for every output")
    _flag(common, "--seed", "seed", type=int)
    _flag(common, "--threads", "threads", type=int, help="worker thread cap")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    return common


def _model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ae", type=Path, required=True, help="autoencoder checkpoint")
    parser.add_argument("--scorer", type=Path, required=True, help="scorer checkpoint")


def build_parser() -> argparse.ArgumentParser:
    """Parser with one subcommand per operation."""
    commands = translations()["command"]
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="ctcf", description="Chunked Latent Shift counterfactuals for volumetric scorers."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str) -> argparse.ArgumentParser:
        return sub.add_parser(
            name,
            parents=[common],
            help=commands[name]["title"],
            description=commands[name]["description"],
        )

    make_data = add("make-data")
    _flag(make_data, "--data-dir", "data_dir")
    _flag(make_data, "--n-pos", "dataset.n_pos", type=int)
    _flag(make_data, "--n-neg", "dataset.n_neg", type=int)

    train_ae = add("train-ae")
    _flag(train_ae, "--data-dir", "data_dir")
    _flag(train_ae, "--epochs", "autoencoder.epochs", type=int)
    _flag(train_ae, "--latent-dim", "autoencoder.latent_dim", type=int)

    train_sc = add("train-scorer")
    _flag(train_sc, "--data-dir", "data_dir")
    _flag(train_sc, "--kind", "scorer.kind", choices=BUILDABLE_SCORER_KINDS)
    _flag(train_sc, "--epochs", "scorer.epochs", type=int)

    gen_cf = add("gen-cf")
    gen_cf.add_argument("volume", type=Path, help="CTVF input volume")
    _model_flags(gen_cf)
    _flag(gen_cf, "--chunk-start", "chunk.start", type=int)
    _flag(gen_cf, "--chunk-length", "chunk.length", type=int)
    _flag(gen_cf, "--pixel-budget", "search.pixel_budget", type=float)

    scan = add("scan")
    scan.add_argument("volume", type=Path, help="CTVF input volume")
    _model_flags(scan)
    _flag(scan, "--chunk-size", "scan.chunk_size", type=int)
    _flag(scan, "--stride", "scan.stride", type=int)

    evaluate = add("evaluate")
    _model_flags(evaluate)
    _flag(evaluate, "--data-dir", "data_dir")
    _flag(evaluate, "--chunk-size", "evaluation.chunk_size", type=int)
    _flag(evaluate, "--sweep-sizes", "evaluation.sweep_sizes", type=int, nargs="+")
    _flag(evaluate, "--include-negative-cfs", "evaluation.include_negative_cfs", action="store_true")
    return parser


def _write_effective_config(config: RunConfig) -> None:
    write_json(config.output_dir / EFFECTIVE_CONFIG_FILE, config.as_dict())


def _slice_shape(dataset: Sequence[Any]) -> tuple[int, int]:
    if not dataset:
        raise TrainingError("The dataset is empty")
    return dataset[0].volume.shape[1], dataset[0].volume.shape[2]


def _load_models(args: argparse.Namespace, volume_shape: tuple[int, ...]) -> tuple[SliceAutoencoder, VolumeScorer]:
    ae = load_autoencoder(args.ae)
    scorer = load_scorer(args.scorer)
    if (ae.height, ae.width) != (scorer.height, scorer.width):
        raise ShapeMismatchError(
            "Autoencoder and scorer slices differ", (ae.height, ae.width), (scorer.height, scorer.width)
        )
    if tuple(volume_shape[1:]) != (ae.height, ae.width):
        raise ShapeMismatchError("Volume does not match the models", (ae.height, ae.width), volume_shape[1:])
    scorer.check_volume_shape(volume_shape)
    return ae, scorer


def cmd_make_data(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Seeded phantom dataset plus a demo positive."""
    spec = config.phantom_spec()
    d = config.section(CONF_DATASET)
    dataset = make_dataset(d["n_pos"], d["n_neg"], spec, config.seed)
    write_dataset(config.data_dir, dataset)
    demo = demo_phantom(spec)
    write_volume(config.data_dir / "demo.ctvf", demo.volume)
    write_volume(config.data_dir / "demo_truth.ctvf", demo.truth_mask)
    _write_effective_config(config)
    return {"data_dir": str(config.data_dir), "n_pos": d["n_pos"], "n_neg": d["n_neg"]}


def cmd_train_ae(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Autoencoder checkpoint and loss curve."""
    dataset = read_dataset(config.data_dir)
    height, width = _slice_shape(dataset)
    section = config.section("autoencoder")
    ae = SliceAutoencoder.create(
        height, width, section["latent_dim"], section["hidden_dim"], seed=config.seed
    )
    trained, history = train_autoencoder(ae, dataset, config.autoencoder_training())
    save_model(config.output_dir / AUTOENCODER_FILE, trained)
    write_loss_csv(config.output_dir / "ae_loss.csv", history)
    _write_effective_config(config)
    _LOGGER.info(f"Autoencoder MSE {history[0]:.6g} -> {history[-1]:.6g}")
    return {"initial_mse": history[0], "final_mse": history[-1], "epochs": len(history) - 1}


def cmd_train_scorer(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Scorer checkpoint, train/held-out metrics and loss curve."""
    dataset = read_dataset(config.data_dir)
    height, width = _slice_shape(dataset)
    s = config.section(CONF_SCORER)
    kind = ScorerKind(s["kind"])
    train, held = holdout_split(
        dataset, config.section(CONF_DATASET)["holdout_fraction"], config.seed
    )
    history: list[float] = []
    if kind is ScorerKind.RIM_DETECTOR:
        initial = VolumeScorer.rim_detector(height, width, bright_threshold=s["bright_threshold"])
        trained = train_scorer(initial, train, config.scorer_training())
        scorer, history = trained.scorer, trained.loss_history
    elif kind is ScorerKind.SEG_SUM:
        scorer = VolumeScorer.seg_sum(height, width, s["seg_gain"], s["seg_bias"])
    else:
        scorer = VolumeScorer.constant(height, width, s["constant_value"])

    metrics = {"train": classification_metrics(scorer, train), "holdout": classification_metrics(scorer, held)}
    save_model(config.output_dir / SCORER_FILE, scorer)
    write_csv(
        config.output_dir / "scorer_metrics.csv",
        ["split", "auc", "accuracy", "n"],
        ([split, m["auc"], m["accuracy"], m["n"]] for split, m in metrics.items()),
    )
    write_loss_csv(config.output_dir / "scorer_loss.csv", history)
    _write_effective_config(config)
    _LOGGER.info(
        f"Scorer {kind.value}: train AUC {metrics['train']['auc']:.4f}, "
        f"held-out AUC {metrics['holdout']['auc']:.4f}"
    )
    return {"kind": kind.value, **{f"{split}_{k}": v for split, m in metrics.items() for k, v in m.items()}}


def cmd_gen_cf(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """One chunked counterfactual with its trace, heatmaps and slice exports."""
    volume = read_volume(args.volume)
    ae, scorer = _load_models(args, volume.shape)
    chunk = config.chunk_spec()
    cfg = config.search_config()
    result = generate_cf(ae, scorer, volume, chunk, cfg)
    recon = reconstruct(ae, encode_volume(ae, volume))

    extra: dict[str, Any] = {"input_prediction": score(scorer, volume)}
    if scorer.kind is ScorerKind.SEG_SUM:
        threshold = config.section(CONF_SCORER)["seg_threshold"]
        extra["seg_mask"] = {
            "threshold": threshold,
            "input": float(seg_mask(scorer, volume, threshold).sum()),
            "reconstruction": float(seg_mask(scorer, recon, threshold).sum()),
            "cf": float(seg_mask(scorer, result.cf_volume, threshold).sum()),
        }

    out = config.output_dir
    write_cf_result(out, result, extra)
    export_slices(out / "heatmaps", diff_heatmap(recon, result.cf_volume), "heatmap")
    export_slices(out / "slices", recon[chunk.start : chunk.end], "recon")
    export_slices(out / "slices", result.cf_volume[chunk.start : chunk.end], "cf")
    plot_lambda_sweep(out / "lambda_sweep.png", result.trace, cfg.pixel_budget)
    _write_effective_config(config)
    _LOGGER.info(
        f"Counterfactual {result.status.value}: {result.baseline_prediction:.6g} -> "
        f"{result.min_prediction:.6g} at lambda {result.lambda_star:.6g}"
    )
    return {
        "status": result.status.value,
        "baseline": result.baseline_prediction,
        "min_prediction": result.min_prediction,
        "lambda_star": result.lambda_star,
    }


def cmd_scan(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Per-window counterfactuals ranked by prediction reduction."""
    volume = read_volume(args.volume)
    ae, scorer = _load_models(args, volume.shape)
    s = config.section(CONF_SCAN)
    with CounterfactualCoordinator(ae, scorer, config.search_config(), config.threads) as coordinator:
        report = asyncio.run(coordinator.async_scan_chunks(volume, s["chunk_size"], s["stride"]))

    out = config.output_dir
    recon = reconstruct(ae, encode_volume(ae, volume))
    write_scan_csv(out / "scan.csv", report)
    for result in report.results:
        chunk = result.chunk
        heatmap = diff_heatmap(recon, result.cf_volume)[chunk.start : chunk.end]
        export_slices(out / "heatmaps" / f"chunk_{chunk.start:03d}", heatmap, "heatmap")
    best = report.best_chunk
    summary = {
        "chunk_size": report.chunk_size,
        "stride": report.stride,
        "windows": len(report.entries),
        "best_start": best.start,
        "best_end": best.end,
        "best_reduction": best.reduction,
    }
    write_json(out / "scan.json", summary)
    plot_scan_profile(out / "scan_profile.png", report)
    _write_effective_config(config)
    _LOGGER.info(f"Best window [{best.start}, {best.end}) reduces by {best.reduction:.6g}")
    return summary


async def _async_gather_records(
    coordinator: CounterfactualCoordinator,
    dataset: Sequence[Any],
    chunk_size: int,
    include_negative_cfs: bool,
    sweep_sizes: Sequence[int],
) -> tuple[list, dict[int, list]]:
    records = await coordinator.async_collect_predictions(dataset, chunk_size, include_negative_cfs)
    positives = [item for item in dataset if item.is_positive]
    by_size = {
        size: await coordinator.async_collect_predictions(positives, size) for size in sweep_sizes
    }
    return records, by_size


def cmd_evaluate(config: RunConfig, args: argparse.Namespace) -> dict[str, Any]:
    """Reduction table, sweep, histograms, localization and significance."""
    dataset = read_dataset(config.data_dir)
    check_both_classes(dataset)
    ae, scorer = _load_models(args, dataset[0].volume.shape)
    e = config.section(CONF_EVALUATION)
    cfg = config.search_config()
    positives = [item for item in dataset if item.is_positive]
    sizes = check_sweep_sizes(positives, e["sweep_sizes"])

    with CounterfactualCoordinator(ae, scorer, cfg, config.threads) as coordinator:
        records, by_size = asyncio.run(
            _async_gather_records(
                coordinator, dataset, e["chunk_size"], e["include_negative_cfs"], sizes
            )
        )
    table = reduction_table(records, e["chunk_size"], e["include_negative_cfs"])
    sweep = sweep_from_records(by_size)
    histograms = histograms_from_records(records, e["bins"])
    localization = compare_localization(
        ae, scorer, dataset, config.section(CONF_SCAN)["chunk_size"], cfg, config.seed
    )

    pos = [r.baseline_prediction for r in records if r.label is Label.POSITIVE]
    neg = [r.baseline_prediction for r in records if r.label is Label.NEGATIVE]
    cf = [r.cf_prediction for r in records if r.label is Label.POSITIVE]
    depth = dataset[0].volume.shape[0]
    significance = {
        "p_value": permutation_test(pos, neg, e["permutation_iterations"], config.seed),
        "p_value_cf": permutation_test(pos, cf, e["permutation_iterations"], config.seed),
        "iterations": e["permutation_iterations"],
        "seed": config.seed,
        "timing_seconds": timing_model(depth, e["chunk_size"], e["per_chunk_seconds"]),
        "n_slices": depth,
        "chunk_size": e["chunk_size"],
        "per_chunk_seconds": e["per_chunk_seconds"],
    }

    out = config.output_dir
    write_reduction_csv(out / "reduction.csv", table)
    write_records_csv(out / "records.csv", records)
    write_sweep_csv(out / "sweep.csv", sweep)
    write_histograms_csv(out / "histograms.csv", histograms)
    write_localization_csv(out / "localization.csv", localization)
    write_json(out / "significance.json", significance)
    plot_chunk_sweep(out / "chunk_sweep.png", sweep)
    plot_histograms(out / "histograms.png", histograms)
    _write_effective_config(config)

    summary = {row.group: row.mean for row in table.rows}
    _LOGGER.info(
        f"Mean predictions: positives {summary[GROUP_POSITIVES]:.4g}, "
        f"negatives {summary[GROUP_NEGATIVES]:.4g}, "
        f"CFs of positives {summary[GROUP_CF_POSITIVES]:.4g}; p={significance['p_value']:.4g}"
    )
    return {
        **summary,
        "p_value": significance["p_value"],
        "mean_localization": {
            "latent_shift": float(np.mean([r.latent_shift_score for r in localization])),
            "input_gradient": float(np.mean([r.input_gradient_score for r in localization])),
        },
    }


COMMANDS: dict[str, Callable[[RunConfig, argparse.Namespace], dict[str, Any]]] = {
    "make-data": cmd_make_data,
    "train-ae": cmd_train_ae,
    "train-scorer": cmd_train_scorer,
    "gen-cf": cmd_gen_cf,
    "scan": cmd_scan,
    "evaluate": cmd_evaluate,
}


def configure_logging(verbose: bool, quiet: bool) -> None:
    """Root logger on stderr."""
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def error_line(err: CounterfactualError) -> str:
    """The single-line JSON error report."""
    strings = translations()
    template = strings["error"].get(err.code, strings["error"]["unknown"])
    if isinstance(err, ConfigError):
        template = strings["config_error"].get(err.key, template)
    return json.dumps({"error": err.code, "message": f"{template} {err}"}, sort_keys=True)


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point; returns the process exit status."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        config = load_config(args.config, _overrides(args))
        summary = COMMANDS[args.command](config, args)
    except CounterfactualError as err:
        _LOGGER.debug(f"{args.command} failed", exc_info=True)
        print(error_line(err), file=sys.stderr)
        return EXIT_CODES.get(err.code, EXIT_CODES["unknown"])
    except Exception as err:  # pylint: disable=broad-except
        _LOGGER.exception(f"Unexpected error in {args.command}")
        print(error_line(CounterfactualError(str(err))), file=sys.stderr)
        return EXIT_CODES["unknown"]
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return 0
