"""CLI entry point for aumai-hsi-transfer."""

from __future__ import annotations

import functools
import json
import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any, TypeVar

import click

from aumai_hsi_transfer.architectures import (
    build_model,
    dense_head,
    junction_shape,
    published_surgery,
    surgery_spec,
    transfer_surgery,
)
from aumai_hsi_transfer.autodiff_nn import (
    Params,
    count_params,
    dtype_for,
    frozen_digest,
    init_params,
)
from aumai_hsi_transfer.checkpoint import read_checkpoint, save_checkpoint
from aumai_hsi_transfer.config import RunConfig, SurgerySection, load_config, parse_overrides
from aumai_hsi_transfer.errors import (
    ConfigError,
    ContractError,
    HsiError,
    SurgeryError,
    exit_code_for,
)
from aumai_hsi_transfer.linalg_prep import (
    PatchSet,
    PcaModel,
    apply_pca,
    extract_patches,
    fit_pca,
    flatten_patches,
    load_pca,
    save_pca,
    split_train_test,
)
from aumai_hsi_transfer.models import (
    CheckpointMeta,
    History,
    ModelSpec,
    ModelVariant,
    PatchLayout,
    SplitSpec,
    SurgerySpec,
    SynthSpec,
    VariantName,
)
from aumai_hsi_transfer.scene_io import (
    PRESETS,
    Scene,
    class_table,
    generate_synthetic_scene,
    load_scene,
    save_scene,
    verify_class_table,
    write_class_map,
)
from aumai_hsi_transfer.train_eval import (
    compare_table,
    evaluate,
    format_metrics_table,
    metrics_report,
    model_summary,
    ordering_holds,
    predict_map,
    read_metrics,
    train,
    write_metrics,
)

logger = logging.getLogger(__name__)

F = TypeVar("F", bound=Callable[..., Any])

_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR"]


def _handle_errors(command: F) -> F:
    """Turn package failures into their exit codes with a one-line message."""

    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return command(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except Exception as exc:
            code = exit_code_for(exc)
            if not isinstance(exc, HsiError):
                logger.debug("unexpected failure", exc_info=exc)
            click.echo(f"Error: {exc}", err=True)
            sys.exit(code)

    return wrapper  # type: ignore[return-value]


def _threads(ctx: click.Context) -> int:
    return int((ctx.obj or {}).get("threads", 1))


@click.group()
@click.version_option()
@click.option(
    "--log-level",
    type=click.Choice(_LOG_LEVELS, case_sensitive=False),
    default="INFO",
    show_default=True,
    help="Logging verbosity (written to stderr).",
)
@click.option(
    "-v", "--verbose", is_flag=True, default=False, help="Shorthand for --log-level DEBUG."
)
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    default=1,
    show_default=True,
    envvar="HSTL_THREADS",
    help="Worker threads for evaluation and map prediction.",
)
@click.pass_context
def main(ctx: click.Context, log_level: str, verbose: bool, threads: int) -> None:
    """AumAI HSI Transfer CLI: hyperspectral classification with transfer learning."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


def _echo_census(scene: Scene) -> None:
    for index, entry in enumerate(class_table(scene).classes, start=1):
        click.echo(f"  {index:>3}  {entry.name:<32}{entry.sample_count:>8}")


@main.command("synth")
@click.option("--rows", type=int, required=True)
@click.option("--cols", type=int, required=True)
@click.option("--bands", type=int, required=True)
@click.option("--classes", "n_classes", type=int, required=True)
@click.option("--blobs", type=int, default=None, help="Blob count (default: one per class).")
@click.option("--noise", type=float, default=0.05, show_default=True)
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("--name", default="synthetic", show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False, path_type=Path), required=True)
@_handle_errors
def synth_command(
    rows: int,
    cols: int,
    bands: int,
    n_classes: int,
    blobs: int | None,
    noise: float,
    seed: int,
    name: str,
    output: Path,
) -> None:
    """Write a deterministic synthetic HSC1 scene."""
    try:
        spec = SynthSpec(
            name=name,
            rows=rows,
            cols=cols,
            bands=bands,
            n_classes=n_classes,
            blob_count=blobs if blobs is not None else n_classes,
            noise_sigma=noise,
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    scene = generate_synthetic_scene(spec)
    save_scene(scene, output)
    click.echo(str(output))
    _echo_census(scene)


@main.command("convert")
@click.argument("cube_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("labels_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--name", required=True)
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--cube-key", default=None)
@click.option("--labels-key", default=None)
@click.option("-o", "--output", type=click.Path(dir_okay=False, path_type=Path), required=True)
@_handle_errors
def convert_command(
    cube_file: Path,
    labels_file: Path,
    name: str,
    preset: str | None,
    cube_key: str | None,
    labels_key: str | None,
    output: Path,
) -> None:
    """Convert a MATLAB cube + ground-truth pair into an HSC1 scene."""
    from aumai_hsi_transfer.matlab import convert_mat_scene

    table = PRESETS[preset] if preset else None
    scene = convert_mat_scene(cube_file, labels_file, name, table, cube_key, labels_key)
    if table is not None:
        verify_class_table(scene, table)
    save_scene(scene, output)
    click.echo(str(output))
    _echo_census(scene)


# ---------------------------------------------------------------------------
# Training pipelines
# ---------------------------------------------------------------------------


def _load_target(cfg: RunConfig) -> Scene:
    scene = load_scene(cfg.scene.path)
    if cfg.scene.preset is not None:
        verify_class_table(scene, PRESETS[cfg.scene.preset])
    return scene


def _pca_for(cfg: RunConfig, scene: Scene, components: int) -> PcaModel:
    if cfg.pca.checkpoint is not None:
        return load_pca(cfg.pca.checkpoint)
    return fit_pca(scene.cube, components, standardize=cfg.pca.standardize)


def _patches(scene: Scene, pca: PcaModel, window: int, layout: PatchLayout) -> PatchSet:
    patches = extract_patches(apply_pca(scene.cube, pca), scene.labels, window, scene.n_classes)
    return flatten_patches(patches) if layout is PatchLayout.flat else patches


def _write_outputs(
    cfg: RunConfig,
    spec: ModelSpec,
    params: Params,
    pca: PcaModel,
    meta: CheckpointMeta,
    report: dict[str, Any],
) -> None:
    if cfg.outputs.pca is not None:
        save_pca(pca, cfg.outputs.pca)
    if cfg.outputs.checkpoint is not None:
        save_checkpoint(spec, params, cfg.outputs.checkpoint, meta)
    if cfg.outputs.metrics is not None:
        write_metrics(report, cfg.outputs.metrics)


def _finish(
    ctx: click.Context,
    cfg: RunConfig,
    scene: Scene,
    pca: PcaModel,
    spec: ModelSpec,
    params: Params,
    meta: CheckpointMeta,
    testset: PatchSet,
    history: History,
) -> None:
    metrics = evaluate(spec, params, testset, threads=_threads(ctx))
    report = metrics_report(metrics, cfg.seeds(), history, model_summary(spec, meta.variant))
    _write_outputs(cfg, spec, params, pca, meta, report)
    if cfg.outputs.map is not None:
        labels = predict_map(spec, params, scene, pca, meta.window, threads=_threads(ctx))
        write_class_map(labels, cfg.outputs.map)
    click.echo(format_metrics_table(metrics, scene.class_names))


@main.command(
    "train",
    context_settings={"ignore_unknown_options": True, "allow_extra_args": True},
)
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.pass_context
@_handle_errors
def train_command(ctx: click.Context, config_file: Path) -> None:
    """Train a base model from a JSON run config.

    Extra ``--section.key value`` arguments override config keys.
    """
    cfg = load_config(config_file, parse_overrides(ctx.args))
    if cfg.model.variant is None:
        raise ConfigError("model.variant is required for train")
    scene = _load_target(cfg)
    pca = _pca_for(cfg, scene, cfg.pca.components)
    variant = ModelVariant(
        name=cfg.model.variant,
        window=cfg.patches.window,
        pca_components=pca.n_components,
        n_classes=scene.n_classes,
    )
    layout = PatchLayout.cubes if variant.name is VariantName.cnn else PatchLayout.flat
    trainset, testset = split_train_test(
        _patches(scene, pca, variant.window, layout), cfg.patches.split()
    )

    spec = build_model(variant, leaky_alpha=cfg.model.leaky_alpha)
    params = init_params(spec, cfg.model.seed, cfg.train.precision)
    params, history = train(spec, params, trainset, cfg.train.config())

    meta = CheckpointMeta(
        variant=variant.name,
        window=variant.window,
        pca_components=pca.n_components,
        layout=layout,
        class_names=scene.class_names,
        scene=scene.name,
        pca_checkpoint=None if cfg.outputs.pca is None else str(cfg.outputs.pca),
        split=cfg.patches.split(),
    )
    _finish(ctx, cfg, scene, pca, spec, params, meta, testset, history)


def _resolve_surgery(
    section: SurgerySection | None, meta: CheckpointMeta, spec: ModelSpec, n_classes: int
) -> SurgerySpec:
    section = section or SurgerySection()
    if section.head is not None:
        return SurgerySpec(
            drop_last=section.drop_last or 0, head=section.head, head_seed=section.head_seed
        )
    if section.head_widths is not None:
        drop_last = section.drop_last or 0
        junction = junction_shape(spec, drop_last)
        if len(junction) != 1:
            raise SurgeryError(f"head_widths needs a flat junction, got {junction}")
        head = dense_head(
            junction[0], tuple(section.head_widths), n_classes, dropout=section.head_dropout
        )
        return SurgerySpec(drop_last=drop_last, head=head, head_seed=section.head_seed)
    if meta.variant is None:
        raise ConfigError("source checkpoint has no variant; give an explicit surgery head")
    return published_surgery(meta.variant, spec, n_classes, section.head_seed)


@main.command(
    "transfer",
    context_settings={"ignore_unknown_options": True, "allow_extra_args": True},
)
@click.argument("config_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.pass_context
@_handle_errors
def transfer_command(ctx: click.Context, config_file: Path) -> None:
    """Transfer a trained checkpoint to a new scene: truncate, freeze, append, train."""
    cfg = load_config(config_file, parse_overrides(ctx.args))
    if cfg.model.checkpoint is None:
        raise ConfigError("model.checkpoint is required for transfer")
    source = read_checkpoint(cfg.model.checkpoint)
    if source.meta is None:
        raise ConfigError(f"{cfg.model.checkpoint} carries no geometry metadata")

    scene = _load_target(cfg)
    pca = _pca_for(cfg, scene, source.meta.pca_components)
    if pca.n_components != source.meta.pca_components:
        raise SurgeryError(
            f"source model expects {source.meta.pca_components} components, "
            f"PCA provides {pca.n_components}"
        )
    trainset, testset = split_train_test(
        _patches(scene, pca, source.meta.window, source.meta.layout), cfg.patches.split()
    )

    surgery = _resolve_surgery(cfg.model.surgery, source.meta, source.spec, scene.n_classes)
    spec, params = transfer_surgery(source.spec, source.params, surgery)
    if params.dtype != dtype_for(cfg.train.precision):
        params = params.astype(dtype_for(cfg.train.precision))
    trainable, frozen = count_params(spec)
    before = frozen_digest(spec, params)
    logger.info("transfer: trainable %d, frozen %d, trunk sha256 %s", trainable, frozen, before)

    params, history = train(spec, params, trainset, cfg.train.config())
    after = frozen_digest(spec, params)
    logger.info("transfer: trunk sha256 after training %s", after)
    if after != before:
        raise ContractError("frozen trunk tensors changed during training")

    meta = source.meta.model_copy(
        update={
            "class_names": scene.class_names,
            "scene": scene.name,
            "pca_checkpoint": None if cfg.outputs.pca is None else str(cfg.outputs.pca),
            "split": cfg.patches.split(),
        }
    )
    _finish(ctx, cfg, scene, pca, spec, params, meta, testset, history)


# ---------------------------------------------------------------------------
# Evaluation and maps
# ---------------------------------------------------------------------------


def _pca_from(meta: CheckpointMeta, pca_file: Path | None) -> PcaModel:
    if pca_file is not None:
        return load_pca(pca_file)
    if meta.pca_checkpoint is None:
        raise ConfigError("no PCA checkpoint recorded; pass --pca")
    return load_pca(meta.pca_checkpoint)


@main.command("eval")
@click.argument("checkpoint_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("scene_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--pca", "pca_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--all",
    "all_pixels",
    is_flag=True,
    default=False,
    help="Evaluate every labeled pixel instead of the stored test split.",
)
@click.option("--train-fraction", type=float, default=None, help="Override the stored split.")
@click.option("--split-seed", type=int, default=None)
@click.option("--stratified/--no-stratified", default=None)
@click.option("-o", "--output", type=click.Path(dir_okay=False, path_type=Path), default=None)
@click.option("--json", "output_json", is_flag=True, default=False, help="Output as JSON.")
@click.pass_context
@_handle_errors
def eval_command(
    ctx: click.Context,
    checkpoint_file: Path,
    scene_file: Path,
    pca_file: Path | None,
    all_pixels: bool,
    train_fraction: float | None,
    split_seed: int | None,
    stratified: bool | None,
    output: Path | None,
    output_json: bool,
) -> None:
    """Evaluate a checkpoint on a scene (default: the test part of its stored split)."""
    checkpoint = read_checkpoint(checkpoint_file)
    if checkpoint.meta is None:
        raise ConfigError(f"{checkpoint_file} carries no geometry metadata")
    meta = checkpoint.meta
    scene = load_scene(scene_file)
    pca = _pca_from(meta, pca_file)
    patches = _patches(scene, pca, meta.window, meta.layout)

    seeds: dict[str, int] = {}
    if not all_pixels:
        stored = meta.split or SplitSpec(train_fraction=0.7)
        try:
            split = SplitSpec(
                train_fraction=(
                    stored.train_fraction if train_fraction is None else train_fraction
                ),
                seed=stored.seed if split_seed is None else split_seed,
                stratified=stored.stratified if stratified is None else stratified,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        _, patches = split_train_test(patches, split)
        seeds["split"] = split.seed

    metrics = evaluate(checkpoint.spec, checkpoint.params, patches, threads=_threads(ctx))
    report = metrics_report(
        metrics, seeds, model=model_summary(checkpoint.spec, meta.variant)
    )
    if output is not None:
        write_metrics(report, output)
    if output_json:
        click.echo(json.dumps(report, indent=2, sort_keys=True))
    else:
        click.echo(format_metrics_table(metrics, scene.class_names))


@main.command("map")
@click.argument(
    "inputs",
    nargs=-1,
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
    metavar="[CHECKPOINT] SCENE",
)
@click.option("--pca", "pca_file", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option(
    "--mask/--no-mask", default=True, show_default=True, help="Zero out unlabeled pixels."
)
@click.option("--truth", is_flag=True, default=False, help="Render the ground truth instead.")
@click.option("-o", "--output", type=click.Path(dir_okay=False, path_type=Path), required=True)
@click.pass_context
@_handle_errors
def map_command(
    ctx: click.Context,
    inputs: tuple[Path, ...],
    pca_file: Path | None,
    mask: bool,
    truth: bool,
    output: Path,
) -> None:
    """Write a PPM classification map of a whole scene.

    With --truth only the scene is needed and its ground truth is rendered.
    """
    expected = 1 if truth else 2
    if len(inputs) != expected:
        usage = "SCENE --truth" if truth else "CHECKPOINT SCENE"
        raise ConfigError(f"map expects {usage}, got {len(inputs)} paths")
    scene = load_scene(inputs[-1])
    if truth:
        write_class_map(scene.labels, output)
        click.echo(str(output))
        return
    checkpoint = read_checkpoint(inputs[0])
    if checkpoint.meta is None:
        raise ConfigError(f"{inputs[0]} carries no geometry metadata")
    pca = _pca_from(checkpoint.meta, pca_file)
    labels = predict_map(
        checkpoint.spec,
        checkpoint.params,
        scene,
        pca,
        checkpoint.meta.window,
        mask=mask,
        threads=_threads(ctx),
    )
    write_class_map(labels, output)
    click.echo(str(output))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@main.command("compare")
@click.argument(
    "metrics_files",
    nargs=-1,
    required=True,
    type=click.Path(exists=True, dir_okay=False, path_type=Path),
)
@_handle_errors
def compare_command(metrics_files: tuple[Path, ...]) -> None:
    """Side-by-side table of metrics reports, with the mlp2 > mlp3 > mlp1 check."""
    reports = {path.stem: read_metrics(path) for path in metrics_files}
    click.echo(compare_table(reports))
    verdict = ordering_holds(reports.values())
    if verdict is None:
        click.echo("ordering mlp2 > mlp3 > mlp1: not checked (missing variants)")
    else:
        click.echo(f"ordering mlp2 > mlp3 > mlp1: {'holds' if verdict else 'does not hold'}")


@main.command("params")
@click.argument("variant", type=click.Choice([v.value for v in VariantName]))
@click.option("--window", type=int, default=25, show_default=True)
@click.option("--components", type=int, default=30, show_default=True)
@click.option("--classes", "n_classes", type=int, default=16, show_default=True)
@click.option(
    "--transfer-classes",
    type=int,
    default=None,
    help="Apply the published surgery with this many target classes.",
)
@click.option("--json", "output_json", is_flag=True, default=False, help="Output as JSON.")
@_handle_errors
def params_command(
    variant: str,
    window: int,
    components: int,
    n_classes: int,
    transfer_classes: int | None,
    output_json: bool,
) -> None:
    """Print the architecture and parameter counts of a variant."""
    try:
        model_variant = ModelVariant(
            name=VariantName(variant),
            window=window,
            pca_components=components,
            n_classes=n_classes,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    spec = build_model(model_variant)
    if transfer_classes is not None:
        spec = surgery_spec(spec, published_surgery(model_variant.name, spec, transfer_classes))
    trainable, frozen = count_params(spec)
    summary = {
        "variant": variant,
        "architecture": list(spec.architecture()),
        "trainable": trainable,
        "frozen": frozen,
    }
    if output_json:
        click.echo(json.dumps(summary, indent=2))
        return
    click.echo(f"variant      : {variant}")
    click.echo(f"architecture : ({','.join(str(w) for w in spec.architecture())})")
    click.echo(f"trainable    : {trainable:,}")
    click.echo(f"frozen       : {frozen:,}")


if __name__ == "__main__":
    main()
