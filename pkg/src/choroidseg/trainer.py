"""End-to-end alternating optimization of the segmenter and discriminator.

Four training modes reproduce the ablation structure: supervised on source
only, supervised on target (oracle upper bound), adversarial alignment only,
and the full adaptive objective (adversarial + perceptual). Runs are
deterministic for a fixed seed and thread count, and checkpoints round-trip
so an interrupted run resumes on the identical trajectory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import dataio
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .losses import LossRecord, LossWeights, adv_gen_loss, disc_loss, perceptual_loss, seg_loss, total_loss
from .metrics import MetricReport, compute_report
from .nets import (
    DiscriminatorConfig,
    FeatureExtractor,
    PatchDiscriminator,
    SegmenterConfig,
    UNet,
    init_parameters,
)

MODES = ("source_only", "oracle", "adversarial_only", "paaa")
ADVERSARIAL_MODES = ("adversarial_only", "paaa")

CHECKPOINT_VERSION = 1
BEST_CHECKPOINT = "checkpoint_best.pt"
LAST_CHECKPOINT = "checkpoint_last.pt"
LOG_NAME = "log.jsonl"
EVAL_REPORT_NAME = "eval.json"
CONFIG_ECHO_NAME = "config.json"

_SEED_STREAMS = {"segmenter": 0, "discriminator": 1, "data": 2}


def derive_seed(base: int, stream: str) -> int:
    """Independent per-component seed so optional networks never shift streams."""
    ss = np.random.SeedSequence(base, spawn_key=(_SEED_STREAMS[stream],))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; defaults are the published training constants."""

    mode: str = "paaa"
    source_dir: str = ""
    target_dir: str = ""
    val_dir: str = ""
    input_size: int = 224
    base_width: int = 32
    depth: int = 4
    extractor: str = "pretrained"
    extractor_weights: str = ""
    steps: int = 3000
    eval_every: int = 200
    batch_size: int = 4
    seed: int = 0
    num_threads: int = 1
    lr_seg: float = 1e-3
    lr_disc: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    weight_decay: float = 1e-4
    weights: LossWeights = LossWeights()
    eval_batch_size: int = 8


def validate_config(config: TrainConfig) -> TrainConfig:
    """Validate and normalize: modes without a loss term force its weight to 0."""
    if config.mode not in MODES:
        raise ConfigError(f"mode {config.mode!r} must be one of {MODES}")
    if config.lr_seg <= 0:
        raise ConfigError(f"lr_seg={config.lr_seg} must be > 0")
    if config.lr_disc <= 0:
        raise ConfigError(f"lr_disc={config.lr_disc} must be > 0")
    if config.weight_decay < 0:
        raise ConfigError(f"weight_decay={config.weight_decay} must be >= 0")
    if not 0 <= config.adam_beta1 < 1 or not 0 <= config.adam_beta2 < 1:
        raise ConfigError("adam betas must lie in [0, 1)")
    if config.steps < 0:
        raise ConfigError(f"steps={config.steps} must be >= 0")
    if config.batch_size < 1:
        raise ConfigError(f"batch_size={config.batch_size} must be >= 1")
    if config.eval_every < 1:
        raise ConfigError(f"eval_every={config.eval_every} must be >= 1")
    if config.num_threads < 1:
        raise ConfigError(f"num_threads={config.num_threads} must be >= 1")
    if config.extractor not in ("pretrained", "fallback"):
        raise ConfigError(f"extractor={config.extractor!r} must be 'pretrained' or 'fallback'")
    if config.input_size % (2 ** config.depth) != 0:
        raise ConfigError(
            f"input_size {config.input_size} must be divisible by 2^depth = {2 ** config.depth}"
        )
    config.weights.validate()
    w = config.weights
    if config.mode in ("source_only", "oracle"):
        w = dataclasses.replace(w, lambda_adv=0.0, lambda_per=0.0)
    elif config.mode == "adversarial_only":
        w = dataclasses.replace(w, lambda_per=0.0)
    return dataclasses.replace(config, weights=w)


def config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    if isinstance(data.get("weights"), dict):
        data["weights"] = LossWeights(**data["weights"])
    return TrainConfig(**data)


@dataclass
class TrainState:
    """Live parameters, optimizers and the step counter of one run."""

    generator: UNet
    opt_gen: torch.optim.Optimizer
    discriminator: Optional[PatchDiscriminator] = None
    opt_disc: Optional[torch.optim.Optimizer] = None
    extractor: Optional[FeatureExtractor] = None
    step: int = 0


def build_state(config: TrainConfig) -> TrainState:
    """Construct networks and optimizers for a validated config.

    Resource gating: the discriminator exists only in adversarial modes, the
    perceptual extractor only when its weight is active.
    """
    config = validate_config(config)
    generator = UNet(SegmenterConfig(base_width=config.base_width, depth=config.depth))
    init_parameters(generator, derive_seed(config.seed, "segmenter"))
    opt_gen = torch.optim.AdamW(
        generator.parameters(),
        lr=config.lr_seg,
        betas=(config.adam_beta1, config.adam_beta2),
        weight_decay=config.weight_decay,
    )
    discriminator = None
    opt_disc = None
    if config.mode in ADVERSARIAL_MODES and config.weights.lambda_adv > 0:
        discriminator = PatchDiscriminator(DiscriminatorConfig())
        init_parameters(discriminator, derive_seed(config.seed, "discriminator"))
        opt_disc = torch.optim.AdamW(
            discriminator.parameters(),
            lr=config.lr_disc,
            betas=(config.adam_beta1, config.adam_beta2),
            weight_decay=config.weight_decay,
        )
    extractor = None
    if config.mode == "paaa" and config.weights.lambda_per > 0:
        extractor = FeatureExtractor(config.extractor, config.extractor_weights or None)
    return TrainState(
        generator=generator,
        opt_gen=opt_gen,
        discriminator=discriminator,
        opt_disc=opt_disc,
        extractor=extractor,
    )


def _set_requires_grad(module: torch.nn.Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(flag)


def train_step(
    state: TrainState,
    batch_s: Optional[dataio.Batch],
    batch_t: Optional[dataio.Batch],
    config: TrainConfig,
) -> tuple[TrainState, LossRecord]:
    """One alternating optimization step; returns the mutated state and losses.

    Supervised modes update the segmenter only (oracle consumes labeled target
    batches, no source batches). Adversarial modes additionally update the
    discriminator on predictions detached from the segmenter's graph, using
    the pre-update segmenter outputs within the step.
    """
    weights = config.weights
    eps = weights.eps
    mode = config.mode

    if mode == "oracle":
        supervised = batch_t
        if supervised is None or supervised.labels_onehot is None:
            raise ConfigError("oracle mode needs labeled target batches")
    else:
        supervised = batch_s
        if supervised is None or supervised.labels_onehot is None:
            raise ConfigError(f"{mode} mode needs labeled source batches")

    probs_sup = state.generator(supervised.images)
    loss_seg = seg_loss(probs_sup, supervised.labels_onehot, eps)

    loss_adv: torch.Tensor | float = 0.0
    loss_per: torch.Tensor | float = 0.0
    probs_t = None
    if state.discriminator is not None:
        if batch_t is None:
            raise ConfigError(f"{mode} mode needs target batches")
        probs_t = state.generator(batch_t.images)
        _set_requires_grad(state.discriminator, False)
        loss_adv = adv_gen_loss(state.discriminator(probs_t), eps)
        if state.extractor is not None:
            pred_pyr = state.extractor(probs_t[:, 1:2])
            with torch.no_grad():
                label_pyr = state.extractor(supervised.labels_onehot[:, 1:2])
            loss_per = perceptual_loss(pred_pyr, label_pyr)

    total = total_loss(loss_seg, loss_adv, loss_per, weights)

    def scalar(x) -> float:
        return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)

    record = LossRecord(
        step=state.step,
        seg=scalar(loss_seg),
        adv_gen=scalar(loss_adv),
        per=scalar(loss_per),
        disc=0.0,
        total=scalar(total),
    )
    if not torch.isfinite(torch.as_tensor(record.total)):
        raise TrainingDiverged(f"non-finite total loss at step {state.step}", record=record)

    state.opt_gen.zero_grad()
    total.backward()
    state.opt_gen.step()

    if state.discriminator is not None:
        _set_requires_grad(state.discriminator, True)
        scores_src = state.discriminator(probs_sup.detach())
        scores_tgt = state.discriminator(probs_t.detach())
        loss_disc = disc_loss(scores_src, scores_tgt, eps)
        record.disc = scalar(loss_disc)
        if not torch.isfinite(loss_disc):
            raise TrainingDiverged(
                f"non-finite discriminator loss at step {state.step}", record=record
            )
        state.opt_disc.zero_grad()
        loss_disc.backward()
        state.opt_disc.step()

    state.step += 1
    return state, record


@torch.no_grad()
def predict_masks(
    generator: UNet,
    dataset: dataio.Dataset,
    input_size: int,
    batch_size: int = 8,
):
    """Yield (index, id, predicted mask) at each sample's native resolution.

    Predictions are computed at network resolution, argmax-decoded, then
    upscaled by nearest-neighbor back to the native image size.
    """
    n = len(dataset)
    for start in range(0, n, batch_size):
        indices = range(start, min(start + batch_size, n))
        batch = dataio.make_batch(dataset, list(indices), input_size)
        probs = generator(batch.images)
        pred_small = probs.argmax(dim=1, keepdim=True).float()
        for j, i in enumerate(indices):
            native = dataset.image(i).shape
            pred = torch.nn.functional.interpolate(
                pred_small[j : j + 1], size=native, mode="nearest"
            )[0, 0]
            yield i, dataset.id(i), pred.numpy().astype(np.uint8)


def evaluate(
    generator: UNet,
    dataset: dataio.Dataset,
    input_size: int,
    batch_size: int = 8,
) -> MetricReport:
    """Segmenter-only evaluation at the dataset's native mask resolution."""
    if not dataset.labels_visible:
        raise ConfigError("evaluation needs a dataset with labels_visible=True")
    pairs = [
        (sample_id, pred, dataset.mask(i))
        for i, sample_id, pred in predict_masks(generator, dataset, input_size, batch_size)
    ]
    return compute_report(pairs)


def save_checkpoint(path: str | Path, state: TrainState, config: TrainConfig, best: Optional[dict] = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": config_to_dict(config),
        "step": state.step,
        "generator": state.generator.state_dict(),
        "opt_gen": state.opt_gen.state_dict(),
        "discriminator": state.discriminator.state_dict() if state.discriminator else None,
        "opt_disc": state.opt_disc.state_dict() if state.opt_disc else None,
        "torch_rng": torch.get_rng_state(),
        "best": best,
    }
    torch.save(payload, Path(path))


def _read_checkpoint(path: str | Path, expect_config: Optional[TrainConfig]):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    config = config_from_dict(payload["config"])
    if expect_config is not None:
        for key in ("base_width", "depth", "mode", "input_size"):
            got = getattr(config, key)
            want = getattr(expect_config, key)
            if got != want:
                raise CheckpointError(
                    f"checkpoint {key}={got!r} does not match configured {key}={want!r}"
                )
    return payload, config


def load_checkpoint(path: str | Path, expect_config: Optional[TrainConfig] = None):
    """Rebuild (state, config, best) from a checkpoint file.

    Architecture-relevant mismatches against `expect_config` raise
    CheckpointError before any parameters are touched.
    """
    payload, config = _read_checkpoint(path, expect_config)
    state = build_state(config)
    try:
        state.generator.load_state_dict(payload["generator"])
        state.opt_gen.load_state_dict(payload["opt_gen"])
        if state.discriminator is not None and payload["discriminator"] is not None:
            state.discriminator.load_state_dict(payload["discriminator"])
            state.opt_disc.load_state_dict(payload["opt_disc"])
    except (RuntimeError, KeyError) as exc:
        raise CheckpointError(f"checkpoint {path} does not fit its own config: {exc}") from exc
    state.step = int(payload["step"])
    if payload.get("torch_rng") is not None:
        torch.set_rng_state(payload["torch_rng"])
    return state, config, payload.get("best")


def load_generator(path: str | Path, expect_config: Optional[TrainConfig] = None):
    """Load only the segmenter from a checkpoint (the evaluation path).

    Neither the discriminator nor the perceptual extractor is constructed, so
    any checkpoint evaluates on a machine without extractor weights.
    """
    payload, config = _read_checkpoint(path, expect_config)
    generator = UNet(SegmenterConfig(base_width=config.base_width, depth=config.depth))
    try:
        generator.load_state_dict(payload["generator"])
    except (RuntimeError, KeyError) as exc:
        raise CheckpointError(f"checkpoint {path} does not fit its own config: {exc}") from exc
    return generator, config


@dataclass
class TrainResult:
    run_dir: Path
    records: list[LossRecord] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    best: Optional[dict] = None
    best_checkpoint: Optional[Path] = None
    last_checkpoint: Optional[Path] = None


def _load_run_datasets(config: TrainConfig):
    """Per-mode dataset loading; the adaptation path never sees target labels."""
    source = target = None
    if config.mode == "oracle":
        target = dataio.load_dataset(config.target_dir, "target", labels_visible=True)
    elif config.mode == "source_only":
        source = dataio.load_dataset(config.source_dir, "source", labels_visible=True)
    else:
        source = dataio.load_dataset(config.source_dir, "source", labels_visible=True)
        target = dataio.load_dataset(config.target_dir, "target", labels_visible=False)
    val = dataio.load_dataset(config.val_dir, "target", labels_visible=True)
    return source, target, val


def train(
    config: TrainConfig,
    run_dir: str | Path,
    resume_from: Optional[str | Path] = None,
) -> TrainResult:
    """Run the full training loop, logging and checkpointing under `run_dir`.

    Evaluates on the held-out labeled target split every `eval_every` steps
    (and at the final step), keeping the checkpoint with the best target IOU.
    A non-finite loss aborts with the last checkpoint preserved on disk.
    """
    config = validate_config(config)
    torch.set_num_threads(config.num_threads)
    torch.use_deterministic_algorithms(True)

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_ECHO_NAME).write_text(json.dumps(config_to_dict(config), indent=2) + "\n")

    source, target, val = _load_run_datasets(config)

    if resume_from is not None:
        state, _, best = load_checkpoint(resume_from, expect_config=config)
        best = dict(best) if best else None
    else:
        state, best = build_state(config), None

    if config.mode == "oracle":
        stream = ((None, b) for b in dataio.single_iterator(
            target, config.batch_size, derive_seed(config.seed, "data"),
            size=config.input_size, start_step=state.step))
    elif config.mode == "source_only":
        stream = ((b, None) for b in dataio.single_iterator(
            source, config.batch_size, derive_seed(config.seed, "data"),
            size=config.input_size, start_step=state.step))
    else:
        stream = dataio.paired_iterator(
            source, target, config.batch_size, derive_seed(config.seed, "data"),
            size=config.input_size, start_step=state.step)

    result = TrainResult(run_dir=run_dir)
    best_path = run_dir / BEST_CHECKPOINT
    last_path = run_dir / LAST_CHECKPOINT

    log_mode = "a" if resume_from is not None else "w"
    with open(run_dir / LOG_NAME, log_mode) as log:
        header = {
            "type": "header",
            "mode": config.mode,
            "lambda_seg": config.weights.lambda_seg,
            "lambda_adv": config.weights.lambda_adv,
            "lambda_per": config.weights.lambda_per,
            "adam_beta1": config.adam_beta1,
            "adam_beta2": config.adam_beta2,
            "lr_seg": config.lr_seg,
            "lr_disc": config.lr_disc,
            "weight_decay": config.weight_decay,
            "input_size": config.input_size,
            "seed": config.seed,
            "start_step": state.step,
        }
        log.write(json.dumps(header) + "\n")

        def run_eval() -> dict:
            report = evaluate(state.generator, val, config.input_size, config.eval_batch_size)
            entry = {"step": state.step, "iou": report.iou, "ausde": report.ausde}
            result.history.append(entry)
            log.write(json.dumps({"type": "eval", **entry}) + "\n")
            return {**entry, "report": report.to_dict()}

        try:
            while state.step < config.steps:
                batch_s, batch_t = next(stream)
                state, record = train_step(state, batch_s, batch_t, config)
                result.records.append(record)
                log.write(json.dumps({"type": "loss", **record.to_dict()}) + "\n")
                if state.step % config.eval_every == 0 or state.step == config.steps:
                    snapshot = run_eval()
                    if best is None or snapshot["iou"] > best["iou"]:
                        best = snapshot
                        save_checkpoint(best_path, state, config, best=best)
        except (TrainingDiverged, ValueError) as exc:
            # NaN aborts (diverged total or a poisoned loss input) keep the
            # last checkpoint on disk for post-mortem
            save_checkpoint(last_path, state, config, best=best)
            record = getattr(exc, "record", None)
            log.write(json.dumps({"type": "abort", "step": state.step,
                                  "record": record.to_dict() if record else None}) + "\n")
            raise

        save_checkpoint(last_path, state, config, best=best)

    result.best = best
    result.last_checkpoint = last_path
    result.best_checkpoint = best_path if best_path.is_file() else None
    if best is not None:
        payload = {"mode": config.mode, "step": best["step"], "report": best["report"]}
        (run_dir / EVAL_REPORT_NAME).write_text(json.dumps(payload, indent=2) + "\n")
    return result


def evaluate_checkpoint(
    checkpoint_path: str | Path,
    dataset: dataio.Dataset,
    batch_size: Optional[int] = None,
) -> MetricReport:
    """Load a checkpoint's segmenter and evaluate it on a labeled dataset."""
    generator, config = load_generator(checkpoint_path)
    return evaluate(
        generator, dataset, config.input_size, batch_size or config.eval_batch_size
    )
