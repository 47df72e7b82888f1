"""Optimization loop: RMS-propagation updates, validation, checkpoints, ablations."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .core import (
    ClassTaxonomy,
    ConfigError,
    Dataset,
    NumericError,
    Sample,
    TrainConfig,
    config_from_text,
    config_to_text,
    validate_config,
)
from .data import ClassWeights, compute_class_weights, resize_sample
from .losses import dual_task_loss
from .metrics import ConfusionMatrix, MetricsReport, accumulate, compute_metrics
from .network import TBNet, init_parameters

OPTIMIZER_EPS = 1e-10


def substream_seed(seed: int, name: str) -> int:
    """Stable 63-bit seed for a named RNG substream of the run seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass
class AblationFlags:
    """Architecture/objective switches; all True is the full model."""

    use_caa: bool = True
    use_boundary_stream: bool = True
    use_class_weighting: bool = True

    def to_text(self) -> str:
        return (
            f"use_caa = {str(self.use_caa).lower()}\n"
            f"use_boundary_stream = {str(self.use_boundary_stream).lower()}\n"
            f"use_class_weighting = {str(self.use_class_weighting).lower()}\n"
        )

    @classmethod
    def from_text(cls, text: str) -> "AblationFlags":
        values = {}
        for line in text.splitlines():
            if "=" in line:
                key, _, raw = line.partition("=")
                values[key.strip()] = raw.strip().lower() in ("1", "true", "yes", "on")
        return cls(**values)


class RMSProp:
    """Square-gradient EMA optimizer.

    acc <- decay * acc + (1 - decay) * g^2 ; p <- p - lr * g / sqrt(acc + eps)
    with eps inside the root. Momentum-free.
    """

    def __init__(self, named_params, decay=0.995, eps=OPTIMIZER_EPS):
        if hasattr(named_params, "items"):
            items = list(named_params.items())
        else:
            items = [(f"p{i}", p) for i, p in enumerate(named_params)]
        self.names = [n for n, _ in items]
        self.params = [p for _, p in items]
        self.decay = decay
        self.eps = eps
        self.acc = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float):
        for p, acc in zip(self.params, self.acc):
            if p.grad is None:
                continue
            g = p.grad
            acc.mul_(self.decay).addcmul_(g, g, value=1.0 - self.decay)
            p.addcdiv_(g, torch.sqrt(acc + self.eps), value=-lr)

    def state_by_name(self) -> dict[str, torch.Tensor]:
        return dict(zip(self.names, self.acc))

    def load_state_by_name(self, state: dict[str, torch.Tensor]):
        missing = [n for n in self.names if n not in state]
        if missing:
            raise ConfigError(f"optimizer state missing accumulators: {missing[:5]}")
        for name, acc in zip(self.names, self.acc):
            acc.copy_(state[name].to(acc.dtype))


@dataclass
class TrainState:
    """Everything needed to continue or evaluate a run."""

    model: TBNet
    optimizer: RMSProp
    config: TrainConfig
    flags: AblationFlags
    taxonomy: ClassTaxonomy
    class_weights: ClassWeights | None
    data_rng: torch.Generator
    epoch: int = 0
    step: int = 0
    best_val_miou: float = -math.inf


@dataclass
class LogRow:
    step: int
    epoch: int
    seg_loss: float
    boundary_loss: float
    total_loss: float
    learning_rate: float


def build_model(cfg: TrainConfig, taxonomy: ClassTaxonomy | None = None,
                flags: AblationFlags | None = None) -> TBNet:
    taxonomy = taxonomy or ClassTaxonomy.default()
    flags = flags or AblationFlags()
    model = TBNet(
        cfg,
        num_classes=taxonomy.num_classes,
        use_caa=flags.use_caa,
        use_boundary=flags.use_boundary_stream,
    )
    init_parameters(model, substream_seed(cfg.seed, "init"))
    return model


def init_state(cfg: TrainConfig, taxonomy: ClassTaxonomy,
               flags: AblationFlags, weights: ClassWeights | None) -> TrainState:
    model = build_model(cfg, taxonomy, flags)
    optimizer = RMSProp(dict(model.named_parameters()), decay=cfg.decay)
    data_rng = torch.Generator().manual_seed(substream_seed(cfg.seed, "order"))
    return TrainState(
        model=model,
        optimizer=optimizer,
        config=cfg,
        flags=flags,
        taxonomy=taxonomy,
        class_weights=weights,
        data_rng=data_rng,
    )


def _batch_tensors(samples: list[Sample]):
    images = torch.from_numpy(np.stack([s.image for s in samples]))[:, None]
    labels = torch.from_numpy(np.stack([s.labels for s in samples]))
    boundaries = torch.from_numpy(
        np.stack([s.boundary for s in samples]).astype(np.float32)
    )
    return images, labels, boundaries


def effective_weighting_mode(cfg: TrainConfig, flags: AblationFlags) -> str:
    return cfg.weighting_mode if flags.use_class_weighting else "none"


def train(
    cfg: TrainConfig,
    data: Dataset,
    flags: AblationFlags | None = None,
    *,
    val_data: Dataset | None = None,
    out_dir: str | Path | None = None,
    resume: TrainState | None = None,
    val_every: int = 1,
) -> tuple[TrainState, list[LogRow]]:
    """Run the optimization loop; returns the final state and per-step log.

    When ``out_dir`` is given, an append-only CSV log plus best/last
    checkpoints are written there. ``resume`` continues a loaded state up
    to ``cfg.epochs``. Validation runs every ``val_every`` epochs on
    ``val_data`` (the training split when absent).
    """
    flags = flags or AblationFlags()
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    if not data.samples:
        raise ConfigError("training dataset is empty")
    torch.use_deterministic_algorithms(True)

    if resume is not None:
        state = resume
        cfg = replace(state.config, epochs=cfg.epochs)
        state.config = cfg
        if state.class_weights is None and effective_weighting_mode(cfg, state.flags) != "none":
            state.class_weights = compute_class_weights(data)
    else:
        weights = None
        if flags.use_class_weighting and cfg.weighting_mode != "none":
            weights = compute_class_weights(data)
        state = init_state(cfg, data.taxonomy, flags, weights)

    mode = effective_weighting_mode(cfg, state.flags)
    train_samples = [resize_sample(s, cfg.input_size) for s in data.samples]
    val_set = val_data if val_data is not None else data

    log_rows: list[LogRow] = []
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        new_file = not log_path.exists()
        log_file = open(log_path, "a")
        if new_file:
            log_file.write("step,epoch,seg_loss,boundary_loss,total_loss,learning_rate\n")

    n = len(train_samples)
    try:
        for epoch in range(state.epoch, cfg.epochs):
            state.model.train()
            lr = cfg.learning_rate * (cfg.lr_decay ** epoch)
            order = torch.randperm(n, generator=state.data_rng).tolist()
            for start in range(0, n, cfg.batch_size):
                batch = [train_samples[i] for i in order[start : start + cfg.batch_size]]
                images, labels, boundaries = _batch_tensors(batch)
                state.step += 1
                try:
                    output = state.model(images)
                    report = dual_task_loss(
                        output, labels, boundaries, state.class_weights, cfg,
                        weighting_mode=mode,
                    )
                except NumericError as exc:
                    raise NumericError(f"{exc} at step {state.step} (epoch {epoch})") from exc
                if not torch.isfinite(report.total):
                    raise NumericError(
                        f"non-finite loss at step {state.step} (epoch {epoch})"
                    )
                state.optimizer.zero_grad()
                report.total.backward()
                state.optimizer.step(lr)
                row = LogRow(
                    step=state.step,
                    epoch=epoch,
                    seg_loss=float(report.seg.detach()),
                    boundary_loss=float(report.boundary.detach()),
                    total_loss=float(report.total.detach()),
                    learning_rate=lr,
                )
                log_rows.append(row)
                if log_file is not None:
                    log_file.write(
                        f"{row.step},{row.epoch},{row.seg_loss!r},"
                        f"{row.boundary_loss!r},{row.total_loss!r},{row.learning_rate!r}\n"
                    )
                    log_file.flush()
            state.epoch = epoch + 1
            if (epoch + 1) % val_every == 0 or state.epoch == cfg.epochs:
                val_report = evaluate(state, val_set)
                if math.isfinite(val_report.mean_iou) and val_report.mean_iou > state.best_val_miou:
                    state.best_val_miou = val_report.mean_iou
                    if out_dir is not None:
                        save_checkpoint(out_dir / "ckpt_best.npz", state)
            if out_dir is not None:
                save_checkpoint(out_dir / "ckpt_last.npz", state)
    finally:
        if log_file is not None:
            log_file.close()
    return state, log_rows


def evaluate(state: TrainState, data: Dataset) -> MetricsReport:
    """Frozen-parameter metrics over a dataset split."""
    if data.taxonomy.num_classes != state.model.num_classes:
        raise ConfigError(
            f"dataset has {data.taxonomy.num_classes} classes but the checkpoint "
            f"was built for {state.model.num_classes}"
        )
    cfg = state.config
    cm = ConfusionMatrix.zeros(data.taxonomy.num_classes)
    state.model.eval()
    with torch.no_grad():
        samples = [resize_sample(s, cfg.input_size) for s in data.samples]
        for start in range(0, len(samples), cfg.batch_size):
            batch = samples[start : start + cfg.batch_size]
            images, _, _ = _batch_tensors(batch)
            output = state.model(images)
            preds = probs_to_labels(output.seg_probs.numpy())
            for sample, pred in zip(batch, preds):
                accumulate(cm, pred, sample.labels)
    return compute_metrics(cm, data.taxonomy)


def probs_to_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; exact ties go to the lowest class id."""
    return np.argmax(probs, axis=-3)


def predict(state: TrainState, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Segment one gray-scale image; outputs match the input's dimensions."""
    if image.ndim != 2:
        raise ConfigError("predict expects a single-channel 2-D image")
    cfg = state.config
    src_h, src_w = image.shape
    tensor = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
    tensor = torch.nn.functional.interpolate(
        tensor, size=cfg.input_size, mode="bilinear", align_corners=False
    )
    state.model.eval()
    with torch.no_grad():
        output = state.model(tensor)
        probs = torch.nn.functional.interpolate(
            output.seg_probs, size=(src_h, src_w), mode="bilinear", align_corners=False
        )[0].numpy()
        labels = probs_to_labels(probs)
        if output.boundary_prob is not None:
            boundary = torch.nn.functional.interpolate(
                output.boundary_prob[:, None], size=(src_h, src_w),
                mode="bilinear", align_corners=False,
            )[0, 0].numpy()
        else:
            boundary = np.zeros((src_h, src_w), dtype=np.float32)
    return labels, boundary


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    meta = {
        "epoch": np.int64(state.epoch),
        "step": np.int64(state.step),
        "best_val_miou": np.float64(state.best_val_miou),
        "rng/order": state.data_rng.get_state().numpy(),
    }
    if state.class_weights is not None:
        meta["class_weights/raw"] = np.asarray(state.class_weights.raw)
        meta["class_weights/normalized"] = np.asarray(state.class_weights.normalized)
    texts = {
        "config": config_to_text(state.config),
        "flags": state.flags.to_text(),
        "taxonomy": state.taxonomy.to_text(),
    }
    ckpt.write_archive(
        path,
        model_state=state.model.state_dict(),
        opt_state=state.optimizer.state_by_name(),
        meta=meta,
        texts=texts,
    )


def load_checkpoint(path: str | Path) -> TrainState:
    model_state, opt_state, meta, texts = ckpt.read_archive(path)
    cfg = config_from_text(texts["config"])
    flags = AblationFlags.from_text(texts["flags"])
    taxonomy = ClassTaxonomy.from_text(texts["taxonomy"])
    model = TBNet(
        cfg,
        num_classes=taxonomy.num_classes,
        use_caa=flags.use_caa,
        use_boundary=flags.use_boundary_stream,
    )
    own = model.state_dict()
    missing = sorted(set(own) - set(model_state))
    unexpected = sorted(set(model_state) - set(own))
    if missing or unexpected:
        raise ConfigError(
            f"checkpoint does not match the architecture: missing {missing[:5]}, "
            f"unexpected {unexpected[:5]}"
        )
    model.load_state_dict({k: v.to(own[k].dtype) for k, v in model_state.items()})

    optimizer = RMSProp(dict(model.named_parameters()), decay=cfg.decay)
    optimizer.load_state_by_name(opt_state)
    data_rng = torch.Generator()
    data_rng.set_state(torch.from_numpy(meta["rng/order"]))

    weights = None
    if flags.use_class_weighting and cfg.weighting_mode != "none":
        raw = meta.get("class_weights/raw")
        norm = meta.get("class_weights/normalized")
        if raw is not None and norm is not None:
            weights = ClassWeights(raw=raw, normalized=norm)
    return TrainState(
        model=model,
        optimizer=optimizer,
        config=cfg,
        flags=flags,
        taxonomy=taxonomy,
        class_weights=weights,
        data_rng=data_rng,
        epoch=int(meta["epoch"]),
        step=int(meta["step"]),
        best_val_miou=float(meta["best_val_miou"]),
    )
