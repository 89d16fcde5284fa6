"""Training loop, evaluation driver, cross-validation, and the ablation
matrix runner. Everything is deterministic under the configured seeds."""

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import data_pipeline, network, objectives
from .image_ops import denormalize
from .network import ModelConfig, ablation_config, build, forward, save_checkpoint
from .objectives import LossBreakdown, MetricsReport, body_mask, metric_mae, \
    metric_psnr, metric_ssim
from .tensor_core import AdamState, adam_step, backward, zero_grads


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Run settings. Defaults are desk-scale; full-size runs opt in via the
    size/filter fields."""

    epochs: int = 200
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    lambda_low: float = 1.0
    lambda_high: float = 1.0
    lambda_rec: float = 1.0
    sigma: float = 3.0
    kernel_size: int = 13
    k: int = 3
    seed_init: int = 1
    seed_data: int = 2
    seed_shuffle: int = 3
    input_size: int = 64
    encoder_filters: tuple = network.REDUCED_ENCODER
    decoder_filters: tuple = network.REDUCED_DECODER
    dropout_p: float = 0.5
    ablation: str = "full"
    mask_threshold: float = 0.01
    lr_decay: bool = False
    out_dir: str = "runs"

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size != 1:
            raise ValueError("batch size is fixed at 1")
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.ablation not in network.ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        out = Path(self.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
        return self

    def to_dict(self):
        d = asdict(self)
        d["encoder_filters"] = list(self.encoder_filters)
        d["decoder_filters"] = list(self.decoder_filters)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def model_config(self):
        base = ModelConfig(
            input_size=self.input_size,
            encoder_filters=tuple(self.encoder_filters),
            decoder_filters=tuple(self.decoder_filters),
            dropout_p=self.dropout_p,
            lambda_low=self.lambda_low,
            lambda_high=self.lambda_high,
            lambda_rec=self.lambda_rec,
            rng_seed=self.seed_init,
        )
        return ablation_config(self.ablation, base)


@dataclass
class RunRecord:
    """What one training run did: per-epoch losses, metrics, provenance."""

    config: dict
    round_idx: int
    epoch_losses: list = field(default_factory=list)
    metrics: dict = None
    wall_clock_sec: float = 0.0
    checkpoint_path: str = None
    checkpoint_hash: str = None

    def to_dict(self):
        return {"config": self.config, "round_idx": self.round_idx,
                "epoch_losses": [bd.to_dict() for bd in self.epoch_losses],
                "metrics": self.metrics, "wall_clock_sec": self.wall_clock_sec,
                "checkpoint_path": self.checkpoint_path,
                "checkpoint_hash": self.checkpoint_hash}


def _file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _mean_breakdown(breakdowns):
    w = breakdowns[0].weights
    return LossBreakdown(
        float(np.mean([b.l_low for b in breakdowns])),
        float(np.mean([b.l_high for b in breakdowns])),
        float(np.mean([b.l_rec for b in breakdowns])),
        float(np.mean([b.total for b in breakdowns])),
        w)


def train(config, dataset, folds, round_idx, checkpoint_path=None):
    """Train one round: per sample forward, loss, backward, ADAM step.

    Aborts with a diagnostic if the loss goes non-finite. Returns the trained
    model and a RunRecord with per-epoch averaged loss breakdowns.
    """
    config.validate()
    start = time.monotonic()
    model = build(config.model_config())
    params = model.parameters()
    state = AdamState.for_params(params, lr=config.lr, beta1=config.beta1,
                                 beta2=config.beta2)
    use_branches = model.config.use_freq_branches
    weights = (config.lambda_low, config.lambda_high, config.lambda_rec)
    record = RunRecord(config=config.to_dict(), round_idx=round_idx)

    for epoch in range(config.epochs):
        if config.lr_decay:
            state.lr = config.lr * (1.0 - epoch / config.epochs)
        epoch_bds = []
        stream = data_pipeline.iterate(dataset, folds, round_idx, "train",
                                       config.seed_shuffle, epoch)
        for sample in stream:
            out = forward(model, sample.mr)
            total, bd = objectives.loss_total(
                out.low_pred, out.high_pred, out.final,
                sample.pet_low, sample.pet_high, sample.pet,
                weights=weights, use_freq_branches=use_branches)
            if not np.isfinite(bd.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, sample "
                    f"{sample.subject_id!r}: {bd}")
            backward(total)
            adam_step(params, [p.grad for p in params], state)
            zero_grads(params)
            epoch_bds.append(bd)
        record.epoch_losses.append(_mean_breakdown(epoch_bds))

    if checkpoint_path is None:
        checkpoint_path = Path(config.out_dir) / \
            f"{config.ablation}_round{round_idx}.ckpt"
    save_checkpoint(model, checkpoint_path)
    record.checkpoint_path = str(checkpoint_path)
    record.checkpoint_hash = _file_hash(checkpoint_path)
    record.wall_clock_sec = time.monotonic() - start
    return model, record


def evaluate(model, dataset, folds, round_idx, mask_threshold=0.01,
             csv_path=None):
    """Score a model on one round's test split in original intensity units."""
    model.eval()
    rows = []
    for sample in data_pipeline.iterate(dataset, folds, round_idx, "test", 0):
        pred = model.predict(sample.mr)
        syn = denormalize(pred, sample.Q)
        real = denormalize(sample.pet, sample.Q)
        mask = body_mask(real, mask_threshold)
        rows.append((sample.subject_id, round_idx,
                     metric_mae(real, syn, mask),
                     metric_psnr(real, syn),
                     metric_ssim(real, syn)))
    report = MetricsReport(
        rows, mask_policy=f"real_pet > {mask_threshold} * max(real_pet)")
    if csv_path is not None:
        report.write_csv(csv_path)
    return report


@dataclass
class CVResult:
    """Per-round records plus across-round and pooled per-sample aggregates."""

    records: list
    reports: list

    def round_summaries(self):
        return [r.summary() for r in self.reports]

    def summary(self):
        out = {}
        pooled = MetricsReport(
            [row for r in self.reports for row in r.rows],
            self.reports[0].mask_policy)
        for name in ("mae", "psnr", "ssim"):
            means = np.array([r.mean(name) for r in self.reports])
            out[name] = {
                "round_mean": float(means.mean()),
                "round_std": float(means.std()),
                "sample_mean": pooled.mean(name),
                "sample_std": pooled.std(name),
            }
        return out

    def table_text(self):
        s = self.summary()
        lines = ["metric  mean ± std (across rounds)  mean ± std (per sample)"]
        for name in ("mae", "psnr", "ssim"):
            m = s[name]
            lines.append(
                f"{name.upper():6s}  {m['round_mean']:.4g} ± {m['round_std']:.4g}"
                f"  {m['sample_mean']:.4g} ± {m['sample_std']:.4g}")
        return "\n".join(lines) + "\n"


def cross_validate(config, dataset):
    """Train and evaluate every round; one checkpoint per round."""
    config.validate()
    folds = data_pipeline.kfold_split(dataset, config.k, config.seed_data)
    records, reports = [], []
    for round_idx in range(config.k):
        model, record = train(config, dataset, folds, round_idx)
        csv_path = Path(config.out_dir) / \
            f"{config.ablation}_round{round_idx}_metrics.csv"
        report = evaluate(model, dataset, folds, round_idx,
                          config.mask_threshold, csv_path)
        record.metrics = report.summary()
        records.append(record)
        reports.append(report)
    return CVResult(records, reports)


@dataclass
class AblationResult:
    """The four-arm comparison matrix (rows) with shared seeds and data."""

    arms: dict  # name -> CVResult

    def table_text(self):
        lines = [f"{'config':10s}  {'MAE':>16s}  {'PSNR':>16s}  {'SSIM':>16s}"]
        for name in network.ABLATIONS:
            s = self.arms[name].summary()
            cells = [f"{s[m]['sample_mean']:.4g} ± {s[m]['sample_std']:.4g}"
                     for m in ("mae", "psnr", "ssim")]
            lines.append(f"{name:10s}  {cells[0]:>16s}  {cells[1]:>16s}  "
                         f"{cells[2]:>16s}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {name: cv.summary() for name, cv in self.arms.items()}


def ablate(config, dataset):
    """Run cross-validation for each ablation arm with identical seeds."""
    arms = {}
    for name in network.ABLATIONS:
        arms[name] = cross_validate(replace(config, ablation=name), dataset)
    return AblationResult(arms)


def write_run_report(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
