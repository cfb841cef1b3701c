"""SGD training, SAD/MSE evaluation and the four-model SE×PL ablation."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import fileio, synth
from .autodiff import Tensor, backward
from .errors import ConfigError, ContractViolation, FormatError, MBHXError, NumericError
from .losses import FeatureExtractor, LossWeights, total_loss
from .network import MODEL_GRID, ModelConfig, NetworkWeights, forward, init_weights, model_config

log = logging.getLogger(__name__)

# full-scale results (30,279 training cases, pretrained backbones); SAD in
# units of 1e3, MSE in units of 1e-3.  Not reproducible at desk scale.
FULL_SCALE_REFERENCE = {
    1: {"alpha_SAD": 2.57, "alpha_MSE": 1.29, "fg_SAD": 8.84, "fg_MSE": 2.30},
    2: {"alpha_SAD": 2.47, "alpha_MSE": 1.20, "fg_SAD": 8.73, "fg_MSE": 2.06},
    3: {"alpha_SAD": 2.08, "alpha_MSE": 0.73, "fg_SAD": 8.08, "fg_MSE": 1.71},
    4: {"alpha_SAD": 2.02, "alpha_MSE": 0.71, "fg_SAD": 7.94, "fg_MSE": 1.58},
}

LOG_FIELDS = ("epoch", "L_o", "L_alpha", "L_f", "l_ab_a", "l_c_a", "l_p_a", "l_ab_f", "l_p_f",
              "val_alpha_SAD", "val_alpha_MSE")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3.5e-3
    momentum: float = 0.9
    weight_decay: float = 4e-5
    epochs: int = 80
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ConfigError("batch_size and checkpoint_every must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer


def sgd_step(weights: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             velocity: Mapping[str, np.ndarray], config: TrainConfig):
    """One momentum step: v <- m*v - lr*(g + wd*theta); theta <- theta + v.

    Returns new ``(weights, velocity)`` dicts; inputs are left untouched.
    """
    lr, m, wd = config.learning_rate, config.momentum, config.weight_decay
    new_w, new_v = {}, {}
    for name, theta in weights.items():
        g, v = grads[name], velocity[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ContractViolation(
                f"sgd_step: {name} has weight {theta.shape}, grad {g.shape}, velocity {v.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"sgd_step: non-finite gradient for parameter {name}")
        v_next = m * v - lr * (g + wd * theta)
        new_v[name] = v_next
        new_w[name] = theta + v_next
    return new_w, new_v


# ---------------------------------------------------------------------------
# data


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {dataset_dir}")
    return fileio.read_manifest(path)


def load_split(dataset_dir, split: str, dtype=np.float32) -> dict[str, np.ndarray]:
    """Stack every readable sample of ``split`` into NCHW arrays.

    Unreadable samples are skipped with a warning; a split with no readable
    sample is an error.
    """
    manifest = load_manifest(dataset_dir)
    entry = synth.split_entry(manifest, split)
    if entry is None:
        raise FormatError(f"{dataset_dir}: manifest has no {split!r} split")
    extent = tuple(manifest["extent"])
    stacks: dict[str, list[np.ndarray]] = {k: [] for k in synth.SAMPLE_FILES}
    for i in range(entry["count"]):
        d = synth.sample_dir(dataset_dir, split, i)
        try:
            sample = synth.read_sample(d)
            if sample["image"].shape[:2] != extent:
                raise FormatError(f"extent {sample['image'].shape[:2]} differs from manifest {extent}")
        except (OSError, MBHXError, ValueError) as exc:
            log.warning("skipping corrupt sample %s: %s", d, exc)
            continue
        for k in synth.SAMPLE_FILES:
            stacks[k].append(sample[k].transpose(2, 0, 1))
    if not stacks["image"]:
        raise FormatError(f"{dataset_dir}: no readable samples in split {split!r}")
    return {k: np.stack(v).astype(dtype) for k, v in stacks.items()}


def _batch(data: dict[str, np.ndarray], idx) -> dict[str, np.ndarray]:
    return {k: v[idx] for k, v in data.items()}


# ---------------------------------------------------------------------------
# metrics


def error_sums(pred_alpha, gt_alpha, pred_fg, gt_fg) -> dict[str, float]:
    """Absolute/squared error sums and element counts, accumulated in float64."""
    da = np.asarray(pred_alpha, dtype=np.float64) - np.asarray(gt_alpha, dtype=np.float64)
    df = np.asarray(pred_fg, dtype=np.float64) - np.asarray(gt_fg, dtype=np.float64)
    return {"alpha_abs": float(np.abs(da).sum()), "alpha_sq": float(np.square(da).sum()),
            "alpha_n": da.size, "fg_abs": float(np.abs(df).sum()), "fg_sq": float(np.square(df).sum()),
            "fg_n": df.size}


def metrics_from_sums(sums: Mapping[str, float]) -> dict[str, float]:
    """SAD is summed over the whole set; MSE is averaged over every element."""
    return {"alpha_SAD": sums["alpha_abs"], "alpha_MSE": sums["alpha_sq"] / sums["alpha_n"],
            "fg_SAD": sums["fg_abs"], "fg_MSE": sums["fg_sq"] / sums["fg_n"]}


def compute_metrics(pred_alpha, gt_alpha, pred_fg, gt_fg) -> dict[str, float]:
    return metrics_from_sums(error_sums(pred_alpha, gt_alpha, pred_fg, gt_fg))


def predict(weights: NetworkWeights, images: np.ndarray, batch_size: int = 8):
    """Run inference over an NCHW image stack; returns ``(alpha, fg)`` arrays."""
    config = weights.config
    dtype = next(iter(weights)).dtype
    alphas, fgs = [], []
    for start in range(0, len(images), batch_size):
        a, f = forward(weights, config, Tensor(images[start:start + batch_size].astype(dtype)))
        alphas.append(a.data)
        fgs.append(f.data)
    return np.concatenate(alphas), np.concatenate(fgs)


def evaluate_weights(weights: NetworkWeights, data: Mapping[str, np.ndarray], batch_size: int = 8) -> dict[str, float]:
    if tuple(data["image"].shape[2:]) != weights.config.input_extent:
        raise ConfigError(
            f"dataset extent {tuple(data['image'].shape[2:])} does not match model extent "
            f"{weights.config.input_extent}")
    pred_alpha, pred_fg = predict(weights, data["image"], batch_size)
    return compute_metrics(pred_alpha, data["alpha"], pred_fg, data["fg"])


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, weights: NetworkWeights, train_config: TrainConfig | None = None, epoch: int = 0) -> None:
    header = {"kind": "model", "model_config": weights.config.to_dict(), "epoch": int(epoch),
              "train_config": train_config.to_dict() if train_config else None}
    fileio.save_checkpoint(path, weights.arrays(), header)


def load_model(path) -> tuple[NetworkWeights, dict]:
    arrays, header = fileio.load_checkpoint(path)
    if header.get("kind") != "model":
        raise FormatError(f"{path}: not a model checkpoint")
    config = ModelConfig.from_dict(header["model_config"])
    return NetworkWeights.from_arrays(config, arrays), header


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    weights: NetworkWeights
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset_dir, out_path=None,
          val_split: str = "val", log_path=None, loss_weights: LossWeights = LossWeights(),
          extractor: FeatureExtractor | None = None, dtype=np.float32) -> TrainResult:
    """Train on the 'train' split, monitoring ``val_split`` after every epoch.

    Writes ``out_path`` every ``checkpoint_every`` epochs and at the end, and
    keeps the epoch with the lowest validation alpha SAD in
    ``<out_path stem>.best.ckpt``.  ``log_path`` receives one JSON record per
    epoch.  Falls back to validating on the training split when the dataset
    has no ``val_split``.
    """
    manifest = load_manifest(dataset_dir)
    if tuple(manifest["extent"]) != model_cfg.input_extent:
        raise ConfigError(f"dataset extent {manifest['extent']} does not match model extent "
                          f"{list(model_cfg.input_extent)}")
    data = load_split(dataset_dir, "train", dtype)
    if synth.split_entry(manifest, val_split) is None:
        log.warning("no %r split in %s; validating on the training split", val_split, dataset_dir)
        val_split = "train"
    val = data if val_split == "train" else load_split(dataset_dir, val_split, dtype)
    if model_cfg.use_perceptual and extractor is None:
        extractor = FeatureExtractor(dtype=dtype)

    weights = init_weights(model_cfg, train_cfg.seed, dtype)
    velocity = {k: np.zeros_like(v) for k, v in weights.arrays().items()}
    n = len(data["image"])
    history: list[dict] = []
    best_sad, best_arrays, best_epoch = np.inf, None, 0
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            order = np.random.default_rng([train_cfg.seed, epoch]).permutation(n)
            sums = dict.fromkeys(LOG_FIELDS[1:-2], 0.0)
            for start in range(0, n, train_cfg.batch_size):
                idx = order[start:start + train_cfg.batch_size]
                batch = _batch(data, idx)
                pred_a, pred_f = forward(weights, model_cfg, Tensor(batch["image"]))
                l_o, _, _, parts = total_loss(loss_weights, model_cfg, batch, pred_a, pred_f, extractor)
                weights.zero_grad()
                backward(l_o)
                new_w, velocity = sgd_step(weights.arrays(), {k: p.grad for k, p in weights.params.items()},
                                           velocity, train_cfg)
                for k, p in weights.params.items():
                    p.data = new_w[k]
                for key in sums:
                    sums[key] += parts[key] * len(idx)
            record = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
            val_metrics = evaluate_weights(weights, val)
            record["val_alpha_SAD"] = val_metrics["alpha_SAD"]
            record["val_alpha_MSE"] = val_metrics["alpha_MSE"]
            history.append(record)
            log.info("epoch %d  L_o=%.5f  val alpha SAD=%.2f", epoch, record["L_o"], record["val_alpha_SAD"])
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if record["val_alpha_SAD"] < best_sad:
                best_sad, best_epoch = record["val_alpha_SAD"], epoch
                best_arrays = {k: v.copy() for k, v in weights.arrays().items()}
            if out_path is not None and epoch % train_cfg.checkpoint_every == 0:
                save_model(out_path, weights, train_cfg, epoch)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_path is not None:
        save_model(out_path, weights, train_cfg, train_cfg.epochs)
        best = NetworkWeights.from_arrays(model_cfg, best_arrays)
        save_model(best_checkpoint_path(out_path), best, train_cfg, best_epoch)
    return TrainResult(weights, history, best_epoch)


def best_checkpoint_path(out_path) -> Path:
    p = Path(out_path)
    return p.with_name(p.stem + ".best" + p.suffix)


# ---------------------------------------------------------------------------
# evaluation and ablation


def evaluate(checkpoint, dataset_dir, split: str = "test") -> dict[str, Any]:
    """One report row for a checkpoint path (or in-memory weights)."""
    weights = checkpoint if isinstance(checkpoint, NetworkWeights) else load_model(checkpoint)[0]
    data = load_split(dataset_dir, split, next(iter(weights)).dtype)
    cfg = weights.config
    row = {"model_id": model_id_for(cfg), "SE": cfg.share_encoder, "PL": cfg.use_perceptual}
    row.update(evaluate_weights(weights, data))
    return row


def model_id_for(config: ModelConfig) -> int:
    for mid, grid in MODEL_GRID.items():
        if grid == (config.share_encoder, config.use_perceptual):
            return mid
    raise ConfigError("unreachable model grid position")


@dataclass
class MetricsReport:
    """Ablation report rows; SAD is a per-set sum, MSE a per-element mean."""

    rows: list[dict] = field(default_factory=list)
    split: str = "test"

    def to_dict(self) -> dict:
        return {"split": self.split, "rows": self.rows,
                "units": {"SAD": "sum of absolute differences over the split",
                          "MSE": "mean squared error over all elements of the split"}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(d["rows"], d.get("split", "test"))

    def render_text(self) -> str:
        yn = {True: "yes", False: "no"}
        lines = []
        for title, prefix in (("Alpha prediction", "alpha"), ("Foreground prediction", "fg")):
            lines.append(title)
            lines.append(f"{'Methods':<10}{'SE':<5}{'PL':<5}{'SAD(x10^3)':>12}{'MSE(x10^-3)':>13}")
            for r in self.rows:
                lines.append(f"{'Model ' + str(r['model_id']):<10}{yn[r['SE']]:<5}{yn[r['PL']]:<5}"
                             f"{r[prefix + '_SAD'] / 1e3:>12.4f}{r[prefix + '_MSE'] / 1e-3:>13.4f}")
            lines.append("")
        return "\n".join(lines)


def _train_and_evaluate(args) -> dict:
    model_id, train_cfg, dataset_dir, base_channels, extent, out_dir = args
    cfg = model_config(model_id, base_channels, extent)
    out_path = None if out_dir is None else Path(out_dir) / f"model{model_id}.ckpt"
    log_path = None if out_dir is None else Path(out_dir) / f"model{model_id}.log.jsonl"
    result = train(cfg, train_cfg, dataset_dir, out_path=out_path, log_path=log_path)
    return evaluate(result.weights, dataset_dir, "test")


def run_ablation(train_cfg: TrainConfig, dataset_dir, out_dir=None, base_channels: int = 16,
                 jobs: int = 1) -> MetricsReport:
    """Train and test Models 1-4 from identical seeds.

    ``jobs > 1`` trains the four models in separate processes; results do not
    depend on it.
    """
    extent = tuple(load_manifest(dataset_dir)["extent"])
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    tasks = [(mid, train_cfg, str(dataset_dir), base_channels, extent, out_dir) for mid in sorted(MODEL_GRID)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, 4)) as pool:
            rows = list(pool.map(_train_and_evaluate, tasks))
    else:
        rows = [_train_and_evaluate(t) for t in tasks]
    return MetricsReport(rows)
