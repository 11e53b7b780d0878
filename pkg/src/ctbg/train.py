"""Training loop: scenes stream through the model one at a time, losses
average over the batch, and one optimizer step follows per batch.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import GradientNaNError
from .checkpoint import save_checkpoint
from .losses import scene_loss
from .model import ModelConfig, RelationTransformer
from .optim import Adam, warmup_lr
from .synth import Scene


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    warmup_iters: int = 200
    total_iters: int = 5000
    batch_size: int = 8
    checkpoint_every: int = 1000
    log_every: int = 25

    def __post_init__(self):
        if self.total_iters < 1 or self.batch_size < 1:
            raise ValueError("total_iters and batch_size must be positive")


@dataclass
class TrainRow:
    iteration: int
    lr: float
    loss_total: float
    loss_rel_final: float
    loss_edge_final: float


LOG_HEADER = ["iter", "lr", "loss_total", "loss_rel_final", "loss_edge_final"]


def train(
    scenes: list[Scene],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seed: int,
    out_dir: str | Path | None = None,
    progress: bool = False,
) -> tuple[RelationTransformer, list[TrainRow]]:
    """Train a fresh model; returns it plus the per-iteration loss log.

    Deterministic for fixed (scenes, configs, seed).  When ``out_dir`` is
    given, writes ``loss_log.csv`` and periodic checkpoints there.
    """
    if not scenes:
        raise ValueError("no training scenes")
    rng = np.random.default_rng(seed)
    model = RelationTransformer(model_cfg, rng)
    params = model.parameters()
    names = [n for n, _ in model.named_parameters()]
    opt = Adam(
        params,
        lr=train_cfg.lr,
        betas=train_cfg.betas,
        eps=train_cfg.eps,
        weight_decay=train_cfg.weight_decay,
    )

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows: list[TrainRow] = []
    started = time.perf_counter()
    for it in range(train_cfg.total_iters):
        batch_idx = rng.integers(0, len(scenes), size=train_cfg.batch_size)
        total = None
        rel_acc = 0.0
        edge_acc = 0.0
        try:
            for si in batch_idx:
                scene = scenes[int(si)]
                result = model.forward_scene(scene)
                loss, parts = scene_loss(result, scene.successors())
                rel_acc += parts["rel_final"]
                edge_acc += parts["edge_final"]
                total = loss if total is None else ad.add(total, loss)
            total = ad.mul(total, 1.0 / train_cfg.batch_size)
            if not np.isfinite(total.data):
                raise GradientNaNError("non-finite loss")
            grads = ad.grad(total, params)
        except GradientNaNError as e:
            raise TrainingDiverged(f"{e} at iteration {it}") from e
        lr_t = warmup_lr(train_cfg.lr, it, train_cfg.warmup_iters)
        opt.step(grads, lr=lr_t)

        rows.append(
            TrainRow(
                iteration=it,
                lr=lr_t,
                loss_total=float(total.data),
                loss_rel_final=rel_acc / train_cfg.batch_size,
                loss_edge_final=edge_acc / train_cfg.batch_size,
            )
        )
        if progress and (it % train_cfg.log_every == 0 or it == train_cfg.total_iters - 1):
            rate = (it + 1) / (time.perf_counter() - started)
            print(
                f"iter {it:5d}  lr {lr_t:.2e}  loss {rows[-1].loss_total:.4f}  "
                f"({rate:.1f} it/s)",
                flush=True,
            )
        if out_dir is not None and train_cfg.checkpoint_every > 0:
            if (it + 1) % train_cfg.checkpoint_every == 0:
                _save(out_dir / f"ckpt_{it + 1:06d}.json", model, names, model_cfg, it + 1)

    if out_dir is not None:
        _save(out_dir / "ckpt_final.json", model, names, model_cfg, train_cfg.total_iters)
        write_loss_log(out_dir / "loss_log.csv", rows)
    return model, rows


def _save(path: Path, model: RelationTransformer, names, model_cfg: ModelConfig, iteration: int):
    from dataclasses import asdict

    save_checkpoint(
        path,
        model.state_arrays(),
        meta={"model_config": asdict(model_cfg), "iteration": iteration},
    )


def write_loss_log(path, rows: list[TrainRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow(
                [
                    r.iteration,
                    f"{r.lr:.8g}",
                    f"{r.loss_total:.8g}",
                    f"{r.loss_rel_final:.8g}",
                    f"{r.loss_edge_final:.8g}",
                ]
            )


def load_model(manifest_path) -> RelationTransformer:
    """Rebuild a model from a checkpoint written by ``train``."""
    from .checkpoint import load_checkpoint

    arrays, meta = load_checkpoint(manifest_path)
    cfg_dict = meta.get("model_config")
    if not cfg_dict:
        raise ValueError("checkpoint has no model_config metadata")
    cfg = ModelConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg_dict.items()})
    model = RelationTransformer(cfg, np.random.default_rng(0))
    model.load_state_arrays(arrays)
    return model
