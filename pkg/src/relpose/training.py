"""End-to-end training and batched inference."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from relpose import autodiff as ad
from relpose.autodiff import Adam
from relpose.data import PairRecord, record_images
from relpose.errors import CheckpointMismatch, EmptyDataset, NonFiniteValue
from relpose.regressor import RelPoseNet, pose_loss
from relpose.tensorio import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_loss", "s_q", "s_t", "s_tn")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    lr: float = 1e-3
    batch_size: int = 8
    step_size: int = 6
    gamma: float = 0.9
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    s_q: float
    s_t: float
    s_tn: float
    # unweighted L_q + L_t + L_tn, averaged over the epoch
    train_raw: float = float("nan")
    skipped: int = 0


@dataclass
class TrainResult:
    history: list[EpochLog]
    best_epoch: int
    best_state: dict[str, np.ndarray]
    last_state: dict[str, np.ndarray] = field(default_factory=dict)


class Batcher:
    """Stacks images/targets for a list of records, caching decoded images."""

    def __init__(self, records: list[PairRecord], channels: int, dtype=np.float32):
        self.records = records
        self.channels = channels
        self.dtype = dtype
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __len__(self):
        return len(self.records)

    def images(self, i: int):
        if i not in self._cache:
            a, b = record_images(self.records[i], self.channels)
            self._cache[i] = (a.astype(self.dtype), b.astype(self.dtype))
        return self._cache[i]

    def batch(self, indices):
        pairs = [self.images(i) for i in indices]
        a = np.stack([p[0] for p in pairs])
        b = np.stack([p[1] for p in pairs])
        q = np.stack([np.asarray(self.records[i].target.rotation) for i in indices])
        t = np.stack([self.records[i].target.translation for i in indices])
        return a, b, q, t


def _batches(n: int, batch_size: int, order=None):
    order = np.arange(n) if order is None else order
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def checkpoint_state(model: RelPoseNet, opt: Adam | None = None, epoch: int | None = None) -> dict[str, np.ndarray]:
    state = dict(model.state_dict())
    if opt is not None and opt.state.m:
        names = list(model.named_parameters())
        for name, m, v in zip(names, opt.state.m, opt.state.v):
            state[f"adam.m.{name}"] = m
            state[f"adam.v.{name}"] = v
        state["meta.adam_step"] = np.array([opt.state.step], dtype=np.float32)
    if epoch is not None:
        state["meta.epoch"] = np.array([epoch], dtype=np.float32)
    return state


def load_model_state(model: RelPoseNet, state: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    extra = [k for k in state if k not in params and not k.startswith(("adam.", "meta."))]
    if extra:
        raise CheckpointMismatch(f"checkpoint has parameters the model lacks: {extra[:5]}")
    model.load_state_dict({k: v for k, v in state.items() if k in params})


def mean_loss(model: RelPoseNet, batcher: Batcher, batch_size: int) -> float:
    if len(batcher) == 0:
        return float("nan")
    total = 0.0
    with ad.no_grad():
        for idx in _batches(len(batcher), batch_size):
            a, b, q, t = batcher.batch(idx)
            total += pose_loss(model(a, b), q, t, model.loss).total.item() * len(idx)
    return total / len(batcher)


def train(model: RelPoseNet, train_records: list[PairRecord], val_records: list[PairRecord],
          cfg: TrainConfig, log_path=None, out_dir=None, resume=None) -> TrainResult:
    """Train all parameters (extractor, regressor, loss weights) with Adam and
    a step schedule. The best epoch is chosen on validation loss (training
    loss when there is no validation data).

    ``resume`` is a checkpoint written by a previous run (``last.rpck``);
    training continues from the epoch after the one it stores.
    """
    if not train_records:
        raise EmptyDataset("training set is empty")
    channels = model.cfg.extractor.in_channels
    train_b = Batcher(train_records, channels, model.dtype)
    val_b = Batcher(val_records, channels, model.dtype)
    params = model.named_parameters()
    opt = Adam(params.values(), lr=cfg.lr)
    start_epoch = 0
    if resume is not None:
        state = load_checkpoint(resume) if not isinstance(resume, dict) else resume
        load_model_state(model, state)
        if "meta.adam_step" in state:
            opt.state.step = int(state["meta.adam_step"][0])
            opt.state.m = [state[f"adam.m.{k}"].astype(p.dtype).copy() for k, p in params.items()]
            opt.state.v = [state[f"adam.v.{k}"].astype(p.dtype).copy() for k, p in params.items()]
        start_epoch = int(state["meta.epoch"][0]) + 1 if "meta.epoch" in state else 0

    history: list[EpochLog] = []
    best_loss, best_epoch, best_state = float("inf"), -1, model.state_dict()
    best_state = {k: v.copy() for k, v in best_state.items()}
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        opt.lr = ad.step_lr(cfg.lr, epoch, cfg.step_size, cfg.gamma)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_b))
        run_loss, run_raw, skipped = 0.0, 0.0, 0
        for b_id, idx in enumerate(_batches(len(train_b), cfg.batch_size, order)):
            a, b, q, t = train_b.batch(idx)
            try:
                opt.zero_grad()
                lb = pose_loss(model(a, b), q, t, model.loss)
                lb.total.backward()
                for p in opt.params:
                    if not np.all(np.isfinite(p.grad)):
                        raise NonFiniteValue("non-finite gradient")
                opt.step()
            except NonFiniteValue as exc:
                raise NonFiniteValue(f"epoch {epoch} batch {b_id}: {exc}", batch_id=(epoch, b_id)) from None
            run_loss += lb.total.item() * len(idx)
            raw = lb.rotation + lb.translation + (lb.direction if np.isfinite(lb.direction) else 0.0)
            run_raw += raw * len(idx)
            skipped += lb.skipped
        train_loss = run_loss / len(train_b)
        val_loss = mean_loss(model, val_b, cfg.batch_size)
        entry = EpochLog(epoch, opt.lr, train_loss, val_loss, *model.loss.values(),
                         train_raw=run_raw / len(train_b), skipped=skipped)
        history.append(entry)
        log.info("epoch %d lr %.3g train %.5f val %.5f", epoch, opt.lr, train_loss, val_loss)
        select = val_loss if len(val_b) else train_loss
        if select < best_loss:
            best_loss, best_epoch = select, epoch
            best_state = {k: v.copy() for k, v in model.state_dict().items()}

    last_epoch = start_epoch + cfg.epochs - 1
    last_state = checkpoint_state(model, opt, epoch=last_epoch)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "best.rpck", best_state)
        save_checkpoint(out / "last.rpck", last_state)
    if log_path is not None:
        write_log(log_path, history, append=resume is not None)
    return TrainResult(history, best_epoch, best_state, last_state)


def write_log(path, history: list[EpochLog], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "w" if new else "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(LOG_COLUMNS)
        for e in history:
            writer.writerow([e.epoch] + [repr(float(getattr(e, c))) for c in LOG_COLUMNS[1:]])


def predict(model: RelPoseNet, records: list[PairRecord], batch_size: int = 8):
    """Raw network outputs per record: list of (q_hat (4,), t_hat (3,))."""
    batcher = Batcher(records, model.cfg.extractor.in_channels, model.dtype)
    out = []
    with ad.no_grad():
        for idx in _batches(len(batcher), batch_size):
            a, b, _, _ = batcher.batch(idx)
            pred = model(a, b)
            out.extend(zip(pred.q.data.astype(np.float64), pred.t.data.astype(np.float64)))
    return out
