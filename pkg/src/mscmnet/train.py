"""Training loop: balanced batches -> four-stream forward -> losses -> SGD.

Determinism contract: model init draws from SeedSequence((seed, 0)); each
epoch's sampling and augmentation draw from SeedSequence((seed, 100+epoch)).
A run resumed from an epoch-boundary checkpoint therefore replays the exact
byte stream of an uninterrupted run.
"""

import dataclasses
import os
import time

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig  # noqa: F401  (re-exported for callers)
from .data.augment import make_stream_batch
from .data.sampler import EpochSampler
from .data.store import load_dataset
from .errors import ConfigError, DivergenceError, MscmError
from .losses import total_loss
from .model import Model
from .nn import SGD

LOG_KEYS = ("step", "epoch", "lr", "l_id", "d_quar", "d_dual", "l_nm", "l_total", "wall_ms")


@dataclasses.dataclass
class TrainLogRecord:
    step: int
    epoch: int
    lr: float
    l_id: float
    d_quar: float
    d_dual: float
    l_nm: float
    l_total: float
    wall_ms: float

    def format_line(self):
        return " ".join(
            f"{key}={getattr(self, key)}" if key in ("step", "epoch")
            else f"{key}={getattr(self, key):.6f}"
            for key in LOG_KEYS
        )

    @classmethod
    def parse_line(cls, line):
        fields = dict(part.split("=", 1) for part in line.split())
        return cls(
            step=int(fields["step"]), epoch=int(fields["epoch"]),
            lr=float(fields["lr"]), l_id=float(fields["l_id"]),
            d_quar=float(fields["d_quar"]), d_dual=float(fields["d_dual"]),
            l_nm=float(fields["l_nm"]), l_total=float(fields["l_total"]),
            wall_ms=float(fields["wall_ms"]),
        )


def split_identities(dataset, train_count):
    """First train_count identities train; the remainder is the test split."""
    ids = dataset.identities()
    if train_count < 2:
        raise ConfigError(f"need >= 2 training identities, got {train_count}")
    if train_count > len(ids):
        raise ConfigError(f"train_ids {train_count} exceeds dataset identities {len(ids)}")
    return ids[:train_count], ids[train_count:]


def build_model(cfg, num_classes, dtype=np.float32):
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0)))
    model_cfg = dataclasses.replace(cfg.model, num_classes=num_classes)
    return Model(model_cfg, rng, dtype)


def normalized_streams(embs):
    """L2-normalize the stream embeddings fed to the center losses."""
    return dataclasses.replace(
        embs,
        streams_v=[ops.l2_normalize(f) for f in embs.streams_v],
        streams_t=[ops.l2_normalize(f) for f in embs.streams_t],
    )


def state_tensors(model, optimizer, completed_epochs):
    tensors = dict(model.state_tensors())
    for name, buf in optimizer.buffers.items():
        tensors[f"opt.momentum.{name}"] = buf
    tensors["meta.epoch"] = np.array([completed_epochs], np.float32)
    return tensors


def restore_state(model, optimizer, mapping):
    """Load model params/buffers and optimizer momentum; returns completed epochs."""
    model.load_state(mapping)
    for name, buf in optimizer.buffers.items():
        key = f"opt.momentum.{name}"
        if key not in mapping:
            raise MscmError(f"checkpoint missing optimizer state {key}")
        buf[...] = mapping[key]
    if "meta.epoch" not in mapping:
        raise MscmError("checkpoint missing meta.epoch")
    return int(mapping["meta.epoch"][0])


def _epoch_rng(seed, epoch):
    return np.random.default_rng(np.random.SeedSequence((seed, 100 + epoch)))


def train_run(cfg, resume=None, log_stream=None, dataset=None):
    """Run the configured training; returns (model, records, checkpoint_path).

    resume: path to a checkpoint written by an earlier run with the same
    config; training continues from the recorded epoch boundary.
    """
    if dataset is None:
        dataset = load_dataset(cfg.paths.dataset_dir)
    train_ids, _ = split_identities(dataset, cfg.train.train_ids)
    label_map = {ident: index for index, ident in enumerate(train_ids)}

    model = build_model(cfg, num_classes=len(train_ids))
    optimizer = SGD(
        model.parameters(), cfg.optimizer.lr,
        momentum=cfg.optimizer.momentum, weight_decay=cfg.optimizer.weight_decay,
    )
    start_epoch = 0
    if resume is not None:
        start_epoch = restore_state(model, optimizer, load_checkpoint(resume))

    train_set = dataset.subset(train_ids)
    sampler = EpochSampler(train_set, cfg.sampler)
    steps_per_epoch = sampler.batches_per_epoch()
    target_hw = (dataset.params.image_h, dataset.params.image_w)

    os.makedirs(cfg.paths.checkpoint_dir, exist_ok=True)
    ckpt_path = os.path.join(cfg.paths.checkpoint_dir, "latest.msck")

    records = []
    for epoch in range(start_epoch, cfg.train.epochs):
        lr = cfg.schedule.lr_at(cfg.optimizer.lr, epoch)
        optimizer.lr = lr
        rng = _epoch_rng(cfg.seed, epoch)
        for index, (v_recs, t_recs) in enumerate(sampler.epoch(rng)):
            t0 = time.perf_counter()
            step = epoch * steps_per_epoch + index
            batch = make_stream_batch(v_recs, t_recs, cfg.augment, rng, target_hw)
            batch.ids = np.array([label_map[int(i)] for i in batch.ids], np.int64)

            embs = model.forward_train(batch)
            loss_embs = normalized_streams(embs) if cfg.loss.normalize else embs
            labels = model.train_labels(batch)
            loss, parts = total_loss(loss_embs, labels, cfg.loss)
            if not np.isfinite(loss.data).all():
                raise DivergenceError(f"non-finite loss at step {step}", step=step)

            model.zero_grad()
            loss.backward()
            optimizer.step()

            record = TrainLogRecord(
                step=step, epoch=epoch, lr=lr,
                l_id=parts["l_id"], d_quar=parts["d_quar"], d_dual=parts["d_dual"],
                l_nm=parts["l_nm"], l_total=parts["l_total"],
                wall_ms=(time.perf_counter() - t0) * 1000.0,
            )
            records.append(record)
            if log_stream is not None:
                log_stream.write(record.format_line() + "\n")
                log_stream.flush()

        completed = epoch + 1
        if completed % cfg.train.checkpoint_every == 0 or completed == cfg.train.epochs:
            save_checkpoint(ckpt_path, state_tensors(model, optimizer, completed))
    if start_epoch >= cfg.train.epochs:
        # nothing left to train; still make sure a checkpoint exists
        save_checkpoint(ckpt_path, state_tensors(model, optimizer, start_epoch))
    return model, records, ckpt_path
