"""Training loop: matching, loss, AdamW with a step schedule, JSON-lines log."""
from __future__ import annotations

import json
import logging
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, capture, restore
from .config import Config, TrainConfig
from .data.coco import DatasetIndex
from .data.sampling import derive_seed, epoch_indices, repeat_factors
from .errors import EmptyDatasetError, TrainingDivergedError
from .losses import LossBreakdown, MatchAssignment, build_cost_matrix, combine, hungarian_match, total_loss
from .model import CamoSegModel, Switches
from .pipeline import Batch, SampleCache, collate, ordered_map, text_embeddings, text_tensor, training_view

log = logging.getLogger(__name__)


def lr_at(iteration: int, tc: TrainConfig) -> float:
    """Base rate times ``lr_drop_factor`` per drop point already reached."""
    return tc.learning_rate * tc.lr_drop_factor ** bisect_right(tc.drop_points(), iteration)


def lr_trace(tc: TrainConfig) -> list[float]:
    return [lr_at(i, tc) for i in range(tc.iterations)]


def make_optimizer(model: CamoSegModel, tc: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for _, p in model.trainable_named_parameters():
        (decay if p.dim() > 1 else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": tc.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=tc.learning_rate)


class BatchSchedule:
    """Maps an iteration to the dataset indices of its batch.

    The stream concatenates repeat-factor epochs, each shuffled by a generator
    seeded from (run seed, epoch), so any iteration can be reproduced on resume.
    """

    def __init__(self, index: DatasetIndex, cfg: Config):
        if len(index) == 0 or index.num_instances == 0:
            raise EmptyDatasetError("training set has no annotated instances")
        self.factors = repeat_factors(index, cfg.data.repeat_threshold)
        self.seed = cfg.train.seed
        self.batch_size = cfg.train.batch_size
        self._epochs: list[list[int]] = []
        self._starts: list[int] = [0]

    def _epoch(self, e: int) -> list[int]:
        while len(self._epochs) <= e:
            k = len(self._epochs)
            rng = np.random.default_rng(derive_seed(self.seed, "epoch", k))
            order = epoch_indices(self.factors, rng)
            order = [order[j] for j in rng.permutation(len(order))]
            self._epochs.append(order)
            self._starts.append(self._starts[-1] + len(order))
        return self._epochs[e]

    def batch(self, iteration: int) -> list[tuple[int, int]]:
        """(dataset index, epoch) pairs for one iteration."""
        out = []
        for pos in range(iteration * self.batch_size, (iteration + 1) * self.batch_size):
            e = 0
            while True:
                ep = self._epoch(e)
                if pos < self._starts[e + 1]:
                    out.append((ep[pos - self._starts[e]], e))
                    break
                e += 1
        return out


def match_image(mask_logits, embeddings, gt_masks, gt_labels, text_matrix, tau, cfg: Config) -> MatchAssignment:
    n = mask_logits.shape[0]
    if gt_masks.shape[0] == 0:
        return MatchAssignment([], list(range(n)), 0.0)
    cost = build_cost_matrix(mask_logits, embeddings, gt_masks, gt_labels, text_matrix, tau,
                             cfg.loss.alpha, cfg.loss.dice_smooth)
    return hungarian_match(cost)


def batch_loss(model: CamoSegModel, batch: Batch, text: torch.Tensor, cfg: Config) -> LossBreakdown:
    """Mean of per-image breakdowns, evaluated in float64."""
    out = model(batch.images, text)
    if model.switches.no_text:
        text = torch.zeros_like(text)
    tm = model.class_matrix(text).double()
    tau = model.tau.double()
    emb = model.class_embeddings(out.preds).double()
    logits = out.preds.mask_logits.double()
    conf = out.preds.confidence_logits
    parts = []
    for b in range(len(batch.masks)):
        gt = batch.masks[b].double()
        assignment = match_image(logits[b], emb[b], gt, batch.labels[b], tm, tau, cfg)
        parts.append(total_loss(logits[b], emb[b], gt, batch.labels[b], tm, tau, assignment,
                                alpha=cfg.loss.alpha, noobj_weight=cfg.loss.noobj_weight,
                                smooth=cfg.loss.dice_smooth,
                                confidence_logits=None if conf is None else conf[b].double()))
    k = len(parts)
    return combine(sum(p.bce for p in parts) / k, sum(p.dice for p in parts) / k,
                   sum(p.ce for p in parts) / k, cfg.loss.alpha)


@dataclass
class TrainResult:
    model: CamoSegModel
    checkpoint: Checkpoint
    log: list[dict]


def train(cfg: Config, index: DatasetIndex, *, switches: Switches = Switches(), log_path=None,
          resume: Checkpoint | None = None, progress_every: int = 0, stop_at: int | None = None) -> TrainResult:
    """Runs iterations up to ``cfg.train.iterations``.

    ``stop_at`` ends the run early, as an interruption would, and the returned
    checkpoint can be passed back as ``resume`` to finish it.
    """
    cfg.validate()
    schedule = BatchSchedule(index, cfg)
    text = text_tensor(text_embeddings(cfg, index.vocab))
    model = CamoSegModel(cfg, switches)
    optimizer = make_optimizer(model, cfg.train)
    start = 0
    stop = cfg.train.iterations if stop_at is None else min(stop_at, cfg.train.iterations)
    if resume is not None:
        restore(resume, model, optimizer, cfg)
        start = resume.iteration
    cache = SampleCache(index)
    model.train()
    records: list[dict] = []
    sink = open(log_path, "a" if resume is not None else "w") if log_path else None
    try:
        for it in range(start, stop):
            lr = lr_at(it, cfg.train)
            for g in optimizer.param_groups:
                g["lr"] = lr
            picks = schedule.batch(it)
            batch = collate(ordered_map(lambda p: training_view(cache, p[0], cfg, p[1]), picks))
            breakdown = batch_loss(model, batch, text, cfg)
            if not torch.isfinite(breakdown.total):
                raise TrainingDivergedError(it)
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            params = [p for _, p in model.trainable_named_parameters()]
            torch.nn.utils.clip_grad_norm_(params, cfg.train.grad_clip)
            optimizer.step()
            rec = {"iter": it, "lr": lr, **breakdown.as_floats()}
            records.append(rec)
            if sink:
                sink.write(json.dumps(rec, sort_keys=True) + "\n")
            if progress_every and (it + 1) % progress_every == 0:
                log.info("iter %d  lr %.2e  total %.4f", it + 1, lr, rec["total"])
    finally:
        if sink:
            sink.close()
    model.eval()
    return TrainResult(model, capture(model, optimizer, max(start, stop), cfg), records)


def load_model(ckpt: Checkpoint, cfg: Config, switches: Switches = Switches()) -> CamoSegModel:
    model = CamoSegModel(cfg, switches)
    restore(ckpt, model, None, cfg)
    return model.eval()


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
