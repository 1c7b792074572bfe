"""Loss computation, the training loop, and finetuning strategies.

Training is teacher-forced with an unweighted frame-level L2 on both the
pre-net and post-net spectrograms, binary cross-entropy on the stop
token, and (when configured) cross-entropy on the auxiliary transcript
decoder. Batches bucket examples by input length; losses are masked on
padding. Single-worker runs are bit-reproducible in (seed, config).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import evaluation
from .errors import InvalidArgument, NumericError
from .model import ConversionModel

FINETUNE_STRATEGIES = ("all", "freeze_spec_decoder", "encoder_only")

# Stop-token targets are set to 1 from the last valid frame through a few
# frames beyond it, with extra weight, so inference termination is crisp.
_STOP_TAIL = 4
_STOP_POS_WEIGHT = 5.0


@dataclass
class LossBreakdown:
    l2_pre: float
    l2_post: float
    stop_bce: float
    aux_xent: float
    total: float

    def as_dict(self):
        return {"l2_pre": self.l2_pre, "l2_post": self.l2_post,
                "stop_bce": self.stop_bce, "aux_xent": self.aux_xent,
                "total": self.total}


@dataclass
class TrainConfig:
    steps: int = 1500
    batch_size: int = 8
    lr: float = 1e-3
    schedule_kind: str = "linear_decay"  # constant | linear_decay
    warmup_steps: int = 100
    decay_end_step: int = 60000
    eval_every: int = 500
    seed: int = 0
    clip_norm: float | None = 1.0
    aux_loss_weight: float = 1.0
    n_dev_loss: int = 16
    n_dev_per: int = 6
    gl_iters_eval: int = 30

    def schedule(self) -> ad.LrSchedule:
        return ad.LrSchedule(self.schedule_kind, self.lr, self.warmup_steps,
                             self.decay_end_step)


@dataclass
class TrainState:
    step: int
    best_dev_loss: float
    best_dev_per: float
    diverged: bool = False


def compute_loss(dec_out, targets, masks, aux_logits=None, aux_targets=None,
                 aux_mask=None, aux_loss_weight: float = 1.0,
                 spec_scale: float = 1.0):
    """Total training loss and its breakdown.

    targets: [B, S, bins] magnitudes; masks: dict with 'frame' [B, S, 1],
    'stop_targets' [B, S], 'stop_weights' [B, S]. The L2 terms are
    measured in units of spec_scale (i.e. divided by spec_scale**2) so
    their magnitude is comparable to the stop and transcript terms.
    """
    l2_gain = 1.0 / spec_scale**2
    l2_pre = ad.mul(ad.mse_loss(dec_out.pre_spec, targets, masks["frame"]), l2_gain)
    l2_post = ad.mul(ad.mse_loss(dec_out.post_spec, targets, masks["frame"]), l2_gain)
    stop = ad.bce_with_logits(dec_out.stop_logits, masks["stop_targets"],
                              masks["stop_weights"])
    total = ad.add(ad.add(l2_pre, l2_post), stop)
    aux_val = 0.0
    if aux_logits is not None:
        b, steps, vocab = aux_logits.shape
        flat = ad.reshape(aux_logits, (b * steps, vocab))
        aux = ad.cross_entropy(flat, aux_targets.reshape(-1), aux_mask.reshape(-1))
        total = ad.add(total, ad.mul(aux, aux_loss_weight))
        aux_val = float(aux.data)
    breakdown = LossBreakdown(
        l2_pre=float(l2_pre.data), l2_post=float(l2_post.data),
        stop_bce=float(stop.data), aux_xent=aux_val, total=float(total.data))
    for name, value in breakdown.as_dict().items():
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss term {name!r}")
    return total, breakdown


class _ExampleCache:
    """Lazily loads and keeps (mel, target, ids) arrays per example."""

    def __init__(self, dataset, dtype):
        self.dataset = dataset
        self.dtype = dtype
        self.cache = {}

    def get(self, record):
        key = record["id"]
        if key not in self.cache:
            raw = self.dataset.load(record)
            self.cache[key] = (
                raw["mel"].astype(self.dtype),
                raw["target_mag"].astype(self.dtype),
                raw["phonemes"].astype(np.int64),
            )
        return self.cache[key]


def make_batch(examples, dtype, eos_id, pad_id):
    """Pad a list of (mel, target, ids) into batch arrays and masks."""
    b = len(examples)
    t_max = max(ex[0].shape[0] for ex in examples)
    s_max = max(ex[1].shape[0] for ex in examples)
    l_max = max(len(ex[2]) for ex in examples)
    n_mels = examples[0][0].shape[1]
    bins = examples[0][1].shape[1]
    mel = np.zeros((b, t_max, n_mels), dtype)
    target = np.zeros((b, s_max, bins), dtype)
    frame_mask = np.zeros((b, s_max, 1), np.float64)
    stop_targets = np.zeros((b, s_max), np.float64)
    stop_weights = np.zeros((b, s_max), np.float64)
    ids = np.full((b, l_max), pad_id, np.int64)
    aux_targets = np.full((b, l_max + 1), pad_id, np.int64)
    aux_mask = np.zeros((b, l_max + 1), np.float64)
    in_lengths = np.zeros(b, np.int64)
    out_lengths = np.zeros(b, np.int64)
    for i, (m, tg, pid) in enumerate(examples):
        t_i, s_i, l_i = m.shape[0], tg.shape[0], len(pid)
        mel[i, :t_i] = m
        target[i, :s_i] = tg
        frame_mask[i, :s_i] = 1.0
        stop_weights[i, :s_i] = 1.0
        tail = min(s_i - 1 + _STOP_TAIL, s_max)
        stop_targets[i, s_i - 1 : tail] = 1.0
        stop_weights[i, s_i - 1 : tail] = _STOP_POS_WEIGHT
        ids[i, :l_i] = pid
        aux_targets[i, :l_i] = pid
        aux_targets[i, l_i] = eos_id
        aux_mask[i, : l_i + 1] = 1.0
        in_lengths[i] = t_i
        out_lengths[i] = s_i
    return {
        "mel": mel, "target": target, "frame_mask": frame_mask,
        "stop_targets": stop_targets, "stop_weights": stop_weights,
        "ids": ids, "aux_targets": aux_targets, "aux_mask": aux_mask,
        "in_lengths": in_lengths, "out_lengths": out_lengths,
    }


def _batches(records, cache, batch_size, rng, model_cfg):
    """Length-bucketed batches in a shuffled, seed-deterministic order."""
    order = sorted(range(len(records)), key=lambda i: records[i]["n_frames_in"])
    groups = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    while True:
        perm = rng.permutation(len(groups))
        for g in perm:
            examples = [cache.get(records[i]) for i in groups[g]]
            yield _build(examples, model_cfg)


def _build(examples, cfg):
    return make_batch(examples, ad.default_dtype(), cfg.eos_id, cfg.sos_id)


def _forward_loss(model, batch, rng, training):
    cfg = model.cfg
    states, _, enc_mask = model.encode_batch(
        ad.Tensor(batch["mel"]), batch["in_lengths"], training=training)
    dec = model.decode_spectrogram(
        states, enc_mask=enc_mask, teacher=batch["target"], rng=rng,
        training=training, target_lengths=batch["out_lengths"])
    aux_logits = None
    if cfg.aux_target != "none":
        aux_logits = model.decode_aux(states, enc_mask=enc_mask,
                                      teacher_ids=batch["ids"], training=training)
    masks = {"frame": batch["frame_mask"], "stop_targets": batch["stop_targets"],
             "stop_weights": batch["stop_weights"]}
    return compute_loss(dec, batch["target"], masks, aux_logits,
                        batch["aux_targets"], batch["aux_mask"],
                        cfg.aux_loss_weight, spec_scale=cfg.spec_scale)


def _dev_loss(model, dev_records, cache, cfg, model_cfg):
    if not dev_records:
        return float("nan")
    rng = np.random.default_rng((cfg.seed, 0xDE7))
    totals = []
    records = dev_records[: cfg.n_dev_loss]
    for start in range(0, len(records), cfg.batch_size):
        chunk = records[start : start + cfg.batch_size]
        batch = _build([cache.get(r) for r in chunk], model_cfg)
        with ad.no_grad():
            _, breakdown = _forward_loss(model, batch, rng, training=False)
        totals.append(breakdown.total * len(chunk))
    return float(sum(totals) / len(records))


def _dev_per(model, dev_records, dataset, cfg):
    if cfg.n_dev_per <= 0 or not dev_records:
        return float("nan")
    inventory = data_mod.PhonemeInventory.default()
    oracle = evaluation.OracleRecognizer.cached(inventory, model.cfg.scale)
    refs, hyps = [], []
    for record in dev_records[: cfg.n_dev_per]:
        raw = dataset.load(record)
        audio = data_mod.dsp.AudioBuffer(raw["input_audio"].astype(np.float64))
        converted, _ = model.convert(audio, vocoder_iters=cfg.gl_iters_eval,
                                     seed=cfg.seed)
        refs.append(record["transcript"].split())
        hyps.append(oracle.recognize(converted))
    rate, _, _, _ = evaluation.error_rate(refs, hyps)
    return float(rate)


def train(model: ConversionModel, dataset, cfg: TrainConfig, out_dir=None,
          log_records: list | None = None):
    """Run the training loop; returns (TrainState, metric log records).

    Writes metrics.jsonl, best.p2sp and last.p2sp under out_dir when
    given. Divergence (non-finite loss) aborts, keeping the last good
    checkpoint on disk.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    logs = log_records if log_records is not None else []
    train_records = dataset.split("train")
    dev_records = dataset.split("dev")
    if not train_records:
        raise InvalidArgument("dataset has no training split")
    cache = _ExampleCache(dataset, ad.default_dtype())
    batch_rng = np.random.default_rng((cfg.seed, 0xBA7C))
    batches = _batches(train_records, cache, cfg.batch_size, batch_rng, model.cfg)
    optimizer = ad.Adam(model.params, cfg.schedule(), clip_norm=cfg.clip_norm)
    state = TrainState(step=0, best_dev_loss=float("inf"), best_dev_per=float("nan"))
    started = time.process_time()

    def emit(record):
        logs.append(record)
        if out_dir is not None:
            with open(out_dir / "metrics.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def checkpoint(name, extra=None):
        if out_dir is not None:
            entries = optimizer.state_entries()
            entries["train.step"] = np.array([state.step], np.int64)
            entries["train.best_dev_loss"] = np.array([state.best_dev_loss])
            if extra:
                entries.update(extra)
            model.save_checkpoint(out_dir / name, extra=entries)

    def evaluate():
        dev_loss = _dev_loss(model, dev_records, cache, cfg, model.cfg)
        dev_per = _dev_per(model, dev_records, dataset, cfg)
        emit({"kind": "dev", "step": state.step,
              "dev_total": round(dev_loss, 6),
              "dev_per": round(dev_per, 6) if np.isfinite(dev_per) else None})
        if np.isfinite(dev_loss) and dev_loss < state.best_dev_loss:
            state.best_dev_loss = dev_loss
            state.best_dev_per = dev_per
            checkpoint("best.p2sp")

    for step in range(cfg.steps):
        state.step = step
        batch = next(batches)
        step_rng = np.random.default_rng((cfg.seed, step))
        try:
            total, breakdown = _forward_loss(model, batch, step_rng, training=True)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
        except NumericError as exc:
            state.diverged = True
            emit({"kind": "abort", "step": step, "error": str(exc)})
            checkpoint("last.p2sp")
            raise
        record = {"kind": "train", "step": step,
                  "lr": round(cfg.schedule().lr_at(step), 10)}
        record.update({k: round(v, 6) for k, v in breakdown.as_dict().items()})
        emit(record)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            evaluate()
    state.step = cfg.steps
    evaluate()
    emit({"kind": "done", "steps": cfg.steps,
          "cpu_seconds": round(time.process_time() - started, 3)})
    checkpoint("last.p2sp")
    return state, logs


def freeze_for_strategy(model: ConversionModel, strategy: str) -> list[str]:
    """Apply a finetuning strategy's parameter freezing; returns the
    frozen prefixes actually used."""
    if strategy not in FINETUNE_STRATEGIES:
        raise InvalidArgument(
            f"unknown strategy {strategy!r}; have {FINETUNE_STRATEGIES}")
    prefixes = []
    if strategy in ("freeze_spec_decoder", "encoder_only"):
        prefixes.append("spec_decoder.")
    if strategy == "encoder_only":
        prefixes.append("aux_decoder.")
    for name, p in model.params.items():
        p.frozen = any(name.startswith(pref) for pref in prefixes)
    return prefixes


def finetune(checkpoint_path, dataset, strategy: str, lr: float = 0.1,
             steps: int = 500, out_dir=None, seed: int = 0,
             eval_every: int = 0, **overrides):
    """Adapt a converged model on a new dataset with a constant learning
    rate, freezing parameter groups according to the strategy."""
    model, _ = ConversionModel.load_checkpoint(checkpoint_path)
    prefixes = freeze_for_strategy(model, strategy)
    logs = []
    if strategy == "encoder_only" and model.cfg.aux_target == "none":
        logs.append({"kind": "note",
                     "message": "encoder_only on a model without an aux decoder; "
                                "only the spectrogram decoder is frozen"})
    cfg = TrainConfig(steps=steps, lr=lr, schedule_kind="constant",
                      eval_every=eval_every, seed=seed,
                      aux_loss_weight=model.cfg.aux_loss_weight, **overrides)
    logs.append({"kind": "finetune", "strategy": strategy,
                 "frozen_prefixes": prefixes, "lr": lr, "steps": steps})
    state, logs = train(model, dataset, cfg, out_dir=out_dir, log_records=logs)
    return model, state, logs
