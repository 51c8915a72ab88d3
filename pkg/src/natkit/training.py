"""Curriculum training: phase batch construction, scheduling, and the loops.

A curriculum is an ordered list of phases ending in parallel ("nat")
training. The causal phases teach left-to-right and right-to-left token
dependencies with a triangular mask on teacher-forced inputs; the final
phase trains single-pass parallel prediction on copied (optionally
retargeted) source embeddings, with the length head. The backward phase is
literally the forward phase run on reversed targets, so the two produce
identical gradients on mirrored data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import BOS, EOS, PAD, Batch, SentencePair, decode as vocab_decode, make_batches
from .errors import ConfigError, DataError
from .evaluation import bleu
from .model import (
    AttentionMask, DropoutPlan, Model, copy_indices, gather_positions,
    it_transform, valid_from_lengths,
)
from .numerics import (
    AdamState, Tensor, adam_step, assert_finite, backward, cross_entropy,
    gather_rows, keyed_rng, no_grad,
)

PHASE_LABEL = {"forward": "F", "backward": "B", "nat": "NAT", "at": "AT"}

SCHEDULE_PRESETS = {
    "AT": ["at"],
    "NAT": ["nat"],
    "F-NAT": ["forward", "nat"],
    "B-NAT": ["backward", "nat"],
    "FB-NAT": ["forward", "backward", "nat"],
    "BF-NAT": ["backward", "forward", "nat"],
    "FBF-NAT": ["forward", "backward", "forward", "nat"],
}


@dataclass
class CurriculumSchedule:
    """Ordered phases with one shared per-phase step budget."""

    phases: list[str]
    steps_per_phase: int

    def __post_init__(self):
        if not self.phases:
            raise ConfigError("empty curriculum schedule")
        for p in self.phases:
            if p not in PHASE_LABEL:
                raise ConfigError(f"unknown phase kind: {p}")
        if self.phases[-1] not in ("nat", "at"):
            raise ConfigError("curriculum must end in the parallel training phase")

    @classmethod
    def from_preset(cls, name: str, steps_per_phase: int) -> "CurriculumSchedule":
        if name not in SCHEDULE_PRESETS:
            raise ConfigError(f"unknown schedule preset {name!r}; choose from {sorted(SCHEDULE_PRESETS)}")
        return cls(list(SCHEDULE_PRESETS[name]), steps_per_phase)

    @property
    def total_steps(self) -> int:
        return len(self.phases) * self.steps_per_phase


@dataclass
class LrSchedule:
    kind: str = "inverse_sqrt"    # "inverse_sqrt" | "linear"
    peak: float = 5e-4
    warmup: int = 400
    start: float = 3e-4
    end: float = 1e-5
    total: int = 2000


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at a 1-based step within the current phase."""
    if step < 1:
        raise ConfigError(f"lr_at expects step >= 1, got {step}")
    if schedule.kind == "inverse_sqrt":
        return schedule.peak * min(step / schedule.warmup, math.sqrt(schedule.warmup / step))
    if schedule.kind == "linear":
        if schedule.total <= 1:
            return schedule.start
        frac = (min(step, schedule.total) - 1) / (schedule.total - 1)
        return schedule.start + (schedule.end - schedule.start) * frac
    raise ConfigError(f"unknown lr schedule kind: {schedule.kind}")


@dataclass
class TrainConfig:
    seed: int = 1
    steps_per_phase: int = 2000
    batch_tokens: int = 2048
    lr: LrSchedule = field(default_factory=LrSchedule)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout: float = 0.1
    length_loss_weight: float = 0.1
    glancing: str = "off"         # "off" | "linear"
    glancing_start: float = 0.5
    glancing_end: float = 0.3
    checkpoint_interval: int = 200
    reset_optimizer: bool = True  # fresh Adam moments at each phase boundary
    use_it: bool = False

    def __post_init__(self):
        if self.length_loss_weight < 0:
            raise ConfigError("length_loss_weight must be >= 0")
        if self.glancing not in ("off", "linear"):
            raise ConfigError(f"unknown glancing mode: {self.glancing}")


# ------------------------------------------------------------ phase batches


@dataclass
class PhaseBatch:
    """Decoder-side view of a batch for one phase."""

    phase: str
    input_ids: np.ndarray | None      # causal phases: (B, T) shifted ids
    input_vecs: Tensor | None         # nat phase: (B, T, d) copied vectors
    target_ids: np.ndarray            # (B, T); PAD where ignored
    mask: AttentionMask
    src_ids: np.ndarray
    src_len: np.ndarray
    tgt_len: np.ndarray
    it_state: object | None = None


def _reverse_rows(ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    out = np.array(ids, copy=True)
    for i, t in enumerate(lengths):
        out[i, :t] = ids[i, :t][::-1]
    return out


def _shift_with_bos(tgt_ids: np.ndarray, lengths: np.ndarray, append_eos: bool) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forcing pair: input [BOS, y1..] and target [y1.., (EOS)]."""
    b, t = tgt_ids.shape
    width = t + 1 if append_eos else t
    inp = np.full((b, width), PAD, dtype=np.int64)
    out = np.full((b, width), PAD, dtype=np.int64)
    for i, n in enumerate(lengths):
        n = int(n)
        if append_eos:
            inp[i, 0], inp[i, 1 : n + 1] = BOS, tgt_ids[i, :n]
            out[i, :n], out[i, n] = tgt_ids[i, :n], EOS
        else:
            inp[i, 0], inp[i, 1:n] = BOS, tgt_ids[i, : n - 1]
            out[i, :n] = tgt_ids[i, :n]
    return inp, out


def make_phase_batch(phase: str, batch: Batch, model: Model, use_it: bool = False) -> PhaseBatch:
    """Build decoder input, target, and mask for one phase.

    forward:  input [BOS, y1..y_{T-1}], target [y1..yT], causal mask.
    backward: forward construction on per-row reversed targets.
    at:       forward construction with EOS appended (teacher training).
    nat:      copied source embeddings at the reference length, full mask,
              optionally retargeted into the target embedding space.
    """
    if phase not in PHASE_LABEL:
        raise ConfigError(f"unknown phase kind: {phase}")
    common = dict(src_ids=batch.src_ids, src_len=batch.src_len, tgt_len=batch.tgt_len)

    if phase in ("forward", "backward", "at"):
        tgt = batch.tgt_ids if phase != "backward" else _reverse_rows(batch.tgt_ids, batch.tgt_len)
        inp, out = _shift_with_bos(tgt, batch.tgt_len, append_eos=(phase == "at"))
        lengths = batch.tgt_len + (1 if phase == "at" else 0)
        mask = AttentionMask("causal", valid_from_lengths(lengths, inp.shape[1]))
        return PhaseBatch(phase, inp, None, out, mask, **common)

    src_emb = gather_rows(model.bank.src_emb, batch.src_ids)
    width = int(batch.tgt_len.max())
    z = gather_positions(src_emb, copy_indices(batch.src_len, batch.tgt_len, width))
    it_state = None
    if use_it:
        it_state = it_transform(model.bank, z)
        z = it_state.transformed
    mask = AttentionMask("full", valid_from_lengths(batch.tgt_len, width))
    return PhaseBatch(phase, None, z, batch.tgt_ids[:, :width], mask, it_state=it_state, **common)


def glancing_ratio(cfg: TrainConfig, step_in_phase: int, steps_per_phase: int) -> float:
    if cfg.glancing == "off":
        return 0.0
    frac = (step_in_phase - 1) / max(steps_per_phase - 1, 1)
    return cfg.glancing_start + (cfg.glancing_end - cfg.glancing_start) * frac


def glancing_sample(model: Model, pb: PhaseBatch, current_logits: np.ndarray,
                    ratio: float, seed: int, step: int) -> Tensor:
    """Replace round(ratio * hamming) input rows with target embeddings.

    Positions are drawn uniformly without replacement among the non-PAD
    positions of each row, from a (seed, step, row) keyed stream.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"glancing ratio must be in [0, 1], got {ratio}")
    if pb.input_vecs is None:
        raise ConfigError("glancing applies to the parallel phase only")
    if ratio == 0.0:
        return pb.input_vecs
    pred = np.argmax(current_logits, axis=-1)
    tgt_filtered = model.filter.filtered_targets(pb.target_ids)
    b, t = pb.target_ids.shape
    mix = np.zeros((b, t, 1), dtype=np.float32)
    rows = np.zeros((b, t), dtype=np.int64)
    for i in range(b):
        n = int(pb.tgt_len[i])
        wrong = int((pred[i, :n] != tgt_filtered[i, :n]).sum())
        count = int(round(ratio * wrong))
        if count:
            picks = keyed_rng(seed, step, i).choice(n, size=count, replace=False)
            mix[i, picks, 0] = 1.0
        rows[i, :n] = pb.target_ids[i, :n]
    tgt_emb = gather_rows(model.bank.emb, rows)
    return pb.input_vecs * (1.0 - mix) + tgt_emb * mix


# -------------------------------------------------------------------- loss


def nat_loss(logits: Tensor, pb: PhaseBatch, length_logits: Tensor | None,
             length_weight: float, max_offset: int) -> Tensor:
    """Token cross-entropy over non-PAD positions, plus the weighted length
    cross-entropy against the clamped true offset when a length head ran."""
    tgt = np.where(pb.target_ids != PAD, model_filtered(pb, logits), -1)
    loss = cross_entropy(logits, tgt, ignore_id=-1)
    if length_logits is not None and length_weight > 0:
        offset = np.clip(pb.tgt_len - pb.src_len, -max_offset, max_offset) + max_offset
        loss = loss + cross_entropy(length_logits, offset, ignore_id=-1) * length_weight
    return loss


def model_filtered(pb: PhaseBatch, logits: Tensor) -> np.ndarray:
    # target ids live in the global space; logits are over the filtered one
    kept = pb._kept_ids  # set by the trainer before loss
    return np.searchsorted(kept, pb.target_ids)


# ---------------------------------------------------------------- trainer


@dataclass
class StepResult:
    loss: float
    lr: float


def train_step(model: Model, phase: str, batch: Batch, cfg: TrainConfig,
               global_step: int, step_in_phase: int, opt: AdamState,
               schedule_len: int) -> StepResult:
    """One optimizer step. All stochasticity is keyed by (seed, global step)."""
    use_it = cfg.use_it and phase == "nat"
    pb = make_phase_batch(phase, batch, model, use_it=use_it)
    pb._kept_ids = model.filter.kept_ids

    if phase == "nat" and cfg.glancing != "off":
        ratio = glancing_ratio(cfg, step_in_phase, schedule_len)
        if ratio > 0:
            with no_grad():
                enc0 = model.encode(batch.src_ids, batch.src_len)
                probe = model.decode(pb.input_vecs, enc0, pb.mask,
                                     valid_from_lengths(batch.src_len, batch.src_ids.shape[1]))
            pb = replace_inputs(pb, glancing_sample(model, pb, probe.data, ratio,
                                                    cfg.seed, global_step))

    plan = DropoutPlan(cfg.dropout, cfg.seed, global_step) if cfg.dropout > 0 else None
    enc = model.encode(batch.src_ids, batch.src_len, plan)
    src_valid = valid_from_lengths(batch.src_len, batch.src_ids.shape[1])
    dec_in = pb.input_vecs if pb.input_vecs is not None else model.embed_target_ids(pb.input_ids)
    logits = model.decode(dec_in, enc, pb.mask, src_valid, plan)
    length_logits = model.predict_length(enc, batch.src_len) if phase == "nat" else None
    loss = nat_loss(logits, pb, length_logits, cfg.length_loss_weight, model.hyper.max_offset)
    assert_finite(loss, "training loss")

    grads = backward(loss, model.params)
    lr = lr_at(cfg.lr, step_in_phase)
    adam_step(model.params, grads, opt, lr)
    return StepResult(loss=float(loss.data), lr=lr)


def replace_inputs(pb: PhaseBatch, vecs: Tensor) -> PhaseBatch:
    return PhaseBatch(pb.phase, pb.input_ids, vecs, pb.target_ids, pb.mask,
                      pb.src_ids, pb.src_len, pb.tgt_len, pb.it_state)


def _fresh_adam(cfg: TrainConfig) -> AdamState:
    return AdamState(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)


def validation_bleu(model: Model, val_pairs: list[SentencePair], vocab, phase: str) -> float:
    from .model import greedy_decode_batch, translate_batch

    srcs = [p.src for p in val_pairs]
    if phase == "at":
        hyps = greedy_decode_batch(model, srcs)
    else:
        hyps = translate_batch(model, srcs)
    hyp_lines = [vocab_decode(vocab, h) for h in hyps]
    ref_lines = [vocab_decode(vocab, p.tgt) for p in val_pairs]
    return bleu(hyp_lines, ref_lines)


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def add(self, step: int, phase: str, loss: float, lr: float, val: float) -> None:
        self.rows.append({"step": step, "phase": phase, "loss": loss, "lr": lr, "val_bleu": val})

    def as_csv(self) -> str:
        lines = ["step,phase,loss,lr,val_bleu"]
        for r in self.rows:
            lines.append(f"{r['step']},{r['phase']},{r['loss']:.6f},{r['lr']:.8f},{r['val_bleu']:.4f}")
        return "\n".join(lines) + "\n"


class BatchStream:
    """Deterministic batch sequence: reshuffled every epoch from a key of
    (seed, phase index, epoch), so any step's batch is recomputable."""

    def __init__(self, pairs: list[SentencePair], batch_tokens: int, seed: int, phase_index: int):
        self.pairs = pairs
        self.batch_tokens = batch_tokens
        self.seed = seed
        self.phase_index = phase_index
        self.epoch = -1
        self.batches: list[Batch] = []
        self.pos = 0

    def next(self) -> Batch:
        if self.pos >= len(self.batches):
            self.epoch += 1
            mixed = int(keyed_rng(self.seed, 0xE9, self.phase_index, self.epoch).integers(2 ** 31))
            self.batches = make_batches(self.pairs, self.batch_tokens, mixed)
            self.pos = 0
        b = self.batches[self.pos]
        self.pos += 1
        return b

    def skip(self, n: int) -> None:
        for _ in range(n):
            self.next()


def run_training(model: Model, schedule: CurriculumSchedule, train_pairs: list[SentencePair],
                 val_pairs: list[SentencePair], vocab, cfg: TrainConfig,
                 run_dir: Path | None = None, resume_step: int = 0,
                 resume_opt: AdamState | None = None,
                 resume_best: tuple[float, float, str] | None = None) -> tuple[Model, TrainLog]:
    """Run every phase in order on the same parameters.

    Checkpoints and the metric CSV land in run_dir when given. The returned
    model carries the best final-phase validation parameters (ties broken by
    lower loss); earlier-phase steps never reset parameters, only the
    optimizer moments when cfg.reset_optimizer is set.
    """
    from .checkpoint import save_model, write_tensor_file

    if not train_pairs:
        raise DataError("no training pairs")
    log = TrainLog()
    opt = resume_opt if resume_opt is not None else _fresh_adam(cfg)
    # best = (bleu, loss_at_best, checkpoint name)
    best = resume_best if resume_best is not None else (-1.0, float("inf"), "")
    global_step = 0
    final_phase_idx = len(schedule.phases) - 1

    for phase_idx, phase in enumerate(schedule.phases):
        if cfg.reset_optimizer and global_step == max(resume_step, 0) and phase_idx * schedule.steps_per_phase == global_step:
            pass  # fresh state below only at true boundaries
        stream = BatchStream(train_pairs, cfg.batch_tokens, cfg.seed, phase_idx)
        phase_start = phase_idx * schedule.steps_per_phase
        if resume_step >= phase_start + schedule.steps_per_phase:
            continue  # phase fully done before resume point
        skip = max(resume_step - phase_start, 0)
        if skip == 0 and cfg.reset_optimizer and resume_step <= phase_start:
            opt = _fresh_adam(cfg)
        stream.skip(skip)
        window: list[float] = []
        for step_in_phase in range(skip + 1, schedule.steps_per_phase + 1):
            global_step = phase_start + step_in_phase
            res = train_step(model, phase, stream.next(), cfg, global_step,
                             step_in_phase, opt, schedule.steps_per_phase)
            window.append(res.loss)
            at_interval = (step_in_phase % cfg.checkpoint_interval == 0
                           or step_in_phase == schedule.steps_per_phase)
            if not at_interval:
                continue
            val = validation_bleu(model, val_pairs, vocab, phase) if val_pairs else 0.0
            mean_loss = sum(window) / len(window)
            window.clear()
            log.add(global_step, PHASE_LABEL[phase], mean_loss, res.lr, val)
            ckpt_name = f"{PHASE_LABEL[phase]}_{global_step}.ckpt"
            if phase_idx == final_phase_idx and (
                val > best[0] or (val == best[0] and mean_loss < best[1])
            ):
                best = (val, mean_loss, ckpt_name)
            if run_dir is not None:
                save_model(run_dir / ckpt_name, model)
                state = {f"m.{k}": v for k, v in opt.m.items()}
                state.update({f"v.{k}": v for k, v in opt.v.items()})
                write_tensor_file(run_dir / (ckpt_name + ".state"), state, {
                    "step": str(global_step),
                    "adam_step": str(opt.step),
                    "best_bleu": repr(best[0]),
                    "best_loss": repr(best[1]),
                    "best_ckpt": best[2],
                })
                (run_dir / "metrics.csv").write_text(log.as_csv(), encoding="utf-8")

    if run_dir is not None and best[2]:
        from .checkpoint import load_model

        best_model, _ = load_model(run_dir / best[2])
        save_model(run_dir / "best.ckpt", best_model)
        for name, p in best_model.params.items():
            model.params[name].data = p.data
    return model, log


def train_curriculum(model: Model, schedule: CurriculumSchedule,
                     train_pairs: list[SentencePair], val_pairs: list[SentencePair],
                     vocab, cfg: TrainConfig, run_dir: Path | None = None) -> tuple[Model, TrainLog]:
    if schedule.phases[-1] != "nat":
        raise ConfigError("curriculum training must end in the nat phase")
    return run_training(model, schedule, train_pairs, val_pairs, vocab, cfg, run_dir)


def train_at_teacher(model: Model, train_pairs: list[SentencePair],
                     val_pairs: list[SentencePair], vocab, cfg: TrainConfig,
                     run_dir: Path | None = None) -> tuple[Model, TrainLog]:
    schedule = CurriculumSchedule(["at"], cfg.steps_per_phase)
    return run_training(model, schedule, train_pairs, val_pairs, vocab, cfg, run_dir)
