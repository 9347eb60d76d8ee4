"""End-to-end optimization: the three-part loss (verb CE + role BCE +
caption CE), long-tail verb-loss variants, batching, Adam, checkpointing.

The per-video loss sums the three components; gradients are accumulated
per sample in a fixed order and averaged across the batch, so results do
not depend on how a batch is traversed.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffmath as dm
from .data_model import (
    BOS, EOS, PAD, VerbLexicon, VideoSample, Vocabulary, build_vocabulary,
    caption_corpus,
)
from .encoder import ModelConfig, prepare_inputs
from .metrics import evaluate
from .srl import SituationModel, build_event_mask, build_role_queries

VERB_LOSS_MODES = ("plain", "reweighted", "focal", "balanced-sampling")

# Exact config file surface: key name -> (TrainConfig field, parser)
CONFIG_KEYS = {
    "lr": ("lr", float),
    "batch_size": ("batch_size", int),
    "epochs": ("epochs", int),
    "seed": ("seed", int),
    "verb_loss_mode": ("verb_loss_mode", str),
    "focal_gamma": ("focal_gamma", float),
    "loss_w_verb": ("loss_w_verb", float),
    "loss_w_role": ("loss_w_role", float),
    "loss_w_caption": ("loss_w_caption", float),
    "d_model": ("d_model", int),
    "n_heads": ("n_heads", int),
    "n_layers": ("n_layers", int),
    "dropout": ("dropout", float),
    "max_caption_len": ("max_caption_len", int),
    "theta_role": ("theta_role", float),
    "fps": ("fps", float),
    "M": ("n_slots", int),
    "degrade_objects": ("degrade_objects", lambda s: s.lower() in ("1", "true", "yes")),
    "grad_clip": ("grad_clip", float),
    "eval_every": ("eval_every", int),
    "vocab_min_count": ("vocab_min_count", int),
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    seed: int = 0
    verb_loss_mode: str = "plain"
    focal_gamma: float = 2.0
    loss_w_verb: float = 1.0
    loss_w_role: float = 1.0
    loss_w_caption: float = 1.0
    d_model: int = 1024
    n_heads: int = 8
    n_layers: int = 3
    dropout: float = 0.1
    max_caption_len: int = 15
    theta_role: float = 0.5
    fps: float = 1.0
    n_slots: int = 15
    degrade_objects: bool = False
    grad_clip: float = 0.0
    eval_every: int = 25
    vocab_min_count: int = 1

    def __post_init__(self):
        if self.verb_loss_mode not in VERB_LOSS_MODES:
            raise ConfigError(f"verb_loss_mode must be one of {VERB_LOSS_MODES}, "
                              f"got {self.verb_loss_mode!r}")
        if self.verb_loss_mode == "focal" and self.focal_gamma <= 0:
            raise ConfigError(f"focal_gamma must be > 0, got {self.focal_gamma}")

    def to_dict(self) -> dict:
        return asdict(self)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key = value`` lines; '#' starts a comment."""
    values = (base.to_dict() if base else TrainConfig().to_dict())
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        apply_override(values, key, value)
    return TrainConfig(**values)


def apply_override(values: dict, key: str, value: str):
    if key not in CONFIG_KEYS:
        raise ConfigError(f"unknown config key {key!r}; valid keys: "
                          + ", ".join(sorted(CONFIG_KEYS)))
    fieldname, parser = CONFIG_KEYS[key]
    try:
        values[fieldname] = parser(value)
    except ValueError as e:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from e


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    with open(path) as f:
        return parse_config_text(f.read(), base)


def config_defaults_help() -> str:
    defaults = TrainConfig().to_dict()
    lines = []
    for key, (fieldname, _) in sorted(CONFIG_KEYS.items()):
        lines.append(f"{key} (default {defaults[fieldname]})")
    return ", ".join(lines)


# -- losses -----------------------------------------------------------------


def _onehot(idx: np.ndarray, n: int, dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(idx), n), dtype=dtype)
    out[np.arange(len(idx)), idx] = 1.0
    return out


def verb_loss(logits: dm.Tensor, gt_verbs: list[int], mode: str = "plain",
              gamma: float = 2.0, class_weights: np.ndarray | None = None) -> dm.Tensor:
    """Cross-entropy over events against the primary ground-truth verb.

    plain: mean CE. reweighted: CE weighted by per-class weights (normalized
    by the total weight, so uniform weights reduce to plain). focal:
    (1 - p)^gamma * CE, mean over events. balanced-sampling keeps the loss
    plain (the imbalance handling happens in the sampler).
    """
    n_events, n_verbs = logits.shape
    gt = np.asarray(gt_verbs)
    if gt.min() < 0 or gt.max() >= n_verbs:
        raise ValueError(f"ground-truth verb outside lexicon of size {n_verbs}")
    logp = dm.log_softmax(logits)
    picked = dm.tensor_sum(dm.mul(logp, _onehot(gt, n_verbs, logits.data.dtype)), axis=1)
    ce = -picked
    if mode in ("plain", "balanced-sampling"):
        return dm.tensor_mean(ce)
    if mode == "focal":
        focus = dm.power(1.0 - dm.exp(picked), gamma)
        return dm.tensor_mean(dm.mul(focus, ce))
    if mode == "reweighted":
        if class_weights is None:
            raise ValueError("reweighted mode needs class weights")
        w = np.asarray(class_weights, dtype=logits.data.dtype)[gt]
        return dm.tensor_sum(dm.mul(ce, w)) / float(w.sum())
    raise ValueError(f"unknown verb loss mode {mode!r}")


def role_loss(role_logits: dm.Tensor, gt_role_sets: list[set[int]]) -> dm.Tensor:
    """Mean binary cross-entropy over every (event, role) decision."""
    n_events, n_roles = role_logits.shape
    targets = np.zeros((n_events, n_roles), dtype=role_logits.data.dtype)
    for i, roles in enumerate(gt_role_sets):
        for r in roles:
            targets[i, r] = 1.0
    return dm.tensor_mean(dm.bce_with_logits(role_logits, targets))


def caption_target_weights(reference_tokens: np.ndarray, vocab: int) -> np.ndarray:
    """One-hot target weights for the caption loss: 1/len at real positions,
    0 at PAD, so a weighted sum of log-probabilities yields the sum over
    roles of the mean per-token CE. Constant per video; precompute once."""
    n_roles, length = reference_tokens.shape
    real = reference_tokens != PAD
    per_role = real.sum(axis=1)
    if (per_role == 0).any():
        raise ValueError("caption target with no real tokens")
    weights = np.zeros((n_roles, length, vocab), dtype=np.float32)
    scaled = (real / per_role[:, None]).astype(np.float32)
    np.put_along_axis(weights, reference_tokens[:, :, None], scaled[:, :, None], axis=2)
    weights[:, :, PAD] = 0.0
    return weights


def caption_loss(decoder_logits: dm.Tensor, reference_tokens: np.ndarray,
                 weights: np.ndarray | None = None) -> dm.Tensor:
    """Teacher-forced caption loss: sum over roles of the mean per-token CE.

    ``reference_tokens`` is the (n_roles, length) target matrix (reference
    shifted left, closed by EOS, padded with PAD); PAD positions are excluded.
    """
    n_roles, length, vocab = decoder_logits.shape
    if reference_tokens.shape != (n_roles, length):
        raise ValueError(f"targets {reference_tokens.shape} do not match logits "
                         f"{decoder_logits.shape}")
    if weights is None:
        weights = caption_target_weights(reference_tokens, vocab)
    logp = dm.log_softmax(decoder_logits)
    return -dm.tensor_sum(dm.mul(logp, weights))


def total_loss(components: dict[str, dm.Tensor],
               weights: dict[str, float] | None = None) -> dm.Tensor:
    """Weighted sum of the named loss components (unit weights by default)."""
    weights = weights or {}
    total = None
    for name in sorted(components):
        term = dm.mul(components[name], float(weights.get(name, 1.0)))
        total = term if total is None else dm.add(total, term)
    return total


def verb_class_frequencies(samples: list[VideoSample], n_verbs: int) -> np.ndarray:
    counts = np.zeros(n_verbs, dtype=np.int64)
    for s in samples:
        for ev in s.annotation.events:
            counts[ev.primary_verb] += 1
    return counts


def inverse_frequency_weights(samples: list[VideoSample], n_verbs: int) -> np.ndarray:
    counts = verb_class_frequencies(samples, n_verbs)
    return 1.0 / np.maximum(counts, 1)


def balanced_sample_weights(samples: list[VideoSample], n_verbs: int) -> np.ndarray:
    """Per-video sampling weight: mean inverse class frequency of the video's
    event verbs, normalized to sum to 1."""
    inv = inverse_frequency_weights(samples, n_verbs)
    w = np.array([np.mean([inv[ev.primary_verb] for ev in s.annotation.events])
                  for s in samples])
    return w / w.sum()


# -- teacher forcing ----------------------------------------------------------


def caption_targets(sample: VideoSample, vocab: Vocabulary, max_len: int):
    """(inputs, targets, role queries order) for all GT roles of a video.

    Inputs are BOS + reference, targets are reference + EOS, both padded to
    the longest caption in the video. References longer than max_len are
    truncated with a warning.
    """
    rows_in, rows_tgt = [], []
    order = []
    for i, ev in enumerate(sample.annotation.events):
        for role in sorted(ev.roles):
            ids = vocab.encode(ev.roles[role][0])
            if len(ids) > max_len:
                warnings.warn(f"{sample.id}: caption for event {i} role {role} "
                              f"truncated to {max_len} tokens")
                ids = ids[:max_len]
            rows_in.append([BOS] + ids)
            rows_tgt.append(ids + [EOS])
            order.append((i, role))
    length = max(len(r) for r in rows_in)
    inputs = np.full((len(rows_in), length), PAD, dtype=np.int64)
    targets = np.full((len(rows_in), length), PAD, dtype=np.int64)
    for r, (ri, rt) in enumerate(zip(rows_in, rows_tgt)):
        inputs[r, : len(ri)] = ri
        targets[r, : len(rt)] = rt
    return inputs, targets, order


@dataclass
class CompiledSample:
    """Per-video constants reused across epochs."""

    sample: VideoSample
    inputs: object            # encoder SampleInputs
    gt_verbs: list[int]
    gt_role_sets: list[set[int]]
    role_sets_sorted: list[list[int]]
    event_mask: np.ndarray
    cap_inputs: np.ndarray
    cap_targets: np.ndarray
    cap_weights: np.ndarray


def compile_sample(sample: VideoSample, vocab: Vocabulary, cfg: ModelConfig) -> CompiledSample:
    from .srl import RoleQuery  # local import to avoid cycle at module load

    role_sets = [sorted(ev.roles) for ev in sample.annotation.events]
    index = [RoleQuery(i, k) for i, roles in enumerate(role_sets) for k in roles]
    mask = build_event_mask(index, sample.schedule, sample.n_slots)
    cap_in, cap_tgt, _ = caption_targets(sample, vocab, cfg.max_caption_len)
    return CompiledSample(
        sample=sample,
        inputs=prepare_inputs(sample, degrade_objects=cfg.degrade_objects),
        gt_verbs=[ev.primary_verb for ev in sample.annotation.events],
        gt_role_sets=[set(ev.roles) for ev in sample.annotation.events],
        role_sets_sorted=role_sets,
        event_mask=mask,
        cap_inputs=cap_in,
        cap_targets=cap_tgt,
        cap_weights=caption_target_weights(cap_tgt, len(vocab)),
    )


def video_loss(model: SituationModel, compiled: CompiledSample, train_cfg: TrainConfig,
               class_weights: np.ndarray | None = None, rng=None):
    """Forward pass over all three stages; returns (total, components dict)."""
    dropout_p = train_cfg.dropout if rng is not None else 0.0
    o_ctx, e_ctx = model.encoder.forward(compiled.inputs, dropout_p=dropout_p, rng=rng)
    verb_logits = model.encoder.predict_verbs(e_ctx)
    role_logits = model.encoder.role_logits(e_ctx)

    queries, index = build_role_queries(
        compiled.role_sets_sorted, e_ctx,
        model.role_decoder.role_embed.table, model.encoder.pe_event.table)
    z, _, _ = model.role_decoder.forward(queries, o_ctx, compiled.event_mask,
                                         dropout_p=dropout_p, rng=rng)
    cap_logits = model.captioner.logits(compiled.cap_inputs, z,
                                        dropout_p=dropout_p, rng=rng)

    components = {
        "verb": verb_loss(verb_logits, compiled.gt_verbs, mode=train_cfg.verb_loss_mode,
                          gamma=train_cfg.focal_gamma, class_weights=class_weights),
        "role": role_loss(role_logits, compiled.gt_role_sets),
        "caption": caption_loss(cap_logits, compiled.cap_targets, compiled.cap_weights),
    }
    weights = {"verb": train_cfg.loss_w_verb, "role": train_cfg.loss_w_role,
               "caption": train_cfg.loss_w_caption}
    return total_loss(components, weights), components


# -- optimizer ----------------------------------------------------------------


class Adam:
    def __init__(self, named_params: list[tuple[str, dm.Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named_params = named_params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in named_params}
        self.v = {name: np.zeros_like(p.data) for name, p in named_params}

    def step(self):
        self.t += 1
        b1c = 1 - self.beta1 ** self.t
        b2c = 1 - self.beta2 ** self.t
        for name, p in self.named_params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            p.data -= self.lr * (self.m[name] / b1c) / (np.sqrt(self.v[name] / b2c) + self.eps)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None


def clip_gradients(named_params, max_norm: float):
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = total ** 0.5
    if norm > max_norm > 0:
        scale = max_norm / norm
        for _, p in named_params:
            if p.grad is not None:
                p.grad *= scale


# -- train loop ----------------------------------------------------------------


@dataclass
class TrainState:
    model: SituationModel
    optimizer: Adam
    epoch: int = 0
    step: int = 0

    def save(self, path):
        arrays = {name: p.data for name, p in self.model.named_parameters()}
        for name in self.optimizer.m:
            arrays[f"optim.m.{name}"] = self.optimizer.m[name]
            arrays[f"optim.v.{name}"] = self.optimizer.v[name]
        meta = {
            "config": self.model.cfg.to_dict(),
            "lexicon": self.model.lexicon.to_dict(),
            "vocab": self.model.vocab.to_dict(),
            "epoch": self.epoch,
            "step": self.step,
            "optim_t": self.optimizer.t,
            "lr": self.optimizer.lr,
        }
        dm.save_tensors(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "TrainState":
        arrays, meta = dm.load_tensors(path)
        model = SituationModel.load(path)
        opt = Adam(list(model.named_parameters()), lr=meta["lr"])
        opt.t = meta["optim_t"]
        for name, _ in model.named_parameters():
            opt.m[name] = arrays[f"optim.m.{name}"].copy()
            opt.v[name] = arrays[f"optim.v.{name}"].copy()
        return cls(model=model, optimizer=opt, epoch=meta["epoch"], step=meta["step"])


def model_config_for(train_cfg: TrainConfig, samples: list[VideoSample],
                     lexicon: VerbLexicon, vocab: Vocabulary) -> ModelConfig:
    first = samples[0]
    return ModelConfig(
        d_model=train_cfg.d_model,
        n_heads=train_cfg.n_heads,
        n_layers=train_cfg.n_layers,
        dropout=train_cfg.dropout,
        d_vid=first.event_features.shape[1],
        d_obj=first.proposals[0].feature.shape[0],
        n_verbs=len(lexicon),
        n_events=len(first.events),
        vocab_size=len(vocab),
        max_caption_len=train_cfg.max_caption_len,
        theta_role=train_cfg.theta_role,
        verb_hidden=0,
        role_hidden=0,
        degrade_objects=train_cfg.degrade_objects,
    )


def train(train_samples: list[VideoSample], lexicon: VerbLexicon, cfg: TrainConfig,
          out_dir, val_samples: list[VideoSample] | None = None,
          log_fn=None) -> TrainState:
    """Optimize the full model; writes checkpoints and a metric log.

    Emits checkpoint_last.bin every epoch plus best-verb / best-cider
    checkpoints whenever the validation pass improves on those metrics, and
    one JSON object per epoch in metrics.jsonl.
    """
    if not train_samples:
        raise ValueError("empty training set")
    os.makedirs(out_dir, exist_ok=True)
    vocab = build_vocabulary(caption_corpus(train_samples), min_count=cfg.vocab_min_count)
    model_cfg = model_config_for(cfg, train_samples, lexicon, vocab)

    ss = np.random.SeedSequence(cfg.seed)
    init_seed, shuffle_seed, dropout_seed = ss.spawn(3)
    model = SituationModel(model_cfg, lexicon, vocab, np.random.default_rng(init_seed))
    named = list(model.named_parameters())
    optimizer = Adam(named, lr=cfg.lr)
    state = TrainState(model=model, optimizer=optimizer)

    compiled = [compile_sample(s, vocab, model_cfg) for s in train_samples]
    class_weights = None
    if cfg.verb_loss_mode == "reweighted":
        class_weights = inverse_frequency_weights(train_samples, len(lexicon))
    sample_weights = None
    if cfg.verb_loss_mode == "balanced-sampling":
        sample_weights = balanced_sample_weights(train_samples, len(lexicon))

    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed) if cfg.dropout > 0 else None

    best_verb = -1.0
    best_cider = -np.inf
    log_path = os.path.join(out_dir, "metrics.jsonl")
    with open(log_path, "w") as log_file:
        for epoch in range(cfg.epochs):
            if sample_weights is not None:
                order = shuffle_rng.choice(len(compiled), size=len(compiled),
                                           replace=True, p=sample_weights)
            else:
                order = shuffle_rng.permutation(len(compiled))
            sums = {"verb": 0.0, "role": 0.0, "caption": 0.0, "total": 0.0}
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start: start + cfg.batch_size]
                optimizer.zero_grad()
                for idx in batch:
                    loss, parts = video_loss(model, compiled[int(idx)], cfg,
                                             class_weights=class_weights, rng=dropout_rng)
                    if not np.isfinite(loss.data):
                        dump = {"epoch": epoch, "step": state.step, "video": compiled[int(idx)].sample.id,
                                "components": {k: float(v.data) for k, v in parts.items()}}
                        with open(os.path.join(out_dir, "diagnostic_dump.json"), "w") as f:
                            json.dump(dump, f, indent=1, sort_keys=True)
                        raise RuntimeError(f"non-finite loss at epoch {epoch}: {dump}")
                    loss.backward()
                    sums["total"] += float(loss.data)
                    for k, v in parts.items():
                        sums[k] += float(v.data)
                inv = 1.0 / len(batch)
                for _, p in named:
                    if p.grad is not None:
                        p.grad *= inv
                if cfg.grad_clip > 0:
                    clip_gradients(named, cfg.grad_clip)
                optimizer.step()
                state.step += 1
            state.epoch = epoch + 1

            n = len(order)
            entry = {"epoch": epoch + 1,
                     "loss": sums["total"] / n,
                     "loss_verb": sums["verb"] / n,
                     "loss_role": sums["role"] / n,
                     "loss_caption": sums["caption"] / n}

            if val_samples and (epoch + 1) % cfg.eval_every == 0:
                report = evaluate(
                    [model.predict_situation(s, regime="gt-roles") for s in val_samples],
                    val_samples)
                entry["val_verb_acc1"] = report.verb["acc@1"]
                entry["val_cider"] = report.srl["cider"]
                entry["val_iou@0.5"] = report.grounding["iou@0.5"]
                if report.verb["acc@1"] > best_verb:
                    best_verb = report.verb["acc@1"]
                    model.save(os.path.join(out_dir, "checkpoint_best_verb.bin"))
                if report.srl["cider"] > best_cider:
                    best_cider = report.srl["cider"]
                    model.save(os.path.join(out_dir, "checkpoint_best_cider.bin"))

            log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            log_file.flush()
            if log_fn:
                log_fn(entry)

    model.save(os.path.join(out_dir, "checkpoint_last.bin"))
    state.save(os.path.join(out_dir, "train_state.bin"))
    return state
