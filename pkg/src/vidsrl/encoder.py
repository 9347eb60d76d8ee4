"""Stage 1: align and contextualise object and event features with a
transformer encoder, then predict verbs and multi-label roles per event.

The token sequence is all T*M object tokens (ordered by frame, then slot)
followed by the 5 event tokens. Object tokens get the positional embedding
of their event plus a learned projection of their normalized box geometry;
border-frame objects take the earlier event's positional embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .data_model import ROLES, VideoSample


@dataclass
class ModelConfig:
    """Shared hyperparameters for all three transformer stages."""

    d_model: int = 1024
    n_heads: int = 8
    n_layers: int = 3
    ffn_mult: int = 4
    dropout: float = 0.1
    norm_placement: str = "post"
    d_vid: int = 64
    d_obj: int = 64
    n_verbs: int = 20
    n_roles: int = len(ROLES)
    n_events: int = 5
    vocab_size: int = 54
    max_caption_len: int = 15
    theta_role: float = 0.5
    verb_hidden: int = 0   # 0 means 2 * d_model (2048 at the default width)
    role_hidden: int = 0   # 0 means d_model (1024 at the default width)
    share_event_pe: bool = True
    degrade_objects: bool = False

    def __post_init__(self):
        if self.verb_hidden == 0:
            self.verb_hidden = 2 * self.d_model
        if self.role_hidden == 0:
            self.role_hidden = self.d_model

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def box_position_features(sample: VideoSample) -> np.ndarray:
    """(T*M, 5) array of (cx, cy, w, h, area), all normalized to [0, 1]."""
    out = np.empty((len(sample.proposals), 5), dtype=np.float32)
    for i, p in enumerate(sample.proposals):
        x1, y1, x2, y2 = p.box
        w = (x2 - x1) / p.width
        h = (y2 - y1) / p.height
        out[i] = ((x1 + x2) / (2 * p.width), (y1 + y2) / (2 * p.height), w, h, w * h)
    return out


def proposal_event_owners(sample: VideoSample) -> np.ndarray:
    """Earliest owning event index for every proposal (for its PE)."""
    return np.array([sample.schedule.owner_event(p.frame_index) for p in sample.proposals],
                    dtype=np.int64)


@dataclass
class SampleInputs:
    """Constant per-video arrays, precomputed once and reused across epochs."""

    object_features: np.ndarray  # (T*M, D_obj), possibly degraded
    event_features: np.ndarray   # (5, D_vid)
    box_positions: np.ndarray    # (T*M, 5)
    owners: np.ndarray           # (T*M,)


def prepare_inputs(sample: VideoSample, degrade_objects: bool = False) -> SampleInputs:
    obj = np.stack([p.feature for p in sample.proposals]).astype(np.float32)
    evt = sample.event_features.astype(np.float32)
    owners = proposal_event_owners(sample)
    if degrade_objects:
        if obj.shape[1] != evt.shape[1]:
            raise ValueError("object degradation needs matching event/object feature dims")
        obj = evt[owners]
    return SampleInputs(
        object_features=obj,
        event_features=evt,
        box_positions=box_position_features(sample),
        owners=owners,
    )


class VideoObjectEncoder:
    """Transformer over object + event tokens with verb and role heads."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_model
        self.cfg = cfg
        self.obj_proj = dm.Linear(cfg.d_obj, d, rng)
        self.event_proj = dm.Linear(cfg.d_vid, d, rng)
        self.pe_event = dm.Embedding(cfg.n_events, d, rng)
        self.box_proj = dm.Linear(5, d, rng)
        self.layers = [
            dm.TransformerLayer(d, cfg.n_heads, rng, ffn_mult=cfg.ffn_mult,
                                norm_placement=cfg.norm_placement)
            for _ in range(cfg.n_layers)
        ]
        self.verb_in = dm.Linear(d, cfg.verb_hidden, rng)
        self.verb_out = dm.Linear(cfg.verb_hidden, cfg.n_verbs, rng)
        self.role_in = dm.Linear(d, cfg.role_hidden, rng)
        self.role_out = dm.Linear(cfg.role_hidden, cfg.n_roles, rng)

    def embed_tokens(self, inputs: SampleInputs) -> dm.Tensor:
        """Project features and add positional terms; objects first, events last."""
        obj = self.obj_proj(dm.Tensor(inputs.object_features))
        obj = dm.add(obj, self.pe_event(inputs.owners))
        obj = dm.add(obj, self.box_proj(dm.Tensor(inputs.box_positions)))
        evt = self.event_proj(dm.Tensor(inputs.event_features))
        evt = dm.add(evt, self.pe_event(np.arange(len(inputs.event_features))))
        return dm.concat([obj, evt], axis=0)

    def encode(self, tokens: dm.Tensor, dropout_p: float = 0.0, rng=None):
        """Full self-attention over all tokens; split back into (o', e')."""
        x = tokens
        for layer in self.layers:
            x, _ = layer(x, dropout_p=dropout_p, rng=rng)
        n_events = self.cfg.n_events
        n_obj = x.shape[0] - n_events
        return dm.narrow(x, 0, 0, n_obj), dm.narrow(x, 0, n_obj, n_events)

    def predict_verbs(self, e_ctx: dm.Tensor) -> dm.Tensor:
        """Raw verb logits (n_events, n_verbs); argmax ties go to the lowest id."""
        return self.verb_out(dm.relu(self.verb_in(e_ctx)))

    def role_logits(self, e_ctx: dm.Tensor) -> dm.Tensor:
        return self.role_out(dm.relu(self.role_in(e_ctx)))

    def predict_roles(self, e_ctx: dm.Tensor, theta_role: float | None = None):
        """Sigmoid role probabilities and the thresholded per-event role sets.

        The threshold is strict (probability must exceed theta), so an event
        may come back with an empty set; the caller decides any fallback.
        """
        theta = self.cfg.theta_role if theta_role is None else theta_role
        if not (0.0 < theta < 1.0):
            raise ValueError(f"theta_role must be in (0, 1), got {theta}")
        probs = dm.sigmoid(self.role_logits(e_ctx))
        sets = [sorted(np.flatnonzero(row > theta).tolist()) for row in probs.data]
        return probs, sets

    def forward(self, inputs: SampleInputs, dropout_p: float = 0.0, rng=None):
        tokens = self.embed_tokens(inputs)
        return self.encode(tokens, dropout_p=dropout_p, rng=rng)

    def named_parameters(self, prefix: str = "encoder"):
        yield from self.obj_proj.named_parameters(f"{prefix}.obj_proj")
        yield from self.event_proj.named_parameters(f"{prefix}.event_proj")
        yield from self.pe_event.named_parameters(f"{prefix}.pe_event")
        yield from self.box_proj.named_parameters(f"{prefix}.box_proj")
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.layers.{i}")
        yield from self.verb_in.named_parameters(f"{prefix}.verb_in")
        yield from self.verb_out.named_parameters(f"{prefix}.verb_out")
        yield from self.role_in.named_parameters(f"{prefix}.role_in")
        yield from self.role_out.named_parameters(f"{prefix}.role_out")
