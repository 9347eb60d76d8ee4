"""Domain types, dataset file formats, vocabulary, and the deterministic
frame/event/proposal association logic.

A video is a fixed protocol object: 5 events tiling its duration, frames
subsampled at a configurable rate (1 fps default), and M object proposals
per frame. Events own the frames inside their time span; border frames are
shared by both adjacent events.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

ROLES = ("Arg0", "Arg1", "Arg2", "Arg3", "Arg4",
         "AScn", "ADir", "APrp", "AMnr", "ALoc", "AGol")
ROLE_IDS = {name: i for i, name in enumerate(ROLES)}
VISUAL_ROLES = (0, 1, 2)  # Arg0, Arg1, Arg2 are the grounded roles
EVENTS_PER_VIDEO = 5

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TIME_EPS = 1e-6


class DatasetError(ValueError):
    """Raised for malformed dataset files or invariant violations."""


@dataclass(frozen=True)
class Event:
    index: int
    start_s: float
    end_s: float


@dataclass(frozen=True)
class FrameSchedule:
    """Subsampled frame timeline plus per-event frame membership."""

    frame_times: tuple[float, ...]
    per_event_frames: tuple[tuple[int, ...], ...]  # frame indices per event

    @property
    def n_frames(self) -> int:
        return len(self.frame_times)

    def frames_of_event(self, event_index: int) -> tuple[int, ...]:
        return self.per_event_frames[event_index]

    def owner_event(self, frame_index: int) -> int:
        """Earliest event containing the frame (border frames belong to two)."""
        for i, frames in enumerate(self.per_event_frames):
            if frame_index in frames:
                return i
        raise KeyError(f"frame {frame_index} outside every event")


@dataclass(frozen=True)
class ObjectProposal:
    frame_index: int
    slot: int
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 pixels
    width: float
    height: float
    feature: np.ndarray


@dataclass
class VerbLexicon:
    """Verb id/name table plus the deterministic verb -> role-set map."""

    verbs: list[str]
    role_map: dict[int, frozenset[int]]

    def __post_init__(self):
        for vid, roles in self.role_map.items():
            if not roles:
                raise DatasetError(f"verb {self.verbs[vid]!r} maps to an empty role set")
            bad = [r for r in roles if not (0 <= r < len(ROLES))]
            if bad:
                raise DatasetError(f"verb {self.verbs[vid]!r} maps to unknown role ids {bad}")

    def __len__(self) -> int:
        return len(self.verbs)

    def verb_id(self, name: str) -> int:
        return self.verbs.index(name)

    def to_dict(self) -> dict:
        return {
            "verbs": list(self.verbs),
            "role_map": {self.verbs[v]: sorted(ROLES[r] for r in roles)
                         for v, roles in self.role_map.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VerbLexicon":
        verbs = list(d["verbs"])
        role_map = {}
        for name, roles in d["role_map"].items():
            role_map[verbs.index(name)] = frozenset(ROLE_IDS[r] for r in roles)
        return cls(verbs=verbs, role_map=role_map)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "VerbLexicon":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def roles_for_verb(lexicon: VerbLexicon, verb: int) -> frozenset[int]:
    """The fixed role set attached to a verb."""
    if verb not in lexicon.role_map:
        raise KeyError(f"unknown verb id {verb}")
    return lexicon.role_map[verb]


@dataclass
class EventAnnotation:
    verbs: list[int]  # one or more ground-truth verbs; the first is primary
    roles: dict[int, list[str]]  # role id -> reference captions

    @property
    def primary_verb(self) -> int:
        return self.verbs[0]


@dataclass
class GroundingDict:
    """Per (event, role) map from frame index to an annotated box."""

    entries: dict[tuple[int, int], dict[int, tuple[float, float, float, float]]]

    def boxes_for(self, event: int, role: int) -> dict[int, tuple]:
        return self.entries.get((event, role), {})

    def to_dict(self) -> dict:
        return {
            f"{e}/{ROLES[r]}": {str(t): list(box) for t, box in sorted(frames.items())}
            for (e, r), frames in sorted(self.entries.items())
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundingDict":
        entries = {}
        for key, frames in d.items():
            event_s, role_s = key.split("/")
            entries[(int(event_s), ROLE_IDS[role_s])] = {
                int(t): tuple(float(x) for x in box) for t, box in frames.items()
            }
        return cls(entries=entries)


@dataclass
class SituationAnnotation:
    events: list[EventAnnotation]
    grounding: GroundingDict | None = None


@dataclass
class VideoSample:
    id: str
    duration: float
    fps: float
    events: list[Event]
    schedule: FrameSchedule
    event_features: np.ndarray  # (5, D_vid)
    proposals: list[ObjectProposal]  # ordered by (frame, slot), length T*M
    annotation: SituationAnnotation

    @property
    def n_slots(self) -> int:
        return len(self.proposals) // self.schedule.n_frames

    def proposal_index(self, frame_index: int, slot: int) -> int:
        return frame_index * self.n_slots + slot


# -- schedule / association ------------------------------------------------


def make_events(duration: float, boundaries: list[tuple[float, float]]) -> list[Event]:
    return [Event(i, float(s), float(e)) for i, (s, e) in enumerate(boundaries)]


def build_frame_schedule(duration_s: float, events: list[Event], fps: float = 1.0) -> FrameSchedule:
    """Frames at ``1/fps`` spacing plus the per-event frame sets.

    A frame belongs to event i when its timestamp lies inside the closed
    interval [start, end]; border frames are shared by adjacent events.
    """
    if fps <= 0:
        raise DatasetError(f"fps must be positive, got {fps}")
    if not events:
        raise DatasetError("no events")
    ordered = sorted(events, key=lambda e: e.start_s)
    if abs(ordered[0].start_s) > _TIME_EPS or abs(ordered[-1].end_s - duration_s) > _TIME_EPS:
        raise DatasetError("events do not span [0, duration]")
    for a, b in zip(ordered, ordered[1:]):
        if abs(a.end_s - b.start_s) > _TIME_EPS:
            raise DatasetError(f"events {a.index} and {b.index} overlap or leave a gap")
    for e in ordered:
        if e.end_s <= e.start_s:
            raise DatasetError(f"event {e.index} has non-positive duration")

    n = int(math.floor(duration_s * fps + _TIME_EPS)) + 1
    times = tuple(j / fps for j in range(n))
    per_event = []
    for e in events:
        frames = tuple(j for j, t in enumerate(times)
                       if e.start_s - _TIME_EPS <= t <= e.end_s + _TIME_EPS)
        if not frames:
            raise DatasetError(f"event {e.index} contains no frames at fps={fps}")
        per_event.append(frames)
    return FrameSchedule(frame_times=times, per_event_frames=tuple(per_event))


def associate_proposals(schedule: FrameSchedule, proposals: list[ObjectProposal]) -> list[list[int]]:
    """Proposal indices per event; border-frame proposals appear in both."""
    frame_sets = [set(frames) for frames in schedule.per_event_frames]
    out: list[list[int]] = [[] for _ in frame_sets]
    for idx, p in enumerate(proposals):
        if not (0 <= p.frame_index < schedule.n_frames):
            raise DatasetError(f"proposal at index {idx} has out-of-schedule frame {p.frame_index}")
        hit = False
        for i, frames in enumerate(frame_sets):
            if p.frame_index in frames:
                out[i].append(idx)
                hit = True
        if not hit:
            raise DatasetError(f"proposal frame {p.frame_index} belongs to no event")
    return out


# -- vocabulary --------------------------------------------------------------


def normalize_caption(text: str) -> str:
    return " ".join(text.lower().split())


class Vocabulary:
    """Word-level token table with reserved pad/bos/eos/unk ids 0..3.

    Token ids are assigned deterministically: count descending, then
    lexicographic. Unknown words encode to UNK.
    """

    def __init__(self, tokens: list[str]):
        self.tokens = list(RESERVED_TOKENS) + list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK) for w in normalize_caption(text).split()]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)

    def decode_caption(self, ids: list[int]) -> str:
        """Decode dropping reserved ids (pad/bos/eos/unk stay out of text)."""
        return " ".join(self.tokens[i] for i in ids if i >= len(RESERVED_TOKENS))

    def to_dict(self) -> dict:
        return {"tokens": self.tokens[len(RESERVED_TOKENS):]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(tokens=list(d["tokens"]))


def build_vocabulary(corpus: list[str], min_count: int = 1) -> Vocabulary:
    if not corpus:
        raise DatasetError("empty caption corpus")
    counts: dict[str, int] = {}
    for caption in corpus:
        for w in normalize_caption(caption).split():
            counts[w] = counts.get(w, 0) + 1
    kept = [w for w, c in counts.items() if c >= min_count]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocabulary(kept)


def caption_corpus(samples: list[VideoSample]) -> list[str]:
    """All reference captions across a dataset, in deterministic order."""
    out = []
    for s in samples:
        for ev in s.annotation.events:
            for role in sorted(ev.roles):
                out.extend(ev.roles[role])
    return out


# -- dataset files -----------------------------------------------------------


def write_feature_file(path, array: np.ndarray):
    """JSON header line + raw little-endian float32 payload, row-major."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = {"dtype": "f32le", "shape": list(arr.shape), "order": "row-major"}
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(arr.tobytes())


def read_feature_file(path, context: str = "") -> np.ndarray:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DatasetError(f"{context}: bad feature header in {path}: {e}") from e
        if header.get("dtype") != "f32le":
            raise DatasetError(f"{context}: unsupported dtype {header.get('dtype')!r} in {path}")
        shape = tuple(int(x) for x in header["shape"])
        payload = f.read()
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise DatasetError(
            f"{context}: payload length {len(payload)} != expected {expected} bytes in {path}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def _annotation_from_dict(d: dict) -> SituationAnnotation:
    events = []
    for ev in d["events"]:
        roles = {ROLE_IDS[name]: list(caps) for name, caps in ev["roles"].items()}
        events.append(EventAnnotation(verbs=list(ev["verbs"]), roles=roles))
    return SituationAnnotation(events=events)


def annotation_to_dict(ann: SituationAnnotation) -> dict:
    return {
        "events": [
            {"verbs": list(ev.verbs),
             "roles": {ROLES[r]: list(caps) for r, caps in sorted(ev.roles.items())}}
            for ev in ann.events
        ]
    }


def load_sample(record: dict, base_dir: str) -> VideoSample:
    """Build a VideoSample from one manifest record; raises DatasetError."""
    vid = record.get("id", "<missing id>")

    def path_of(key):
        p = record[key]
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    duration = float(record["duration"])
    fps = float(record.get("fps", 1.0))
    events = make_events(duration, [tuple(b) for b in record["events"]])
    schedule = build_frame_schedule(duration, events, fps)

    event_features = read_feature_file(path_of("event_features"), context=vid)
    object_features = read_feature_file(path_of("object_features"), context=vid)
    with open(path_of("boxes")) as f:
        boxes_doc = json.load(f)
    width = float(boxes_doc["width"])
    height = float(boxes_doc["height"])
    boxes = boxes_doc["boxes"]

    if object_features.ndim != 3:
        raise DatasetError(f"{vid}: object features must be (T, M, D), got {object_features.shape}")
    n_frames, n_slots, _ = object_features.shape
    if len(boxes) != n_frames or any(len(row) != n_slots for row in boxes):
        raise DatasetError(f"{vid}: box list does not parallel object features")

    proposals = []
    for t in range(n_frames):
        for m in range(n_slots):
            proposals.append(ObjectProposal(
                frame_index=t, slot=m,
                box=tuple(float(x) for x in boxes[t][m]),
                width=width, height=height,
                feature=object_features[t, m],
            ))

    annotation = _annotation_from_dict(record["annotation"])
    if "grounding" in record and record["grounding"]:
        with open(path_of("grounding")) as f:
            annotation.grounding = GroundingDict.from_dict(json.load(f))

    return VideoSample(
        id=vid, duration=duration, fps=fps, events=events, schedule=schedule,
        event_features=event_features, proposals=proposals, annotation=annotation,
    )


def load_dataset(manifest_path, validate: bool = True,
                 lexicon: VerbLexicon | None = None) -> list[VideoSample]:
    """Load a JSONL manifest into validated samples (one JSON object per line)."""
    base_dir = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    errors = []
    with open(manifest_path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{manifest_path}:{line_no}: malformed JSON: {e}") from e
            sample = load_sample(record, base_dir)
            if validate:
                errors.extend(validate_sample(sample, lexicon))
            samples.append(sample)
    if validate:
        dims = {(s.event_features.shape[1], s.proposals[0].feature.shape[0]) for s in samples}
        if len(dims) > 1:
            errors.append(f"inconsistent feature dimensions across dataset: {sorted(dims)}")
        if errors:
            raise DatasetError("dataset validation failed:\n  " + "\n  ".join(errors))
    return samples


def validate_sample(sample: VideoSample, lexicon: VerbLexicon | None = None) -> list[str]:
    """Check every sample invariant; returns an itemized error list (empty = ok)."""
    errs = []
    vid = sample.id
    if len(sample.events) != EVENTS_PER_VIDEO:
        errs.append(f"{vid}: expected {EVENTS_PER_VIDEO} events, got {len(sample.events)}")
    try:
        build_frame_schedule(sample.duration, sample.events, sample.fps)
    except DatasetError as e:
        errs.append(f"{vid}: {e}")

    if sample.event_features.shape[0] != len(sample.events):
        errs.append(f"{vid}: event feature rows {sample.event_features.shape[0]} != "
                    f"{len(sample.events)} events")

    n_frames = sample.schedule.n_frames
    if len(sample.proposals) % n_frames != 0:
        errs.append(f"{vid}: proposal count {len(sample.proposals)} not a multiple of T={n_frames}")
    else:
        n_slots = sample.n_slots
        for idx, p in enumerate(sample.proposals):
            if idx != p.frame_index * n_slots + p.slot:
                errs.append(f"{vid}: proposal {idx} out of (frame, slot) order")
                break
        per_frame: dict[int, int] = {}
        for p in sample.proposals:
            per_frame[p.frame_index] = per_frame.get(p.frame_index, 0) + 1
        if any(c != n_slots for c in per_frame.values()) or len(per_frame) != n_frames:
            errs.append(f"{vid}: proposals are not exactly {n_slots} per frame")

    for idx, p in enumerate(sample.proposals):
        x1, y1, x2, y2 = p.box
        if not (0 <= x1 < x2 <= p.width and 0 <= y1 < y2 <= p.height):
            errs.append(f"{vid}: proposal {idx} has malformed box {p.box} "
                        f"for frame size {p.width}x{p.height}")

    ann = sample.annotation
    if len(ann.events) != len(sample.events):
        errs.append(f"{vid}: annotation covers {len(ann.events)} events, video has {len(sample.events)}")
    for i, ev in enumerate(ann.events):
        if not ev.verbs:
            errs.append(f"{vid}: event {i} has no ground-truth verb")
            continue
        for role, caps in ev.roles.items():
            if not caps:
                errs.append(f"{vid}: event {i} role {ROLES[role]} has no reference caption")
        if lexicon is not None:
            for v in ev.verbs:
                if v not in lexicon.role_map:
                    errs.append(f"{vid}: event {i} annotates unknown verb id {v}")
            if ev.verbs[0] in lexicon.role_map:
                allowed = lexicon.role_map[ev.verbs[0]]
                extra = sorted(set(ev.roles) - allowed)
                if extra:
                    errs.append(f"{vid}: event {i} roles {[ROLES[r] for r in extra]} "
                                f"not in the role map of verb {lexicon.verbs[ev.verbs[0]]!r}")

    if ann.grounding is not None:
        for (i, role), frames in ann.grounding.entries.items():
            if not (0 <= i < len(sample.events)):
                errs.append(f"{vid}: grounding entry for unknown event {i}")
                continue
            if role not in VISUAL_ROLES:
                errs.append(f"{vid}: grounding annotated for non-visual role {ROLES[role]}")
            allowed = set(sample.schedule.frames_of_event(i))
            bad = sorted(set(frames) - allowed)
            if bad:
                errs.append(f"{vid}: grounding frames {bad} outside event {i}")
    return errs


def load_dataset_dir(data_dir, split: str = "train", validate: bool = True):
    """Convenience loader for a generated dataset directory.

    Returns (samples, lexicon). Expects manifest_<split>.jsonl and lexicon.json.
    """
    lexicon = VerbLexicon.load(os.path.join(data_dir, "lexicon.json"))
    manifest = os.path.join(data_dir, f"manifest_{split}.jsonl")
    if not os.path.exists(manifest):
        raise DatasetError(f"missing manifest {manifest}")
    samples = load_dataset(manifest, validate=validate, lexicon=lexicon)
    return samples, lexicon
