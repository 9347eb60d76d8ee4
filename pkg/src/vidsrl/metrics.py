"""Evaluation suite: grounding IoU@theta, verb Acc@K and macro Recall@K,
per-role precision/recall/F1, consensus caption scores (plain and
macro-averaged by verb or role), and ROUGE-L.

Caption consensus follows the clipped TF-IDF n-gram formulation (n = 1..4,
gaussian length penalty with sigma = 6). Per-pair scores live on a 0..10
scale; the aggregate report multiplies by 10 so numbers read on the
conventional 0..100 scale.
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data_model import ROLES, VISUAL_ROLES, VideoSample, normalize_caption
from .srl import PredictionRecord

CIDER_N = 4
CIDER_SIGMA = 6.0
ROUGE_BETA = 1.2


# -- boxes and grounding ---------------------------------------------------


def box_iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    area_a = max(0.0, ax2 - ax1) * max(0.0, ay2 - ay1)
    area_b = max(0.0, bx2 - bx1) * max(0.0, by2 - by1)
    if area_a == 0.0 or area_b == 0.0:
        warnings.warn(f"degenerate box in IoU: {a} vs {b}")
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def grounding_score(preds: dict[tuple[int, int], object], sample: VideoSample,
                    theta: float, roles_eval: tuple[int, ...] = VISUAL_ROLES,
                    strict: bool = False):
    """Per-event grounding scores for one video.

    For each evaluated role the score is 1 iff the predicted frame is a key
    of the annotation dictionary AND the predicted box overlaps the annotated
    box at that frame by strictly more than theta. Events average over their
    evaluated roles; roles without any annotation are skipped (strict mode
    instead normalizes by all ground-truth roles of the event). Returns
    (per-event score list, skipped event count); events whose evaluated roles
    all lack annotations are excluded.
    """
    gdict = sample.annotation.grounding
    scores = []
    skipped = 0
    for i, ev in enumerate(sample.annotation.events):
        gt_roles = sorted(ev.roles)
        annotated = [] if gdict is None else [
            k for k in gt_roles if k in roles_eval and gdict.boxes_for(i, k)
        ]
        if not annotated:
            skipped += 1
            continue
        hits = 0.0
        for k in annotated:
            pred = preds.get((i, k))
            if pred is None:
                continue
            frames = gdict.boxes_for(i, k)
            if pred.frame in frames and box_iou(pred.box, frames[pred.frame]) > theta:
                hits += 1.0
        denom = len(gt_roles) if strict else len(annotated)
        scores.append(hits / denom)
    return scores, skipped


# -- verb metrics ------------------------------------------------------------


def _topk(logits: np.ndarray, k: int) -> np.ndarray:
    # stable sort on negated logits: ties resolve to the lowest verb id
    return np.argsort(-logits, axis=1, kind="stable")[:, :k]


def verb_accuracy_at_k(pred_logits: np.ndarray, gt_verb_sets: list[set[int]], k: int) -> float:
    """Event counts as correct iff any of its ground-truth verbs appears in
    the top-k predictions; mean over events."""
    top = _topk(np.asarray(pred_logits), k)
    hits = [bool(set(top[i].tolist()) & set(gt)) for i, gt in enumerate(gt_verb_sets)]
    return float(np.mean(hits))


def verb_recall_at_k(pred_logits: np.ndarray, gt_verb_sets: list[set[int]], k: int) -> float:
    """Macro-averaged per-class recall over classes appearing in ground truth."""
    top = _topk(np.asarray(pred_logits), k)
    classes = sorted(set().union(*[set(g) for g in gt_verb_sets]))
    recalls = []
    for c in classes:
        events = [i for i, g in enumerate(gt_verb_sets) if c in g]
        got = sum(1 for i in events if c in top[i])
        recalls.append(got / len(events))
    return float(np.mean(recalls))


def role_prf(pred_role_sets: list[set[int]], gt_role_sets: list[set[int]]):
    """Per-role precision/recall/F1 over events plus the macro-F1 (the
    unweighted mean of F1 over roles present in ground truth)."""
    per_role = {}
    present = set().union(*[set(g) for g in gt_role_sets]) if gt_role_sets else set()
    for r in range(len(ROLES)):
        tp = sum(1 for p, g in zip(pred_role_sets, gt_role_sets) if r in p and r in g)
        fp = sum(1 for p, g in zip(pred_role_sets, gt_role_sets) if r in p and r not in g)
        fn = sum(1 for p, g in zip(pred_role_sets, gt_role_sets) if r not in p and r in g)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        per_role[r] = (prec, rec, f1)
    macro = float(np.mean([per_role[r][2] for r in sorted(present)])) if present else 0.0
    return per_role, macro


# -- caption consensus (clipped TF-IDF n-gram cosine) -------------------------


def _ngram_counts(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _doc_freq(references: list[list[str]]):
    """Document frequency of every n-gram over the reference corpus."""
    df = Counter()
    for refs in references:
        seen = set()
        for ref in refs:
            toks = normalize_caption(ref).split()
            for n in range(1, CIDER_N + 1):
                seen.update(_ngram_counts(toks, n).keys())
        df.update(seen)
    return df


def _tfidf(tokens: list[str], df: Counter, log_n: float):
    vecs, norms = [], []
    for n in range(1, CIDER_N + 1):
        counts = _ngram_counts(tokens, n)
        vec = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in counts.items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_scores(candidates: list[str], references: list[list[str]]) -> list[float]:
    """Per-item consensus scores on the 0..10 scale.

    For each n-gram size the candidate/reference similarity is the clipped
    TF-IDF dot product over the norm product (0 when either norm is 0),
    damped by a gaussian penalty on the length difference. Scores average
    over n-gram sizes and over references, then scale by 10.
    """
    if len(candidates) != len(references):
        raise ValueError("candidates and references must align")
    if len(candidates) < 2:
        raise ValueError("consensus scoring needs a corpus of at least 2 items")
    df = _doc_freq(references)
    log_n = math.log(len(candidates))
    out = []
    for cand, refs in zip(candidates, references):
        cand_toks = normalize_caption(cand).split()
        c_vecs, c_norms = _tfidf(cand_toks, df, log_n)
        total = np.zeros(CIDER_N)
        for ref in refs:
            ref_toks = normalize_caption(ref).split()
            r_vecs, r_norms = _tfidf(ref_toks, df, log_n)
            penalty = math.exp(-((len(cand_toks) - len(ref_toks)) ** 2) / (2 * CIDER_SIGMA ** 2))
            for n in range(CIDER_N):
                num = sum(min(c_vecs[n][g], r_vecs[n][g]) * r_vecs[n][g]
                          for g in c_vecs[n] if g in r_vecs[n])
                denom = c_norms[n] * r_norms[n]
                total[n] += penalty * (num / denom if denom > 0 else 0.0)
        out.append(float(total.mean() / len(refs) * 10.0))
    return out


def cider(candidates: list[str], references: list[list[str]]) -> float:
    """Corpus mean of per-item consensus scores (0..10 scale)."""
    return float(np.mean(cider_scores(candidates, references)))


def cider_grouped(candidates: list[str], references: list[list[str]],
                  group_keys: list, per_group_idf: bool = False) -> float:
    """Macro-average of per-group consensus over groups with at least one
    pair. By default document frequencies come from the full corpus; the
    per_group_idf flag recomputes them inside each group."""
    if len(group_keys) != len(candidates):
        raise ValueError("group_keys must align with candidates")
    groups: dict[object, list[int]] = {}
    for i, key in enumerate(group_keys):
        groups.setdefault(key, []).append(i)
    if per_group_idf:
        means = []
        for key in sorted(groups):
            idx = groups[key]
            if len(idx) < 2:
                continue  # per-group document frequencies need >= 2 pairs
            means.append(cider([candidates[i] for i in idx], [references[i] for i in idx]))
        if not means:
            raise ValueError("no group has enough pairs for per-group idf scoring")
        return float(np.mean(means))
    scores = cider_scores(candidates, references)
    means = [float(np.mean([scores[i] for i in groups[key]])) for key in sorted(groups)]
    return float(np.mean(means))


def _lcs_len(a: list[str], b: list[str]) -> int:
    dp = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                dp[i, j] = dp[i - 1, j - 1] + 1
            else:
                dp[i, j] = max(dp[i - 1, j], dp[i, j - 1])
    return int(dp[len(a), len(b)])


def rouge_l(candidate: str, references: list[str], beta: float = ROUGE_BETA) -> float:
    """Longest-common-subsequence F-measure, max over references."""
    cand = normalize_caption(candidate).split()
    best = 0.0
    for ref in references:
        ref_toks = normalize_caption(ref).split()
        if not cand or not ref_toks:
            continue
        lcs = _lcs_len(cand, ref_toks)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        r = lcs / len(ref_toks)
        f = (1 + beta ** 2) * p * r / (r + beta ** 2 * p)
        best = max(best, f)
    return best


# -- aggregate report ----------------------------------------------------------


@dataclass
class EvalReport:
    verb: dict[str, float]
    srl: dict[str, float]
    grounding: dict[str, float]
    roles: dict[str, object]

    def to_dict(self) -> dict:
        return {"verb": self.verb, "srl": self.srl,
                "grounding": self.grounding, "roles": self.roles}

    def table(self) -> str:
        lines = ["metric                 value", "-" * 30]
        for section in ("verb", "srl", "grounding"):
            for k, v in getattr(self, section).items():
                lines.append(f"{section + '/' + k:<22} {v:.4f}")
        lines.append(f"{'roles/macro_f1':<22} {self.roles['macro_f1']:.4f}")
        for name, (p, r, f1) in self.roles["per_role"].items():
            lines.append(f"{'roles/' + name:<22} P={p:.2f} R={r:.2f} F1={f1:.2f}")
        return "\n".join(lines)


def evaluate(predictions: list[list[PredictionRecord]], samples: list[VideoSample],
             thetas: tuple[float, ...] = (0.3, 0.5), strict_grounding: bool = False,
             primary_verb_only: bool = False) -> EvalReport:
    """Full report over aligned predictions and ground truth.

    Captions are scored over (event, role) pairs for roles present in the
    ground truth; a missing prediction contributes an empty caption.
    Grounding is averaged over annotated events at each theta.
    """
    if not predictions or all(not recs for recs in predictions):
        raise ValueError("no predictions to evaluate")
    by_id = {s.id: s for s in samples}

    gt_sets: list[set[int]] = []
    pred_rows = []
    pred_role_sets: list[set[int]] = []
    gt_role_sets: list[set[int]] = []
    candidates: list[str] = []
    references: list[list[str]] = []
    verb_groups: list[int] = []
    role_groups: list[int] = []
    rouge_vals: list[float] = []
    grounding_lists: dict[float, list[float]] = {t: [] for t in thetas}
    skipped = 0

    for records in predictions:
        if not records:
            continue
        sample = by_id.get(records[0].video_id)
        if sample is None:
            raise ValueError(f"predictions reference unknown video {records[0].video_id!r}")
        by_event = {r.event: r for r in records}
        preds_ik = {}
        for rec in records:
            for rp in rec.roles:
                preds_ik[(rec.event, rp.role)] = rp.grounding

        for i, ev in enumerate(sample.annotation.events):
            rec = by_event.get(i)
            gt_verbs = set(ev.verbs[:1]) if primary_verb_only else set(ev.verbs)
            gt_sets.append(gt_verbs)
            row = np.full(5, -1, dtype=np.int64) if rec is None else np.asarray(rec.top5_verbs)
            pred_rows.append(row)
            rec_roles = {} if rec is None else {rp.role: rp for rp in rec.roles}
            pred_role_sets.append(set(rec_roles))
            gt_role_sets.append(set(ev.roles))
            for k in sorted(ev.roles):
                cand = rec_roles[k].caption if k in rec_roles else ""
                refs = ev.roles[k]
                candidates.append(cand)
                references.append(refs)
                verb_groups.append(ev.primary_verb)
                role_groups.append(k)
                rouge_vals.append(rouge_l(cand, refs))

        sk = 0
        for theta in thetas:
            scores, sk = grounding_score(preds_ik, sample, theta, strict=strict_grounding)
            grounding_lists[theta].extend(scores)
        skipped += sk  # skip count is theta-independent

    acc1 = float(np.mean([1.0 if rows[0] in gt else 0.0
                          for rows, gt in zip(pred_rows, gt_sets)]))
    acc5 = float(np.mean([1.0 if set(rows.tolist()) & gt else 0.0
                          for rows, gt in zip(pred_rows, gt_sets)]))
    classes = sorted(set().union(*gt_sets))
    rec5 = float(np.mean([
        np.mean([1.0 if c in rows else 0.0
                 for rows, gt in zip(pred_rows, gt_sets) if c in gt])
        for c in classes
    ]))

    srl = {
        "cider": cider(candidates, references) * 10.0,
        "cider_vb": cider_grouped(candidates, references, verb_groups) * 10.0,
        "cider_arg": cider_grouped(candidates, references, role_groups) * 10.0,
        "rouge_l": float(np.mean(rouge_vals)),
    }
    grounding = {
        f"iou@{theta}": (float(np.mean(vals)) if vals else 0.0)
        for theta, vals in grounding_lists.items()
    }
    per_role, macro = role_prf(pred_role_sets, gt_role_sets)
    report = EvalReport(
        verb={"acc@1": acc1, "acc@5": acc5, "recall@5": rec5},
        srl=srl,
        grounding=grounding,
        roles={
            "per_role": {ROLES[r]: per_role[r] for r in sorted(per_role)},
            "macro_f1": macro,
            "skipped_grounding_events": skipped,
        },
    )
    for section in (report.verb, report.srl, report.grounding):
        for k, v in section.items():
            if not np.isfinite(v):
                raise ValueError(f"non-finite metric {k}: {v}")
    return report
