import numpy as np

from vidsrl.data_model import normalize_caption


def exact_caption_match_rate(model, samples) -> float:
    """Fraction of (event, role) pairs whose greedy caption equals a reference."""
    hits = total = 0
    for s in samples:
        for rec in model.predict_situation(s, regime="gt-roles"):
            ev = s.annotation.events[rec.event]
            for rp in rec.roles:
                refs = [normalize_caption(c) for c in ev.roles[rp.role]]
                hits += rp.caption in refs
                total += 1
    return hits / total
