"""Corpus CER is total edit distance over total reference length, not a mean of line CERs."""

from uktr.metrics import cer, edit_distance

refs = ["កម្ពុជា", "ភ្នំពេញ", "abc"]
preds = ["កម្ពជា", "ភ្នំពេញ", "xbcd"]
for p, t in zip(preds, refs):
    print(f"{t!r:>16} -> {p!r:<16} dist={edit_distance(p, t)}")
rep = cer(preds, refs, dataset="demo", decoder="ctc")
print(f"total_dist={rep.total_dist} total_chars={rep.total_chars} cer={rep.cer:.4f}")
