"""Character error rate and the edit distance underneath it."""

import csv
from dataclasses import dataclass


def edit_distance(ref, hyp):
    """Levenshtein distance between two symbol sequences (two-row DP)."""
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    prev = list(range(len(hyp) + 1))
    curr = [0] * (len(hyp) + 1)
    for i in range(1, len(ref) + 1):
        curr[0] = i
        r = ref[i - 1]
        for j in range(1, len(hyp) + 1):
            cost = 0 if r == hyp[j - 1] else 1
            curr[j] = min(prev[j] + 1, curr[j - 1] + 1, prev[j - 1] + cost)
        prev, curr = curr, prev
    return prev[len(hyp)]


def cer(pairs):
    """Corpus-level character error rate over (reference, hypothesis) pairs:
    total edits divided by total reference length — NOT a mean of per-pair
    rates. Empty-reference corpora are an error."""
    edits = 0
    ref_len = 0
    for ref, hyp in pairs:
        edits += edit_distance(ref, hyp)
        ref_len += len(ref)
    if ref_len == 0:
        raise ValueError("cer undefined: empty corpus or all-empty references")
    return edits / ref_len


@dataclass
class EvalReport:
    """Per-language evaluation tally, one CSV row."""

    language: str
    split: str
    n_utts: int
    edits: int
    ref_len: int

    @property
    def cer(self):
        return self.edits / self.ref_len

    @staticmethod
    def from_pairs(language, split, pairs):
        pairs = list(pairs)
        edits = sum(edit_distance(r, h) for r, h in pairs)
        ref_len = sum(len(r) for r, _ in pairs)
        if ref_len == 0:
            raise ValueError(f"cer undefined for {language}/{split}: empty references")
        return EvalReport(language=language, split=split, n_utts=len(pairs), edits=edits, ref_len=ref_len)


EVAL_FIELDS = ["language", "split", "n_utts", "edits", "ref_len", "cer"]


def write_eval_csv(path, reports):
    """Write eval rows; cer is serialized via repr so reruns match byte-for-byte."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EVAL_FIELDS)
        for r in reports:
            w.writerow([r.language, r.split, r.n_utts, r.edits, r.ref_len, repr(r.cer)])
