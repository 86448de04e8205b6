"""Text-generation metrics: corpus BLEU, ROUGE-L, METEOR (exact + stem) and embedding F1."""
from __future__ import annotations

import csv
import io
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptyAfterTokenization, LengthMismatch, NoOverlap
from .porter import stem

_TOKEN_RE = re.compile(r"[^\W_]+")

METRIC_COLUMNS = ("dataset", "vae_variant", "backend", "bleu", "rouge_l", "meteor", "embed_f1")


def tokenize(text: str) -> list:
    """Lowercase and split into maximal runs of letters/digits."""
    return _TOKEN_RE.findall(text.lower())


def _tokens(x) -> list:
    return tokenize(x) if isinstance(x, str) else list(x)


# --- BLEU --------------------------------------------------------------------

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_length(cand_len, ref_lens):
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def bleu_corpus(candidates: Sequence, references: Sequence, max_n: int = 4) -> float:
    """Unsmoothed corpus BLEU with clipped counts and the closest-reference brevity penalty."""
    if len(candidates) != len(references):
        raise LengthMismatch(f"{len(candidates)} candidates vs {len(references)} reference lists")
    matched = [0] * max_n
    total = [0] * max_n
    cand_len = ref_len = 0
    for cand, refs in zip(candidates, references):
        cand = _tokens(cand)
        refs = [_tokens(r) for r in refs]
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += _closest_ref_length(len(cand), [len(r) for r in refs])
        for n in range(1, max_n + 1):
            counts = _ngrams(cand, n)
            max_ref = Counter()
            for r in refs:
                max_ref |= _ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / max_n
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


# --- ROUGE-L -----------------------------------------------------------------

def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return 2 * p * r / (p + r)


def rouge_l_multi(candidate, references: Iterable) -> float:
    return max((rouge_l(candidate, r) for r in references), default=0.0)


# --- METEOR ------------------------------------------------------------------

def meteor_alignment(cand: Sequence[str], ref: Sequence[str]) -> list:
    """(cand_index, ref_index) pairs: exact matches first, then Porter-stem matches.

    Each stage scans candidate tokens left to right and takes the first
    still-unmatched reference token that matches.
    """
    pairs = []
    used_c, used_r = set(), set()
    for key in (lambda t: t, stem):
        ref_keys = [key(t) for t in ref]
        for i, tok in enumerate(cand):
            if i in used_c:
                continue
            k = key(tok)
            for j, rk in enumerate(ref_keys):
                if j not in used_r and rk == k:
                    pairs.append((i, j))
                    used_c.add(i)
                    used_r.add(j)
                    break
    return sorted(pairs)


def count_chunks(pairs: Sequence) -> int:
    chunks = 0
    prev = None
    for i, j in sorted(pairs):
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def meteor(candidate, reference) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    pairs = meteor_alignment(cand, ref)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f_mean = 10 * p * r / (r + 9 * p)
    penalty = 0.5 * (count_chunks(pairs) / m) ** 3
    return f_mean * (1.0 - penalty)


def meteor_multi(candidate, references: Iterable) -> float:
    return max((meteor(candidate, r) for r in references), default=0.0)


# --- embedding F1 ------------------------------------------------------------

def embed_f1(candidate, reference, token_embedder: Callable[[str], np.ndarray]) -> float:
    """Greedy-matching F1 over per-token embeddings (BERTScore form, no idf weighting)."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        raise EmptyAfterTokenization("embed_f1 needs tokens on both sides")

    def unit_rows(tokens):
        mat = np.array([token_embedder(t) for t in tokens], dtype=np.float64)
        norms = np.linalg.norm(mat, axis=1, keepdims=True)
        return mat / np.where(norms == 0, 1.0, norms)

    sims = unit_rows(cand) @ unit_rows(ref).T
    precision = float(sims.max(axis=1).mean())
    recall = float(sims.max(axis=0).mean())
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def embed_f1_multi(candidate, references: Iterable, token_embedder) -> float:
    return max(embed_f1(candidate, r, token_embedder) for r in references)


# --- table -------------------------------------------------------------------

@dataclass
class MetricScores:
    bleu: float
    rouge_l: float
    meteor: float
    embed_f1: float

    def as_dict(self) -> dict:
        return {"bleu": self.bleu, "rouge_l": self.rouge_l,
                "meteor": self.meteor, "embed_f1": self.embed_f1}


def score_corpus(explanations: Mapping[str, str], annotations: Mapping[str, Sequence[str]],
                 token_embedder) -> MetricScores:
    """Corpus BLEU plus mean over sequences of max-over-references sentence scores."""
    ids = sorted(set(explanations) & set(annotations))
    if not ids:
        raise NoOverlap("no sequence id has both an explanation and references")
    cands = [tokenize(explanations[i]) for i in ids]
    refs = [[tokenize(r) for r in annotations[i]] for i in ids]
    return MetricScores(
        bleu=bleu_corpus(cands, refs),
        rouge_l=float(np.mean([rouge_l_multi(c, rs) for c, rs in zip(cands, refs)])),
        meteor=float(np.mean([meteor_multi(c, rs) for c, rs in zip(cands, refs)])),
        embed_f1=float(np.mean([embed_f1_multi(c, rs, token_embedder) if c else 0.0
                                for c, rs in zip(cands, refs)])),
    )


def evaluate_table(explanations: Sequence[dict], annotations: Mapping[str, Sequence[str]],
                   token_embedder) -> list:
    """Score explanation records grouped by (dataset, vae_variant, backend).

    Each record carries ``sequence_id`` and ``explanation`` plus the three
    grouping keys. Returns one row dict per group, in sorted group order.
    """
    groups = {}
    for rec in explanations:
        key = (rec.get("dataset", ""), rec.get("vae_variant", ""), rec.get("backend", ""))
        groups.setdefault(key, {})[rec["sequence_id"]] = rec["explanation"]
    rows = []
    for key in sorted(groups):
        texts = groups[key]
        if not set(texts) & set(annotations):
            continue
        scores = score_corpus(texts, annotations, token_embedder)
        rows.append(dict(zip(METRIC_COLUMNS[:3], key), **scores.as_dict()))
    if not rows:
        raise NoOverlap("no explanation id appears in the annotations")
    return rows


def table_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
