import itertools
import math
import re
import warnings
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from nltk.stem.porter import PorterStemmer
from nltk.translate.bleu_score import corpus_bleu

from latentlens import nlgmetrics as nm
from latentlens.errors import NoOverlap
from latentlens.porter import stem
from latentlens.similarity import LocalEmbedder, hash_token

VOCAB = ["the", "a", "cat", "cats", "sat", "sits", "sitting", "on", "mat", "mats", "shape",
         "shapes", "moves", "moving", "left", "right", "size", "grows", "growing", "larger",
         "position", "positions", "latent", "variable", "controls", "controlled"]


def random_pairs(n, seed, max_len=12, min_len=1):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        cand = [str(t) for t in rng.choice(VOCAB, size=rng.integers(min_len, max_len + 1))]
        ref = [str(t) for t in rng.choice(VOCAB, size=rng.integers(min_len, max_len + 1))]
        out.append((cand, ref))
    return out


# --- oracles ------------------------------------------------------------------

def brute_lcs(a, b):
    """Longest subsequence of the shorter sequence that also occurs in the longer one."""
    if len(a) > len(b):
        a, b = b, a

    def is_subseq(sub, seq):
        it = iter(seq)
        return all(tok in it for tok in sub)

    for size in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), size):
            if is_subseq([a[i] for i in idx], b):
                return size
    return 0


def oracle_rouge(c, r):
    lcs = brute_lcs(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


_nltk = PorterStemmer(mode=PorterStemmer.ORIGINAL_ALGORITHM)


def oracle_meteor(c, r):
    matched_c, matched_r = {}, set()
    for normalize in (lambda w: w, _nltk.stem):
        for i, tok in enumerate(c):
            if i in matched_c:
                continue
            for j, ref_tok in enumerate(r):
                if j not in matched_r and normalize(ref_tok) == normalize(tok):
                    matched_c[i] = j
                    matched_r.add(j)
                    break
    m = len(matched_c)
    if m == 0:
        return 0.0
    pairs = sorted(matched_c.items())
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:])
                     if not (i1 == i0 + 1 and j1 == j0 + 1))
    p, rec = m / len(c), m / len(r)
    fmean = p * rec / (0.9 * p + 0.1 * rec)
    return fmean * (1 - 0.5 * (chunks / m) ** 3)


def nltk_bleu(cands, refs):
    # nltk floors each per-segment n-gram denominator at 1, which only matters
    # for candidates shorter than 4 tokens, so fixtures keep candidates longer
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return corpus_bleu([list(r) for r in refs], cands)


# --- tokenizer and stemmer ------------------------------------------------------

def test_tokenize_rules():
    assert nm.tokenize("The cat, sat.") == ["the", "cat", "sat"]
    assert nm.tokenize("") == []
    assert nm.tokenize("z_1 moves left-to-right") == ["z", "1", "moves", "left", "to", "right"]


def _word_list():
    root = Path(__file__).resolve().parents[1]
    words = set()
    for path in [root / "README.md", *sorted((root / "src").rglob("*.py")), *sorted((root / "src").rglob("*.json"))]:
        words.update(re.findall(r"[a-z]+", path.read_text(encoding="utf-8").lower()))
    stems = ["connect", "relat", "generat", "hop", "fil", "control", "agree", "feed", "plaster",
             "siz", "troubl", "rat", "condition", "valen", "digit", "hesit", "sens", "formal"]
    suffixes = ["", "s", "es", "ed", "ing", "ational", "tional", "enci", "anci", "izer", "abli",
                "alli", "entli", "eli", "ousli", "ization", "ation", "ator", "alism", "iveness",
                "fulness", "ousness", "aliti", "iviti", "biliti", "icate", "ative", "alize",
                "iciti", "ical", "ful", "ness", "al", "ance", "ence", "er", "ic", "able", "ible",
                "ant", "ement", "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive",
                "ize", "e", "y", "ly", "eed", "edly", "sses", "ies"]
    words.update(s + x for s in stems for x in suffixes)
    words.update(["caresses", "ponies", "ties", "caress", "cats", "feed", "agreed", "bled",
                  "motoring", "sing", "conflated", "troubled", "sized", "hopping", "tanned",
                  "falling", "hissing", "fizzed", "failing", "filing", "happy", "sky", "is", "as"])
    return sorted(words)


def test_porter_matches_reference_stemmer():
    words = _word_list()
    assert len(words) > 500
    mismatches = [(w, stem(w), _nltk.stem(w)) for w in words if stem(w) != _nltk.stem(w)]
    assert mismatches == []


# --- BLEU ---------------------------------------------------------------------

def test_bleu_perfect_and_empty():
    refs = [["the cat sat on the mat today"], ["a shape moves left to right"]]
    assert nm.bleu_corpus(["the cat sat on the mat today", "a shape moves left to right"], refs) == 1.0
    assert nm.bleu_corpus([""], [["the cat"]]) == 0.0


def test_bleu_short_candidate_direct_formula():
    # "the cat sat" against "the cat sat down": 3/3, 2/2, 1/1 and no 4-grams
    # at all, so the 4-gram precision is 0 of 0 and the score is 0
    assert nm.bleu_corpus(["the cat sat"], [["the cat sat down"]]) == 0.0
    cands = ["the cat sat down", "the cat"]
    refs = [["the cat sat down"], ["the cat is"]]
    # 1-grams 6/6, 2-grams 4/4, 3-grams 2/2, 4-grams 1/1; lengths 6 vs 7
    assert nm.bleu_corpus(cands, refs) == pytest.approx(math.exp(1 - 7 / 6), abs=1e-15)
    assert nm.bleu_corpus(cands, refs, max_n=2) == pytest.approx(math.exp(1 - 7 / 6), abs=1e-15)


def test_bleu_zero_precision_rule():
    assert nm.bleu_corpus([["the"] * 4], [[["the", "cat"]]]) == 0.0


def test_bleu_matches_reference_implementation():
    pairs = random_pairs(100, seed=1, min_len=4)
    rng = np.random.default_rng(9)
    cands, refs = [], []
    for c, r in pairs:
        # half the candidates borrow a reference prefix so higher n-grams match
        if rng.random() < 0.5:
            c = r[: max(2, len(r) - 1)] + c[:2]
        cands.append(c)
        refs.append([r, list(rng.choice(VOCAB, size=5))])
    ours = nm.bleu_corpus(cands, refs)
    assert ours > 0
    assert ours == pytest.approx(nltk_bleu(cands, refs), abs=1e-9)


def test_bleu_subsets_match_reference():
    pairs = random_pairs(60, seed=4, max_len=8, min_len=4)
    for start in range(0, 60, 6):
        chunk = pairs[start:start + 6]
        cands = [c for c, _ in chunk]
        refs = [[r] for _, r in chunk]
        ours, theirs = nm.bleu_corpus(cands, refs), nltk_bleu(cands, refs)
        if ours == 0.0:
            assert theirs < 1e-100
        else:
            assert ours == pytest.approx(theirs, abs=1e-9)


# --- ROUGE-L ------------------------------------------------------------------

def test_lcs_equals_exhaustive_search():
    rng = np.random.default_rng(0)
    for _ in range(300):
        a = list(rng.integers(0, 4, size=rng.integers(0, 13)))
        b = list(rng.integers(0, 4, size=rng.integers(0, 13)))
        assert nm.lcs_length(a, b) == brute_lcs(a, b)


def test_rouge_examples():
    assert nm.rouge_l("the cat sat", "the cat sat on the mat") == pytest.approx(2 / 3, abs=1e-15)
    assert nm.rouge_l("a b c", "a b c") == 1.0
    assert nm.rouge_l("a b", "c d") == 0.0


def test_rouge_matches_oracle_on_random_pairs():
    for c, r in random_pairs(100, seed=2):
        assert nm.rouge_l(c, r) == pytest.approx(oracle_rouge(c, r), abs=1e-9)


# --- METEOR -------------------------------------------------------------------

def test_meteor_examples():
    assert nm.meteor(["a", "b", "c"], ["a", "b", "c"]) == pytest.approx(1 - 0.5 / 27, abs=1e-15)
    assert round(nm.meteor("a b c", "a b c"), 4) == 0.9815
    assert nm.meteor(["cats"], ["cat"]) == 0.5
    assert nm.meteor(["x"], ["y"]) == 0.0


def test_meteor_exact_stage_first():
    # "cats" must pair with the exact "cats" even though "cat" comes first
    pairs = nm.meteor_alignment(["cats"], ["cat", "cats"])
    assert pairs == [(0, 1)]


def test_meteor_matches_oracle_on_random_pairs():
    for c, r in random_pairs(100, seed=3):
        assert nm.meteor(c, r) == pytest.approx(oracle_meteor(c, r), abs=1e-9)


# --- embedding F1 ---------------------------------------------------------------

def test_embed_f1_cases():
    emb = LocalEmbedder()
    assert len({hash_token(t) for t in "abcdwxyz"}) == 8
    assert nm.embed_f1("a b c", "a b c", emb) == pytest.approx(1.0, abs=1e-12)
    assert nm.embed_f1("a b", "c d", emb) == 0.0
    assert nm.embed_f1("a b", "a c", emb) == pytest.approx(0.5, abs=1e-12)


# --- table ----------------------------------------------------------------------

def test_perfect_corpus_scores():
    expl = {"s1": "the cat sat on the mat", "s2": "a shape moves left to right"}
    ann = {"s1": ["the cat sat on the mat", "something else"], "s2": ["a shape moves left to right"]}
    scores = nm.score_corpus(expl, ann, LocalEmbedder())
    assert scores.bleu == 1.0 and scores.rouge_l == 1.0 and scores.meteor >= 0.98


def test_score_corpus_matches_oracles():
    expl = {"a": "the cat sat on the mat", "b": "shapes moving left", "c": "size grows larger"}
    ann = {"a": ["the cat sits on a mat", "a cat sat"], "b": ["the shape moves left to right"],
           "c": ["the size is growing", "larger size"]}
    toks = {k: nm.tokenize(v) for k, v in expl.items()}
    refs = {k: [nm.tokenize(r) for r in v] for k, v in ann.items()}
    ids = sorted(expl)
    scores = nm.score_corpus(expl, ann, LocalEmbedder())
    assert scores.rouge_l == pytest.approx(
        np.mean([max(oracle_rouge(toks[i], r) for r in refs[i]) for i in ids]), abs=1e-9)
    assert scores.meteor == pytest.approx(
        np.mean([max(oracle_meteor(toks[i], r) for r in refs[i]) for i in ids]), abs=1e-9)
    assert scores.bleu == pytest.approx(nltk_bleu([toks[i] for i in ids], [refs[i] for i in ids]), abs=1e-9)


def test_no_overlap():
    with pytest.raises(NoOverlap):
        nm.score_corpus({"a": "x"}, {"b": ["x"]}, LocalEmbedder())


def test_table_rows_per_backend():
    recs = [{"sequence_id": "s1", "dataset": "d", "vae_variant": "vae", "backend": b,
             "explanation": "the cat sat"} for b in ("heuristic", "scripted")]
    rows = nm.evaluate_table(recs, {"s1": ["the cat sat"]}, LocalEmbedder())
    assert [r["backend"] for r in rows] == ["heuristic", "scripted"]
    text = nm.table_csv(rows)
    assert text.splitlines()[0] == "dataset,vae_variant,backend,bleu,rouge_l,meteor,embed_f1"
    assert len(text.splitlines()) == 3
