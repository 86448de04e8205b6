"""Certainty of a response set as mean pairwise similarity, and explanation selection."""
from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import remote
from .errors import EmptyTextAfterTokenization, MalformedResponse, ZeroVector
from .nlgmetrics import rouge_l, tokenize

SENTINEL = "No clear explanation"
HASH_DIM = 1 << 15
KINDS = ("cosine_embedding", "lexical_rougeL")


def hash_token(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % HASH_DIM


@dataclass
class EmbeddingVector:
    values: np.ndarray
    provider_label: str


class LocalEmbedder:
    """Hashed bag-of-words TF-IDF, with document frequencies taken from ``corpus``."""

    label = "local-tfidf"

    def __init__(self, corpus: Sequence[str] = ()):
        self.n_docs = 0
        self.df = Counter()
        for text in corpus:
            self.n_docs += 1
            self.df.update({hash_token(t) for t in tokenize(text)})

    def idf(self, bucket: int) -> float:
        return math.log((self.n_docs + 1) / (self.df[bucket] + 1)) + 1.0

    def embed(self, text: str) -> EmbeddingVector:
        counts = Counter(hash_token(t) for t in tokenize(text))
        if not counts:
            raise EmptyTextAfterTokenization(f"no tokens in {text!r}")
        vec = np.zeros(HASH_DIM)
        for bucket, tf in counts.items():
            vec[bucket] = tf * self.idf(bucket)
        return EmbeddingVector(vec / np.linalg.norm(vec), self.label)

    def token_vector(self, token: str) -> np.ndarray:
        vec = np.zeros(HASH_DIM)
        vec[hash_token(token)] = 1.0
        return vec

    __call__ = token_vector


class RemoteEmbedder:
    """Embeddings from an OpenAI-compatible ``/embeddings`` endpoint."""

    def __init__(self, endpoint: str, model: str, timeout_s: float = 60.0,
                 policy: Optional[remote.RetryPolicy] = None, client=None,
                 sleep: Callable[[float], None] = None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.timeout_s = timeout_s
        self.policy = policy or remote.RetryPolicy()
        self.client = client
        self.sleep = sleep
        self.label = f"remote:{model}"
        self._cache = {}

    def embed(self, text: str) -> EmbeddingVector:
        if not text.strip():
            raise EmptyTextAfterTokenization("cannot embed empty text")
        if text not in self._cache:
            kwargs = {"sleep": self.sleep} if self.sleep else {}
            result = remote.post_json(
                f"{self.endpoint}/embeddings", {"model": self.model, "input": text},
                remote.api_key(), timeout_s=self.timeout_s, policy=self.policy,
                client=self.client, **kwargs)
            try:
                values = np.asarray(result.body["data"][0]["embedding"], dtype=np.float64)
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise MalformedResponse("embeddings response lacks data[0].embedding") from exc
            self._cache[text] = values
        return EmbeddingVector(self._cache[text], self.label)

    def token_vector(self, token: str) -> np.ndarray:
        return self.embed(token).values

    __call__ = token_vector


def embed(provider, text: str) -> EmbeddingVector:
    if not text.strip():
        raise EmptyTextAfterTokenization("text is empty")
    return provider.embed(text)


def cosine(u, v) -> float:
    u = np.asarray(getattr(u, "values", u), dtype=np.float64)
    v = np.asarray(getattr(v, "values", v), dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError("vectors differ in length")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroVector("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def lexical_sim(a: str, b: str) -> float:
    return rouge_l(a, b)


@dataclass
class CertaintyReport:
    sequence_id: str
    similarity_kind: str
    pairwise: np.ndarray
    certainty: float
    per_response_mean: list
    selected_index: int
    pairs_evaluated: int = 0
    provider_label: str = ""

    @classmethod
    def from_pairwise(cls, pairwise, sequence_id: str = "", kind: str = "cosine_embedding",
                      pairs_evaluated: int = 0, provider_label: str = "") -> "CertaintyReport":
        mat = np.asarray(pairwise, dtype=np.float64)
        n = mat.shape[0]
        if n < 2 or mat.shape != (n, n):
            raise ValueError("need a square matrix over at least two responses")
        # fsum is exactly rounded, so the scores do not depend on response order
        upper = [mat[i, j] for i in range(n) for j in range(i + 1, n)]
        certainty = math.fsum(upper) / (n * (n - 1) / 2)
        means = [math.fsum(mat[i, j] for j in range(n) if j != i) / (n - 1) for i in range(n)]
        best = max(means)
        selected = means.index(best)
        return cls(sequence_id, kind, mat, certainty, means, selected, pairs_evaluated, provider_label)

    def to_dict(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "similarity_kind": self.similarity_kind,
            "certainty": self.certainty,
            "selected_index": self.selected_index,
            "per_response_mean": list(self.per_response_mean),
            "pairwise": self.pairwise.tolist(),
            "provider": self.provider_label,
        }


def pairwise_matrix(items: Sequence, sim: Callable) -> tuple:
    """Symmetric similarity matrix with unit diagonal; returns (matrix, pair evaluations)."""
    n = len(items)
    mat = np.eye(n)
    calls = 0
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = sim(items[i], items[j])
            calls += 1
    return mat, calls


def certainty(responses, kind: str = "cosine_embedding", provider=None,
              sequence_id: Optional[str] = None) -> CertaintyReport:
    """Score a response set (a ResponseSet or a plain list of strings).

    For the cosine kind with no provider, a LocalEmbedder is fitted on the
    responses themselves.
    """
    texts = list(getattr(responses, "responses", responses))
    if sequence_id is None:
        sequence_id = getattr(responses, "sequence_id", "")
    if len(texts) < 2:
        raise ValueError("certainty needs at least two responses")
    if kind == "lexical_rougeL":
        mat, calls = pairwise_matrix(texts, lexical_sim)
        label = "rougeL"
    elif kind == "cosine_embedding":
        if provider is None or provider == "local":
            provider = LocalEmbedder(texts)
        vectors = [embed(provider, t) for t in texts]
        mat, calls = pairwise_matrix(vectors, cosine)
        label = provider.label
    else:
        raise ValueError(f"unknown similarity kind {kind!r}")
    return CertaintyReport.from_pairwise(mat, sequence_id, kind, calls, label)


def select_explanation(report: CertaintyReport, responses, epsilon: float) -> str:
    texts = list(getattr(responses, "responses", responses))
    if report.certainty >= epsilon:
        return texts[report.selected_index]
    return SENTINEL
