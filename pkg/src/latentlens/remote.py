"""JSON-over-HTTP with the retry contract shared by the chat and embedding clients."""
from __future__ import annotations

import logging
import os
import random
import time
from dataclasses import dataclass
from typing import Callable, Optional

import httpx

from .errors import AuthMissing, BackendError, HttpError, MalformedResponse, Timeout

logger = logging.getLogger(__name__)

API_KEY_ENV = "LATENTLENS_API_KEY"
RETRY_STATUSES = frozenset({408, 429})


@dataclass
class RetryPolicy:
    max_retries: int = 3
    base_s: float = 0.5
    factor: float = 2.0
    jitter: float = 0.25
    cap_s: float = 8.0

    def delay(self, retry_index: int, rng: random.Random) -> float:
        # cap after jitter so the sequence stays nondecreasing
        raw = self.base_s * self.factor ** retry_index
        return min(self.cap_s, raw * (1.0 + rng.uniform(-self.jitter, self.jitter)))


def api_key(env_var: str = API_KEY_ENV) -> str:
    key = os.environ.get(env_var, "").strip()
    if not key:
        raise AuthMissing(f"set {env_var} to use a remote backend")
    return key


def _retryable(status: int) -> bool:
    return status in RETRY_STATUSES or 500 <= status < 600


@dataclass
class PostResult:
    body: dict
    attempts: int
    delays: list


def post_json(url: str, payload: dict, key: str, *, timeout_s: float = 60.0,
              policy: Optional[RetryPolicy] = None, client: Optional[httpx.Client] = None,
              sleep: Callable[[float], None] = time.sleep, seed: int = 0) -> PostResult:
    """POST ``payload`` and return the decoded JSON body, retrying per ``policy``.

    Retries cover 408, 429, 5xx and transport failures; any other non-2xx
    status fails immediately.
    """
    policy = policy or RetryPolicy()
    rng = random.Random(seed)
    headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
    own_client = client is None
    client = client or httpx.Client(timeout=timeout_s)
    delays = []
    try:
        for attempt in range(policy.max_retries + 1):
            last_attempt = attempt == policy.max_retries
            try:
                resp = client.post(url, json=payload, headers=headers, timeout=timeout_s)
            except httpx.TimeoutException as exc:
                if last_attempt:
                    raise Timeout(f"{url} timed out after {attempt + 1} attempts") from exc
                logger.warning("timeout on %s (attempt %d)", url, attempt + 1)
            except httpx.TransportError as exc:
                if last_attempt:
                    raise BackendError(f"transport failure on {url}: {exc}") from exc
                logger.warning("transport error on %s: %s", url, exc)
            else:
                if resp.is_success:
                    try:
                        body = resp.json()
                    except ValueError as exc:
                        raise MalformedResponse("response body is not JSON") from exc
                    if not isinstance(body, dict):
                        raise MalformedResponse("response body is not a JSON object")
                    return PostResult(body, attempt + 1, delays)
                if last_attempt or not _retryable(resp.status_code):
                    raise HttpError(resp.status_code, resp.text)
                logger.warning("HTTP %d from %s (attempt %d)", resp.status_code, url, attempt + 1)
            wait = policy.delay(attempt, rng)
            delays.append(wait)
            sleep(wait)
    finally:
        if own_client:
            client.close()
    raise AssertionError("unreachable")
