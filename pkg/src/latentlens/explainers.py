"""Explanation backends: remote vision chat API, scripted mock, image-statistics heuristic."""
from __future__ import annotations

import base64
import json
import string
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Optional, Sequence

import numpy as np

from . import remote
from .errors import MalformedResponse
from .imgcodec import EncodedImage, encode_png
from .traversal import TraversalSequence, compose_strip

BACKENDS = ("remote", "scripted", "heuristic")

DEFAULT_TEMPLATE = (
    "This row shows {k} images decoded while one latent variable increases from -3 to 3, "
    "left to right. What is the latent variable, and how does it change across the images?"
)


@dataclass(frozen=True)
class PromptTemplate:
    text: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        fields = [f for _, f, _, _ in string.Formatter().parse(self.text) if f is not None]
        if fields != ["k"]:
            raise ValueError("template must contain the {k} placeholder exactly once and nothing else")

    def render(self, k: int) -> str:
        return self.text.format(k=k)


@dataclass
class ExplainerConfig:
    backend: str = "heuristic"
    endpoint: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4o"
    temperature: float = 1.0
    top_p: float = 1.0
    samples_n: int = 5
    timeout_s: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    retry_base_s: float = 0.5
    max_tokens: Optional[int] = None

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.samples_n < 2:
            raise ValueError("samples_n must be at least 2 so certainty has a pair to score")

    def retry_policy(self) -> remote.RetryPolicy:
        return remote.RetryPolicy(max_retries=self.max_retries, base_s=self.retry_base_s)


@dataclass
class ResponseSet:
    sequence_id: str
    responses: list
    backend_label: str
    elapsed_s: list = field(default_factory=list)
    attempts: list = field(default_factory=list)

    def __post_init__(self):
        for r in self.responses:
            if not isinstance(r, str) or not r.strip():
                raise MalformedResponse("responses must be nonempty strings")

    def __len__(self):
        return len(self.responses)


@dataclass(frozen=True)
class ScriptedScenario:
    scenario_id: str
    on_topic_pool: tuple
    off_topic_pool: tuple
    noise_p: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "on_topic_pool", tuple(self.on_topic_pool))
        object.__setattr__(self, "off_topic_pool", tuple(self.off_topic_pool))
        if not self.on_topic_pool or not self.off_topic_pool:
            raise ValueError("scenario pools must be nonempty")
        if not 0.0 <= self.noise_p <= 1.0:
            raise ValueError("noise_p must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "ScriptedScenario":
        return cls(d["scenario_id"], d["on_topic_pool"], d["off_topic_pool"], d.get("noise_p", 0.0))

    def to_dict(self) -> dict:
        return {"scenario_id": self.scenario_id, "on_topic_pool": list(self.on_topic_pool),
                "off_topic_pool": list(self.off_topic_pool), "noise_p": self.noise_p}


def load_scenarios(path=None) -> list:
    if path is None:
        text = resources.files("latentlens").joinpath("data/scenarios.json").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return [ScriptedScenario.from_dict(d) for d in json.loads(text)]


# --- prompt ------------------------------------------------------------------

def build_prompt(template: PromptTemplate, sequence: TraversalSequence, separator_px: int = 2):
    """Return (prompt text, PNG of the composed strip)."""
    return template.render(sequence.k), encode_png(compose_strip(sequence, separator_px))


def data_url(image: EncodedImage) -> str:
    return "data:image/png;base64," + base64.b64encode(image.data).decode("ascii")


def chat_payload(config: ExplainerConfig, prompt: str, image: EncodedImage) -> dict:
    payload = {
        "model": config.model_name,
        "temperature": config.temperature,
        "top_p": config.top_p,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": data_url(image)}},
            ],
        }],
    }
    if config.max_tokens is not None:
        payload["max_tokens"] = config.max_tokens
    return payload


def _message_text(body: dict) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse("response has no choices[0].message.content") from exc
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str) or not content.strip():
        raise MalformedResponse("message content is empty")
    return content.strip()


# --- backends ----------------------------------------------------------------

def remote_respond(config: ExplainerConfig, prompt: str, image: EncodedImage,
                   sequence_id: str = "", client=None,
                   sleep: Callable[[float], None] = time.sleep) -> ResponseSet:
    """Issue ``samples_n`` independent chat requests, at most ``max_in_flight`` at once."""
    key = remote.api_key()
    url = config.endpoint.rstrip("/") + "/chat/completions"
    payload = chat_payload(config, prompt, image)
    policy = config.retry_policy()

    def one(index):
        start = time.perf_counter()
        result = remote.post_json(url, payload, key, timeout_s=config.timeout_s, policy=policy,
                                  client=client, sleep=sleep, seed=index)
        return _message_text(result.body), time.perf_counter() - start, result.attempts

    with ThreadPoolExecutor(max_workers=max(1, config.max_in_flight)) as pool:
        # map preserves request order regardless of completion order
        results = list(pool.map(one, range(config.samples_n)))
    texts, elapsed, attempts = (list(x) for x in zip(*results))
    return ResponseSet(sequence_id, texts, f"remote:{config.model_name}", elapsed, attempts)


def scripted_respond(scenario: ScriptedScenario, seed, n: int, sequence_id: str = "") -> ResponseSet:
    rng = np.random.default_rng(seed)
    texts = []
    for _ in range(n):
        pool = scenario.off_topic_pool if rng.random() < scenario.noise_p else scenario.on_topic_pool
        texts.append(pool[int(rng.integers(len(pool)))])
    return ResponseSet(sequence_id, texts, f"scripted:{scenario.scenario_id}",
                       [0.0] * n, [1] * n)


STATISTICS = ("pos_x", "pos_y", "size", "brightness")
_NAMES = {
    "pos_x": "horizontal position",
    "pos_y": "vertical position",
    "size": "size",
    "brightness": "brightness",
}
_DIRECTIONS = {
    "pos_x": ("left to right", "right to left"),
    "pos_y": ("top to bottom", "bottom to top"),
    "size": ("smaller to larger", "larger to smaller"),
    "brightness": ("darker to brighter", "brighter to darker"),
}
# Close paraphrases: a clear trend yields high agreement between samples,
# while the no-change answers below are deliberately varied so they fall
# under the display threshold.
_TEMPLATES = (
    "The latent variable controls the {name} of the object, which changes from {direction}.",
    "The latent variable controls the {name} of the object, which goes from {direction}.",
    "This latent variable controls the {name} of the shape, which changes from {direction}.",
)
_NO_CHANGE = (
    "There is no consistent change across the images.",
    "No consistent change is visible, so the frames suggest no clear latent factor.",
    "Across this row there is no consistent change from one image to the next.",
)
NO_CHANGE_LIMIT = 0.05


def frame_statistics(pixels: np.ndarray) -> dict:
    """Unit-scale statistics of one frame.

    The foreground is every pixel above half the frame maximum, so scaling
    intensities leaves ``size`` unchanged and growing a shape leaves
    ``brightness`` nearly unchanged.
    """
    h, w = pixels.shape
    total = pixels.sum()
    if total <= 0:
        return {"pos_x": 0.5, "pos_y": 0.5, "size": 0.0, "brightness": 0.0}
    cols = (np.arange(w) + 0.5) / w
    rows = (np.arange(h) + 0.5) / h
    fg = pixels > 0.5 * pixels.max()
    return {
        "pos_x": float((pixels.sum(axis=0) * cols).sum() / total),
        "pos_y": float((pixels.sum(axis=1) * rows).sum() / total),
        "size": float(fg.mean()),
        "brightness": float(pixels[fg].mean()),
    }


def trend_scores(sequence: TraversalSequence) -> dict:
    """Least-squares change of each statistic over the full span of assigned values."""
    values = np.asarray(sequence.assigned_values, dtype=np.float64)
    stats = [frame_statistics(f.pixels) for f in sequence.frames]
    centered = values - values.mean()
    denom = float(centered @ centered)
    span = values.max() - values.min()
    out = {}
    for name in STATISTICS:
        y = np.array([s[name] for s in stats])
        slope = float(centered @ (y - y.mean())) / denom if denom > 0 else 0.0
        out[name] = slope * span
    return out


def heuristic_explain(sequence: TraversalSequence, n: int, sequence_id: Optional[str] = None) -> ResponseSet:
    if sequence.k < 2:
        raise ValueError("heuristic explainer needs at least two frames")
    scores = trend_scores(sequence)
    best = max(STATISTICS, key=lambda s: abs(scores[s]))
    texts = []
    if abs(scores[best]) < NO_CHANGE_LIMIT:
        texts = [_NO_CHANGE[i % len(_NO_CHANGE)] for i in range(n)]
    else:
        rising, falling = _DIRECTIONS[best]
        direction = rising if scores[best] > 0 else falling
        texts = [_TEMPLATES[i % len(_TEMPLATES)].format(name=_NAMES[best], direction=direction)
                 for i in range(n)]
    sid = sequence.sequence_id if sequence_id is None else sequence_id
    return ResponseSet(sid, texts, "heuristic", [0.0] * n, [1] * n)


def dominant_statistic(sequence: TraversalSequence) -> Optional[str]:
    """Name of the statistic the heuristic would report, or None for no change."""
    scores = trend_scores(sequence)
    best = max(STATISTICS, key=lambda s: abs(scores[s]))
    return best if abs(scores[best]) >= NO_CHANGE_LIMIT else None


def sample_responses(config: ExplainerConfig, prompt: str, image: EncodedImage, *,
                     sequence: Optional[TraversalSequence] = None,
                     scenario: Optional[ScriptedScenario] = None, seed=0,
                     sequence_id: str = "", client=None,
                     sleep: Callable[[float], None] = time.sleep) -> ResponseSet:
    if sequence is not None and not sequence_id:
        sequence_id = sequence.sequence_id
    if config.backend == "remote":
        return remote_respond(config, prompt, image, sequence_id, client=client, sleep=sleep)
    if config.backend == "scripted":
        if scenario is None:
            raise ValueError("scripted backend needs a scenario")
        return scripted_respond(scenario, seed, config.samples_n, sequence_id)
    if sequence is None:
        raise ValueError("heuristic backend needs the traversal sequence")
    return heuristic_explain(sequence, config.samples_n, sequence_id)
