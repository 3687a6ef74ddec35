"""Closed-set scoring backends and the prediction layer on top of them.

A backend resolves an instruction request to per-label logits over the
request's closed alphabet. Two backends are built in:

* MockBackend: table-driven from a recorded-responses JSONL file (and/or a
  seeded procedural fallback), a pure function of (request, table, seed);
* HTTPBackend: a chat-completions client that requests a single completion
  token with top-k logprobs and reads label logits off position 0.

Labels a backend does not report receive a floor logit, 10 below the lowest
reported one, so closed-set calibration stays well defined.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, TypeVar

import requests

from .codec import (
    ELEMENT_DIGITS,
    RATING_LETTERS,
    Distribution,
    ElementCategory,
    LogitVector,
    category_to_hit,
    closed_set_softmax,
    expected_element_category,
    expected_total_score,
)
from .dataset import SamplePair
from .instructions import (
    TASK_ELEMENT,
    TASK_TOTAL,
    BuildOptions,
    InstructionRecord,
    build_element_instruction,
    build_total_instruction,
)
from .util import stable_hash64

FLOOR_LOGIT_MARGIN = 10.0
DEFAULT_TOP_LOGPROBS = 20

HIT_FROM_ARGMAX = "argmax"
HIT_FROM_EXPECTED = "expected"


class BackendError(RuntimeError):
    """Backend could not produce usable logits for a request."""

    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


@dataclass(frozen=True)
class BackendRequest:
    """One closed-set scoring request."""

    system_text: str
    user_text: str
    image_ref: str
    label_alphabet: str

    def __post_init__(self) -> None:
        if len(set(self.label_alphabet)) != len(self.label_alphabet):
            raise ValueError("label alphabet contains duplicates")
        if not self.label_alphabet:
            raise ValueError("label alphabet is empty")


def request_fingerprint(request: BackendRequest) -> str:
    """Stable content hash of a request, the key of recorded-response tables."""
    payload = json.dumps(
        {
            "alphabet": request.label_alphabet,
            "image_ref": request.image_ref,
            "system_text": request.system_text,
            "user_text": request.user_text,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def request_from_instruction(record: InstructionRecord) -> BackendRequest:
    alphabet = RATING_LETTERS if record.task == TASK_TOTAL else ELEMENT_DIGITS
    return BackendRequest(
        system_text=record.system_text,
        user_text=record.user_text,
        image_ref=record.image_ref,
        label_alphabet=alphabet,
    )


class Backend(Protocol):
    """Anything that can score the labels of a closed alphabet for a request."""

    def top_logits(self, request: BackendRequest) -> Mapping[str, float]:
        """Return logits for the alphabet labels the backend can resolve."""
        ...


class MockBackend:
    """Table-driven offline backend.

    The table maps request fingerprints to label->logit maps; the fingerprint
    "*" is a wildcard row used for any request not matched exactly. With a
    procedural_seed set, unmatched requests instead get deterministic
    pseudo-random logits derived from (seed, fingerprint, label), which keeps
    end-to-end runs fully reproducible while still varying per request.
    """

    def __init__(
        self,
        table: Mapping[str, Mapping[str, float]] | None = None,
        procedural_seed: int | None = None,
    ):
        self.table = {k: dict(v) for k, v in (table or {}).items()}
        self.procedural_seed = procedural_seed

    @classmethod
    def from_file(cls, path: str | Path, procedural_seed: int | None = None) -> "MockBackend":
        """Load a recorded-responses file: JSONL of {request_hash, logits}."""
        table: dict[str, dict[str, float]] = {}
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    row = json.loads(line)
                    table[row["request_hash"]] = {
                        str(k): float(v) for k, v in row["logits"].items()
                    }
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise BackendError(f"{path}: line {lineno}: bad recorded response ({exc})")
        return cls(table=table, procedural_seed=procedural_seed)

    def _procedural_logits(self, request: BackendRequest) -> dict[str, float]:
        fp = request_fingerprint(request)
        out = {}
        for label in request.label_alphabet:
            h = stable_hash64(self.procedural_seed, fp, label)
            out[label] = (h / 2.0**64) * 6.0 - 3.0  # uniform-ish in [-3, 3]
        return out

    def top_logits(self, request: BackendRequest) -> Mapping[str, float]:
        row = self.table.get(request_fingerprint(request))
        if row is None:
            row = self.table.get("*")
        if row is not None:
            return {k: v for k, v in row.items() if k in request.label_alphabet}
        if self.procedural_seed is not None:
            return self._procedural_logits(request)
        raise BackendError(
            f"no recorded response for request {request_fingerprint(request)[:12]}"
        )


class HTTPBackend:
    """Chat-completions client reading label logits from top-k logprobs.

    Each request asks for exactly one completion token with top_logprobs
    candidates and scores alphabet labels by the logprob their token gets at
    position 0. Images are attached as base64 data URLs (resolved against
    image_root) or passed through as URLs joined with image_base_url.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 60.0,
        retries: int = 2,
        top_logprobs: int = DEFAULT_TOP_LOGPROBS,
        image_root: str | Path | None = None,
        image_base_url: str | None = None,
        session: requests.Session | None = None,
    ):
        if top_logprobs < DEFAULT_TOP_LOGPROBS:
            raise ValueError(f"top_logprobs {top_logprobs} below minimum {DEFAULT_TOP_LOGPROBS}")
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries
        self.top_logprobs = top_logprobs
        self.image_root = Path(image_root) if image_root is not None else None
        self.image_base_url = image_base_url
        self.session = session or requests.Session()

    def _image_part(self, image_ref: str) -> dict:
        if self.image_base_url is not None:
            url = self.image_base_url.rstrip("/") + "/" + image_ref.lstrip("/")
            return {"type": "image_url", "image_url": {"url": url}}
        path = (self.image_root / image_ref) if self.image_root else Path(image_ref)
        suffix = path.suffix.lower()
        mime = "image/jpeg" if suffix in (".jpg", ".jpeg") else "image/png"
        data = base64.b64encode(path.read_bytes()).decode("ascii")
        return {"type": "image_url", "image_url": {"url": f"data:{mime};base64,{data}"}}

    def _body(self, request: BackendRequest) -> dict:
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_text},
                {
                    "role": "user",
                    "content": [
                        {"type": "text", "text": request.user_text},
                        self._image_part(request.image_ref),
                    ],
                },
            ],
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": True,
            "top_logprobs": self.top_logprobs,
        }

    def _post(self, body: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.base_url}/chat/completions"
        last: BackendError | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(0.1 * attempt)
            try:
                resp = self.session.post(url, json=body, headers=headers, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = BackendError(f"request failed: {exc}", retryable=True)
                continue
            if resp.status_code >= 500:
                last = BackendError(f"server error {resp.status_code}", retryable=True)
                continue
            if resp.status_code != 200:
                raise BackendError(f"backend returned {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise BackendError(f"non-JSON response: {exc}")
        assert last is not None
        raise last

    def top_logits(self, request: BackendRequest) -> Mapping[str, float]:
        data = self._post(self._body(request))
        try:
            first = data["choices"][0]["logprobs"]["content"][0]
            candidates = list(first.get("top_logprobs", []))
            if "token" in first and "logprob" in first:
                candidates.append({"token": first["token"], "logprob": first["logprob"]})
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError(f"malformed completion response: {exc}")
        found: dict[str, float] = {}
        for cand in candidates:
            token = str(cand.get("token", ""))
            label = token if token in request.label_alphabet else token.strip()
            if len(label) == 1 and label in request.label_alphabet:
                logprob = float(cand["logprob"])
                if label not in found or logprob > found[label]:
                    found[label] = logprob
        return found


def query_closed_set_logits(backend: Backend, request: BackendRequest) -> LogitVector:
    """Full logit vector over the request alphabet, floor-filling absent labels."""
    reported = dict(backend.top_logits(request))
    resolved = {k: float(v) for k, v in reported.items() if k in request.label_alphabet}
    if not resolved:
        raise BackendError("backend resolved none of the requested labels")
    floor = min(resolved.values()) - FLOOR_LOGIT_MARGIN
    values = tuple(resolved.get(label, floor) for label in request.label_alphabet)
    return LogitVector(values=values, alphabet=request.label_alphabet)


@dataclass
class Prediction:
    """One scored request: calibrated expectation plus the full distribution."""

    sample_id: str
    task: str
    continuous_score: float
    argmax_label: str
    distribution: Distribution
    element_name: str | None = None
    hit: int | None = None


def predict_total_score(
    backend: Backend,
    sample: SamplePair,
    element_scores: Mapping[str, ElementCategory | int] | None = None,
    opts: BuildOptions = BuildOptions(),
) -> Prediction:
    """Score overall alignment of one sample on the continuous [1, 5] scale."""
    record = build_total_instruction(sample, element_scores, opts)
    logits = query_closed_set_logits(backend, request_from_instruction(record))
    dist = closed_set_softmax(logits)
    return Prediction(
        sample_id=sample.sample_id,
        task=TASK_TOTAL,
        continuous_score=expected_total_score(logits),
        argmax_label=dist.argmax_label(),
        distribution=dist,
    )


def predict_element_scores(
    backend: Backend,
    sample: SamplePair,
    tau: int = 3,
    opts: BuildOptions = BuildOptions(),
    hit_mode: str = HIT_FROM_ARGMAX,
) -> list[Prediction]:
    """Score each annotated element of a sample, ordered by element name.

    hit_mode "argmax" binarizes the most likely category; "expected"
    binarizes the probability-weighted expected category instead.
    """
    if hit_mode not in (HIT_FROM_ARGMAX, HIT_FROM_EXPECTED):
        raise ValueError(f"unknown hit_mode {hit_mode!r}")
    if not sample.elements:
        raise ValueError(f"sample {sample.sample_id!r} has no elements")
    predictions = []
    for element in sorted(sample.elements, key=lambda e: e.name):
        record = build_element_instruction(sample, element, opts)
        logits = query_closed_set_logits(backend, request_from_instruction(record))
        dist = closed_set_softmax(logits)
        expected = expected_element_category(logits)
        argmax = dist.argmax_label()
        if hit_mode == HIT_FROM_ARGMAX:
            hit = category_to_hit(int(argmax), tau)
        else:
            hit = 1 if expected > tau else 0
        predictions.append(
            Prediction(
                sample_id=sample.sample_id,
                task=TASK_ELEMENT,
                continuous_score=expected,
                argmax_label=argmax,
                distribution=dist,
                element_name=element.name,
                hit=hit,
            )
        )
    return predictions


T = TypeVar("T")
R = TypeVar("R")


def map_ordered(
    fn: Callable[[T], R], items: Iterable[T], concurrency: int = 1
) -> list[R]:
    """Apply fn to items, optionally with a bounded thread pool.

    Output order always follows input order regardless of completion order,
    so concurrency cannot change results.
    """
    items = list(items)
    if concurrency <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        return list(pool.map(fn, items))
