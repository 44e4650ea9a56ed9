"""Model backend clients: remote chat endpoints, scripted oracles, ensembles.

Every client exposes ``complete(parts, deadline)`` returning response text or
raising a typed error. The scripted oracle is the test double for a real
backend: the runner hands it the ground truth for the pending step through a
side channel (it never sees prompt semantics), and its answers are a pure
function of (seed, step identity), so replays are identical and concurrent
rounds cannot perturb each other.
"""

from __future__ import annotations

import base64
import json
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from random import Random
from typing import Callable, Sequence

import requests

from .builder import StepCandidates
from .corpus import ConceptVocabulary, Corpus
from .prompt import (
    IMAGE_PLACEHOLDER,
    OPTION1,
    OPTION2,
    UNPARSEABLE,
    ParsedChoice,
    PromptParts,
    parse_choice,
    parse_concepts,
)

DEFAULT_MAX_IMAGES = 8
ASSOCIATION_IMAGE_COUNT = 3
DEDUCTION_IMAGE_COUNT = 2


class ModelIOError(Exception):
    """Base for all backend failures."""

    retryable = False


class CapabilityError(ModelIOError):
    """Request violates a client capability; raised before any network call."""


class BackendRefusal(ModelIOError):
    """Backend answered but declined to produce usable content."""


class TransportError(ModelIOError):
    """Network-level failure (connection, 5xx, malformed payload)."""

    retryable = True


class RateLimited(TransportError):
    def __init__(self, message: str, retry_after: float | None = None) -> None:
        super().__init__(message)
        self.retry_after = retry_after


class DeadlineExceeded(TransportError):
    pass


class ModelClient:
    """Interface: subclasses provide ``complete``; ids identify backends."""

    id: str = "client"
    max_images: int = DEFAULT_MAX_IMAGES
    supports_system_text: bool = False

    def complete(self, parts: PromptParts, deadline: float | None = None) -> str:
        raise NotImplementedError


def complete(client: ModelClient, parts: PromptParts, deadline: float | None = None) -> str:
    """Capability-checked completion; the only sanctioned call path."""
    if len(parts.images) > client.max_images:
        raise CapabilityError(
            f"prompt carries {len(parts.images)} images but client "
            f"{client.id!r} accepts at most {client.max_images}"
        )
    return client.complete(parts, deadline=deadline)


@dataclass(frozen=True)
class OracleConfig:
    """Behavior of a scripted oracle: per-step correctness probabilities."""

    p_assoc: float = 1.0
    p_deduct: float = 1.0
    seed: str | int = 0

    def __post_init__(self) -> None:
        if not (0.0 <= self.p_assoc <= 1.0 and 0.0 <= self.p_deduct <= 1.0):
            raise ValueError("oracle probabilities must be in [0, 1]")


class ScriptedOracle(ModelClient):
    """Deterministic stand-in for a model backend.

    The runner primes it with the pending step's ground truth; ``complete``
    then answers correctly with probability ``p_assoc`` (association) or
    ``p_deduct`` (deduction). Decisions are keyed by the step identity, not
    by a shared stream, so they are independent of call order and safe to use
    from concurrent rounds. Priming state is thread-local.
    """

    def __init__(self, corpus: Corpus, config: OracleConfig, id: str = "oracle") -> None:
        self.id = id
        self.corpus = corpus
        self.config = config
        self._local = threading.local()

    def begin_round(self, tag) -> None:
        """Scope subsequent decisions to one round (or trial).

        Without the tag, recurring (step, query, options) tuples on a small
        corpus would replay the same verdict across rounds, correlating what
        must be independent Bernoulli draws.
        """
        self._local.round_tag = tag

    def prime_association(self, candidates: StepCandidates) -> None:
        self._local.candidates = candidates

    def prime_deduction(self, query: str, positive: str, true_shared: frozenset[str]) -> None:
        self._local.deduction = (query, positive, frozenset(true_shared))

    def complete(self, parts: PromptParts, deadline: float | None = None) -> str:
        if len(parts.images) == ASSOCIATION_IMAGE_COUNT:
            return self._answer_association()
        if len(parts.images) == DEDUCTION_IMAGE_COUNT:
            return self._answer_deduction()
        raise CapabilityError(f"oracle cannot interpret a {len(parts.images)}-image prompt")

    @property
    def _tag(self):
        return getattr(self._local, "round_tag", "")

    def _answer_association(self) -> str:
        cands: StepCandidates | None = getattr(self._local, "candidates", None)
        if cands is None:
            raise CapabilityError("oracle was not primed with step candidates")
        key = (
            f"{self.config.seed}|assoc|{self._tag}|{cands.step_index}|{cands.query}"
            f"|{cands.option1}|{cands.option2}"
        )
        correct = Random(key).random() < self.config.p_assoc
        chosen = cands.correct if correct else (3 - cands.correct)
        return f"Image{chosen}"

    def _answer_deduction(self) -> str:
        primed = getattr(self._local, "deduction", None)
        if primed is None:
            raise CapabilityError("oracle was not primed with deduction ground truth")
        query, positive, true_shared = primed
        rng = Random(f"{self.config.seed}|deduct|{self._tag}|{query}|{positive}")
        if rng.random() < self.config.p_deduct:
            return ", ".join(sorted(true_shared))
        wrong_pool = [c for c in self.corpus.vocabulary.concepts if c not in true_shared]
        if not wrong_pool:
            return ", ".join(sorted(true_shared))
        return rng.choice(wrong_pool)


class StaticClient(ModelClient):
    """Fixed or computed responses for tests and scripted verifiers."""

    def __init__(
        self,
        id: str,
        responses: Sequence[str] | None = None,
        fn: Callable[[PromptParts], str] | None = None,
        max_images: int = DEFAULT_MAX_IMAGES,
    ) -> None:
        self.id = id
        self.max_images = max_images
        self._responses = list(responses or [])
        self._fn = fn
        self._cursor = 0
        self._lock = threading.Lock()

    def complete(self, parts: PromptParts, deadline: float | None = None) -> str:
        if self._fn is not None:
            return self._fn(parts)
        with self._lock:
            if not self._responses:
                raise TransportError(f"static client {self.id!r} ran out of responses")
            reply = self._responses[min(self._cursor, len(self._responses) - 1)]
            self._cursor += 1
        return reply


class FailingClient(ModelClient):
    """Fault injection: every call fails with a transport error."""

    def __init__(self, id: str = "failing") -> None:
        self.id = id

    def complete(self, parts: PromptParts, deadline: float | None = None) -> str:
        raise TransportError(f"injected transport failure from {self.id!r}")


class TokenBucket:
    """Blocking token bucket; one token per request."""

    def __init__(
        self,
        rate_per_sec: float,
        burst: int = 1,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if rate_per_sec <= 0:
            raise ValueError("rate_per_sec must be positive")
        self.rate = rate_per_sec
        self.capacity = max(1, burst)
        self._tokens = float(self.capacity)
        self._clock = clock
        self._sleep = sleep
        self._stamp = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(
                    self.capacity, self._tokens + (now - self._stamp) * self.rate
                )
                self._stamp = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


def _image_part(ref: str) -> dict:
    if ref.startswith("http://") or ref.startswith("https://") or ref.startswith("data:"):
        url = ref
    else:
        path = Path(ref)
        suffix = path.suffix.lower().lstrip(".") or "jpeg"
        mime = {"jpg": "jpeg"}.get(suffix, suffix)
        payload = base64.b64encode(path.read_bytes()).decode("ascii")
        url = f"data:image/{mime};base64,{payload}"
    return {"type": "image_url", "image_url": {"url": url}}


class RemoteChatClient(ModelClient):
    """Chat-completions-style HTTP backend with retry, backoff, rate limiting.

    Endpoint shape, model name, and the auth header are configuration; the
    auth token is read from an environment variable at call time and never
    stored.
    """

    def __init__(
        self,
        id: str,
        endpoint: str,
        model: str,
        auth_env: str = "",
        auth_header: str = "Authorization",
        auth_scheme: str = "Bearer",
        max_images: int = DEFAULT_MAX_IMAGES,
        timeout: float = 60.0,
        max_retries: int = 3,
        backoff_base: float = 1.0,
        backoff_cap: float = 30.0,
        rate_limit: TokenBucket | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.id = id
        self.endpoint = endpoint
        self.model = model
        self.auth_env = auth_env
        self.auth_header = auth_header
        self.auth_scheme = auth_scheme
        self.max_images = max_images
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_cap = backoff_cap
        self.rate_limit = rate_limit
        self._sleep = sleep
        self._post = requests.post

    def request_body(self, parts: PromptParts) -> dict:
        """Serialize parts into one multimodal user message.

        Text runs in the fixed part order with image parts interleaved at
        their placeholder positions. Byte-stable for a fixed input.
        """
        segments = parts.text().split(IMAGE_PLACEHOLDER)
        content: list[dict] = []
        for i, segment in enumerate(segments):
            if segment:
                content.append({"type": "text", "text": segment})
            if i < len(parts.images):
                content.append(_image_part(parts.images[i]))
        return {
            "model": self.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        }

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.auth_env:
            token = os.environ.get(self.auth_env, "")
            if token:
                value = f"{self.auth_scheme} {token}" if self.auth_scheme else token
                headers[self.auth_header] = value
        return headers

    def complete(self, parts: PromptParts, deadline: float | None = None) -> str:
        body = self.request_body(parts)
        started = time.monotonic()
        last_error: ModelIOError = TransportError("no attempt made")
        for attempt in range(self.max_retries + 1):
            if deadline is not None and time.monotonic() - started >= deadline:
                raise DeadlineExceeded(f"{self.id}: deadline exhausted before attempt")
            if self.rate_limit is not None:
                self.rate_limit.acquire()
            try:
                return self._attempt(body, deadline, started)
            except BackendRefusal:
                raise
            except RateLimited as e:
                last_error = e
                wait = e.retry_after
                if wait is None:
                    wait = min(self.backoff_cap, self.backoff_base * (2**attempt))
            except TransportError as e:
                last_error = e
                wait = min(self.backoff_cap, self.backoff_base * (2**attempt))
            if attempt < self.max_retries:
                self._sleep(wait)
        raise last_error

    def _attempt(self, body: dict, deadline: float | None, started: float) -> str:
        timeout = self.timeout
        if deadline is not None:
            remaining = deadline - (time.monotonic() - started)
            if remaining <= 0:
                raise DeadlineExceeded(f"{self.id}: deadline exhausted")
            timeout = min(timeout, remaining)
        try:
            resp = self._post(
                self.endpoint, json=body, headers=self._headers(), timeout=timeout
            )
        except requests.Timeout as e:
            raise DeadlineExceeded(f"{self.id}: request timed out") from e
        except requests.RequestException as e:
            raise TransportError(f"{self.id}: {e}") from e

        if resp.status_code == 429:
            retry_after = None
            header = resp.headers.get("Retry-After")
            if header is not None:
                try:
                    retry_after = float(header)
                except ValueError:
                    retry_after = None
            raise RateLimited(f"{self.id}: rate limited", retry_after=retry_after)
        if resp.status_code >= 500:
            raise TransportError(f"{self.id}: server error {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendRefusal(f"{self.id}: rejected request ({resp.status_code})")
        try:
            payload = resp.json()
            choice = payload["choices"][0]
            text = choice["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise TransportError(f"{self.id}: malformed response payload") from e
        if text is None or (isinstance(choice, dict) and choice.get("finish_reason") == "content_filter"):
            raise BackendRefusal(f"{self.id}: backend declined to answer")
        return str(text)


def moe_vote(clients: Sequence[ModelClient], parts: PromptParts) -> ParsedChoice:
    """Majority vote over per-client parsed choices.

    Unparseable answers are excluded from the count; a tie (including the
    degenerate all-unparseable case) falls back to the earliest-listed
    client's parseable answer; with no parseable answer at all the vote is
    unparseable. Client errors propagate only if every client errors.
    """
    if not clients:
        raise ValueError("moe_vote needs at least one client")
    parsed: list[ParsedChoice] = []
    errors: list[ModelIOError] = []
    for client in clients:
        try:
            parsed.append(parse_choice(complete(client, parts)))
        except ModelIOError as e:
            errors.append(e)
    if not parsed:
        raise errors[-1]
    raw = " || ".join(p.raw for p in parsed)
    votes = [p for p in parsed if p.choice != UNPARSEABLE]
    if not votes:
        return ParsedChoice(UNPARSEABLE, raw)
    ones = sum(1 for p in votes if p.choice == OPTION1)
    twos = len(votes) - ones
    if ones > twos:
        return ParsedChoice(OPTION1, raw)
    if twos > ones:
        return ParsedChoice(OPTION2, raw)
    return ParsedChoice(votes[0].choice, raw)


class EnsembleClient(ModelClient):
    """Majority-vote ensemble presented as a single client.

    Association prompts (three images) are answered by the per-step vote;
    the following deduction prompt (two images) is answered by the union of
    concepts named by the clients that voted with the majority, keeping the
    remembered evidence consistent with the winning decision.
    """

    def __init__(
        self, id: str, clients: Sequence[ModelClient], vocab: ConceptVocabulary
    ) -> None:
        if not clients:
            raise ValueError("ensemble needs at least one client")
        self.id = id
        self.clients = list(clients)
        self.vocab = vocab
        self.max_images = min(c.max_images for c in clients)
        self._local = threading.local()

    def begin_round(self, tag) -> None:
        for client in self.clients:
            if hasattr(client, "begin_round"):
                client.begin_round(tag)

    def prime_association(self, candidates: StepCandidates) -> None:
        for client in self.clients:
            if hasattr(client, "prime_association"):
                client.prime_association(candidates)

    def prime_deduction(self, query: str, positive: str, true_shared: frozenset[str]) -> None:
        for client in self.clients:
            if hasattr(client, "prime_deduction"):
                client.prime_deduction(query, positive, true_shared)

    def complete(self, parts: PromptParts, deadline: float | None = None) -> str:
        if len(parts.images) == ASSOCIATION_IMAGE_COUNT:
            return self._vote(parts, deadline)
        return self._deduct(parts, deadline)

    def _vote(self, parts: PromptParts, deadline: float | None) -> str:
        answers: list[tuple[ModelClient, ParsedChoice]] = []
        errors: list[ModelIOError] = []
        for client in self.clients:
            try:
                answers.append((client, parse_choice(complete(client, parts, deadline))))
            except ModelIOError as e:
                errors.append(e)
        if not answers:
            raise errors[-1]
        verdict = moe_vote([_Precomputed(c, p.raw) for c, p in answers], parts)
        self._local.majority = [
            c for c, p in answers if p.choice == verdict.choice and p.choice != UNPARSEABLE
        ]
        if verdict.choice == OPTION1:
            return "Image1"
        if verdict.choice == OPTION2:
            return "Image2"
        return ""

    def _deduct(self, parts: PromptParts, deadline: float | None) -> str:
        voters = getattr(self._local, "majority", None) or self.clients
        union: set[str] = set()
        errors: list[ModelIOError] = []
        answered = False
        for client in voters:
            try:
                text = complete(client, parts, deadline)
            except ModelIOError as e:
                errors.append(e)
                continue
            answered = True
            union |= parse_concepts(text, self.vocab).concepts
        if not answered:
            raise errors[-1]
        return ", ".join(sorted(union))


class _Precomputed(ModelClient):
    """Replays an already-fetched answer so moe_vote does not re-query."""

    def __init__(self, client: ModelClient, raw: str) -> None:
        self.id = client.id
        self.max_images = client.max_images
        self._raw = raw

    def complete(self, parts: PromptParts, deadline: float | None = None) -> str:
        return self._raw


def load_backends(
    backend_configs: Sequence[dict], corpus: Corpus
) -> dict[str, ModelClient]:
    """Instantiate clients from declarative backend config records."""
    clients: dict[str, ModelClient] = {}
    ensembles: list[dict] = []
    for cfg in backend_configs:
        kind = cfg.get("kind")
        cid = cfg.get("id")
        if not cid:
            raise ValueError("backend config needs an 'id'")
        if kind == "oracle":
            clients[cid] = ScriptedOracle(
                corpus,
                OracleConfig(
                    p_assoc=float(cfg.get("p_assoc", 1.0)),
                    p_deduct=float(cfg.get("p_deduct", 1.0)),
                    seed=cfg.get("seed", 0),
                ),
                id=cid,
            )
        elif kind == "remote":
            rate = cfg.get("rate_per_sec")
            bucket = (
                TokenBucket(float(rate), burst=int(cfg.get("burst", 1)))
                if rate
                else None
            )
            clients[cid] = RemoteChatClient(
                id=cid,
                endpoint=cfg["endpoint"],
                model=cfg["model"],
                auth_env=cfg.get("auth_env", ""),
                auth_header=cfg.get("auth_header", "Authorization"),
                auth_scheme=cfg.get("auth_scheme", "Bearer"),
                max_images=int(cfg.get("max_images", DEFAULT_MAX_IMAGES)),
                timeout=float(cfg.get("timeout", 60.0)),
                max_retries=int(cfg.get("max_retries", 3)),
                rate_limit=bucket,
            )
        elif kind == "failing":
            clients[cid] = FailingClient(id=cid)
        elif kind == "ensemble":
            ensembles.append(cfg)
        else:
            raise ValueError(f"unknown backend kind {kind!r} for {cid!r}")
    for cfg in ensembles:
        members = [clients[m] for m in cfg.get("members", [])]
        clients[cfg["id"]] = EnsembleClient(cfg["id"], members, corpus.vocabulary)
    return clients
