"""Ask a chat-completion endpoint for causal maps of dataset records."""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import requests
from loguru import logger
from requests.adapters import HTTPAdapter, Retry

from causal_attention_tuning import settings
from causal_attention_tuning.causal_supervision import CausalMap, CausalMapError, parse_causal_map
from causal_attention_tuning.utils import annotated_ids, append_jsonl, read_jsonl, record_id

if TYPE_CHECKING:
    from collections.abc import Sequence

    from causal_attention_tuning.prompts import PromptTemplate


class TemplateError(ValueError):
    """Raised when a prompt cannot be rendered."""


@dataclass(frozen=True)
class EndpointConfig:
    """Where and how to send completion requests."""

    base_url: str
    model: str
    api_key: str = field(repr=False)
    timeout: float = 60.0
    temperature: float = 0.0
    retries: int = 5
    backoff_factor: float = 1.0

    @classmethod
    def from_settings(cls, **overrides: Any) -> EndpointConfig:  # noqa: ANN401
        """Endpoint from environment settings; the key comes from CAT_API_KEY."""
        values: dict[str, Any] = {"base_url": settings.api_base, "model": settings.api_model, "api_key": settings.api_key()}
        values.update(overrides)
        return cls(**values)


@dataclass
class AnnotationResult:
    """Outcome for one record."""

    record_id: str
    raw_response: str = ""
    causal_map: CausalMap | None = None
    failure: str | None = None
    prompt_tokens: int = 0
    completion_tokens: int = 0
    attempts: int = 0

    @property
    def ok(self) -> bool:
        return self.causal_map is not None


def render_prompt(template: PromptTemplate, question: str, answer: str) -> str:
    """Task description, demonstration, directive, then the record.

    Raises:
        TemplateError: If a template field or the record is empty.
    """
    for name in ("task", "demo", "demo_output", "directive"):
        if not getattr(template, name).strip():
            msg: str = f"Template {template.name!r} has an empty {name}"
            raise TemplateError(msg)
    if not question.strip():
        msg = "Cannot annotate a record with an empty question"
        raise TemplateError(msg)
    if not answer.strip():
        msg = "Cannot annotate a record with an empty answer"
        raise TemplateError(msg)

    return f"{template.task}\n\n{template.demonstrations}\n\n{template.directive}\n\n{question} Answer: {answer}"


def extract_json_object(text: str) -> str | None:
    """Get the first balanced top-level JSON object in a response.

    Braces inside JSON strings are ignored, so prose or code fences around
    the object do not matter.

    Returns:
        str | None: The object text, or None if there is no complete object.
    """
    start: int = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for position in range(start, len(text)):
            char: str = text[position]
            if in_string:
                if escaped:
                    escaped = False
                elif char == "\\":
                    escaped = True
                elif char == '"':
                    in_string = False
            elif char == '"':
                in_string = True
            elif char == "{":
                depth += 1
            elif char == "}":
                depth -= 1
                if depth == 0:
                    return text[start : position + 1]
        start = text.find("{", start + 1)
    return None


def make_session(endpoint: EndpointConfig) -> requests.Session:
    """Session that retries transport errors and throttling responses."""
    session = requests.Session()
    adapter = HTTPAdapter(
        max_retries=Retry(
            total=endpoint.retries,
            backoff_factor=endpoint.backoff_factor,
            status_forcelist=[429, 500, 502, 503, 504],
            allowed_methods=frozenset({"POST"}),
        ),
    )
    session.mount("https://", adapter)
    session.mount("http://", adapter)
    return session


def request_completion(session: requests.Session, endpoint: EndpointConfig, prompt: str) -> tuple[str, dict[str, int]]:
    """POST one chat-completion request.

    Returns:
        tuple[str, dict[str, int]]: The message content and the token usage.

    Raises:
        requests.RequestException: On transport errors or an error status.
        ValueError: If the response body does not look like a chat completion.
    """
    response: requests.Response = session.post(
        f"{endpoint.base_url.rstrip('/')}/chat/completions",
        json={
            "model": endpoint.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": endpoint.temperature,
        },
        headers={"Authorization": f"Bearer {endpoint.api_key}", "Content-Type": "application/json"},
        timeout=endpoint.timeout,
    )
    logger.bind(stage="annotate").trace(f"Response: {response.status_code} - {response.reason}")
    response.raise_for_status()

    try:
        body: dict[str, Any] = response.json()
        content: str = body["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as e:
        msg = "Response is not a chat completion"
        raise ValueError(msg) from e

    usage: dict[str, int] = body.get("usage") or {}
    return content or "", {
        "prompt_tokens": int(usage.get("prompt_tokens", 0)),
        "completion_tokens": int(usage.get("completion_tokens", 0)),
    }


def annotate_record(
    session: requests.Session,
    endpoint: EndpointConfig,
    template: PromptTemplate,
    record: dict[str, Any],
    attempts: int = 3,
) -> AnnotationResult:
    """Annotate one record, retrying malformed answers up to attempts times.

    Failures are returned, never raised.
    """
    question: str = record["question"]
    answer: str = str(record["answer"])
    result = AnnotationResult(record_id=str(record.get("id") or record_id(question, answer)))
    log = logger.bind(stage="annotate")

    try:
        prompt: str = render_prompt(template, question, answer)
    except TemplateError as e:
        result.failure = str(e)
        log.warning(f"{result.record_id}: {e}")
        return result

    for attempt in range(1, attempts + 1):
        result.attempts = attempt
        try:
            content, usage = request_completion(session, endpoint, prompt)
        except (requests.RequestException, ValueError) as e:
            result.failure = f"request failed: {type(e).__name__}"
            log.debug(f"{result.record_id}: attempt {attempt} {result.failure}")
            continue

        result.raw_response = content
        result.prompt_tokens += usage["prompt_tokens"]
        result.completion_tokens += usage["completion_tokens"]

        fragment: str | None = extract_json_object(content)
        if fragment is None:
            result.failure = f"no JSON object in response: {content[:80]!r}"
            log.debug(f"{result.record_id}: attempt {attempt} {result.failure}")
            continue
        try:
            result.causal_map = parse_causal_map(fragment)
        except CausalMapError as e:
            result.failure = str(e)
            log.debug(f"{result.record_id}: attempt {attempt} {result.failure}")
            continue

        result.failure = None
        return result

    log.warning(f"{result.record_id}: giving up after {attempts} attempts ({result.failure})")
    return result


def annotate_batch(
    records: Sequence[dict[str, Any]],
    endpoint: EndpointConfig,
    template: PromptTemplate,
    *,
    parallelism: int = 4,
    attempts: int = 3,
) -> list[AnnotationResult]:
    """Annotate records with at most parallelism requests in flight.

    Returns:
        list[AnnotationResult]: In input order.
    """
    if parallelism < 1:
        msg: str = f"parallelism must be at least 1, got {parallelism}"
        raise ValueError(msg)

    local = threading.local()

    def work(record: dict[str, Any]) -> AnnotationResult:
        if not hasattr(local, "session"):
            local.session = make_session(endpoint)
        return annotate_record(local.session, endpoint, template, record, attempts)

    with ThreadPoolExecutor(max_workers=parallelism, thread_name_prefix="annotate") as executor:
        results: list[AnnotationResult] = list(executor.map(work, records))

    succeeded: int = sum(result.ok for result in results)
    logger.bind(stage="annotate").info(f"Annotated {succeeded}/{len(results)} records")
    return results


def annotate_file(
    input_path: Path,
    output_path: Path,
    endpoint: EndpointConfig,
    template: PromptTemplate,
    *,
    parallelism: int = 4,
    attempts: int = 3,
) -> dict[str, int]:
    """Annotate a JSONL dataset into another JSONL file.

    Records whose id already has a causal map in output_path are skipped,
    so an interrupted run can be started again. Failures go to
    <output>.failures.jsonl.

    Returns:
        dict[str, int]: Counts of records read, skipped, annotated and failed,
        plus total token usage.
    """
    records: list[dict[str, Any]] = read_jsonl(input_path)
    done: set[str] = annotated_ids(output_path)
    pending: list[dict[str, Any]] = []
    for record in records:
        identifier: str = str(record.get("id") or record_id(record["question"], str(record["answer"])))
        if identifier in done:
            continue
        pending.append({**record, "id": identifier})

    log = logger.bind(stage="annotate")
    log.info(f"{len(records) - len(pending)} of {len(records)} records already annotated, {len(pending)} to go")

    output_path.parent.mkdir(parents=True, exist_ok=True)
    failures_path: Path = output_path.with_name(f"{output_path.stem}.failures.jsonl")
    results: list[AnnotationResult] = annotate_batch(pending, endpoint, template, parallelism=parallelism, attempts=attempts)
    for record, result in zip(pending, results, strict=True):
        if result.ok:
            append_jsonl(output_path, {**record, "causal_map": result.causal_map})
        else:
            append_jsonl(failures_path, {"id": result.record_id, "failure": result.failure, "attempts": result.attempts})

    summary: dict[str, int] = {
        "read": len(records),
        "skipped": len(records) - len(pending),
        "annotated": sum(result.ok for result in results),
        "failed": sum(not result.ok for result in results),
        "prompt_tokens": sum(result.prompt_tokens for result in results),
        "completion_tokens": sum(result.completion_tokens for result in results),
    }
    log.info(f"Annotation summary: {summary}")
    return summary


def estimate_cost(
    avg_input_tokens: float,
    avg_prompt_tokens: float,
    avg_completion_tokens: float,
    price_in: float,
    price_out: float,
) -> float:
    """Annotation cost per million input tokens.

    Each input token costs prompt/input tokens at price_in and
    completion/input tokens at price_out (prices per million tokens).

    Raises:
        ValueError: If the input length is not positive or a value is negative.
    """
    if avg_input_tokens <= 0:
        msg: str = f"Average input length must be positive, got {avg_input_tokens}"
        raise ValueError(msg)
    if min(avg_prompt_tokens, avg_completion_tokens, price_in, price_out) < 0:
        msg = "Token counts and prices must not be negative"
        raise ValueError(msg)
    return avg_prompt_tokens / avg_input_tokens * price_in + avg_completion_tokens / avg_input_tokens * price_out


def estimate_cost_single_rate(avg_input_tokens: float, avg_prompt_tokens: float, avg_completion_tokens: float, price: float) -> float:
    """Same as estimate_cost when prompt and completion tokens share one price."""
    return estimate_cost(avg_input_tokens, avg_prompt_tokens, avg_completion_tokens, price, price)
