"""JSON-over-HTTP plumbing shared by the generator and embedder adapters."""

from __future__ import annotations

import logging
import time

import requests

log = logging.getLogger(__name__)


class TransportError(RuntimeError):
    """The remote service could not be reached or answered with an error."""


class ContractError(RuntimeError):
    """The remote service answered, but the payload breaks the wire contract."""


def post_json(url: str, payload: dict, timeout: float = 60.0, retries: int = 2,
              backoff: float = 0.5, session: requests.Session | None = None) -> dict:
    """POST ``payload`` and return the decoded JSON response.

    Connection failures, timeouts and 5xx answers are retried ``retries``
    times with linear backoff; 4xx answers fail immediately.
    """
    http = session or requests
    last = None
    for attempt in range(retries + 1):
        try:
            resp = http.post(url, json=payload, timeout=timeout)
        except requests.RequestException as exc:
            last = exc
        else:
            if resp.status_code < 400:
                try:
                    return resp.json()
                except ValueError as exc:
                    raise ContractError(f"{url} returned non-JSON body") from exc
            last = TransportError(f"{url} answered HTTP {resp.status_code}: {resp.text[:200]}")
            if resp.status_code < 500:
                break
        if attempt < retries:
            log.warning("POST %s failed (%s), retry %d/%d", url, last, attempt + 1, retries)
            time.sleep(backoff * (attempt + 1))
    raise TransportError(f"POST {url} failed after {retries + 1} attempt(s): {last}") from (
        last if isinstance(last, BaseException) else None)
