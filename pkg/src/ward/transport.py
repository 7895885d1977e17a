"""JSON-over-HTTP POST with retry and exponential backoff."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import httpx

from .errors import ServerError, TransportError

log = logging.getLogger(__name__)


@dataclass
class PostResult:
    data: dict
    retries: int


def post_json(
    client: httpx.Client,
    url: str,
    payload: dict,
    *,
    attempts: int = 3,
    backoff_s: float = 0.5,
    timeout_s: float = 60.0,
) -> PostResult:
    """POST ``payload`` and decode the JSON reply.

    Transport failures and 5xx replies are retried up to ``attempts`` total
    tries; 4xx replies fail immediately.
    """
    attempts = max(1, attempts)
    last: Exception | None = None
    for i in range(attempts):
        if i:
            time.sleep(backoff_s * 2 ** (i - 1))
        try:
            resp = client.post(url, json=payload, timeout=timeout_s)
        except httpx.TimeoutException as exc:
            last = TransportError(f"timeout after {timeout_s}s calling {url}: {exc}")
        except httpx.TransportError as exc:
            last = TransportError(f"cannot reach {url}: {exc}")
        else:
            if resp.status_code >= 500:
                last = ServerError(resp.status_code, resp.text, url)
            elif resp.status_code >= 300:
                raise ServerError(resp.status_code, resp.text, url)
            else:
                try:
                    return PostResult(data=resp.json(), retries=i)
                except ValueError as exc:
                    raise ServerError(resp.status_code, f"invalid JSON body: {resp.text}", url) from exc
        log.warning("attempt %d/%d for %s failed: %s", i + 1, attempts, url, last)
    assert last is not None
    raise last
