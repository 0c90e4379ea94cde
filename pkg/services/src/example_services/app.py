"""Gate, light, and detection services behind one FastAPI app.

The wire contract is flat JSON objects both ways: the POST body carries the
input variables, the response carries the output variables, nothing nested
and no envelopes. Handlers sleep for the configured artificial delay before
answering, so callers can treat the delay as service processing time. Any
body that fails to parse as a JSON object, or is missing a required key,
gets a 400 with an error JSON instead of a framework-shaped 422.
"""

from __future__ import annotations

import asyncio
import json
from typing import Iterable, Optional, Sequence

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

ALL_SERVICES = ("gate", "light", "detect")


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


async def _read_object(request: Request) -> dict:
    try:
        body = json.loads(await request.body() or b"{}")
    except (ValueError, UnicodeDecodeError) as exc:
        raise _BadBody(f"body is not valid JSON: {exc}")
    if not isinstance(body, dict):
        raise _BadBody("body must be a JSON object")
    return body


class _BadBody(Exception):
    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


def build_app(
    services: Iterable[str] = ALL_SERVICES,
    *,
    delay_ms: float = 0.0,
    detect_script: Optional[Sequence[bool]] = None,
) -> FastAPI:
    """App serving the requested routes.

    detect_script: booleans the detection stub cycles through when a request
    does not carry its own "seen"; defaults to always-true.
    """
    enabled = tuple(services)
    unknown = set(enabled) - set(ALL_SERVICES)
    if unknown:
        raise ValueError(f"unknown service {sorted(unknown)[0]!r}; choose from {ALL_SERVICES}")
    script = tuple(bool(v) for v in (detect_script or (True,)))
    if not script:
        raise ValueError("detect_script must not be empty")

    app = FastAPI(title="csm example services", docs_url=None, redoc_url=None)
    state = {"detect_calls": 0}

    async def _respond(payload: dict) -> JSONResponse:
        if delay_ms > 0:
            await asyncio.sleep(delay_ms / 1000.0)
        return JSONResponse(status_code=200, content=payload)

    @app.exception_handler(_BadBody)
    async def bad_body(request: Request, exc: _BadBody):
        return _error(400, exc.message)

    @app.get("/healthz")
    async def healthz():
        return {"ok": True, "services": list(enabled)}

    if "gate" in enabled:

        @app.post("/gate")
        async def gate(request: Request):
            body = await _read_object(request)
            if "position" not in body:
                return _error(400, "missing required key 'position'")
            return await _respond({"ok": True, "position": body["position"]})

    if "light" in enabled:

        @app.post("/light")
        async def light(request: Request):
            body = await _read_object(request)
            if "on" not in body:
                return _error(400, "missing required key 'on'")
            return await _respond({"ok": True, "on": body["on"]})

    if "detect" in enabled:

        @app.post("/detect")
        async def detect(request: Request):
            body = await _read_object(request)
            if "seen" in body:
                seen = bool(body["seen"])
            else:
                seen = script[state["detect_calls"] % len(script)]
                state["detect_calls"] += 1
            return await _respond({"ok": True, "seen": seen})

    return app
