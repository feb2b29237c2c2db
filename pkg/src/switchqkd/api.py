"""HTTP front-end for one KME, plus in-process and HTTP clients.

Routes::

    GET  /api/v1/keys/{slave_SAE_ID}/status
    POST /api/v1/keys/{slave_SAE_ID}/enc_keys     {"number": n, "size": bits}
    GET  /api/v1/keys/{slave_SAE_ID}/enc_keys     ?number=n&size=bits
    POST /api/v1/keys/{master_SAE_ID}/dec_keys    {"key_IDs": [{"key_ID": id}, ...]}

Errors are returned as ``{"message": ..., "details": [...]}``.
"""

from __future__ import annotations

import socket
from typing import Any, Optional

import httpx
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .kms import (
    BadRequestError,
    KeyManagementSystem,
    KmsError,
    KmsStateError,
    NotFoundError,
    UnavailableError,
)

API_PREFIX = "/api/v1/keys"


def create_app(kms: KeyManagementSystem, kme_id: Optional[str] = None) -> FastAPI:
    """Serve the links whose master (enc/status) or slave (dec) side is ``kme_id``.

    With ``kme_id=None`` the app answers for every binding.
    """
    app = FastAPI(title=f"KME {kme_id or 'all'}", docs_url=None, redoc_url=None)
    app.state.kms = kms
    app.state.kme_id = kme_id

    @app.exception_handler(KmsError)
    async def _kms_error(request: Request, exc: KmsError) -> JSONResponse:
        return JSONResponse(status_code=exc.status_code, content=exc.to_json())

    @app.get(API_PREFIX + "/{slave_SAE_ID}/status")
    def status(slave_SAE_ID: str) -> dict:
        return kms.get_status(slave_SAE_ID, kme_id)

    @app.post(API_PREFIX + "/{slave_SAE_ID}/enc_keys")
    async def enc_keys_post(slave_SAE_ID: str, request: Request) -> dict:
        body = await _json_body(request)
        return kms.get_enc_keys(slave_SAE_ID, body.get("number", 1), body.get("size"), kme_id)

    @app.get(API_PREFIX + "/{slave_SAE_ID}/enc_keys")
    def enc_keys_get(slave_SAE_ID: str, number: int = 1, size: Optional[int] = None) -> dict:
        return kms.get_enc_keys(slave_SAE_ID, number, size, kme_id)

    @app.post(API_PREFIX + "/{master_SAE_ID}/dec_keys")
    async def dec_keys_post(master_SAE_ID: str, request: Request) -> dict:
        body = await _json_body(request)
        entries = body.get("key_IDs")
        if not isinstance(entries, list) or not all(isinstance(e, dict) and "key_ID" in e for e in entries):
            raise BadRequestError("key_IDs must be a list of {'key_ID': ...} objects")
        return kms.get_dec_keys(master_SAE_ID, [str(e["key_ID"]) for e in entries], kme_id)

    return app


async def _json_body(request: Request) -> dict[str, Any]:
    raw = await request.body()
    if not raw:
        return {}
    try:
        body = await request.json()
    except ValueError:
        raise BadRequestError("request body is not valid JSON") from None
    if not isinstance(body, dict):
        raise BadRequestError("request body must be a JSON object")
    return body


class LocalKmsClient:
    """Calls the KMS directly; used by simulation-mode consumers."""

    def __init__(self, kms: KeyManagementSystem) -> None:
        self.kms = kms

    def status(self, slave_sae_id: str) -> dict:
        return self.kms.get_status(slave_sae_id)

    def enc_keys(self, slave_sae_id: str, number: int = 1, size: int | None = None) -> dict:
        return self.kms.get_enc_keys(slave_sae_id, number, size)

    def dec_keys(self, master_sae_id: str, key_ids: list[str]) -> dict:
        return self.kms.get_dec_keys(master_sae_id, key_ids)


_ERRORS = {400: BadRequestError, 404: NotFoundError, 503: UnavailableError}


class HttpKmsClient:
    """ETSI 014 client over HTTP.

    ``master_urls`` maps a slave SAE id to the base URL of the KME serving
    its enc side; ``slave_urls`` maps a master SAE id to the dec-side KME.
    """

    def __init__(
        self,
        master_urls: dict[str, str],
        slave_urls: dict[str, str],
        timeout: float = 5.0,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self.master_urls = master_urls
        self.slave_urls = slave_urls
        if transport is None:
            # POST bodies go out in a second write; without NODELAY each call waits on delayed ACKs
            transport = httpx.HTTPTransport(socket_options=[(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)])
        self._http = httpx.Client(timeout=timeout, transport=transport)

    def close(self) -> None:
        self._http.close()

    def _check(self, resp: httpx.Response) -> dict:
        if resp.status_code == 200:
            return resp.json()
        try:
            body = resp.json()
        except ValueError:
            body = {"message": resp.text}
        cls = _ERRORS.get(resp.status_code, KmsStateError)
        raise cls(body.get("message", ""), body.get("details"))

    def status(self, slave_sae_id: str) -> dict:
        base = self.master_urls[slave_sae_id]
        return self._check(self._http.get(f"{base}{API_PREFIX}/{slave_sae_id}/status"))

    def enc_keys(self, slave_sae_id: str, number: int = 1, size: int | None = None) -> dict:
        base = self.master_urls[slave_sae_id]
        body: dict[str, Any] = {"number": number}
        if size is not None:
            body["size"] = size
        return self._check(self._http.post(f"{base}{API_PREFIX}/{slave_sae_id}/enc_keys", json=body))

    def dec_keys(self, master_sae_id: str, key_ids: list[str]) -> dict:
        base = self.slave_urls[master_sae_id]
        body = {"key_IDs": [{"key_ID": k} for k in key_ids]}
        return self._check(self._http.post(f"{base}{API_PREFIX}/{master_sae_id}/dec_keys", json=body))
