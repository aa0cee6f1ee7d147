"""Line-delimited JSON wire protocol in front of a :class:`Runtime`.

Every request is one line ``{"id", "client_id", "method", "params"}`` and gets
exactly one response line, ``{"id", "result"}`` or ``{"id", "error"}``.
Malformed lines get an error response; the connection stays open.
"""

from __future__ import annotations

import itertools
import json
import logging
import socket
import socketserver
import threading
from typing import Any, Dict, IO, Optional

from .errors import EnvSynthError, InvalidArgs, RuntimeToolError
from .runtime import Runtime

log = logging.getLogger(__name__)

PARSE_ERROR = -32700
INVALID_REQUEST = -32600
METHOD_NOT_FOUND = -32601
INTERNAL_ERROR = -32603


class BindError(EnvSynthError):
    """The TCP listener could not bind its address."""


class UnknownMethod(EnvSynthError):
    pass


class RemoteCallError(EnvSynthError):
    """Error response received by a client."""

    def __init__(self, code: int, message: str, data: Any = None):
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.message = message
        self.data = data


def _params(req: Dict[str, Any]) -> Dict[str, Any]:
    params = req.get("params") or {}
    if not isinstance(params, dict):
        raise InvalidArgs("params must be an object")
    return params


def _tools_list(runtime: Runtime, client_id: Optional[str], params: Dict[str, Any]):
    env = params.get("env")
    if env is None and client_id and runtime.has_session(client_id):
        env = runtime._session(client_id).env.name
    if env is None:
        raise InvalidArgs("tools/list needs params.env or an existing client_id")
    return runtime.list_tools(env)


def dispatch(runtime: Runtime, method: str, client_id: Optional[str], params: Dict[str, Any]) -> Any:
    if method == "tools/list":
        return _tools_list(runtime, client_id, params)
    if not isinstance(client_id, str) or not client_id:
        raise InvalidArgs(f"{method} requires a client_id")
    if method == "session/create":
        runtime.create_session(client_id, params.get("env"))
        return {"client_id": client_id}
    if method == "session/destroy":
        runtime.destroy_session(client_id)
        return {}
    if method == "load_scenario":
        if "scenario" not in params:
            raise InvalidArgs("load_scenario requires params.scenario")
        runtime.load_scenario(client_id, params["scenario"])
        return None
    if method == "save_scenario":
        return runtime.save_scenario(client_id)
    if method == "tools/call":
        name = params.get("name")
        if not isinstance(name, str):
            raise InvalidArgs("tools/call requires params.name")
        return runtime.call_tool(client_id, name, params.get("arguments") or {})
    raise UnknownMethod(method)


def handle_request(runtime: Runtime, req: Any) -> Dict[str, Any]:
    if not isinstance(req, dict) or not isinstance(req.get("method"), str):
        rid = req.get("id") if isinstance(req, dict) else None
        return {"id": rid, "error": {"code": INVALID_REQUEST, "message": "request needs a method"}}
    rid = req.get("id")
    try:
        result = dispatch(runtime, req["method"], req.get("client_id"), _params(req))
    except RuntimeToolError as exc:
        return {"id": rid, "error": exc.to_wire()}
    except UnknownMethod:
        return {"id": rid, "error": {"code": METHOD_NOT_FOUND, "message": f"unknown method {req['method']!r}"}}
    except Exception as exc:  # noqa: BLE001 - the server must answer every line
        log.exception("internal error handling %s", req.get("method"))
        return {"id": rid, "error": {"code": INTERNAL_ERROR, "message": str(exc)}}
    return {"id": rid, "result": result}


def handle_line(runtime: Runtime, line: str) -> str:
    try:
        req = json.loads(line)
    except json.JSONDecodeError as exc:
        resp = {"id": None, "error": {"code": PARSE_ERROR, "message": f"malformed request: {exc}"}}
    else:
        resp = handle_request(runtime, req)
    return json.dumps(resp, ensure_ascii=False)


def serve_stdio(runtime: Runtime, instream: IO[str], outstream: IO[str]) -> None:
    """Answer requests from ``instream`` until EOF."""
    for line in instream:
        if not line.strip():
            continue
        outstream.write(handle_line(runtime, line) + "\n")
        outstream.flush()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        runtime = self.server.runtime  # type: ignore[attr-defined]
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace")
            if not line.strip():
                continue
            self.wfile.write((handle_line(runtime, line) + "\n").encode("utf-8"))
            self.wfile.flush()


class ToolServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = False

    def __init__(self, runtime: Runtime, host: str, port: int):
        self.runtime = runtime
        try:
            super().__init__((host, port), _Handler)
        except OSError as exc:
            raise BindError(f"cannot bind {host}:{port}: {exc}") from None

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve_tcp(runtime: Runtime, host: str = "127.0.0.1", port: int = 0,
              background: bool = False) -> ToolServer:
    """Bind a TCP server; with ``background`` the accept loop runs on a thread."""
    server = ToolServer(runtime, host, port)
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
    return server


class LocalClient:
    """In-process client that still round-trips every message through JSON."""

    def __init__(self, runtime: Runtime):
        self.runtime = runtime
        self._ids = itertools.count(1)

    def request(self, method: str, params: Optional[dict] = None, client_id: Optional[str] = None) -> Any:
        req = {"id": next(self._ids), "client_id": client_id, "method": method, "params": params or {}}
        resp = json.loads(handle_line(self.runtime, json.dumps(req)))
        if "error" in resp:
            err = resp["error"]
            raise RemoteCallError(err["code"], err["message"], err.get("data"))
        return resp["result"]


class SocketClient:
    """Blocking TCP client for the wire protocol."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._file = self._sock.makefile("rwb")
        self._ids = itertools.count(1)

    def send_line(self, line: str) -> dict:
        self._file.write(line.encode("utf-8") + b"\n")
        self._file.flush()
        return json.loads(self._file.readline())

    def request(self, method: str, params: Optional[dict] = None, client_id: Optional[str] = None) -> Any:
        resp = self.send_line(json.dumps({"id": next(self._ids), "client_id": client_id,
                                          "method": method, "params": params or {}}))
        if "error" in resp:
            err = resp["error"]
            raise RemoteCallError(err["code"], err["message"], err.get("data"))
        return resp["result"]

    def close(self) -> None:
        self._file.close()
        self._sock.close()
