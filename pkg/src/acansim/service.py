"""TCP tuple space service with newline-delimited JSON framing.

One request object per line, one response object per line.  Blocking get and
read hold their connection's thread until a match arrives (or an optional
timeout expires), which maps the in-process blocking semantics straight onto
the wire.  Arrays travel as flat float lists plus a shape and come back as
float32, so a loopback round trip is value-identical for float32 data.

Request:  {"op": "put", "key": K, "value": V}
          {"op": "get"|"read", "pattern": P, "timeout": seconds|null}
          {"op": "try_get"|"try_read"|"count"|"clear", "pattern": P}
Response: {"ok": true, ...}   with "key"/"value"/"count" as applicable
          {"ok": false, "kind": <error class>, "error": <message>}
"""

from __future__ import annotations

import json
import socket
import socketserver
import threading
from typing import Any, Optional

import numpy as np

from .kernels import F32
from .tuplespace import (
    MalformedKeyError,
    MalformedPatternError,
    ThreadedTupleSpace,
    TupleSpaceError,
    WaitAborted,
)


class ServiceError(Exception):
    pass


def encode_value(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return {"nd": list(value.shape), "f32": [float(v) for v in value.ravel()]}
    if isinstance(value, np.floating):
        return {"nd": [], "f32": [float(value)]}
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, dict):
        return {"map": {k: encode_value(v) for k, v in value.items()}}
    if isinstance(value, (list, tuple)):
        return {"seq": [encode_value(v) for v in value]}
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    raise ServiceError(f"cannot encode value of type {type(value).__name__}")


def decode_value(data: Any) -> Any:
    if isinstance(data, dict):
        if "nd" in data and "f32" in data:
            arr = np.asarray(data["f32"], dtype=F32).reshape(data["nd"])
            return arr[()] if arr.shape == () else arr
        if "map" in data:
            return {k: decode_value(v) for k, v in data["map"].items()}
        if "seq" in data:
            return [decode_value(v) for v in data["seq"]]
        raise ServiceError(f"cannot decode mapping {sorted(data)}")
    return data


class _Handler(socketserver.StreamRequestHandler):
    def handle(self) -> None:
        space: ThreadedTupleSpace = self.server.space  # type: ignore[attr-defined]
        for line in self.rfile:
            line = line.strip()
            if not line:
                continue
            try:
                reply = self._dispatch(space, json.loads(line))
            except (TupleSpaceError, ServiceError, TimeoutError) as err:
                reply = {"ok": False, "kind": type(err).__name__, "error": str(err)}
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                reply = {"ok": False, "kind": "BadRequest", "error": str(err)}
            try:
                self.wfile.write(json.dumps(reply).encode() + b"\n")
            except (BrokenPipeError, ConnectionResetError):
                return

    def _dispatch(self, space: ThreadedTupleSpace, req: dict) -> dict:
        op = req["op"]
        if op == "put":
            space.put(req["key"], decode_value(req["value"]))
            return {"ok": True}
        if op in ("get", "read"):
            timeout = req.get("timeout")
            fn = space.get if op == "get" else space.read
            key, value = fn(req["pattern"], timeout=timeout)
            return {"ok": True, "key": key, "value": encode_value(value)}
        if op in ("try_get", "try_read"):
            fn = space.try_get if op == "try_get" else space.try_read
            hit = fn(req["pattern"])
            if hit is None:
                return {"ok": True, "found": False}
            return {"ok": True, "found": True, "key": hit[0], "value": encode_value(hit[1])}
        if op == "count":
            return {"ok": True, "count": space.count(req["pattern"])}
        if op == "clear":
            return {"ok": True, "count": space.clear(req["pattern"])}
        if op == "ping":
            return {"ok": True}
        raise ServiceError(f"unknown op {op!r}")


class TupleSpaceServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 space: Optional[ThreadedTupleSpace] = None) -> None:
        super().__init__((host, port), _Handler)
        self.space = space if space is not None else ThreadedTupleSpace()

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[0], self.server_address[1]

    def serve_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True)
        thread.start()
        return thread

    def stop(self) -> None:
        self.shutdown()
        self.space.close()
        self.server_close()


class TupleSpaceClient:
    """Blocking client; one instance per thread of use."""

    def __init__(self, host: str, port: int, connect_timeout: float = 10.0) -> None:
        self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        self._sock.settimeout(None)
        self._file = self._sock.makefile("rwb")

    def close(self) -> None:
        try:
            self._file.close()
        finally:
            self._sock.close()

    def __enter__(self) -> "TupleSpaceClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _request(self, req: dict) -> dict:
        self._file.write(json.dumps(req).encode() + b"\n")
        self._file.flush()
        line = self._file.readline()
        if not line:
            raise ServiceError("server closed the connection")
        reply = json.loads(line)
        if not reply.get("ok"):
            kind = reply.get("kind", "ServiceError")
            message = reply.get("error", "")
            for cls in (MalformedKeyError, MalformedPatternError, WaitAborted, TimeoutError):
                if kind == cls.__name__:
                    raise cls(message)
            raise ServiceError(f"{kind}: {message}")
        return reply

    def put(self, key: str, value: Any) -> None:
        self._request({"op": "put", "key": key, "value": encode_value(value)})

    def get(self, pattern: str, timeout: Optional[float] = None) -> tuple[str, Any]:
        reply = self._request({"op": "get", "pattern": pattern, "timeout": timeout})
        return reply["key"], decode_value(reply["value"])

    def read(self, pattern: str, timeout: Optional[float] = None) -> tuple[str, Any]:
        reply = self._request({"op": "read", "pattern": pattern, "timeout": timeout})
        return reply["key"], decode_value(reply["value"])

    def try_get(self, pattern: str) -> Optional[tuple[str, Any]]:
        reply = self._request({"op": "try_get", "pattern": pattern})
        if not reply["found"]:
            return None
        return reply["key"], decode_value(reply["value"])

    def try_read(self, pattern: str) -> Optional[tuple[str, Any]]:
        reply = self._request({"op": "try_read", "pattern": pattern})
        if not reply["found"]:
            return None
        return reply["key"], decode_value(reply["value"])

    def count(self, pattern: str) -> int:
        return self._request({"op": "count", "pattern": pattern})["count"]

    def clear(self, pattern: str) -> int:
        return self._request({"op": "clear", "pattern": pattern})["count"]

    def ping(self) -> bool:
        return self._request({"op": "ping"})["ok"]
