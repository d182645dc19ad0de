"""Line-oriented stdio bridge exposing the flat boundary to host languages.

Protocol: one JSON object per line on stdin, one per line on stdout.
Request:  {"id": n, "fn": "nd_create", "args": [...]}
Response: {"id": n, "status": s, "out": [...], "error": "..."}

Each ``fn`` maps 1:1 to the matching ``mg_<fn>`` boundary function; the
trailing out-parameter is supplied by the bridge. Byte payloads are
base64 strings tagged {"b64": "..."} in both directions. The process
exits on EOF or on the "shutdown" request.
"""

from __future__ import annotations

import base64
import json
import sys
from typing import Any, List

from . import capi

_OUT_PARAM = {
    "nd_create", "nd_to_host", "nd_scalar_mul",
    "sym_variable", "sym_apply", "sym_save", "sym_load",
    "exec_bind", "exec_outputs",
}
_NO_OUT = {
    "nd_free", "sym_free", "exec_free",
    "exec_forward", "exec_backward",
}


def _decode(value: Any) -> Any:
    if isinstance(value, dict) and set(value) == {"b64"}:
        return base64.b64decode(value["b64"])
    if isinstance(value, list):
        return [_decode(v) for v in value]
    return value


def _encode(value: Any) -> Any:
    if isinstance(value, (bytes, bytearray)):
        return {"b64": base64.b64encode(bytes(value)).decode("ascii")}
    if isinstance(value, list):
        return [_encode(v) for v in value]
    return value


def handle_request(req: dict) -> dict:
    rid = req.get("id")
    fn = req.get("fn")
    args = _decode(req.get("args", []))
    if fn == "handle_count":
        return {"id": rid, "status": capi.OK, "out": [capi.mg_handle_count()]}
    if fn == "last_error_message":
        return {"id": rid, "status": capi.OK,
                "out": [capi.mg_last_error_message()]}
    if fn not in _OUT_PARAM and fn not in _NO_OUT:
        return {"id": rid, "status": capi.BAD_ARGUMENT,
                "error": f"unknown function {fn!r}"}
    target = getattr(capi, f"mg_{fn}")
    out: List[Any] = []
    try:
        if fn in _OUT_PARAM:
            status = target(*args, out)
        else:
            status = target(*args)
    except TypeError as exc:
        return {"id": rid, "status": capi.BAD_ARGUMENT, "error": str(exc)}
    resp = {"id": rid, "status": status, "out": _encode(out)}
    if status != capi.OK:
        resp["error"] = capi.mg_last_error_message()
    return resp


def main() -> int:
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
        except json.JSONDecodeError as exc:
            sys.stdout.write(json.dumps(
                {"id": None, "status": capi.BAD_ARGUMENT,
                 "error": f"bad json: {exc}"}) + "\n")
            sys.stdout.flush()
            continue
        if req.get("fn") == "shutdown":
            sys.stdout.write(json.dumps(
                {"id": req.get("id"), "status": capi.OK, "out": []}) + "\n")
            sys.stdout.flush()
            return 0
        sys.stdout.write(json.dumps(handle_request(req)) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
