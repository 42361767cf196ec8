"""Resource addressing: dacp://<host>:<port>/<dataset>/<path>.

The path part is optional (a bare dataset names its root directory).
Segments are raw text: any character except '/' and NUL. ``.`` and ``..``
segments are accepted by the parser; the datasource layer rejects them
when resolving against a dataset root.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from dacp.errors import BadRequestError

SCHEME = "dacp"

_HOST_RE = re.compile(r"^[A-Za-z0-9_.-]+$")
DATASET_NAME_RE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")


@dataclass(frozen=True)
class ParsedUri:
    host: str
    port: int
    dataset: str | None
    path: str  # dataset-relative, '/'-joined, may be ""

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    def __str__(self) -> str:
        tail = self.dataset or ""
        if self.path:
            tail = f"{tail}/{self.path}"
        return f"{SCHEME}://{self.endpoint}/{tail}"


def parse_uri(text: str) -> ParsedUri:
    """Parse a DACP URI or raise BadRequestError."""
    prefix = f"{SCHEME}://"
    if not isinstance(text, str) or not text.startswith(prefix):
        raise BadRequestError(f"not a {SCHEME}:// URI: {text!r}")
    rest = text[len(prefix):]
    authority, sep, tail = rest.partition("/")
    host, colon, port_text = authority.rpartition(":")
    if not colon or not host:
        raise BadRequestError(f"URI missing host:port: {text!r}")
    if not _HOST_RE.match(host):
        raise BadRequestError(f"invalid host in URI: {host!r}")
    try:
        port = int(port_text)
    except ValueError:
        raise BadRequestError(f"invalid port in URI: {port_text!r}") from None
    if not 1 <= port <= 65535:
        raise BadRequestError(f"port out of range in URI: {port}")
    if "\x00" in tail:
        raise BadRequestError("NUL byte in URI path")
    if not sep or not tail:
        return ParsedUri(host, port, None, "")
    dataset, _, path = tail.partition("/")
    path = path.rstrip("/")
    segments = path.split("/") if path else []
    if any(seg == "" for seg in segments):
        raise BadRequestError(f"empty path segment in URI: {text!r}")
    return ParsedUri(host, port, dataset, path)


def make_uri(endpoint: str, dataset: str, path: str = "") -> str:
    """Assemble a URI string from an already-validated endpoint and path."""
    if path:
        return f"{SCHEME}://{endpoint}/{dataset}/{path}"
    return f"{SCHEME}://{endpoint}/{dataset}"


def split_endpoint(endpoint: str) -> tuple[str, int]:
    """Split 'host:port' into its parts, validating both."""
    host, colon, port_text = endpoint.rpartition(":")
    if not colon or not host or not _HOST_RE.match(host):
        raise BadRequestError(f"invalid endpoint: {endpoint!r}")
    try:
        port = int(port_text)
    except ValueError:
        raise BadRequestError(f"invalid endpoint port: {endpoint!r}") from None
    if not 0 <= port <= 65535:
        raise BadRequestError(f"endpoint port out of range: {endpoint!r}")
    return host, port
