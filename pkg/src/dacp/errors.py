"""Error taxonomy shared by every layer of the protocol stack.

Each protocol-visible error carries a numeric wire code so servers can map
exceptions to ERROR frames and clients can map ERROR frames back to the
same exception types.
"""

from __future__ import annotations

AUTH_FAILED = 1
NOT_FOUND = 2
FORBIDDEN = 3
BAD_REQUEST = 4
TYPE_ERROR = 5
TOKEN_EXPIRED = 6
INTERNAL = 7

_CODE_NAMES = {
    AUTH_FAILED: "AUTH_FAILED",
    NOT_FOUND: "NOT_FOUND",
    FORBIDDEN: "FORBIDDEN",
    BAD_REQUEST: "BAD_REQUEST",
    TYPE_ERROR: "TYPE_ERROR",
    TOKEN_EXPIRED: "TOKEN_EXPIRED",
    INTERNAL: "INTERNAL",
}


class DacpError(Exception):
    """Base class for protocol-visible failures."""

    code: int = INTERNAL

    @property
    def code_name(self) -> str:
        return _CODE_NAMES.get(self.code, str(self.code))


class AuthFailedError(DacpError):
    code = AUTH_FAILED


class NotFoundError(DacpError):
    code = NOT_FOUND


class ForbiddenError(DacpError):
    code = FORBIDDEN


class BadRequestError(DacpError):
    code = BAD_REQUEST


class DacpTypeError(DacpError):
    code = TYPE_ERROR


class TokenExpiredError(DacpError):
    code = TOKEN_EXPIRED


class InternalError(DacpError):
    code = INTERNAL


class ProtocolError(BadRequestError):
    """Wire-level violation; fatal to the connection that produced it."""


class MalformedFrame(ProtocolError):
    """Frame header or payload structure is invalid."""


class FrameTooLarge(ProtocolError):
    """Encoded frame would exceed the frame cap."""


class MalformedSchema(ProtocolError):
    """Schema bytes violate the schema layout or schema invariants."""


class MalformedBatch(ProtocolError):
    """Record-batch bytes violate the batch layout."""


class StreamConsumedError(RuntimeError):
    """A single-consumption stream was consumed (or claimed) twice.

    Local usage error, never sent over the wire.
    """


_ERROR_BY_CODE = {
    AUTH_FAILED: AuthFailedError,
    NOT_FOUND: NotFoundError,
    FORBIDDEN: ForbiddenError,
    BAD_REQUEST: BadRequestError,
    TYPE_ERROR: DacpTypeError,
    TOKEN_EXPIRED: TokenExpiredError,
    INTERNAL: InternalError,
}


def error_from_code(code: int, message: str) -> DacpError:
    """Rebuild the exception a peer reported in an ERROR frame."""
    cls = _ERROR_BY_CODE.get(code)
    if cls is None:
        err = DacpError(f"unknown error code {code}: {message}")
        return err
    return cls(message)
