"""DACP: a streaming columnar data access and collaboration protocol.

Server daemon, client SDK, and CLI for self-describing dataframe streams
with predicate pushdown, DAG task offloading, and token-guarded
cross-domain federation.
"""

from dacp.errors import (
    AuthFailedError,
    BadRequestError,
    DacpError,
    DacpTypeError,
    ForbiddenError,
    InternalError,
    NotFoundError,
    StreamConsumedError,
    TokenExpiredError,
)
from dacp.sdf import (
    BlobRef,
    Column,
    DataType,
    Field,
    RecordBatch,
    Schema,
    StreamingDataFrame,
    sdf_from_rows,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "BlobRef",
    "Column",
    "DataType",
    "Field",
    "RecordBatch",
    "Schema",
    "StreamingDataFrame",
    "sdf_from_rows",
    "DacpError",
    "AuthFailedError",
    "NotFoundError",
    "ForbiddenError",
    "BadRequestError",
    "DacpTypeError",
    "TokenExpiredError",
    "InternalError",
    "StreamConsumedError",
]
