"""Network dumps: DenseNet parameters as Parquet, on local disk or cloud storage.

Layout: one row per layer with columns ``layer``, ``rows``, ``cols``,
``weights`` (row-major float64 list) and ``bias`` (float64 list). The schema
metadata key ``varprop`` holds a JSON header with the widths, scheme, seed and
the remaining NetworkSpec fields.
"""
import hashlib
import json
import logging
from typing import Any, BinaryIO, Dict, Optional
from urllib.parse import urlparse

import numpy as np
import pyarrow as pa
import pyarrow.parquet as pq

from varprop.errors import ConsistencyError, OutputError
from varprop.network import DenseNet, NetworkSpec

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
HEADER_KEY = b"varprop"
PROVENANCE_KEY = b"varprop.provenance"


def _filesystem(scheme: str):
    if scheme == "gs":
        try:
            import gcsfs
        except ImportError:
            raise ImportError(
                "gcsfs is required for gs:// URIs. Install with: pip install gcsfs"
            )
        return gcsfs.GCSFileSystem()
    if scheme == "s3":
        try:
            import s3fs
        except ImportError:
            raise ImportError(
                "s3fs is required for s3:// URIs. Install with: pip install s3fs"
            )
        return s3fs.S3FileSystem()
    raise ValueError(f"Unsupported URI scheme: {scheme}. Supported: file://, gs://, s3://")


def open_uri(uri: str, mode: str = "rb") -> BinaryIO:
    """Open a local path, ``file://``, ``gs://`` or ``s3://`` URI as a binary stream."""
    parsed = urlparse(uri)
    scheme = parsed.scheme.lower()
    if scheme == "file" or not scheme:
        path = parsed.path if scheme == "file" else uri
        try:
            return open(path, mode)
        except OSError as e:
            raise OutputError(f"cannot open network dump ({e.strerror})", path) from e
    logger.info(f"Opening {uri} with streaming access")
    return _filesystem(scheme).open(uri, mode)


def spec_header(spec: NetworkSpec) -> Dict[str, Any]:
    header = spec.model_dump(mode="json")
    header["widths"] = list(spec.widths)
    header["format_version"] = FORMAT_VERSION
    return header


def parameter_digest(net: DenseNet) -> str:
    """SHA-256 over all parameters in layer order, row-major."""
    digest = hashlib.sha256()
    for w, b in zip(net.weights, net.biases):
        digest.update(np.ascontiguousarray(w, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return digest.hexdigest()


def _list_column(arrays) -> pa.LargeListArray:
    sizes = [a.size for a in arrays]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    values = np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.empty(0)
    return pa.LargeListArray.from_arrays(pa.array(offsets), pa.array(values, type=pa.float64()))


def _split_column(table: pa.Table, name: str):
    column = table.column(name).combine_chunks()
    offsets = column.offsets.to_numpy()
    values = column.values.to_numpy(zero_copy_only=False)
    return [values[offsets[i] : offsets[i + 1]] for i in range(len(column))]


def write_network(net: DenseNet, uri: str, provenance: Optional[Dict[str, Any]] = None) -> str:
    """Write ``net`` to ``uri`` as Parquet, with optional run provenance in the metadata."""
    table = pa.table(
        {
            "layer": pa.array(range(1, net.depth + 1), type=pa.int32()),
            "rows": pa.array([w.shape[0] for w in net.weights], type=pa.int64()),
            "cols": pa.array([w.shape[1] for w in net.weights], type=pa.int64()),
            "weights": _list_column(net.weights),
            "bias": _list_column(net.biases),
        }
    )
    header = json.dumps(spec_header(net.spec), sort_keys=True).encode("utf-8")
    metadata = {HEADER_KEY: header}
    if provenance:
        metadata[PROVENANCE_KEY] = json.dumps(provenance, sort_keys=True).encode("utf-8")
    table = table.replace_schema_metadata(metadata)
    with open_uri(uri, "wb") as sink:
        pq.write_table(table, sink)
    logger.info(f"Wrote network dump {uri} ({net.depth} layers)")
    return uri


def read_network(uri: str) -> DenseNet:
    """Load a dump written by ``write_network``; shapes are checked against the header."""
    with open_uri(uri, "rb") as source:
        table = pq.read_table(source)
    metadata = table.schema.metadata or {}
    if HEADER_KEY not in metadata:
        raise ConsistencyError(f"{uri} has no varprop header")
    header = json.loads(metadata[HEADER_KEY])
    if header.pop("format_version", None) != FORMAT_VERSION:
        raise ConsistencyError(f"{uri} has an unsupported dump format")
    spec = NetworkSpec(**header)

    layers = table.column("layer").to_pylist()
    if layers != list(range(1, spec.depth + 1)):
        raise ConsistencyError(f"{uri}: layers {layers} do not match depth {spec.depth}")
    rows = table.column("rows").to_pylist()
    cols = table.column("cols").to_pylist()
    weights, biases = [], []
    for index, (flat, bias) in enumerate(zip(_split_column(table, "weights"), _split_column(table, "bias"))):
        expected = (spec.widths[index + 1], spec.widths[index])
        shape = (rows[index], cols[index])
        if shape != expected or flat.size != shape[0] * shape[1] or bias.size != shape[0]:
            raise ConsistencyError(
                f"{uri}: layer {index + 1} stored as {shape[0]}x{shape[1]}, header implies {expected}"
            )
        weights.append(np.array(flat, dtype=np.float64).reshape(shape))
        biases.append(np.array(bias, dtype=np.float64))
    return DenseNet(spec=spec, weights=tuple(weights), biases=tuple(biases))
