"""Network dumps on local storage."""
import json

import numpy as np
import pyarrow.parquet as pq
import pytest

from varprop.errors import ConsistencyError, OutputError
from varprop.network import InitScheme, NetworkSpec, initialize, kaiming_init
from varprop.storage import (
    HEADER_KEY,
    PROVENANCE_KEY,
    open_uri,
    parameter_digest,
    read_network,
    write_network,
)


def _assert_same(a, b):
    assert a.spec == b.spec
    for wa, wb in zip(a.weights, b.weights):
        np.testing.assert_array_equal(wa, wb)
    for ba, bb in zip(a.biases, b.biases):
        np.testing.assert_array_equal(ba, bb)


class TestNetworkDump:
    def test_kaiming_network(self, tmp_path):
        net = kaiming_init(NetworkSpec(widths=(5, 7, 3), seed=42, batchnorm=True))
        path = str(tmp_path / "net.parquet")
        write_network(net, path)
        loaded = read_network(path)
        _assert_same(net, loaded)
        assert parameter_digest(loaded) == parameter_digest(net)

    def test_calibrated_network_keeps_biases(self, tmp_path, batch):
        spec = NetworkSpec.uniform(6, 3, init_scheme=InitScheme.SCALE_BIAS, seed=1)
        net = initialize(spec, [batch(40, 6)])
        path = tmp_path / "calibrated.parquet"
        write_network(net, f"file://{path}")
        _assert_same(net, read_network(f"file://{path}"))

    def test_header_and_provenance(self, tmp_path):
        net = kaiming_init(NetworkSpec(widths=(2, 3), seed=9))
        path = tmp_path / "net.parquet"
        write_network(net, str(path), {"config_hash": "abc", "seed": 9})
        metadata = pq.read_schema(str(path)).metadata
        header = json.loads(metadata[HEADER_KEY])
        assert header["widths"] == [2, 3]
        assert header["init_scheme"] == "kaiming"
        assert header["format_version"] == 1
        assert json.loads(metadata[PROVENANCE_KEY]) == {"config_hash": "abc", "seed": 9}

    def test_digest_changes_with_parameters(self):
        a = kaiming_init(NetworkSpec(widths=(4, 4), seed=1))
        b = kaiming_init(NetworkSpec(widths=(4, 4), seed=2))
        assert parameter_digest(a) != parameter_digest(b)

    def test_header_shape_mismatch(self, tmp_path):
        net = kaiming_init(NetworkSpec(widths=(4, 5, 3), seed=1))
        path = tmp_path / "net.parquet"
        write_network(net, str(path))
        table = pq.read_table(str(path))
        header = json.loads(table.schema.metadata[HEADER_KEY])
        header["widths"] = [4, 6, 3]
        tampered = table.replace_schema_metadata({HEADER_KEY: json.dumps(header).encode()})
        pq.write_table(tampered, str(path))
        with pytest.raises(ConsistencyError):
            read_network(str(path))

    def test_missing_header(self, tmp_path):
        net = kaiming_init(NetworkSpec(widths=(2, 2), seed=1))
        path = tmp_path / "net.parquet"
        write_network(net, str(path))
        pq.write_table(pq.read_table(str(path)).replace_schema_metadata({}), str(path))
        with pytest.raises(ConsistencyError):
            read_network(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(OutputError):
            read_network(str(tmp_path / "absent.parquet"))


class TestOpenUri:
    def test_unsupported_scheme(self):
        with pytest.raises(ValueError, match="Unsupported URI scheme"):
            open_uri("ftp://host/file.parquet")

    def test_local_roundtrip(self, tmp_path):
        path = tmp_path / "blob.bin"
        with open_uri(str(path), "wb") as f:
            f.write(b"abc")
        with open_uri(f"file://{path}") as f:
            assert f.read() == b"abc"
