import struct
import zlib

import numpy as np
import pytest

from fedbaf import checkpoint
from fedbaf.checkpoint import CheckpointError
from fedbaf.model import init_params, linear_schema, mlp_schema


@pytest.fixture
def params():
    return init_params(mlp_schema(3, 4, 2), np.random.default_rng(0))


def test_round_trip_exact(params, tmp_path):
    path = tmp_path / "sub" / "w.fbaf"
    checkpoint.save(params, path)
    back = checkpoint.load(path)
    assert back.schema == params.schema
    assert back.values.tobytes() == params.values.tobytes()


def test_layout_hand_decoded(params):
    blob = checkpoint.encode(params)
    assert blob[:4] == b"FBAF"
    version, C, D, count = struct.unpack_from("<HIII", blob, 4)
    assert (version, C, D, count) == (1, 2, 3, 4)
    (n,) = struct.unpack_from("<I", blob, 18)
    assert blob[22:22 + n] == b"hidden.weight"
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])
    tail = np.frombuffer(blob[-4 - 8 * params.schema.size:-4], "<f8")
    assert np.array_equal(tail, params.values)


def test_deterministic_bytes(params):
    assert checkpoint.encode(params) == checkpoint.encode(params.copy())


def test_corruption_detected(params):
    blob = bytearray(checkpoint.encode(params))
    blob[30] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC"):
        checkpoint.decode(bytes(blob))


def test_bad_magic_and_truncation(params):
    blob = checkpoint.encode(params)
    with pytest.raises(CheckpointError):
        checkpoint.decode(b"XXXX" + blob[4:])
    body = blob[:-4][:-3]
    with pytest.raises(CheckpointError):
        checkpoint.decode(body + struct.pack("<I", zlib.crc32(body)))


def test_wrong_version(params):
    body = bytearray(checkpoint.encode(params)[:-4])
    struct.pack_into("<H", body, 4, 9)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.decode(bytes(body) + struct.pack("<I", zlib.crc32(body)))


def test_linear_round_trip():
    w = init_params(linear_schema(5, 3), np.random.default_rng(1))
    assert checkpoint.decode(checkpoint.encode(w)).values.tobytes() == w.values.tobytes()
