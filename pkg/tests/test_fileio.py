import pytest

from noisemix.fileio import ContainerError, canonical_json, read_container, write_container


@pytest.fixture()
def container(tmp_path):
    path = tmp_path / "blob.nmx"
    write_container(path, "test-kind", {"n": 3}, b"payload-bytes")
    return path


def test_round_trip(container):
    header, payload = read_container(container, "test-kind")
    assert payload == b"payload-bytes"
    assert header["n"] == 3
    assert header["kind"] == "test-kind"


def test_kind_mismatch(container):
    with pytest.raises(ContainerError, match="kind"):
        read_container(container, "other-kind")


def test_bad_magic(container):
    blob = bytearray(container.read_bytes())
    blob[0] = 0x00
    container.write_bytes(bytes(blob))
    with pytest.raises(ContainerError, match="magic"):
        read_container(container)


def test_version_mismatch(container):
    blob = bytearray(container.read_bytes())
    blob[4] = 0xEE
    container.write_bytes(bytes(blob))
    with pytest.raises(ContainerError, match="version"):
        read_container(container)


def test_truncated_file(container):
    container.write_bytes(container.read_bytes()[:6])
    with pytest.raises(ContainerError, match="truncated"):
        read_container(container)


def test_truncated_payload(container):
    container.write_bytes(container.read_bytes()[:-4])
    with pytest.raises(ContainerError, match="truncated"):
        read_container(container)


def test_checksum_failure(container):
    blob = bytearray(container.read_bytes())
    blob[-1] ^= 0xFF
    container.write_bytes(bytes(blob))
    with pytest.raises(ContainerError, match="checksum"):
        read_container(container)


def test_canonical_json_is_deterministic():
    a = canonical_json({"b": 1, "a": [1.5, 2], "c": {"y": None, "x": "s"}})
    b = canonical_json({"c": {"x": "s", "y": None}, "a": [1.5, 2], "b": 1})
    assert a == b
    assert " " not in a
