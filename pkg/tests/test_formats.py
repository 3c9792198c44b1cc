import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tomoprior import ntc
from tomoprior.datasets import (
    IdxFormatError,
    ImageSet,
    gen_phantoms,
    load_idx,
    load_imageset,
    parse_idx_images,
    save_imageset,
    write_idx,
)
from tomoprior.ntc import NtcFormatError

FIXTURE = np.array(
    [[[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11], [12, 13, 14, 255]],
     [[255, 128, 64, 32], [16, 8, 4, 2], [1, 0, 0, 0], [7, 77, 177, 250]]],
    dtype=np.uint8,
)


def fixture_bytes(magic=2051, images=FIXTURE):
    # written by hand, independently of the package writer
    n, r, c = images.shape
    return bytes.fromhex(f"{magic:08x}{n:08x}{r:08x}{c:08x}") + images.tobytes()


# -- IDX --------------------------------------------------------------------

def test_idx_fixture_round_trip(tmp_path):
    path = tmp_path / "fix-idx3-ubyte"
    path.write_bytes(fixture_bytes())
    data = load_idx(path)
    assert data.images.shape == (2, 4, 4)
    np.testing.assert_array_equal(np.rint(data.images * 255).astype(np.uint8), FIXTURE)
    np.testing.assert_array_equal(data.images, FIXTURE.astype(np.float32) / np.float32(255))
    out = tmp_path / "again"
    write_idx(out, FIXTURE)
    assert out.read_bytes() == path.read_bytes()


def test_idx_gzip(tmp_path):
    path = tmp_path / "fix.gz"
    path.write_bytes(gzip.compress(fixture_bytes()))
    np.testing.assert_array_equal(load_idx(path).images, load_idx_bytes(fixture_bytes()))


def load_idx_bytes(buf):
    return parse_idx_images(buf).astype(np.float32) / np.float32(255)


def test_idx_label_magic_rejected(tmp_path):
    with pytest.raises(IdxFormatError, match="expected image magic") as info:
        parse_idx_images(fixture_bytes(magic=2049))
    assert info.value.offset == 0


def test_idx_truncation_reports_offset():
    buf = fixture_bytes()
    with pytest.raises(IdxFormatError, match="truncated payload") as info:
        parse_idx_images(buf[:-3])
    assert info.value.offset == len(buf) - 3
    with pytest.raises(IdxFormatError, match="truncated header"):
        parse_idx_images(buf[:10])
    with pytest.raises(IdxFormatError, match="trailing"):
        parse_idx_images(buf + b"\0")


def test_idx_limit(tmp_path):
    path = tmp_path / "f"
    path.write_bytes(fixture_bytes())
    assert len(load_idx(path, limit=1)) == 1


# -- image sets and phantoms --------------------------------------------------

def test_phantoms_deterministic_and_in_range():
    a = gen_phantoms(50, 28, 11)
    b = gen_phantoms(50, 28, 11)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert a.source == "phantom" and a.seed == 11
    assert not np.array_equal(a.images, gen_phantoms(50, 28, 12).images)


def test_phantom_foreground_fraction_band():
    frac = np.mean(gen_phantoms(1000, 28, 0).images > 0)
    assert 0.05 <= frac <= 0.6


def test_phantom_args():
    assert gen_phantoms(3, 8, 0).images.shape == (3, 8, 8)
    with pytest.raises(ValueError):
        gen_phantoms(0, 28, 0)
    with pytest.raises(ValueError):
        gen_phantoms(1, 7, 0)


def test_imageset_validation():
    with pytest.raises(ValueError):
        ImageSet(np.full((1, 4, 4), 1.5))
    with pytest.raises(ValueError):
        ImageSet(np.zeros((1, 4, 5)))


def test_subset_is_seeded():
    data = gen_phantoms(30, 28, 0)
    a, b = data.subset(10, seed=4), data.subset(10, seed=4)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, data.subset(10, seed=5).images)
    first, rest = data.split(20)
    assert len(first) == 20 and len(rest) == 10


def test_imageset_ntc_round_trip(tmp_path):
    data = gen_phantoms(7, 28, 3)
    save_imageset(tmp_path / "s.ntc", data)
    back = load_imageset(tmp_path / "s.ntc")
    assert back.images.dtype == data.images.dtype
    np.testing.assert_array_equal(back.images, data.images)
    assert (back.source, back.seed) == ("phantom", 3)


# -- NTC --------------------------------------------------------------------

def independent_minimal_file():
    # one f32 tensor "w" of shape (2,), written with struct only
    return (b"NTC1" + struct.pack("<I", 1) + struct.pack("<H", 1) + b"w"
            + struct.pack("<BB", 0, 1) + struct.pack("<Q", 2) + struct.pack("<2f", 1.5, -2.0))


def test_ntc_minimal_file_from_independent_writer():
    t = ntc.decode(independent_minimal_file())
    assert list(t) == ["w"]
    assert t["w"].dtype == np.float32
    np.testing.assert_array_equal(t["w"], [1.5, -2.0])
    assert ntc.encode(t) == independent_minimal_file()


def test_ntc_round_trip_all_dtypes(tmp_path):
    tensors = {
        "f32": np.arange(12, dtype=np.float32).reshape(3, 4) / 7,
        "f64": np.array([np.pi, -0.0, 1e-300]),
        "u8": np.array([[0, 255]], dtype=np.uint8),
        "i64": np.array([-(2**62), 5]),
        "scalar": np.float64(2.5),
        "empty": np.zeros((0, 3), dtype=np.float32),
        "name with ünïcode": np.int64(7),
    }
    ntc.save(tmp_path / "t.ntc", tensors)
    back = ntc.load(tmp_path / "t.ntc")
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == np.asarray(v).dtype and back[k].shape == np.shape(v)
        np.testing.assert_array_equal(back[k], v)
    assert ntc.encode(back) == (tmp_path / "t.ntc").read_bytes()


def test_ntc_coercions_and_text():
    t = ntc.decode(ntc.encode({"b": np.array([True, False]), "i": np.array([1, 2], dtype=np.int32),
                               "s": ntc.text_tensor("phantom")}))
    assert t["b"].dtype == np.uint8 and t["i"].dtype == np.int64
    assert ntc.tensor_text(t["s"]) == "phantom"
    with pytest.raises(TypeError):
        ntc.encode({"c": np.zeros(2, dtype=np.complex64)})


def test_ntc_corruptions():
    good = independent_minimal_file()
    with pytest.raises(NtcFormatError, match="bad magic") as info:
        ntc.decode(b"XTC1" + good[4:])
    assert info.value.offset == 0
    with pytest.raises(NtcFormatError, match="version"):
        ntc.decode(b"NTC2" + good[4:])
    with pytest.raises(NtcFormatError, match="truncated") as info:
        ntc.decode(good[:-1])
    assert info.value.offset == len(good) - 8
    with pytest.raises(NtcFormatError, match="trailing"):
        ntc.decode(good + b"\0")
    bad_dtype = bytearray(good)
    bad_dtype[4 + 4 + 2 + 1] = 9
    with pytest.raises(NtcFormatError, match="dtype"):
        ntc.decode(bytes(bad_dtype))


def test_ntc_atomic_write_leaves_no_temp(tmp_path):
    ntc.save(tmp_path / "a.ntc", {"x": np.zeros(3)})
    assert [p.name for p in tmp_path.iterdir()] == ["a.ntc"]


@settings(max_examples=50, deadline=None)
@given(arr=hnp.arrays(st.sampled_from([np.float32, np.float64, np.uint8, np.int64]),
                      hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)),
       name=st.text(min_size=0, max_size=20))
def test_ntc_round_trip_property(arr, name):
    back = ntc.decode(ntc.encode({name: arr}))[name]
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()
