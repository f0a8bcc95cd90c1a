"""Volume containers, MetaImage round-trips, and the grid/intensity
preprocessing helpers."""

import numpy as np
import pytest

from liverseg.volio import (
    HU_WINDOW,
    LabelVolume,
    Volume,
    clamp_hu,
    normalize_intensity,
    read_metaimage,
    resample_to_grid,
    resample_z,
    resize_axial,
    stack_slices,
    write_metaimage,
)


def _vol(rng, shape=(4, 6, 5), spacing=(1.0, 1.5, 2.5)):
    return Volume(rng.uniform(-200, 500, shape).astype(np.float32), spacing)


# -- containers ---------------------------------------------------------------


def test_volume_container_basics():
    v = Volume(np.zeros((2, 3, 4), dtype=np.float64), (1.0, 2.0, 3.0))
    assert v.data.dtype == np.float32
    assert v.size == (4, 3, 2)  # (nx, ny, nz) vs (z, y, x) storage
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 3)), (1, 1, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 3, 4)), (1, 0, 1))
    lab = LabelVolume(np.ones((2, 3, 4), dtype=np.int64), (1, 1, 1))
    assert lab.data.dtype == np.uint8


# -- metaimage io -------------------------------------------------------------


def test_metaimage_roundtrip_short(tmp_path):
    rng = np.random.default_rng(0)
    hu = np.rint(rng.uniform(-1000, 1000, (3, 4, 5))).astype(np.float32)
    vol = Volume(hu, (0.7, 0.8, 2.5))
    write_metaimage(vol, tmp_path / "v.mhd", element_type="MET_SHORT")
    back = read_metaimage(tmp_path / "v.mhd")
    assert isinstance(back, Volume)
    assert np.array_equal(back.data, hu)
    assert back.spacing == vol.spacing


def test_metaimage_roundtrip_float(tmp_path):
    rng = np.random.default_rng(1)
    vol = Volume(rng.standard_normal((2, 3, 4)).astype(np.float32), (1, 1, 1))
    write_metaimage(vol, tmp_path / "v.mhd")  # MET_FLOAT default
    back = read_metaimage(tmp_path / "v.mhd")
    assert isinstance(back, Volume)
    assert np.array_equal(back.data, vol.data)


def test_metaimage_roundtrip_uchar(tmp_path):
    lab = LabelVolume(np.arange(24, dtype=np.uint8).reshape(2, 3, 4) % 3, (1, 1, 2))
    write_metaimage(lab, tmp_path / "l.mhd")
    back = read_metaimage(tmp_path / "l.mhd")
    assert isinstance(back, LabelVolume)
    assert np.array_equal(back.data, lab.data)
    with pytest.raises(ValueError):
        write_metaimage(lab, tmp_path / "l2.mhd", element_type="MET_SHORT")


def test_metaimage_data_is_x_fastest(tmp_path):
    # element (x=1, y=0, z=0) must be the second value in the raw stream
    data = np.zeros((2, 2, 2), dtype=np.float32)
    data[0, 0, 1] = 7.0
    write_metaimage(Volume(data, (1, 1, 1)), tmp_path / "v.mhd")
    raw = np.fromfile(tmp_path / "v.raw", dtype="<f4")
    assert raw[1] == 7.0 and raw[0] == 0.0


def _write_header(tmp_path, text, raw_elems=8, dtype="<i2"):
    (tmp_path / "h.mhd").write_text(text)
    np.zeros(raw_elems, dtype=dtype).tofile(tmp_path / "h.raw")
    return tmp_path / "h.mhd"


def test_metaimage_header_errors_quote_offending_line(tmp_path):
    good = (
        "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\n"
        "ElementSpacing = 1 1 1\nElementType = MET_SHORT\n"
        "ElementDataFile = h.raw\n"
    )

    p = _write_header(tmp_path, good.replace("NDims = 3", "NDims = 2"))
    with pytest.raises(ValueError, match="NDims = 2"):
        read_metaimage(p)

    p = _write_header(tmp_path, good.replace("MET_SHORT", "MET_DOUBLE"))
    with pytest.raises(ValueError, match="MET_DOUBLE"):
        read_metaimage(p)

    p = _write_header(tmp_path, good + "ElementByteOrderMSB = True\n")
    # MSB line appears after ElementDataFile, so parsing stops before it;
    # put it before to exercise the check
    p = _write_header(
        tmp_path, good.replace("ElementType", "ElementByteOrderMSB = True\nElementType"))
    with pytest.raises(ValueError, match="big-endian"):
        read_metaimage(p)

    p = _write_header(tmp_path, good.replace("ObjectType = Image", "ObjectType = Mesh"))
    with pytest.raises(ValueError, match="Mesh"):
        read_metaimage(p)

    p = _write_header(tmp_path, "NDims = 3\njunk line\n")
    with pytest.raises(ValueError, match="junk line"):
        read_metaimage(p)

    p = _write_header(tmp_path, good.replace("DimSize = 2 2 2\n", ""))
    with pytest.raises(ValueError, match="DimSize"):
        read_metaimage(p)

    p = _write_header(tmp_path, good.replace("DimSize = 2 2 2", "DimSize = a b c"))
    with pytest.raises(ValueError, match="a b c"):
        read_metaimage(p)

    p = _write_header(tmp_path, good, raw_elems=7)
    with pytest.raises(ValueError, match="7 elements"):
        read_metaimage(p)


def test_write_requires_mhd_suffix(tmp_path):
    with pytest.raises(ValueError):
        write_metaimage(Volume(np.zeros((1, 1, 1), np.float32), (1, 1, 1)),
                        tmp_path / "v.raw")


# -- intensity ----------------------------------------------------------------


def test_clamp_and_normalize():
    v = Volume(np.array([[[-1000.0, -100.0, 0.0, 400.0, 2000.0]]], dtype=np.float32),
               (1, 1, 1))
    c = clamp_hu(v)
    assert np.array_equal(c.data.ravel(), [-100, -100, 0, 400, 400])
    n = normalize_intensity(c)
    assert np.allclose(n.data.ravel(), [0.0, 0.0, 0.2, 1.0, 1.0])
    assert HU_WINDOW == (-100.0, 400.0)


# -- z resampling -------------------------------------------------------------


def test_resample_z_identity_is_exact_copy():
    rng = np.random.default_rng(2)
    v = _vol(rng, spacing=(1.0, 1.0, 3.0))
    out = resample_z(v, 3.0)
    assert np.array_equal(out.data, v.data)
    assert out.data is not v.data  # a copy, not a view
    assert out.spacing == v.spacing


def test_resample_z_downsample_slice_count_and_centers():
    # 10 slices at 1 mm -> 2 mm: new nz = round(10 * 1 / 2) = 5, and each
    # output slice sits halfway between its two source slices
    data = np.arange(10, dtype=np.float32)[:, None, None] * np.ones((1, 2, 2), np.float32)
    v = Volume(data, (1.0, 1.0, 1.0))
    out = resample_z(v, 2.0)
    assert out.data.shape == (5, 2, 2)
    assert out.spacing == (1.0, 1.0, 2.0)
    # slab centers at z = 1, 3, 5, 7, 9 mm -> source positions 0.5, 2.5, ...
    assert np.allclose(out.data[:, 0, 0], [0.5, 2.5, 4.5, 6.5, 8.5])


def test_resample_z_upsample_and_single_slice_floor():
    data = np.arange(4, dtype=np.float32)[:, None, None] * np.ones((1, 1, 1), np.float32)
    v = Volume(data, (1.0, 1.0, 2.0))
    out = resample_z(v, 1.0)
    assert out.data.shape[0] == 8
    tiny = Volume(np.ones((2, 2, 2), np.float32), (1, 1, 1))
    out = resample_z(tiny, 100.0)
    assert out.data.shape[0] == 1  # floor of one slice


def test_resample_z_labels_nearest_only():
    lab = LabelVolume((np.arange(6) % 2).astype(np.uint8)[:, None, None]
                      * np.ones((1, 2, 2), np.uint8), (1, 1, 1))
    out = resample_z(lab, 2.0)
    assert isinstance(out, LabelVolume)
    assert set(np.unique(out.data)) <= {0, 1}  # no invented labels
    with pytest.raises(ValueError):
        resample_z(lab, 2.0, method="linear")
    with pytest.raises(ValueError):
        resample_z(lab, -1.0)


def test_resample_z_then_back_recovers_smooth_field():
    # a linear ramp along z survives down-and-up resampling away from edges
    nz = 32
    data = np.linspace(0, 1, nz, dtype=np.float32)[:, None, None] * np.ones((1, 3, 3), np.float32)
    v = Volume(data, (1.0, 1.0, 1.0))
    down = resample_z(v, 2.0)
    up = resample_z(down, 1.0)
    assert up.data.shape[0] == nz
    mid = slice(4, nz - 4)
    assert np.allclose(up.data[mid], v.data[mid], atol=1e-6)


# -- axial resizing -----------------------------------------------------------


def test_resize_axial_mean_pool_is_exact_block_average():
    rng = np.random.default_rng(3)
    data = rng.uniform(0, 1, (2, 8, 8)).astype(np.float32)
    v = Volume(data, (1.0, 1.0, 1.0))
    out = resize_axial(v, 4)
    want = data.reshape(2, 4, 2, 4, 2).mean(axis=(2, 4))
    assert np.allclose(out.data, want, atol=1e-7)
    assert out.spacing == (2.0, 2.0, 1.0)
    # global mean is preserved exactly by block averaging
    assert np.isclose(out.data.mean(), data.mean(), atol=1e-6)


def test_resize_axial_512_to_128_uses_pooling():
    v = Volume(np.ones((1, 512, 512), np.float32) * 3.5, (0.75, 0.75, 1.0))
    out = resize_axial(v, 128)
    assert out.data.shape == (1, 128, 128)
    assert np.allclose(out.data, 3.5)
    assert out.spacing == (3.0, 3.0, 1.0)


def test_resize_axial_bilinear_for_non_integer_ratio():
    # constant field stays constant under bilinear interpolation
    v = Volume(np.full((1, 6, 10), 2.0, np.float32), (1.0, 1.0, 1.0))
    out = resize_axial(v, 4)
    assert out.data.shape == (1, 4, 4)
    assert np.allclose(out.data, 2.0)
    assert out.spacing == (2.5, 1.5, 1.0)


def test_resize_axial_upsample_preserves_range():
    rng = np.random.default_rng(4)
    v = Volume(rng.uniform(0, 1, (2, 4, 4)).astype(np.float32), (1, 1, 1))
    out = resize_axial(v, 8)
    assert out.data.shape == (2, 8, 8)
    assert out.data.min() >= v.data.min() - 1e-6
    assert out.data.max() <= v.data.max() + 1e-6


def test_resize_axial_labels_nearest():
    lab = LabelVolume(np.array([[[0, 1], [2, 3]]], dtype=np.uint8), (1, 1, 1))
    out = resize_axial(lab, 4)
    assert isinstance(out, LabelVolume)
    assert set(np.unique(out.data)) == {0, 1, 2, 3}  # only original labels
    assert np.array_equal(out.data[0, :2, :2], np.zeros((2, 2)))


def test_resize_axial_identity_and_validation():
    v = Volume(np.ones((1, 4, 4), np.float32), (1, 1, 1))
    out = resize_axial(v, 4)
    assert np.array_equal(out.data, v.data) and out.data is not v.data
    with pytest.raises(ValueError):
        resize_axial(v, 0)
    with pytest.raises(ValueError):
        resize_axial(v, 2, method="mean-pool-ish")
    with pytest.raises(ValueError):
        resize_axial(Volume(np.ones((1, 4, 6), np.float32), (1, 1, 1)), 2,
                     method="mean-pool")  # not square


# -- slab stacking ------------------------------------------------------------


def test_stack_slices_contexts_and_edges():
    data = np.arange(4, dtype=np.float32)[:, None, None] * np.ones((1, 2, 3), np.float32)
    v = Volume(data, (1, 1, 1))
    mid = stack_slices(v, 2)
    assert mid.shape == (3, 2, 3)
    assert np.allclose(mid[:, 0, 0], [1, 2, 3])
    first = stack_slices(v, 0)  # bottom edge replicates slice 0
    assert np.allclose(first[:, 0, 0], [0, 0, 1])
    last = stack_slices(v, 3)  # top edge replicates slice 3
    assert np.allclose(last[:, 0, 0], [2, 3, 3])
    with pytest.raises(ValueError):
        stack_slices(v, 4)
    with pytest.raises(ValueError):
        stack_slices(v, -1)


# -- grid resampling ----------------------------------------------------------


def test_resample_to_grid_identity():
    rng = np.random.default_rng(5)
    data = rng.uniform(0, 1, (3, 4, 5)).astype(np.float32)
    out = resample_to_grid(data, (1, 1, 2), (3, 4, 5), (1, 1, 2))
    assert np.array_equal(out, data)


def test_resample_to_grid_constant_and_ramp():
    const = np.full((4, 4, 4), 0.7, dtype=np.float32)
    out = resample_to_grid(const, (2, 2, 2), (8, 8, 8), (1, 1, 1))
    assert out.shape == (8, 8, 8)
    assert np.allclose(out, 0.7, atol=1e-6)

    # linear ramp in x is preserved away from the border when halving spacing
    ramp = np.tile(np.arange(8, dtype=np.float32), (4, 4, 1))
    out = resample_to_grid(ramp, (2.0, 1.0, 1.0), (4, 4, 16), (1.0, 1.0, 1.0))
    interior = out[:, :, 2:-2]
    # positions x_j = ((j + 0.5) * 1.0) / 2.0 - 0.5 vs source values = index
    want = ((np.arange(16) + 0.5) / 2.0 - 0.5)[2:-2].astype(np.float32)
    assert np.allclose(interior, np.broadcast_to(want, interior.shape), atol=1e-5)


def test_resample_to_grid_probability_mass_roundtrip():
    # resampling a smooth probability field down and back keeps values in
    # [0, 1] and close to the original in the interior
    rng = np.random.default_rng(6)
    z = np.linspace(0, np.pi, 12)[:, None, None]
    y = np.linspace(0, np.pi, 16)[None, :, None]
    x = np.linspace(0, np.pi, 16)[None, None, :]
    probs = (np.sin(z) * np.sin(y) * np.sin(x)).astype(np.float32)
    down = resample_to_grid(probs, (1, 1, 1), (6, 8, 8), (2, 2, 2))
    back = resample_to_grid(down, (2, 2, 2), (12, 16, 16), (1, 1, 1))
    assert back.min() >= -1e-6 and back.max() <= 1.0 + 1e-6
    assert np.abs(back[3:-3, 4:-4, 4:-4] - probs[3:-3, 4:-4, 4:-4]).max() < 0.12
