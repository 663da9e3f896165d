import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otpatch.core import (
    DegenerateNormalizationError,
    DegenerateTilingError,
    HeaderError,
    MetaData,
    NonFiniteVoxelError,
    PayloadSizeError,
    Volume,
    load_volume,
    make_patch_grid,
    normalize,
    offset_set,
    parse_volume,
    quantile_nearest_rank,
    save_volume,
)


def _blob(header, floats):
    return json.dumps(header).encode() + b"\n" + np.asarray(floats, dtype="<f4").tobytes()


class TestVol1:
    def test_parse_eight_voxels(self):
        v = parse_volume(_blob({"magic": "VOL1", "dims": [2, 2, 2], "q95": 1.0}, np.arange(8)))
        assert v.dims == (2, 2, 2)
        np.testing.assert_array_equal(v.voxels, np.arange(8, dtype=np.float32))
        assert v.norm_q95 == 1.0

    def test_payload_order_is_z_fastest(self):
        v = parse_volume(_blob({"magic": "VOL1", "dims": [2, 3, 4], "q95": 1.0}, np.arange(24)))
        assert v.data[0, 0, 1] == 1
        assert v.data[0, 1, 0] == 4
        assert v.data[1, 0, 0] == 12

    def test_round_trip_bit_identical(self, tmp_path, rng):
        v = Volume(rng.normal(size=(5, 3, 7)), norm_q95=2.5)
        save_volume(v, tmp_path / "a.vol")
        w = load_volume(tmp_path / "a.vol")
        assert w.dims == v.dims and w.norm_q95 == v.norm_q95
        assert w.data.tobytes() == v.data.tobytes()

    def test_size_mismatch(self):
        with pytest.raises(PayloadSizeError):
            parse_volume(_blob({"magic": "VOL1", "dims": [2, 2, 2], "q95": 1.0}, np.arange(7)))

    @pytest.mark.parametrize(
        "header",
        [
            {"magic": "VOL2", "dims": [1, 1, 1], "q95": 1.0},
            {"magic": "VOL1", "dims": [1, 1], "q95": 1.0},
            {"magic": "VOL1", "dims": [1, 0, 1], "q95": 1.0},
            {"magic": "VOL1", "dims": [1, 1, 1], "q95": -1.0},
            [1, 2, 3],
        ],
    )
    def test_bad_header(self, header):
        with pytest.raises(HeaderError):
            parse_volume(_blob(header, [0.0]))

    def test_garbage_header(self):
        with pytest.raises(HeaderError):
            parse_volume(b"not json\n\x00\x00\x00\x00")
        with pytest.raises(HeaderError):
            parse_volume(b"no newline at all")

    def test_non_finite(self):
        with pytest.raises(NonFiniteVoxelError):
            parse_volume(_blob({"magic": "VOL1", "dims": [1, 1, 2], "q95": 1.0}, [0.0, np.nan]))

    def test_errors_are_distinct(self):
        kinds = {HeaderError, PayloadSizeError, NonFiniteVoxelError}
        assert len(kinds) == 3

    @settings(max_examples=30, deadline=None)
    @given(
        dims=st.tuples(*[st.integers(1, 5)] * 3),
        seed=st.integers(0, 2**32 - 1),
        q=st.floats(1e-3, 1e3),
    )
    def test_round_trip_property(self, tmp_path_factory, dims, seed, q):
        data = np.random.default_rng(seed).normal(size=dims) * 100
        v = Volume(data, q)
        path = tmp_path_factory.mktemp("rt") / "v.vol"
        save_volume(v, path)
        w = load_volume(path)
        assert w.data.tobytes() == v.data.tobytes() and w.norm_q95 == v.norm_q95


class TestVolume:
    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteVoxelError):
            Volume(np.array([[[np.inf]]]))

    def test_immutable(self):
        v = Volume(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0

    def test_metadata(self):
        MetaData(0.33, 3.0)
        with pytest.raises(ValueError):
            MetaData(0.33, 2.0)
        with pytest.raises(ValueError):
            MetaData(1.5, 3.0)


class TestNormalize:
    def test_constant(self):
        v = normalize(Volume(np.full((3, 3, 3), 2.0)))
        np.testing.assert_array_equal(v.data, 1.0)
        assert v.norm_q95 == 2.0

    def test_idempotent(self, rng):
        once = normalize(Volume(rng.uniform(0, 5, (6, 6, 6))))
        twice = normalize(once)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-6)

    def test_q95_is_one_after(self, rng):
        v = normalize(Volume(rng.uniform(0, 5, (7, 6, 5))))
        assert abs(quantile_nearest_rank(v.data) - 1.0) <= 1e-6

    def test_linspace_quantile_against_sort_oracle(self):
        values = np.linspace(0, 10, 1000)
        oracle = sorted(values.tolist())[math.ceil(0.95 * 1000) - 1]
        assert quantile_nearest_rank(values) == oracle
        v = normalize(Volume(values.reshape(10, 10, 10)))
        assert v.norm_q95 == pytest.approx(float(np.float32(oracle)))

    def test_degenerate(self):
        with pytest.raises(DegenerateNormalizationError):
            normalize(Volume(np.zeros((2, 2, 2))))
        with pytest.raises(DegenerateNormalizationError):
            normalize(Volume(-np.ones((2, 2, 2))))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), a=st.floats(1e-2, 1e2))
    def test_scale_equivariant(self, seed, a):
        data = np.random.default_rng(seed).uniform(0.1, 3.0, (4, 4, 4))
        base = normalize(Volume(data))
        scaled = normalize(Volume(a * data))
        np.testing.assert_allclose(scaled.data, base.data, atol=1e-6)


def _enumerated_cover(dims, n, offset):
    # independent oracle: explicit loops over patches and in-patch positions
    nx, ny, nz = dims
    out = []
    for px in range(0, nx, n):
        for py in range(0, ny, n):
            for pz in range(0, nz, n):
                patch = []
                for dx in range(n):
                    for dy in range(n):
                        for dz in range(n):
                            x = (px + offset[0] + dx) % nx
                            y = (py + offset[1] + dy) % ny
                            z = (pz + offset[2] + dz) % nz
                            patch.append((x * ny + y) * nz + z)
                out.append(patch)
    return out


class TestPatchGrid:
    def test_single_patch(self):
        g = make_patch_grid((4, 4, 4), 4, (0, 0, 0))
        assert g.num_patches == 1
        assert sorted(g.indices[0].tolist()) == list(range(64))

    def test_single_patch_wrapped(self):
        g = make_patch_grid((4, 4, 4), 4, (2, 2, 2))
        assert g.num_patches == 1
        assert len(set(g.indices[0].tolist())) == 64
        assert g.indices[0, 0] == (2 * 4 + 2) * 4 + 2

    def test_two_patches_partition(self):
        g = make_patch_grid((8, 4, 4), 4)
        assert g.num_patches == 2
        assert g.indices.tolist() == _enumerated_cover((8, 4, 4), 4, (0, 0, 0))
        assert sorted(g.indices.ravel().tolist()) == list(range(128))

    def test_lexicographic_origins(self):
        g = make_patch_grid((8, 8, 4), 4)
        assert [tuple(o) for o in g.origins] == [(0, 0, 0), (0, 4, 0), (4, 0, 0), (4, 4, 0)]

    def test_offset_set(self):
        assert len(offset_set(4)) == 27
        assert len(offset_set(3)) == 27
        assert len(offset_set(2)) == 8
        assert offset_set(4)[0] == (0, 0, 0) and offset_set(4)[-1] == (2, 2, 2)

    def test_errors(self):
        with pytest.raises(DegenerateTilingError):
            make_patch_grid((4, 4, 3), 4)
        with pytest.raises(ValueError):
            make_patch_grid((4, 4, 4), 1)
        with pytest.raises(ValueError):
            make_patch_grid((8, 8, 8), 4, (3, 0, 0))

    def test_non_multiple_dims_wrap(self):
        g = make_patch_grid((6, 4, 4), 4)
        assert not g.is_partition
        assert set(g.indices.ravel().tolist()) == set(range(96))

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(2, 4),
        mult=st.tuples(*[st.integers(1, 3)] * 3),
        data=st.data(),
    )
    def test_partition_property(self, n, mult, data):
        dims = tuple(n * k for k in mult)
        hi = math.ceil(n / 2)
        offset = data.draw(st.tuples(*[st.integers(0, hi)] * 3))
        g = make_patch_grid(dims, n, offset)
        assert g.indices.shape[1] == n**3
        assert sorted(g.indices.ravel().tolist()) == list(range(int(np.prod(dims))))
        assert g.indices.tolist() == _enumerated_cover(dims, n, offset)
