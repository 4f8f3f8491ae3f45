import numpy as np
import pytest

from tpbs.model import (
    DimensionError,
    ScalerParams,
    TpbsModel,
    factor_norms,
    forward,
    forward_batch,
    init_model,
)
from tpbs.oracles import dense_forward, quadrature_factor_norm
from tpbs.serialize import (
    BadMagicError,
    BadVersionError,
    DimensionMismatchError,
    TruncatedFileError,
    load_model,
    save_model,
)
from tpbs.splines import build_space


def linear_factor_model():
    """N=1, R=1, g(x) = x via the hat basis, v = 2."""
    space = build_space(2, 1)
    return TpbsModel(
        spaces=[space], coeffs=[np.array([[0.0, 1.0]])], out_vectors=np.array([[2.0]])
    )


class TestInit:
    def test_deterministic_under_seed(self):
        a = init_model(3, 2, 1, build_space(5, 2), seed=7)
        b = init_model(3, 2, 1, build_space(5, 2), seed=7)
        for ca, cb in zip(a.coeffs, b.coeffs):
            np.testing.assert_array_equal(ca, cb)
        np.testing.assert_array_equal(a.out_vectors, b.out_vectors)

    def test_zero_scale_gives_constant_factors(self):
        m = init_model(3, 2, 1, build_space(5, 2), seed=0, init_scale=0.0)
        for c in m.coeffs:
            np.testing.assert_array_equal(c, np.ones_like(c))
        rng = np.random.default_rng(1)
        expected = m.out_vectors.sum(axis=0)
        for x in rng.uniform(size=(10, 3)):
            np.testing.assert_allclose(forward(m, x), expected, atol=1e-12)

    def test_parameter_count(self):
        m = init_model(3, 2, 1, build_space(5, 3), seed=0)
        assert m.num_params == 3 * 2 * 5 + 2

    def test_rejects_bad_shapes(self):
        space = build_space(4, 1)
        with pytest.raises(DimensionError):
            TpbsModel(
                spaces=[space],
                coeffs=[np.ones((2, 5))],
                out_vectors=np.ones((2, 1)),
            )
        with pytest.raises(ValueError, match="non-finite"):
            TpbsModel(
                spaces=[space],
                coeffs=[np.array([[np.nan, 0, 0, 0], [0, 0, 0, 0.0]])],
                out_vectors=np.ones((2, 1)),
            )


class TestForward:
    def test_constant_model(self):
        space = build_space(4, 2)
        m = TpbsModel(
            spaces=[space, space],
            coeffs=[np.ones((1, 4)), np.ones((1, 4))],
            out_vectors=np.array([[2.0, -3.0]]),
        )
        rng = np.random.default_rng(0)
        for x in rng.uniform(size=(20, 2)):
            np.testing.assert_allclose(forward(m, x), [2.0, -3.0], atol=1e-12)

    def test_linear_factor(self):
        m = linear_factor_model()
        np.testing.assert_allclose(forward(m, [0.25]), [0.5], atol=1e-15)

    def test_matches_dense_oracle(self):
        m = init_model(2, 2, 1, build_space(6, 3), seed=3, init_scale=0.5)
        rng = np.random.default_rng(5)
        for x in rng.uniform(size=(40, 2)):
            np.testing.assert_allclose(
                forward(m, x), dense_forward(m, x), atol=1e-12, rtol=1e-12
            )

    def test_batch_matches_single(self):
        m = init_model(3, 4, 2, build_space(7, 2), seed=9, init_scale=0.4)
        rng = np.random.default_rng(6)
        points = rng.uniform(size=(15, 3))
        batch = forward_batch(m, points)
        for i, x in enumerate(points):
            np.testing.assert_allclose(batch[i], forward(m, x), atol=1e-12)

    def test_rejects_out_of_domain_and_wrong_dims(self):
        m = linear_factor_model()
        with pytest.raises(ValueError, match="outside"):
            forward(m, [1.25])
        with pytest.raises(DimensionError):
            forward(m, [0.5, 0.5])

    def test_multilinearity_in_one_factor_block(self):
        base = init_model(2, 3, 1, build_space(5, 2), seed=11, init_scale=0.5)
        other = init_model(2, 3, 1, build_space(5, 2), seed=12, init_scale=0.5)
        alpha, beta = 0.7, -1.3
        mixed = base.copy()
        mixed.coeffs[0] = alpha * base.coeffs[0] + beta * other.coeffs[0]
        ma = base.copy()
        mb = base.copy()
        mb.coeffs[0] = other.coeffs[0]
        rng = np.random.default_rng(13)
        for x in rng.uniform(size=(25, 2)):
            want = alpha * forward(ma, x) + beta * forward(mb, x)
            np.testing.assert_allclose(forward(mixed, x), want, atol=1e-10)

    def test_output_scaling_is_exact(self):
        m = init_model(2, 2, 2, build_space(5, 2), seed=4, init_scale=0.3)
        scaled = m.copy()
        scaled.out_vectors = 2.0 * m.out_vectors
        x = np.array([0.3, 0.8])
        np.testing.assert_array_equal(forward(scaled, x), 2.0 * forward(m, x))
        np.testing.assert_array_equal(factor_norms(scaled), 2.0 * factor_norms(m))


class TestFactorNorms:
    def test_constant_half_factors(self):
        for ndim in (1, 2, 5):
            space = build_space(6, 3)
            m = TpbsModel(
                spaces=[space] * ndim,
                coeffs=[np.full((1, 6), 0.5)] * ndim,
                out_vectors=np.array([[1.0]]),
            )
            np.testing.assert_allclose(
                factor_norms(m), [0.5**ndim], rtol=1e-13, atol=0
            )

    def test_zero_output_vector(self):
        m = init_model(2, 2, 1, build_space(5, 2), seed=1)
        m.out_vectors[1] = 0.0
        assert factor_norms(m)[1] == 0.0

    def test_matches_quadrature_oracle(self):
        m = init_model(2, 3, 1, build_space(6, 3), seed=21, init_scale=0.5)
        v_norms = np.linalg.norm(m.out_vectors, axis=1)
        want = v_norms.copy()
        for n in range(2):
            want *= [quadrature_factor_norm(m, n, r) for r in range(3)]
        np.testing.assert_allclose(factor_norms(m), want, rtol=1e-10)


class TestScaler:
    def test_round_trip(self):
        scaler = ScalerParams(mins=np.array([2.0, -1.0]), maxs=np.array([4.0, 1.0]))
        raw = np.array([[3.0, 0.0], [2.0, -1.0], [4.0, 1.0]])
        scaled = scaler.transform(raw)
        np.testing.assert_allclose(scaled, [[0.5, 0.5], [0, 0], [1, 1]], atol=1e-15)
        np.testing.assert_allclose(scaler.inverse(scaled), raw, atol=1e-12)

    def test_clamps(self):
        scaler = ScalerParams(mins=np.array([2.0]), maxs=np.array([4.0]))
        assert scaler.transform(np.array([5.0]))[0] == 1.0
        assert scaler.transform(np.array([0.0]))[0] == 0.0

    def test_rejects_degenerate_range(self):
        with pytest.raises(ValueError):
            ScalerParams(mins=np.array([1.0]), maxs=np.array([1.0]))


class TestSerialization:
    def test_round_trip_binary_and_text(self, tmp_path):
        m = init_model(3, 2, 2, build_space(6, 3), seed=17, init_scale=0.4)
        m.scaler = ScalerParams(mins=np.zeros(3), maxs=np.ones(3) * 2)
        rng = np.random.default_rng(8)
        probes = rng.uniform(size=(100, 3))
        want = forward_batch(m, probes)
        for text in (False, True):
            path = tmp_path / ("m.txt" if text else "m.tpbs")
            save_model(m, path, text=text)
            loaded = load_model(path)
            got = forward_batch(loaded, probes)
            np.testing.assert_array_equal(got, want)  # bit-exact
            np.testing.assert_array_equal(loaded.scaler.mins, m.scaler.mins)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.tpbs"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(BadMagicError):
            load_model(path)

    def test_bad_version(self, tmp_path):
        m = init_model(1, 1, 1, build_space(3, 1), seed=0)
        path = tmp_path / "m.tpbs"
        save_model(m, path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(BadVersionError):
            load_model(path)

    def test_truncated(self, tmp_path):
        m = init_model(2, 2, 1, build_space(5, 2), seed=0)
        path = tmp_path / "m.tpbs"
        save_model(m, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(TruncatedFileError):
            load_model(path)

    def test_dimension_error_on_eval(self, tmp_path):
        m = init_model(3, 2, 1, build_space(5, 2), seed=0)
        path = tmp_path / "m.tpbs"
        save_model(m, path)
        loaded = load_model(path)
        with pytest.raises(DimensionError):
            forward(loaded, [0.5, 0.5])

    def test_inconsistent_header(self, tmp_path):
        m = init_model(1, 1, 1, build_space(4, 1), seed=0)
        path = tmp_path / "m.tpbs"
        save_model(m, path)
        blob = bytearray(path.read_bytes())
        # corrupt the knot count field (header: magic,u32 version,N,R,M,deg,count)
        blob[8 + 4 * 4] = 1
        path.write_bytes(bytes(blob))
        with pytest.raises((DimensionMismatchError, TruncatedFileError)):
            load_model(path)
