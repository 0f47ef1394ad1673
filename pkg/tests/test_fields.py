import numpy as np
import pytest

from driftscope.errors import DataError, GeometryError
from driftscope.fields import (
    BOUNDARY_ADJACENT,
    DiffusionField,
    DiscDomain,
    EXTERIOR,
    Grid,
    INTERIOR,
    RectangleDomain,
    ScalarField,
    VectorField,
    gradient,
    interp,
    laplacian,
    mixed_derivative,
    potential_from_psi,
    read_dgf,
    sample_scalar,
    write_dgf,
)


def grid_square(n, half=2.0):
    return Grid.from_extent(-half, -half, half, half, n, n)


class TestSampling:
    def test_zero_function(self):
        f = sample_scalar(lambda x, y: 0.0 * x, grid_square(9))
        assert np.all(f.values == 0.0)

    def test_coordinate_function(self):
        g = Grid(0.0, 0.0, 1.0, 1.0, 3, 3)
        f = sample_scalar(lambda x, y: x, g)
        assert np.array_equal(f.values[:, 0], [0.0, 1.0, 2.0])
        assert np.array_equal(f.values[:, 2], [0.0, 1.0, 2.0])

    def test_gaussian_values(self):
        f = sample_scalar(lambda x, y: np.exp(-(x**2 + y**2)), grid_square(65))
        assert f.values[32, 32] == 1.0
        assert f.values[0, 0] == pytest.approx(np.exp(-8.0), rel=1e-14)

    def test_non_finite_rejected(self):
        with pytest.raises(DataError, match="node"):
            sample_scalar(lambda x, y: 1.0 / (x - 2.0), grid_square(5))


class TestInterp:
    def test_node_exactness(self):
        g = grid_square(17)
        rng = np.random.default_rng(0)
        f = ScalarField(g, rng.standard_normal(g.shape))
        pts = g.node_points()
        assert np.array_equal(interp(f, pts), f.values.ravel())

    def test_affine_exact(self):
        g = grid_square(9)
        f = sample_scalar(lambda x, y: 2 * x + 3 * y, g)
        rng = np.random.default_rng(1)
        pts = rng.uniform(-2, 2, size=(100, 2))
        expected = 2 * pts[:, 0] + 3 * pts[:, 1]
        assert interp(f, pts) == pytest.approx(expected, abs=1e-13)

    def test_bilinear_cell_center(self):
        # unit cell with f = x*y: corners 0, 0, 0, 1 so the center is 1/4
        g = Grid(0.0, 0.0, 1.0, 1.0, 2, 2)
        f = sample_scalar(lambda x, y: x * y, g)
        assert interp(f, np.array([0.5, 0.5])) == pytest.approx(0.25, abs=1e-15)

    def test_out_of_bounds(self):
        f = sample_scalar(lambda x, y: x, grid_square(5))
        with pytest.raises(GeometryError, match="outside"):
            interp(f, np.array([2.5, 0.0]))

    def test_zero_extension(self):
        f = sample_scalar(lambda x, y: x + 1.0, grid_square(5))
        out = interp(f, np.array([[2.5, 0.0], [0.0, 0.0]]), mode="zero")
        assert out[0] == 0.0 and out[1] == 1.0


class TestDerivatives:
    def test_gradient_constant(self):
        f = sample_scalar(lambda x, y: 0 * x + 3.7, grid_square(9))
        assert np.abs(gradient(f).values).max() == 0.0

    def test_gradient_quadratic_interior(self):
        g = grid_square(33)
        f = sample_scalar(lambda x, y: x**2 + y**2, g)
        gv = gradient(f).values
        X, Y = g.nodes()
        err = np.abs(gv[1:-1, 1:-1, 0] - 2 * X[1:-1, 1:-1]).max()
        assert err < 1e-12
        err = np.abs(gv[1:-1, 1:-1, 1] - 2 * Y[1:-1, 1:-1]).max()
        assert err < 1e-12

    def test_gradient_sine_taylor_bound(self):
        g = grid_square(65)
        f = sample_scalar(lambda x, y: np.sin(x), g)
        gv = gradient(f).values[1:-1, 1:-1, 0]
        X, _ = g.nodes()
        err = np.abs(gv - np.cos(X[1:-1, 1:-1])).max()
        # central-difference remainder: h^2/6 * max|f'''|, f''' = -cos
        assert err <= g.dx**2 / 6 * 1.0000001

    def test_laplacian_quadratic(self):
        f = sample_scalar(lambda x, y: x**2 + y**2, grid_square(17))
        lap = laplacian(f).values
        assert np.abs(lap[1:-1, 1:-1] - 4.0).max() < 1e-11

    def test_laplacian_affine(self):
        f = sample_scalar(lambda x, y: 1.5 * x - 2.5 * y + 1, grid_square(17))
        assert np.abs(laplacian(f).values[1:-1, 1:-1]).max() < 1e-12

    def test_laplacian_product_sine(self):
        g = grid_square(129)
        f = sample_scalar(lambda x, y: np.sin(x) * np.sin(y), g)
        X, Y = g.nodes()
        expected = -2 * np.sin(X) * np.sin(Y)
        err = np.abs(laplacian(f).values[1:-1, 1:-1] - expected[1:-1, 1:-1]).max()
        assert err <= 2.0 / 6.0 * g.dx**2  # h^2/6 per axis, two axes

    def test_linearity(self):
        g = grid_square(17)
        rng = np.random.default_rng(2)
        f1 = ScalarField(g, rng.standard_normal(g.shape))
        f2 = ScalarField(g, rng.standard_normal(g.shape))
        al, be = 1.3, -0.7
        comb = ScalarField(g, al * f1.values + be * f2.values)
        for op in (lambda f: gradient(f).values, lambda f: laplacian(f).values):
            lhs = op(comb)
            rhs = al * op(f1) + be * op(f2)
            assert np.abs(lhs - rhs).max() < 1e-12

    @pytest.mark.parametrize("op", ["gradient", "laplacian"])
    def test_second_order_convergence(self, op):
        def err(n):
            g = grid_square(n, half=1.0)
            f = sample_scalar(lambda x, y: np.sin(1.3 * x) * np.cos(0.7 * y), g)
            X, Y = g.nodes()
            if op == "gradient":
                got = gradient(f).values[1:-1, 1:-1, 0]
                want = 1.3 * np.cos(1.3 * X) * np.cos(0.7 * Y)
            else:
                got = laplacian(f).values[1:-1, 1:-1]
                want = -(1.3**2 + 0.7**2) * np.sin(1.3 * X) * np.cos(0.7 * Y)
            return np.abs(got - want[1:-1, 1:-1]).max()

        ratio = err(33) / err(65)
        assert 3.5 <= ratio <= 4.5


class TestPotential:
    def test_zero_psi(self):
        g = grid_square(17)
        psi = ScalarField(g, np.zeros(g.shape))
        a = DiffusionField.constant(g, 2.0, 0.4, 1.5)
        rng = np.random.default_rng(3)
        b = VectorField(g, rng.standard_normal((*g.shape, 2)))
        assert np.all(potential_from_psi(psi, a, b).values == 0.0)

    def test_quadratic_psi_identity_diffusion(self):
        g = grid_square(33)
        psi = sample_scalar(lambda x, y: -(x**2 + y**2) / 2, g)
        a = DiffusionField.identity(g)
        b = VectorField(g, np.zeros((*g.shape, 2)))
        V = potential_from_psi(psi, a, b).values
        X, Y = g.nodes()
        expected = (X**2 + Y**2 - 2) / 2
        assert np.abs(V[1:-1, 1:-1] - expected[1:-1, 1:-1]).max() < 1e-12

    def test_gaussian_psi_symbolic_oracle(self):
        al, sig = 0.8, 1.1

        def psi_fn(x, y):
            return al * np.exp(-(x**2 + y**2) / sig**2)

        def v_exact(x, y):
            r2 = x**2 + y**2
            e = np.exp(-r2 / sig**2)
            lap = al * e * (4 * r2 / sig**4 - 4 / sig**2)
            grad2 = (2 * al / sig**2) ** 2 * r2 * e**2
            return 0.5 * (lap + grad2)

        def err(n):
            g = grid_square(n)
            psi = sample_scalar(psi_fn, g)
            a = DiffusionField.identity(g)
            b = VectorField(g, np.zeros((*g.shape, 2)))
            V = potential_from_psi(psi, a, b).values
            X, Y = g.nodes()
            return np.abs(V[1:-1, 1:-1] - v_exact(X, Y)[1:-1, 1:-1]).max()

        assert 3.2 <= err(65) / err(129) <= 4.8

    def test_matches_half_lap_plus_gradsq(self):
        g = grid_square(33)
        rng = np.random.default_rng(4)
        psi = ScalarField(g, rng.standard_normal(g.shape))
        a = DiffusionField.identity(g)
        b = VectorField(g, np.zeros((*g.shape, 2)))
        V = potential_from_psi(psi, a, b).values
        ref = 0.5 * (laplacian(psi).values + np.sum(gradient(psi).values**2, axis=-1))
        scale = np.abs(ref).max()
        assert np.abs(V - ref).max() <= 1e-14 * scale

    def test_general_coefficients_oracle(self):
        A11, A12, A22 = 2.0, 0.5, 1.3
        B1, B2 = 0.4, -0.6
        al, be = 0.9, -0.5

        def psi_fn(x, y):
            return np.sin(al * x) * np.cos(be * y)

        def v_exact(x, y):
            s, c = np.sin(al * x), np.cos(al * x)
            sy, cy = np.sin(be * y), np.cos(be * y)
            px, py = al * c * cy, -be * s * sy
            pxx, pyy, pxy = -(al**2) * s * cy, -(be**2) * s * cy, -al * be * c * sy
            quad = A11 * px**2 + 2 * A12 * px * py + A22 * py**2
            return 0.5 * (A11 * pxx + 2 * A12 * pxy + A22 * pyy) + B1 * px + B2 * py + 0.5 * quad

        def err(n):
            g = grid_square(n)
            psi = sample_scalar(psi_fn, g)
            a = DiffusionField.constant(g, A11, A12, A22)
            b = VectorField(g, np.tile([B1, B2], (*g.shape, 1)))
            V = potential_from_psi(psi, a, b).values
            X, Y = g.nodes()
            return np.abs(V[1:-1, 1:-1] - v_exact(X, Y)[1:-1, 1:-1]).max()

        assert 3.2 <= err(65) / err(129) <= 4.8

    def test_grid_mismatch(self):
        psi = ScalarField(grid_square(9), np.zeros((9, 9)))
        a = DiffusionField.identity(grid_square(17))
        b = VectorField(grid_square(17), np.zeros((17, 17, 2)))
        with pytest.raises(DataError, match="grid"):
            potential_from_psi(psi, a, b)


class TestDiffusionField:
    def test_spd_validation(self):
        g = grid_square(5)
        with pytest.raises(DataError, match="SPD"):
            DiffusionField.constant(g, 1.0, 2.0, 1.0)  # det < 0

    def test_delta_is_min_eigenvalue(self):
        g = grid_square(5)
        a = DiffusionField.constant(g, 2.0, 0.5, 1.0)
        lam = min(np.linalg.eigvalsh(np.array([[2.0, 0.5], [0.5, 1.0]])))
        assert a.delta == pytest.approx(lam, rel=1e-12)

    def test_immutability(self):
        a = DiffusionField.identity(grid_square(5))
        with pytest.raises(ValueError):
            a.a11[0, 0] = 5.0


class TestDomains:
    def test_disc_classification(self):
        g = grid_square(33, half=1.2)
        dom = DiscDomain(g, 0.0, 0.0, 1.0)
        cls = dom.classify_nodes()
        X, Y = g.nodes()
        inside = X**2 + Y**2 < 1.0
        assert np.array_equal(cls != EXTERIOR, inside)
        assert np.count_nonzero(cls == BOUNDARY_ADJACENT) > 0
        assert np.count_nonzero(cls == INTERIOR) > np.count_nonzero(cls == BOUNDARY_ADJACENT)

    def test_domain_must_fit_in_grid(self):
        g = grid_square(17, half=1.0)
        with pytest.raises(GeometryError, match="strictly inside"):
            DiscDomain(g, 0.0, 0.0, 1.0)
        with pytest.raises(GeometryError, match="strictly inside"):
            RectangleDomain(g, -1.0, -0.5, 1.0, 0.5)

    def test_disc_chord_endpoints(self):
        g = grid_square(17, half=1.5)
        dom = DiscDomain(g, 0.0, 0.0, 1.0)
        omega = np.array([1.0, 0.0])
        ends = dom.chord_endpoints(omega, 0.5)
        assert ends is not None
        x, y = ends
        for p in (x, y):
            assert np.hypot(*p) == pytest.approx(1.0, abs=1e-12)
        assert np.hypot(*(y - x)) == pytest.approx(np.sqrt(3.0), abs=1e-12)
        assert dom.chord_endpoints(omega, 1.1) is None

    def test_boundary_crossing_disc(self):
        g = grid_square(17, half=1.5)
        dom = DiscDomain(g, 0.0, 0.0, 1.0)
        p, q = np.array([0.9, 0.0]), np.array([1.3, 0.0])
        cross, theta = dom.boundary_crossing(p, q)
        assert cross == pytest.approx([1.0, 0.0], abs=1e-12)
        assert theta == pytest.approx(0.25, abs=1e-12)

    def test_rectangle_param_roundtrip(self):
        g = grid_square(17, half=3.0)
        dom = RectangleDomain(g, -1.0, -2.0, 1.0, 2.0)
        s = np.linspace(0, dom.param_length, 40, endpoint=False)
        pts = dom.boundary_point(s)
        s2 = dom.boundary_param(pts)
        assert s2 == pytest.approx(s, abs=1e-9)


class TestDgf:
    def test_roundtrip_bytes(self, tmp_path):
        g = Grid(-1.0, 0.5, 0.25, 0.125, 7, 9)
        rng = np.random.default_rng(7)
        f = ScalarField(g, rng.standard_normal((7, 9)))
        p1, p2 = tmp_path / "a.dgf", tmp_path / "b.dgf"
        write_dgf(p1, f)
        f2 = read_dgf(p1)
        assert f2.grid == g
        assert np.array_equal(f2.values, f.values)
        write_dgf(p2, f2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_layout(self, tmp_path):
        g = Grid(0.0, 0.0, 1.0, 1.0, 2, 3)
        f = ScalarField(g, np.arange(6.0).reshape(2, 3))
        path = tmp_path / "f.dgf"
        write_dgf(path, f)
        raw = path.read_bytes()
        assert raw[:4] == b"DGF1"
        assert np.frombuffer(raw[4:12], dtype="<u4").tolist() == [2, 3]
        # row-major values: node (i, j) at index i*ny + j
        vals = np.frombuffer(raw[44:], dtype="<f8")
        assert vals.tolist() == [0, 1, 2, 3, 4, 5]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dgf"
        path.write_bytes(b"NOPE" + b"\0" * 40)
        with pytest.raises(DataError, match="magic"):
            read_dgf(path)


def test_mixed_derivative_bilinear_exact():
    g = grid_square(17)
    f = sample_scalar(lambda x, y: 2.0 * x * y, g)
    pxy = mixed_derivative(f).values
    assert np.abs(pxy[1:-1, 1:-1] - 2.0).max() < 1e-12
    assert np.all(pxy[0, :] == 0.0)  # masked ring
