import math
import os
import tempfile

import ncrough as nc


def test_moments():
    assert [nc.catalan(p) for p in range(6)] == [1, 1, 2, 5, 14, 42]
    assert nc.crossing_polynomial(4) == [2, 1]
    # E[X^4] for q = 1/2 is 2 + q
    assert abs(nc.q_moment([1, 1, 1, 1], 0.5) - 2.5) < 1e-12
    assert abs(nc.density_moment(0.5, 4) - 2.5) < 1e-8


def test_matrix_and_tensor():
    x = nc.Matrix([[1, 2j], [-2j, 3]])
    assert x.dim == 2
    assert abs(x.trace() - 2) < 1e-15
    assert x.self_adjoint_defect() < 1e-15
    y = x @ x - 2 * x
    assert abs(y[0, 0] - 3) < 1e-12
    u = nc.Tensor([(x, nc.Matrix.identity(2))])
    assert u.sharp(nc.Matrix.identity(2)).max_abs_diff(x) < 1e-15
    sq = nc.apply_function([0, 0, 1], x)
    assert sq.max_abs_diff(x @ x) < 1e-12


def test_path_area_and_solver():
    p = nc.Path.simulate(8, 256, seed=7)
    assert len(p) == 257 and p.seed == 7
    with tempfile.TemporaryDirectory() as d:
        f = os.path.join(d, "p.ncrp")
        p.save(f)
        q = nc.Path.load(f)
        assert q.value(256).max_abs_diff(p.value(256)) == 0.0
    area = nc.Area(p, "stratonovich")
    coarse = list(range(0, 257, 16))
    a = nc.Matrix.gue(8, 0.5, seed=7)
    sol = nc.solve(a, [[0, 1], [1]], area, coarse)
    assert len(sol.path) == len(coarse)
    assert sol.self_adjoint_defect() < 1e-10
    # f = g = 1 gives Y = Y0 + X
    flat = nc.solve(a, [[1]], area, coarse)
    for k, i in enumerate(coarse):
        assert flat.path.value(k).max_abs_diff(a + p.value(i)) < 1e-12
    r = nc.ito_formula([0, 1], p, coarse)
    assert r["strat"] < 1e-10 and r["ito"] < 1e-10


def test_errors():
    for bad in (lambda: nc.q_moment([1, 1], 1.5), lambda: nc.Area(nc.Path.simulate(2, 4), "nope")):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")
    assert math.isnan(nc.Matrix([[float("nan")]]).op_norm())


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_"):
            fn()
    print("ok")
