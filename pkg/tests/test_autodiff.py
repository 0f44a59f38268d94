import numpy as np
import pytest

from gwae import autodiff as ad
from gwae.autodiff import (
    SpectralState,
    Tape,
    Tensor,
    check_gradient,
    spectral_normalize,
)
from gwae.errors import ContractError, DomainError, ShapeError


def grad_of(func, x_data):
    with Tape() as tape:
        x = Tensor(x_data, requires_grad=True)
        y = func(x)
        return tape.backward(y).of(x)


def test_square_backward_trivial():
    g = grad_of(lambda x: ad.square(x), np.array(3.0))
    assert float(g) == pytest.approx(6.0)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a0 = rng.standard_normal((3, 4))
    b = Tensor(rng.standard_normal((4, 2)))
    err = check_gradient(lambda a: ad.matmul(a, b).sum(), Tensor(a0), step=1e-4)
    assert err < 1e-6


def test_sum_gradient_is_ones():
    g = grad_of(lambda x: x.sum(), np.arange(5.0))
    np.testing.assert_array_equal(g, np.ones(5))


def test_two_layer_composition_matches_finite_differences():
    rng = np.random.default_rng(1)
    w1 = rng.standard_normal((4, 3)) * 0.5
    x = Tensor(rng.standard_normal((2, 4)))

    def f(w):
        h = ad.sigmoid(ad.matmul(x, w))
        return ad.mean(ad.sigmoid(ad.matmul(h, Tensor(np.ones((3, 1))))))

    assert check_gradient(f, Tensor(w1)) < 1e-6


def test_unreachable_leaf_gets_zero_gradient():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        orphan = Tensor(np.ones(2), requires_grad=True)
        y = x.sum()
        grads = tape.backward(y)
    np.testing.assert_array_equal(grads.of(orphan), np.zeros(2))


def test_backward_rejects_non_scalar():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)


def test_tape_consumed_once():
    with Tape() as tape:
        x = Tensor(np.ones(3), requires_grad=True)
        y = x.sum()
        tape.backward(y)
        with pytest.raises(ContractError):
            tape.backward(y)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_domain_errors():
    with pytest.raises(DomainError):
        ad.log(Tensor(-1.0))
    with pytest.raises(DomainError):
        ad.sqrt(Tensor([-0.5]))


def test_check_gradient_square_at_three():
    err = check_gradient(lambda x: ad.square(x), Tensor(np.array(3.0)), step=1e-4)
    assert err < 1e-8


def test_check_gradient_abs_smooth_region():
    err = check_gradient(lambda x: ad.absolute(x).sum(), Tensor(np.array(1.0)), step=1e-4)
    assert err < 1e-8


def test_abs_subgradient_zero_at_zero():
    g = grad_of(lambda x: ad.absolute(x).sum(), np.zeros(3))
    np.testing.assert_array_equal(g, np.zeros(3))


def test_leaky_relu_positive_slope_at_zero():
    g = grad_of(lambda x: ad.leaky_relu(x).sum(), np.zeros(3))
    np.testing.assert_array_equal(g, np.ones(3))


PRIMITIVES = {
    "add": (lambda x: (x + Tensor(np.full((3, 4), 0.7))).sum(), (3, 4)),
    "sub": (lambda x: (Tensor(np.full((3, 4), 0.7)) - x).sum(), (3, 4)),
    "mul": (lambda x: (x * Tensor(np.linspace(-1, 1, 12).reshape(3, 4))).sum(), (3, 4)),
    "div": (lambda x: (x / Tensor(np.linspace(1, 2, 12).reshape(3, 4))).sum(), (3, 4)),
    "div-denominator": (
        lambda x: (Tensor(np.ones((2, 3))) / (ad.square(x) + 1.0)).sum(),
        (2, 3),
    ),
    "neg": (lambda x: (-x).sum(), (5,)),
    "exp": (lambda x: ad.exp(x).sum(), (4,)),
    "log": (lambda x: ad.log(ad.square(x) + 1.0).sum(), (4,)),
    "sqrt": (lambda x: ad.sqrt(ad.square(x) + 1.0).sum(), (4,)),
    "square": (lambda x: ad.square(x).sum(), (3, 2)),
    "sigmoid": (lambda x: ad.sigmoid(x).sum(), (6,)),
    "softplus": (lambda x: ad.softplus(x).sum(), (6,)),
    "silu": (lambda x: ad.silu(x).sum(), (6,)),
    "mean-axis": (lambda x: ad.mean(ad.square(x), axis=0).sum(), (4, 3)),
    "sum-axis": (lambda x: ad.total(ad.square(x), axis=1).sum(), (4, 3)),
    "reshape": (lambda x: ad.square(ad.reshape(x, (6,))).sum(), (2, 3)),
    "transpose": (lambda x: (ad.transpose(x) * Tensor(np.ones((3, 2)))).sum(), (2, 3)),
    "broadcast": (
        lambda x: (ad.broadcast_to(x, (4, 3)) * Tensor(np.linspace(0, 1, 12).reshape(4, 3))).sum(),
        (3,),
    ),
    "concat": (lambda x: ad.square(ad.concat([x, x * 2.0], axis=0)).sum(), (3, 2)),
    "slice": (lambda x: ad.square(x[1:, :2]).sum(), (3, 3)),
    "l2norm": (lambda x: ad.l2norm(x, axis=1).sum(), (4, 3)),
    "clip": (lambda x: ad.clip(x, -0.5, 0.5).sum(), (6,)),
    "ordered-sum": (lambda x: ad.total(ad.square(x), ordered=True), (7,)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradient_against_central_differences(name):
    func, shape = PRIMITIVES[name]
    rng = np.random.default_rng(hash(name) % (2**32))
    worst = 0.0
    for _ in range(10):
        point = rng.standard_normal(shape)
        worst = max(worst, check_gradient(func, Tensor(point), step=1e-4))
    assert worst < 1e-5


def test_abs_and_leaky_relu_away_from_kinks():
    rng = np.random.default_rng(7)
    for _ in range(10):
        point = rng.standard_normal((5,))
        point = np.where(np.abs(point) < 1e-3, 0.5, point)
        assert check_gradient(lambda x: ad.absolute(x).sum(), Tensor(point)) < 1e-5
        assert check_gradient(lambda x: ad.leaky_relu(x).sum(), Tensor(point)) < 1e-5


def test_backward_linearity():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((4,))
    a, b = 2.5, -1.25

    def f(x):
        return ad.total(ad.exp(x * 0.3))

    def g(x):
        return ad.total(ad.square(x))

    gf = grad_of(f, x0)
    gg = grad_of(g, x0)
    combined = grad_of(lambda x: f(x) * a + g(x) * b, x0)
    assert np.max(np.abs(combined - (a * gf + b * gg))) < 1e-12


def test_ordered_sum_bitwise_permutation_invariant():
    rng = np.random.default_rng(11)
    vals = rng.standard_normal(257)
    perm = rng.permutation(257)
    s1 = ad.total(Tensor(vals), ordered=True).item()
    s2 = ad.total(Tensor(vals[perm]), ordered=True).item()
    assert s1 == s2


def test_determinism_identical_seeds():
    def run():
        rng = np.random.default_rng(42)
        w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        x = Tensor(rng.standard_normal((2, 4)))
        with Tape() as tape:
            y = ad.mean(ad.silu(ad.matmul(x, w)))
            return tape.backward(y).of(w)

    g1, g2 = run(), run()
    assert g1.tobytes() == g2.tobytes()


def test_spectral_normalize_diagonal():
    rng = np.random.default_rng(0)
    w = Tensor(np.diag([3.0, 1.0]))
    state = SpectralState(2, 2, rng)
    out = spectral_normalize(w, power_iters=100, state=state)
    np.testing.assert_allclose(out.data, np.diag([1.0, 1.0 / 3.0]), atol=1e-9)


def test_spectral_normalize_identity():
    rng = np.random.default_rng(0)
    w = Tensor(np.eye(3))
    out = spectral_normalize(w, power_iters=50, state=SpectralState(3, 3, rng))
    np.testing.assert_allclose(out.data, np.eye(3), atol=1e-9)


def gram_top_singular_value(mat):
    # independent oracle: eigendecomposition of the Gram matrix
    eigvals = np.linalg.eigvalsh(mat.T @ mat)
    return float(np.sqrt(np.max(eigvals)))


def test_spectral_normalize_random_matrix_against_gram_oracle():
    rng = np.random.default_rng(5)
    w = Tensor(rng.standard_normal((8, 8)))
    out = spectral_normalize(w, power_iters=50, state=SpectralState(8, 8, rng))
    assert abs(gram_top_singular_value(out.data) - 1.0) < 1e-3


def test_spectral_normalize_oracle_band_on_nondegenerate_matrices():
    rng = np.random.default_rng(9)
    for _ in range(10):
        mat = rng.standard_normal((6, 5))
        out = spectral_normalize(
            Tensor(mat), power_iters=30, state=SpectralState(6, 5, rng)
        )
        assert 0.99 <= gram_top_singular_value(out.data) <= 1.01


def test_spectral_normalize_zero_matrix():
    rng = np.random.default_rng(1)
    out = spectral_normalize(
        Tensor(np.zeros((3, 3))), power_iters=5, state=SpectralState(3, 3, rng)
    )
    np.testing.assert_array_equal(out.data, np.zeros((3, 3)))


def test_spectral_normalize_state_persists_and_one_step_converges():
    rng = np.random.default_rng(2)
    mat = rng.standard_normal((8, 8))
    state = SpectralState(8, 8, rng)
    w = Tensor(mat)
    for _ in range(80):
        out = spectral_normalize(w, power_iters=1, state=state)
    assert abs(gram_top_singular_value(out.data) - 1.0) < 1e-3


def test_spectral_normalize_is_differentiable():
    rng = np.random.default_rng(6)
    mat = rng.standard_normal((4, 4))

    def f(w):
        state = SpectralState(4, 4, np.random.default_rng(0))
        return ad.total(ad.square(spectral_normalize(w, 30, state)))

    assert check_gradient(f, Tensor(mat), step=1e-5) < 1e-4
