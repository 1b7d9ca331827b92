import math

import numpy as np
import pytest

from hierts import kernels, ndiff
from hierts.forecaster import GRUParams, gru_encode
from hierts.kernels import _gru_np
from hierts.ndiff import Tensor, grad_check

HAS_CYTHON = "cython" in kernels.available_backends()


def _random_case(rng, batch=5, steps=6, d=4):
    xw = rng.normal(size=(steps, batch, 3 * d))  # time-major kernel layout
    h0 = rng.normal(size=(batch, d))
    wh_zr = 0.5 * rng.normal(size=(d, 2 * d))
    wh_n = 0.5 * rng.normal(size=(d, d))
    return xw, h0, wh_zr, wh_n


@pytest.mark.skipif(not HAS_CYTHON, reason="compiled kernel unavailable")
@pytest.mark.parametrize("seed", range(5))
def test_forward_parity(seed):
    from hierts.kernels import _gru_cy
    case = _random_case(np.random.default_rng(seed))
    h_np, zrn_np = _gru_np.gru_forward(*case)
    h_cy, zrn_cy = _gru_cy.gru_forward(*case)
    assert np.allclose(h_np, h_cy, atol=1e-13)
    assert np.allclose(zrn_np, zrn_cy, atol=1e-13)


@pytest.mark.skipif(not HAS_CYTHON, reason="compiled kernel unavailable")
@pytest.mark.parametrize("seed", range(5))
def test_backward_parity(seed):
    from hierts.kernels import _gru_cy
    rng = np.random.default_rng(50 + seed)
    case = _random_case(rng)
    h_all, zrn = _gru_np.gru_forward(*case)
    d_final = rng.normal(size=h_all[-1].shape)
    out_np = _gru_np.gru_backward(d_final, h_all, zrn, case[2], case[3])
    out_cy = _gru_cy.gru_backward(d_final, h_all, zrn, case[2], case[3])
    for a, b in zip(out_np, out_cy):
        assert np.allclose(a, b, atol=1e-12)


def test_hand_unrolled_two_step_gru():
    # scalar hidden state, explicit evaluation of the gate equations
    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    wxz, wxr, wxn = 0.3, -0.4, 0.8
    whz, whr, whn = -0.2, 0.5, 0.6
    bz, br, bn = 0.1, -0.1, 0.2
    xs = [0.7, -1.2]
    h = 0.0
    for x in xs:
        z = sigmoid(x * wxz + h * whz + bz)
        r = sigmoid(x * wxr + h * whr + br)
        n = math.tanh(x * wxn + (r * h) * whn + bn)
        h = z * h + (1.0 - z) * n

    xw = np.array([[[x * wxz + bz, x * wxr + br, x * wxn + bn]] for x in xs])
    h_all, _ = kernels.gru_forward(xw, np.zeros((1, 1)),
                                   np.array([[whz, whr]]), np.array([[whn]]))
    assert abs(h_all[-1, 0, 0] - h) < 1e-12


def test_zero_input_single_step_stays_bounded():
    d = 6
    params = GRUParams.init(3, d, np.random.default_rng(0), "g")
    out = gru_encode(Tensor(np.zeros((4, 1, 3))), params)
    assert np.abs(out.data).max() <= 1.0


def test_identical_rows_get_identical_states():
    rng = np.random.default_rng(2)
    params = GRUParams.init(5, 4, rng, "g")
    row = rng.normal(size=(1, 7, 5))
    x = Tensor(np.repeat(row, 3, axis=0))
    out = gru_encode(x, params)
    assert np.allclose(out.data[0], out.data[1])
    assert np.allclose(out.data[0], out.data[2])


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_gru_encode_grad_check(backend):
    kernels.use_backend(backend)
    try:
        rng = np.random.default_rng(7)
        params = GRUParams.init(3, 3, rng, "g")
        x = Tensor(rng.normal(size=(2, 4, 3)))

        def f(xt, wx, wzr, wn, b):
            p = GRUParams(wx, wzr, wn, b)
            out = gru_encode(xt, p)
            return (out * out).sum()

        err = grad_check(f, [x, params.wx, params.wh_zr, params.wh_n, params.bias])
        assert err < 1e-4, f"{backend}: {err}"
    finally:
        kernels.use_backend(kernels.DEFAULT_BACKEND)


def test_backend_switch_is_explicit():
    with pytest.raises(ValueError, match="backend"):
        kernels.use_backend("tpu")
