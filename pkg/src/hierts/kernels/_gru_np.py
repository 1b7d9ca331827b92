"""Pure numpy implementation of the fused recurrent-encoder kernel.

Reference semantics for the compiled kernel in `_gru_cy`; both expose the
same functions and must agree to rounding error. Arrays are time-major
((steps, batch, features)) so every step reads and writes contiguous
blocks. Gate layout in the packed arrays is [update | reset | candidate].
"""

import numpy as np
from scipy.special import expit


def gru_forward(xw, h0, wh_zr, wh_n):
    """Run a GRU over a window of precomputed input projections.

    xw      (W, B, 3*d) input-to-hidden projections, biases folded in
    h0      (B, d) initial hidden state
    wh_zr   (d, 2*d) hidden weights for the update and reset gates
    wh_n    (d, d) hidden weights for the candidate state

    Returns (h_all, zrn): hidden states for steps 0..W (h_all[0] is h0)
    and the packed gate activations saved for the backward pass.
    """
    W, B, three_d = xw.shape
    d = three_d // 3
    h_all = np.empty((W + 1, B, d))
    zrn = np.empty((W, B, 3 * d))
    h = np.array(h0)
    h_all[0] = h
    for t in range(W):
        g = xw[t]
        hzr = h @ wh_zr
        z = expit(g[:, :d] + hzr[:, :d])
        r = expit(g[:, d:2 * d] + hzr[:, d:])
        n = np.tanh(g[:, 2 * d:] + (r * h) @ wh_n)
        h = z * h + (1.0 - z) * n
        zrn[t, :, :d] = z
        zrn[t, :, d:2 * d] = r
        zrn[t, :, 2 * d:] = n
        h_all[t + 1] = h
    return h_all, zrn


def gru_backward(d_final, h_all, zrn, wh_zr, wh_n):
    """Backward pass matching `gru_forward`.

    `d_final` is the loss gradient w.r.t. the last hidden state. Returns
    (dxw, dh0, dwh_zr, dwh_n).
    """
    W_plus_1, B, d = h_all.shape
    W = W_plus_1 - 1
    dxw = np.empty((W, B, 3 * d))
    dwh_zr = np.zeros_like(wh_zr)
    dwh_n = np.zeros_like(wh_n)
    dh = np.array(d_final)
    for t in range(W - 1, -1, -1):
        h_prev = h_all[t]
        z = zrn[t, :, :d]
        r = zrn[t, :, d:2 * d]
        n = zrn[t, :, 2 * d:]
        dz = dh * (h_prev - n)
        dn = dh * (1.0 - z)
        dh_prev = dh * z
        da_n = dn * (1.0 - n * n)
        drh = da_n @ wh_n.T
        dwh_n += (r * h_prev).T @ da_n
        dh_prev += drh * r
        da_z = dz * z * (1.0 - z)
        da_r = (drh * h_prev) * r * (1.0 - r)
        dzr = np.concatenate([da_z, da_r], axis=1)
        dh_prev += dzr @ wh_zr.T
        dwh_zr += h_prev.T @ dzr
        dxw[t, :, :d] = da_z
        dxw[t, :, d:2 * d] = da_r
        dxw[t, :, 2 * d:] = da_n
        dh = dh_prev
    return dxw, dh, dwh_zr, dwh_n
