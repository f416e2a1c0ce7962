"""Pure-numpy compute kernels.

Reference implementation of the hot loops; the compiled backend in
_speedups.pyx mirrors these semantics exactly (same parameter layouts, same
stage arithmetic, same clamping rules).  Sequential recursions run step by
step on (B,) slices; everything without a time dependency is batched into
large matrix operations.
"""

import numpy as np
from scipy.special import erf, expit

from ..errors import IntegrationDivergedError
from . import layout

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x):
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * phi


def _cheb_eval(c, x):
    t0 = np.ones_like(x)
    t1 = x
    acc = c[0] * t0 + c[1] * t1
    for k in range(2, c.shape[0]):
        t0, t1 = t1, 2.0 * x * t1 - t0
        acc = acc + c[k] * t1
    return acc


def _cheb_eval_deriv(c, x):
    """(value, d/dx) of the Chebyshev series at x."""
    t0 = np.ones_like(x)
    t1 = x
    d0 = np.zeros_like(x)
    d1 = np.ones_like(x)
    acc = c[0] * t0 + c[1] * t1
    dacc = c[1] * d1
    for k in range(2, c.shape[0]):
        t0, t1 = t1, 2.0 * x * t1 - t0
        d0, d1 = d1, 2.0 * t0 + 2.0 * x * d1 - d0
        acc = acc + c[k] * t1
        dacc = dacc + c[k] * d1
    return acc, dacc


# ---------------------------------------------------------------------------
# Linear RC branch: dv1/dt = -v1/(r1 c1) + i/c1, fixed-step RK4
# ---------------------------------------------------------------------------

def rc_rk4(i, r1, c1, dt):
    """Integrate the RC branch over each row of i; v1[:, 0] = 0.

    Current is held constant over each step (sample k drives step k->k+1).
    """
    i = np.asarray(i, dtype=np.float64)
    b, n = i.shape
    q = 1.0 / (r1 * c1)
    r = 1.0 / c1
    h = dt
    v1 = np.zeros((b, n))
    v = np.zeros(b)
    for k in range(n - 1):
        ik = i[:, k]
        k1 = -q * v + r * ik
        k2 = -q * (v + 0.5 * h * k1) + r * ik
        k3 = -q * (v + 0.5 * h * k2) + r * ik
        k4 = -q * (v + h * k3) + r * ik
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        v1[:, k + 1] = v
    return v1


def rc_rk4_sens(i, r1, c1, dt):
    """RC integration plus forward sensitivities dv1/dr1 and dv1/dc1.

    Differentiates the exact RK4 stage arithmetic, so the sensitivities are
    the true derivatives of the implemented map (not of the continuous ODE).
    """
    i = np.asarray(i, dtype=np.float64)
    b, n = i.shape
    q = 1.0 / (r1 * c1)
    r = 1.0 / c1
    dq_dr1 = -q / r1
    dq_dc1 = -q / c1
    dr_dc1 = -r / c1
    h = dt
    v1 = np.zeros((b, n))
    s_r1 = np.zeros((b, n))
    s_c1 = np.zeros((b, n))
    v = np.zeros(b)
    sr = np.zeros(b)
    sc = np.zeros(b)
    for k in range(n - 1):
        ik = i[:, k]
        k1 = -q * v + r * ik
        dk1_r = -q * sr - dq_dr1 * v
        dk1_c = -q * sc - dq_dc1 * v + dr_dc1 * ik
        vb = v + 0.5 * h * k1
        srb = sr + 0.5 * h * dk1_r
        scb = sc + 0.5 * h * dk1_c
        k2 = -q * vb + r * ik
        dk2_r = -q * srb - dq_dr1 * vb
        dk2_c = -q * scb - dq_dc1 * vb + dr_dc1 * ik
        vc = v + 0.5 * h * k2
        src = sr + 0.5 * h * dk2_r
        scc = sc + 0.5 * h * dk2_c
        k3 = -q * vc + r * ik
        dk3_r = -q * src - dq_dr1 * vc
        dk3_c = -q * scc - dq_dc1 * vc + dr_dc1 * ik
        vd = v + h * k3
        srd = sr + h * dk3_r
        scd = sc + h * dk3_c
        k4 = -q * vd + r * ik
        dk4_r = -q * srd - dq_dr1 * vd
        dk4_c = -q * scd - dq_dc1 * vd + dr_dc1 * ik
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        sr = sr + (h / 6.0) * (dk1_r + 2.0 * dk2_r + 2.0 * dk3_r + dk4_r)
        sc = sc + (h / 6.0) * (dk1_c + 2.0 * dk2_c + 2.0 * dk3_c + dk4_c)
        v1[:, k + 1] = v
        s_r1[:, k + 1] = sr
        s_c1[:, k + 1] = sc
    return v1, s_r1, s_c1


# ---------------------------------------------------------------------------
# MLP correction network (layout.MLP_SIZES), batched over rows
# ---------------------------------------------------------------------------

def _mlp_rows(theta, x):
    """Forward over rows x (N, 4): returns (y, a1, h1, a2, h2)."""
    (w1, b1), (w2, b2), (w3, b3) = layout.mlp_unpack(theta)
    a1 = x @ w1.T + b1
    h1 = _gelu(a1)
    a2 = h1 @ w2.T + b2
    h2 = _gelu(a2)
    y = h2 @ w3[0] + b3[0]
    return y, a1, h1, a2, h2


def mlp_forward(theta, x):
    return _mlp_rows(np.asarray(theta, dtype=np.float64), np.asarray(x, dtype=np.float64))[0]


def _mlp_input_grads(theta, a1, a2):
    """dy/dx per row given stashed pre-activations; shape (N, 4)."""
    (w1, _), (w2, _), (w3, _) = layout.mlp_unpack(theta)
    g2 = _gelu_grad(a2) * w3[0]
    g1 = (g2 @ w2) * _gelu_grad(a1)
    return g1 @ w1


def _mlp_param_grads(theta, x, a1, h1, a2, h2, dy, out):
    """Accumulate d(sum dy*y)/dtheta into the flat vector `out`."""
    (w1, _), (w2, _), (w3, _) = layout.mlp_unpack(theta)
    (gw1, gb1), (gw2, gb2), (gw3, gb3) = layout.mlp_unpack(out)
    dh2 = dy[:, None] * w3[0]
    gw3[0] += h2.T @ dy
    gb3[0] += dy.sum()
    da2 = dh2 * _gelu_grad(a2)
    gw2 += da2.T @ h1
    gb2 += da2.sum(axis=0)
    dh1 = da2 @ w2
    da1 = dh1 * _gelu_grad(a1)
    gw1 += da1.T @ x
    gb1 += da1.sum(axis=0)


# ---------------------------------------------------------------------------
# Hybrid circuit ODE: joint (v1, z) RK4 with the learned correction
# ---------------------------------------------------------------------------

def _hybrid_stage(weights, q, r, f_scale, v1_scale, z_center, z_scale, v, zst, ik, ink, tnk):
    w1, b1, w2, b2, w3, b3 = weights
    x = np.empty((v.shape[0], 4))
    x[:, 0] = v / v1_scale
    x[:, 1] = ink
    x[:, 2] = (zst - z_center) / z_scale
    x[:, 3] = tnk
    h1 = _gelu(x @ w1 + b1)
    h2 = _gelu(h1 @ w2 + b2)
    f = h2 @ w3 + b3
    return -q * v + r * ik + f_scale * f


def _transposed_weights(theta):
    (w1, b1), (w2, b2), (w3, b3) = layout.mlp_unpack(theta)
    return (np.ascontiguousarray(w1.T), b1, np.ascontiguousarray(w2.T), b2, w3[0], b3[0])


def ude_simulate(theta, ocv_c, r0, r1, c1, eta, q_nom,
                 i_phys, i_norm, t_norm, z0, dt,
                 f_scale, v1_scale, z_center, z_scale):
    """Forward integration of the hybrid model over a batch of windows.

    Returns (v, v1, z): terminal voltage and the two state traces, all
    (B, L).  v[k] is evaluated at the pre-step state, v1 starts at 0 and z
    at z0; z is clamped to [0, 1] only inside the OCV evaluation.
    """
    i_phys = np.asarray(i_phys, dtype=np.float64)
    b, n = i_phys.shape
    q = 1.0 / (r1 * c1)
    r = 1.0 / c1
    h = dt
    weights = _transposed_weights(theta)
    i_t = np.ascontiguousarray(i_phys.T)
    in_t = np.ascontiguousarray(np.asarray(i_norm).T)
    tn_t = np.ascontiguousarray(np.asarray(t_norm).T)
    v1 = np.zeros((n, b))
    z = np.empty((n, b))
    z[0] = z0
    cv = np.zeros(b)
    cz = np.array(z0, dtype=np.float64, copy=True)
    for k in range(n - 1):
        ik = i_t[k]
        ink = in_t[k]
        tnk = tn_t[k]
        w = -eta * ik / q_nom
        g1 = _hybrid_stage(weights, q, r, f_scale, v1_scale, z_center, z_scale, cv, cz, ik, ink, tnk)
        zb = cz + 0.5 * h * w
        g2 = _hybrid_stage(weights, q, r, f_scale, v1_scale, z_center, z_scale,
                           cv + 0.5 * h * g1, zb, ik, ink, tnk)
        g3 = _hybrid_stage(weights, q, r, f_scale, v1_scale, z_center, z_scale,
                           cv + 0.5 * h * g2, zb, ik, ink, tnk)
        g4 = _hybrid_stage(weights, q, r, f_scale, v1_scale, z_center, z_scale,
                           cv + h * g3, cz + h * w, ik, ink, tnk)
        cv = cv + (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
        cz = cz + h * w
        if not (np.all(np.isfinite(cv)) and np.all(np.isfinite(cz))):
            raise IntegrationDivergedError(k + 1)
        v1[k + 1] = cv
        z[k + 1] = cz
    v1 = np.ascontiguousarray(v1.T)
    z = np.ascontiguousarray(z.T)
    x = 2.0 * np.clip(z, 0.0, 1.0) - 1.0
    v = _cheb_eval(ocv_c, x) - r0 * i_phys - v1
    return v, v1, z


def ude_loss_grad(theta, ocv_c, r0, r1, c1, eta, q_nom,
                  i_phys, i_norm, t_norm, z0, target_norm,
                  v_mean, v_std, dt, f_scale, v1_scale, z_center, z_scale):
    """Mean-squared error in normalized voltage plus exact gradients.

    Gradients are reverse accumulation through the unrolled RK4 steps,
    returned w.r.t. the natural parameters:
    (d_theta, d_ocv, d_r0, d_r1, d_c1, d_eta).
    """
    i_phys = np.asarray(i_phys, dtype=np.float64)
    b, n = i_phys.shape
    q = 1.0 / (r1 * c1)
    r = 1.0 / c1
    h = dt
    n_steps = n - 1
    weights = _transposed_weights(theta)
    i_t = np.ascontiguousarray(i_phys.T)
    in_t = np.ascontiguousarray(np.asarray(i_norm).T)
    tn_t = np.ascontiguousarray(np.asarray(t_norm).T)

    # Forward pass, stashing the four stage states per step (time-major).
    v1 = np.zeros((n, b))
    z = np.empty((n, b))
    z[0] = z0
    sv = np.empty((n_steps, 4, b))
    sz = np.empty((n_steps, 4, b))
    cv = np.zeros(b)
    cz = np.array(z0, dtype=np.float64, copy=True)
    for k in range(n_steps):
        ik = i_t[k]
        ink = in_t[k]
        tnk = tn_t[k]
        w = -eta * ik / q_nom
        zb = cz + 0.5 * h * w
        zd = cz + h * w
        g1 = _hybrid_stage(weights, q, r, f_scale, v1_scale, z_center, z_scale, cv, cz, ik, ink, tnk)
        vb = cv + 0.5 * h * g1
        g2 = _hybrid_stage(weights, q, r, f_scale, v1_scale, z_center, z_scale, vb, zb, ik, ink, tnk)
        vc = cv + 0.5 * h * g2
        g3 = _hybrid_stage(weights, q, r, f_scale, v1_scale, z_center, z_scale, vc, zb, ik, ink, tnk)
        vd = cv + h * g3
        g4 = _hybrid_stage(weights, q, r, f_scale, v1_scale, z_center, z_scale, vd, zd, ik, ink, tnk)
        svk = sv[k]
        svk[0] = cv
        svk[1] = vb
        svk[2] = vc
        svk[3] = vd
        szk = sz[k]
        szk[0] = cz
        szk[1] = zb
        szk[2] = zb
        szk[3] = zd
        cv = cv + (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
        cz = cz + h * w
        if not (np.all(np.isfinite(cv)) and np.all(np.isfinite(cz))):
            raise IntegrationDivergedError(k + 1)
        v1[k + 1] = cv
        z[k + 1] = cz
    v1 = np.ascontiguousarray(v1.T)
    z = np.ascontiguousarray(z.T)

    # Output map and loss.
    zc = np.clip(z, 0.0, 1.0)
    x = 2.0 * zc - 1.0
    ocv, docv_dx = _cheb_eval_deriv(ocv_c, x)
    v = ocv - r0 * i_phys - v1
    err = (v - v_mean) / v_std - target_norm
    loss = float(np.mean(err * err))
    dldv = (2.0 / err.size) * err / v_std

    inside = (z >= 0.0) & (z <= 1.0)
    lam_v_out = -dldv
    lam_z_out = dldv * 2.0 * docv_dx * inside

    d_r0 = float(-np.sum(dldv * i_phys))
    # d/dc_k of the output sum: accumulate T_k(x) weighted by dldv.
    t0 = np.ones_like(x)
    t1 = x
    d_ocv = np.empty(ocv_c.shape[0])
    d_ocv[0] = np.sum(dldv * t0)
    d_ocv[1] = np.sum(dldv * t1)
    for kk in range(2, ocv_c.shape[0]):
        t0, t1 = t1, 2.0 * x * t1 - t0
        d_ocv[kk] = np.sum(dldv * t1)

    d_theta = np.zeros_like(theta)
    d_r1 = 0.0
    d_c1 = 0.0
    d_eta = 0.0
    if n_steps == 0:
        return loss, v, d_theta, d_ocv, d_r0, d_r1, d_c1, d_eta

    # Batched recomputation of the correction network over all stage states:
    # input rows are (v1/v1_scale, i_norm, z_norm, t_norm), time-major so the
    # flat row order matches lam_g below.
    xs = np.empty((n_steps, 4, b, 4))
    xs[..., 0] = sv / v1_scale
    xs[..., 1] = in_t[:n_steps, None, :]
    xs[..., 2] = (sz - z_center) / z_scale
    xs[..., 3] = tn_t[:n_steps, None, :]
    rows = xs.reshape(-1, 4)

    # One batched recomputation of the network over all stage rows; the
    # activation stash is reused for both the state Jacobian entries here
    # and the parameter gradients after the reverse sweep.
    (w1m, _), (w2m, _), (w3m, _) = layout.mlp_unpack(theta)
    _, a1, h1, a2, h2v = _mlp_rows(theta, rows)
    gp1 = _gelu_grad(a1)
    gp2 = _gelu_grad(a2)
    t2 = gp2 * w3m[0]
    t1 = (t2 @ w2m) * gp1
    gv = (-q) + (f_scale / v1_scale) * (t1 @ w1m[:, 0]).reshape(n_steps, 4, b)
    gz = (f_scale / z_scale) * (t1 @ w1m[:, 2]).reshape(n_steps, 4, b)
    del t1, t2

    # Reverse sweep over steps: propagate state adjoints, collect the stage
    # adjoints lam_g and the per-step adjoint of w = -eta i / q_nom.
    lam_v_out_t = np.ascontiguousarray(lam_v_out.T)
    lam_z_out_t = np.ascontiguousarray(lam_z_out.T)
    lam_g = np.empty((n_steps, 4, b))
    lam_w = np.empty((n_steps, b))
    lv = lam_v_out_t[n - 1].copy()
    lz = lam_z_out_t[n - 1].copy()
    h6 = h / 6.0
    h3 = h / 3.0
    h2_ = h / 2.0
    for k in range(n_steps - 1, -1, -1):
        gvk = gv[k]
        gzk = gz[k]
        lg4 = h6 * lv
        lvd = lg4 * gvk[3]
        lzd = lg4 * gzk[3]
        lg3 = h3 * lv + h * lvd
        lvc = lg3 * gvk[2]
        lzc = lg3 * gzk[2]
        lg2 = h3 * lv + h2_ * lvc
        lvb = lg2 * gvk[1]
        lzb = lg2 * gzk[1]
        lg1 = h6 * lv + h2_ * lvb
        lva = lg1 * gvk[0]
        lza = lg1 * gzk[0]
        lgk = lam_g[k]
        lgk[0] = lg1
        lgk[1] = lg2
        lgk[2] = lg3
        lgk[3] = lg4
        lam_w[k] = h * lz + h2_ * (lzb + lzc) + h * lzd
        lv = lv + lva + lvb + lvc + lvd + lam_v_out_t[k]
        lz = lz + lza + lzb + lzc + lzd + lam_z_out_t[k]

    d_eta = float(np.sum(lam_w * (-i_t[:n_steps] / q_nom)))

    # Parameter gradients: one batched VJP over all stage rows, reusing the
    # cached activations and GELU derivatives.
    lam_rows = lam_g.reshape(-1)
    dy_rows = f_scale * lam_rows
    (gw1, gb1), (gw2, gb2), (gw3, gb3) = layout.mlp_unpack(d_theta)
    dh2 = dy_rows[:, None] * w3m[0]
    gw3[0] += h2v.T @ dy_rows
    gb3[0] += dy_rows.sum()
    da2 = dh2 * gp2
    gw2 += da2.T @ h1
    gb2 += da2.sum(axis=0)
    da1 = (da2 @ w2m) * gp1
    gw1 += da1.T @ rows
    gb1 += da1.sum(axis=0)

    sv_rows = sv.reshape(-1)
    i_rows = np.broadcast_to(i_t[:n_steps, None, :], (n_steps, 4, b)).reshape(-1)
    d_r1 = float(np.sum(lam_rows * sv_rows) * q / r1)
    d_c1 = float(np.sum(lam_rows * (sv_rows * q - i_rows * r)) / c1)

    return loss, v, d_theta, d_ocv, d_r0, d_r1, d_c1, d_eta


# ---------------------------------------------------------------------------
# Stacked LSTM with per-step scalar head
# ---------------------------------------------------------------------------

_sigmoid = expit


def _lstm_layer_forward(w_ih, w_hh, b_ih, b_hh, x_seq):
    """One LSTM layer over the full sequence; returns h_seq plus stashes."""
    bsz, n, _ = x_seq.shape
    nh = w_hh.shape[1]
    pre_in = x_seq.reshape(bsz * n, -1) @ w_ih.T + (b_ih + b_hh)
    pre_in = pre_in.reshape(bsz, n, 4 * nh)
    h = np.zeros((bsz, nh))
    c = np.zeros((bsz, nh))
    gates = np.empty((bsz, n, 4 * nh))
    c_seq = np.empty((bsz, n, nh))
    tanh_c = np.empty((bsz, n, nh))
    h_seq = np.empty((bsz, n, nh))
    for t in range(n):
        a = pre_in[:, t] + h @ w_hh.T
        gi = _sigmoid(a[:, :nh])
        gf = _sigmoid(a[:, nh : 2 * nh])
        gg = np.tanh(a[:, 2 * nh : 3 * nh])
        go = _sigmoid(a[:, 3 * nh :])
        c = gf * c + gi * gg
        tc = np.tanh(c)
        h = go * tc
        gates[:, t, :nh] = gi
        gates[:, t, nh : 2 * nh] = gf
        gates[:, t, 2 * nh : 3 * nh] = gg
        gates[:, t, 3 * nh :] = go
        c_seq[:, t] = c
        tanh_c[:, t] = tc
        h_seq[:, t] = h
    return h_seq, gates, c_seq, tanh_c


def _lstm_layer_backward(w_ih, w_hh, x_seq, h_seq, gates, c_seq, tanh_c, d_h_seq):
    """BPTT through one layer; returns (dx_seq, dW_ih, dW_hh, db)."""
    bsz, n, _ = x_seq.shape
    nh = w_hh.shape[1]
    d_pre = np.empty((bsz, n, 4 * nh))
    dh = np.zeros((bsz, nh))
    dc = np.zeros((bsz, nh))
    for t in range(n - 1, -1, -1):
        gi = gates[:, t, :nh]
        gf = gates[:, t, nh : 2 * nh]
        gg = gates[:, t, 2 * nh : 3 * nh]
        go = gates[:, t, 3 * nh :]
        tc = tanh_c[:, t]
        c_prev = c_seq[:, t - 1] if t > 0 else np.zeros((bsz, nh))
        dh = dh + d_h_seq[:, t]
        do = dh * tc
        dc = dc + dh * go * (1.0 - tc * tc)
        di = dc * gg
        df = dc * c_prev
        dg = dc * gi
        d_pre[:, t, :nh] = di * gi * (1.0 - gi)
        d_pre[:, t, nh : 2 * nh] = df * gf * (1.0 - gf)
        d_pre[:, t, 2 * nh : 3 * nh] = dg * (1.0 - gg * gg)
        d_pre[:, t, 3 * nh :] = do * go * (1.0 - go)
        dh = d_pre[:, t] @ w_hh
        dc = dc * gf
    h_prev = np.concatenate((np.zeros((bsz, 1, nh)), h_seq[:, :-1]), axis=1)
    flat_pre = d_pre.reshape(bsz * n, 4 * nh)
    d_w_ih = flat_pre.T @ x_seq.reshape(bsz * n, -1)
    d_w_hh = flat_pre.T @ h_prev.reshape(bsz * n, nh)
    d_b = flat_pre.sum(axis=(0))
    dx = (flat_pre @ w_ih).reshape(bsz, n, -1)
    return dx, d_w_ih, d_w_hh, d_b


def lstm_forward(params, x, n_input=layout.LSTM_INPUT, n_hidden=layout.LSTM_HIDDEN,
                 n_layers=layout.LSTM_LAYERS):
    """Stacked LSTM over x (B, L, n_input) with zero initial states."""
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    layers, w_head, b_head = layout.lstm_unpack(params, n_input, n_hidden, n_layers)
    seq = x
    for w_ih, w_hh, b_ih, b_hh in layers:
        seq = _lstm_layer_forward(w_ih, w_hh, b_ih, b_hh, seq)[0]
    return seq @ w_head + b_head[0]


def _lstm_forward_stash(params, x, n_input, n_hidden, n_layers):
    layers, w_head, b_head = layout.lstm_unpack(params, n_input, n_hidden, n_layers)
    seqs = [x]
    stashes = []
    seq = x
    for w_ih, w_hh, b_ih, b_hh in layers:
        h_seq, gates, c_seq, tanh_c = _lstm_layer_forward(w_ih, w_hh, b_ih, b_hh, seq)
        stashes.append((h_seq, gates, c_seq, tanh_c))
        seq = h_seq
        seqs.append(seq)
    y = seq @ w_head + b_head[0]
    return y, seqs, stashes, layers, w_head


def _lstm_backward(params, dy, seqs, stashes, layers, w_head, n_input, n_hidden, n_layers):
    grad = np.zeros_like(params)
    g_layers, g_w_head, g_b_head = layout.lstm_unpack(grad, n_input, n_hidden, n_layers)
    g_w_head += np.einsum("bln,bl->n", seqs[-1], dy)
    g_b_head[0] = dy.sum()
    d_seq = dy[:, :, None] * w_head
    for li in range(n_layers - 1, -1, -1):
        w_ih, w_hh, _, _ = layers[li]
        h_seq, gates, c_seq, tanh_c = stashes[li]
        d_seq, d_w_ih, d_w_hh, d_b = _lstm_layer_backward(
            w_ih, w_hh, seqs[li], h_seq, gates, c_seq, tanh_c, d_seq
        )
        gw_ih, gw_hh, gb_ih, gb_hh = g_layers[li]
        gw_ih += d_w_ih
        gw_hh += d_w_hh
        gb_ih += d_b
        gb_hh += d_b
    return grad


def lstm_vjp(params, x, dy, n_input=layout.LSTM_INPUT, n_hidden=layout.LSTM_HIDDEN,
             n_layers=layout.LSTM_LAYERS):
    """Parameter gradient of sum(dy * y) for outputs y = lstm(x)."""
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    y, seqs, stashes, layers, w_head = _lstm_forward_stash(params, x, n_input, n_hidden, n_layers)
    return _lstm_backward(params, dy, seqs, stashes, layers, w_head, n_input, n_hidden, n_layers)


def lstm_loss_grad(params, x, target, n_input=layout.LSTM_INPUT, n_hidden=layout.LSTM_HIDDEN,
                   n_layers=layout.LSTM_LAYERS):
    """MSE loss over all (B, L) outputs plus the flat parameter gradient."""
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y, seqs, stashes, layers, w_head = _lstm_forward_stash(params, x, n_input, n_hidden, n_layers)
    err = y - target
    loss = float(np.mean(err * err))
    dy = (2.0 / err.size) * err
    grad = _lstm_backward(params, dy, seqs, stashes, layers, w_head, n_input, n_hidden, n_layers)
    return loss, grad, y
