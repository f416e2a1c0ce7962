# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled compute kernels (Cython).

Mirrors _numpy_impl exactly: same parameter layouts, stage arithmetic,
clamping rules, and return conventions.  Loops are fused per window, so
gradient passes stash only one window's stage activations at a time and
transcendentals are evaluated once, in the forward sweep.  Matrix-vector
products run with transposed weight copies so the inner loops write
independent contiguous accumulators (auto-vectorizable without relaxing
float semantics).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, isfinite, tanh

cnp.import_array()

from battvolt.errors import IntegrationDivergedError

cdef double SQRT2 = 1.4142135623730951
cdef double INV_SQRT_2PI = 0.3989422804014327

# MLP layout (kernels.layout with sizes 4-32-32-1); the repacked block keeps
# the same offsets but stores W1 and W2 transposed (input-major).
DEF NIN = 4
DEF NH = 32
DEF OW1 = 0
DEF OB1 = 128          # NH * NIN
DEF OW2 = 160
DEF OB2 = 1184         # OW2 + NH * NH
DEF OW3 = 1216
DEF OB3 = 1248
DEF MLP_NPARAMS = 1249


cdef void _repack_mlp(const double* th, double* pk) nogil:
    cdef Py_ssize_t i, j
    for j in range(NH):
        for i in range(NIN):
            pk[OW1 + i * NH + j] = th[OW1 + j * NIN + i]
    for j in range(NH):
        for i in range(NH):
            pk[OW2 + i * NH + j] = th[OW2 + j * NH + i]
    for j in range(OB1, OW2):
        pk[j] = th[j]
    for j in range(OB2, MLP_NPARAMS):
        pk[j] = th[j]


cdef inline double _mlp_fwd(const double* pk, const double* x,
                            double* h1, double* h2) nogil:
    """Forward through the repacked weights; h1/h2 get the hidden activations."""
    cdef Py_ssize_t j, i
    cdef double a[NH]
    cdef double xi, y
    for j in range(NH):
        a[j] = pk[OB1 + j]
    for i in range(NIN):
        xi = x[i]
        for j in range(NH):
            a[j] += pk[OW1 + i * NH + j] * xi
    for j in range(NH):
        h1[j] = 0.5 * a[j] * (1.0 + erf(a[j] / SQRT2))
    for j in range(NH):
        a[j] = pk[OB2 + j]
    for i in range(NH):
        xi = h1[i]
        for j in range(NH):
            a[j] += pk[OW2 + i * NH + j] * xi
    y = pk[OB3]
    for j in range(NH):
        h2[j] = 0.5 * a[j] * (1.0 + erf(a[j] / SQRT2))
        y += pk[OW3 + j] * h2[j]
    return y


cdef inline double _mlp_fwd_stash(const double* pk, const double* x,
                                  double* h1, double* h2,
                                  double* gp1, double* gp2) nogil:
    """Forward pass that also stashes GELU derivatives at the pre-activations."""
    cdef Py_ssize_t j, i
    cdef double a[NH]
    cdef double xi, e, y
    for j in range(NH):
        a[j] = pk[OB1 + j]
    for i in range(NIN):
        xi = x[i]
        for j in range(NH):
            a[j] += pk[OW1 + i * NH + j] * xi
    for j in range(NH):
        e = 0.5 * (1.0 + erf(a[j] / SQRT2))
        h1[j] = a[j] * e
        gp1[j] = e + a[j] * exp(-0.5 * a[j] * a[j]) * INV_SQRT_2PI
    for j in range(NH):
        a[j] = pk[OB2 + j]
    for i in range(NH):
        xi = h1[i]
        for j in range(NH):
            a[j] += pk[OW2 + i * NH + j] * xi
    y = pk[OB3]
    for j in range(NH):
        e = 0.5 * (1.0 + erf(a[j] / SQRT2))
        h2[j] = a[j] * e
        gp2[j] = e + a[j] * exp(-0.5 * a[j] * a[j]) * INV_SQRT_2PI
        y += pk[OW3 + j] * h2[j]
    return y


cdef inline void _input_grads(const double* th, const double* gp1, const double* gp2,
                              double* t2, double* t1, double* gx0, double* gx2) nogil:
    """dy/dx0 and dy/dx2 from the stashed GELU derivatives (original layout)."""
    cdef Py_ssize_t j, i
    cdef double t2j, g0, g2
    for i in range(NH):
        t1[i] = 0.0
    for j in range(NH):
        t2j = gp2[j] * th[OW3 + j]
        t2[j] = t2j
        for i in range(NH):
            t1[i] += t2j * th[OW2 + j * NH + i]
    g0 = 0.0
    g2 = 0.0
    for i in range(NH):
        t1[i] *= gp1[i]
        g0 += t1[i] * th[OW1 + i * NIN + 0]
        g2 += t1[i] * th[OW1 + i * NIN + 2]
    gx0[0] = g0
    gx2[0] = g2


cdef inline void _param_grads(const double* th, double* gth, const double* x,
                              const double* h1, const double* h2,
                              const double* gp1, const double* gp2, double dy,
                              double* da2, double* da1) nogil:
    """Accumulate dy * d(net)/d(theta) in the original layout."""
    cdef Py_ssize_t j, i
    cdef double da
    gth[OB3] += dy
    for j in range(NH):
        gth[OW3 + j] += dy * h2[j]
        da2[j] = dy * gp2[j] * th[OW3 + j]
        da1[j] = 0.0
    for j in range(NH):
        da = da2[j]
        gth[OB2 + j] += da
        for i in range(NH):
            gth[OW2 + j * NH + i] += da * h1[i]
            da1[i] += da * th[OW2 + j * NH + i]
    for j in range(NH):
        da = da1[j] * gp1[j]
        gth[OB1 + j] += da
        for i in range(NIN):
            gth[OW1 + j * NIN + i] += da * x[i]


cdef inline double _cheb_eval_c(const double* c, Py_ssize_t nc, double x) nogil:
    cdef double t0 = 1.0, t1 = x, tn
    cdef double acc = c[0] * t0 + c[1] * t1
    cdef Py_ssize_t k
    for k in range(2, nc):
        tn = 2.0 * x * t1 - t0
        t0 = t1
        t1 = tn
        acc += c[k] * t1
    return acc


cdef inline double _cheb_deriv_c(const double* c, Py_ssize_t nc, double x) nogil:
    cdef double t0 = 1.0, t1 = x, tn
    cdef double d0 = 0.0, d1 = 1.0, dn
    cdef double dacc = c[1] * d1
    cdef Py_ssize_t k
    for k in range(2, nc):
        tn = 2.0 * x * t1 - t0
        dn = 2.0 * t1 + 2.0 * x * d1 - d0
        t0 = t1
        t1 = tn
        d0 = d1
        d1 = dn
        dacc += c[k] * d1
    return dacc


# ---------------------------------------------------------------------------
# Linear RC branch
# ---------------------------------------------------------------------------

def rc_rk4(i, double r1, double c1, double dt):
    """Integrate the RC branch over each row of i; v1[:, 0] = 0."""
    cdef cnp.ndarray[double, ndim=2] i_arr = np.ascontiguousarray(i, dtype=np.float64)
    cdef Py_ssize_t b = i_arr.shape[0], n = i_arr.shape[1]
    cdef cnp.ndarray[double, ndim=2] v1 = np.zeros((b, n))
    cdef double q = 1.0 / (r1 * c1)
    cdef double r = 1.0 / c1
    cdef double h = dt
    cdef double v, ik, k1, k2, k3, k4
    cdef Py_ssize_t w, k
    with nogil:
        for w in range(b):
            v = 0.0
            for k in range(n - 1):
                ik = i_arr[w, k]
                k1 = -q * v + r * ik
                k2 = -q * (v + 0.5 * h * k1) + r * ik
                k3 = -q * (v + 0.5 * h * k2) + r * ik
                k4 = -q * (v + h * k3) + r * ik
                v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                v1[w, k + 1] = v
    return v1


def rc_rk4_sens(i, double r1, double c1, double dt):
    """RC integration plus forward sensitivities dv1/dr1 and dv1/dc1."""
    cdef cnp.ndarray[double, ndim=2] i_arr = np.ascontiguousarray(i, dtype=np.float64)
    cdef Py_ssize_t b = i_arr.shape[0], n = i_arr.shape[1]
    cdef cnp.ndarray[double, ndim=2] v1 = np.zeros((b, n))
    cdef cnp.ndarray[double, ndim=2] s_r1 = np.zeros((b, n))
    cdef cnp.ndarray[double, ndim=2] s_c1 = np.zeros((b, n))
    cdef double q = 1.0 / (r1 * c1)
    cdef double r = 1.0 / c1
    cdef double dq_dr1 = -q / r1
    cdef double dq_dc1 = -q / c1
    cdef double dr_dc1 = -r / c1
    cdef double h = dt
    cdef double v, sr, sc, ik
    cdef double k1, k2, k3, k4, dk1r, dk2r, dk3r, dk4r, dk1c, dk2c, dk3c, dk4c
    cdef double vb, vc, vd, srb, src, srd, scb, scc, scd
    cdef Py_ssize_t w, k
    with nogil:
        for w in range(b):
            v = 0.0
            sr = 0.0
            sc = 0.0
            for k in range(n - 1):
                ik = i_arr[w, k]
                k1 = -q * v + r * ik
                dk1r = -q * sr - dq_dr1 * v
                dk1c = -q * sc - dq_dc1 * v + dr_dc1 * ik
                vb = v + 0.5 * h * k1
                srb = sr + 0.5 * h * dk1r
                scb = sc + 0.5 * h * dk1c
                k2 = -q * vb + r * ik
                dk2r = -q * srb - dq_dr1 * vb
                dk2c = -q * scb - dq_dc1 * vb + dr_dc1 * ik
                vc = v + 0.5 * h * k2
                src = sr + 0.5 * h * dk2r
                scc = sc + 0.5 * h * dk2c
                k3 = -q * vc + r * ik
                dk3r = -q * src - dq_dr1 * vc
                dk3c = -q * scc - dq_dc1 * vc + dr_dc1 * ik
                vd = v + h * k3
                srd = sr + h * dk3r
                scd = sc + h * dk3c
                k4 = -q * vd + r * ik
                dk4r = -q * srd - dq_dr1 * vd
                dk4c = -q * scd - dq_dc1 * vd + dr_dc1 * ik
                v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                sr = sr + (h / 6.0) * (dk1r + 2.0 * dk2r + 2.0 * dk3r + dk4r)
                sc = sc + (h / 6.0) * (dk1c + 2.0 * dk2c + 2.0 * dk3c + dk4c)
                v1[w, k + 1] = v
                s_r1[w, k + 1] = sr
                s_c1[w, k + 1] = sc
    return v1, s_r1, s_c1


# ---------------------------------------------------------------------------
# Hybrid circuit ODE
# ---------------------------------------------------------------------------

cdef inline double _stage_rate(const double* pk, double q, double r, double f_scale,
                               double v1_scale, double z_center, double z_scale,
                               double v, double zst, double ik, double ink, double tnk,
                               double* h1, double* h2) nogil:
    cdef double x[NIN]
    x[0] = v / v1_scale
    x[1] = ink
    x[2] = (zst - z_center) / z_scale
    x[3] = tnk
    return -q * v + r * ik + f_scale * _mlp_fwd(pk, x, h1, h2)


cdef inline double _stage_fwd(const double* pk, double q, double r, double f_scale,
                              double v1_scale, double z_center, double z_scale,
                              double v, double zst, double ik, double ink, double tnk,
                              double* h1, double* h2, double* gp1, double* gp2) nogil:
    cdef double x[NIN]
    x[0] = v / v1_scale
    x[1] = ink
    x[2] = (zst - z_center) / z_scale
    x[3] = tnk
    return -q * v + r * ik + f_scale * _mlp_fwd_stash(pk, x, h1, h2, gp1, gp2)


def ude_simulate(theta, ocv_c, double r0, double r1, double c1, double eta,
                 double q_nom, i_phys, i_norm, t_norm, z0, double dt,
                 double f_scale, double v1_scale, double z_center, double z_scale):
    """Forward integration of the hybrid model over a batch of windows."""
    cdef cnp.ndarray[double, ndim=1] th = np.ascontiguousarray(theta, dtype=np.float64)
    if th.shape[0] != MLP_NPARAMS:
        raise ValueError(f"expected {MLP_NPARAMS} MLP parameters, got {th.shape[0]}")
    cdef cnp.ndarray[double, ndim=1] c_arr = np.ascontiguousarray(ocv_c, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] ip = np.ascontiguousarray(i_phys, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] inm = np.ascontiguousarray(i_norm, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] tnm = np.ascontiguousarray(t_norm, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] z0_arr = np.ascontiguousarray(z0, dtype=np.float64)
    cdef Py_ssize_t b = ip.shape[0], n = ip.shape[1], nc = c_arr.shape[0]
    cdef cnp.ndarray[double, ndim=2] v_out = np.empty((b, n))
    cdef cnp.ndarray[double, ndim=2] v1 = np.zeros((b, n))
    cdef cnp.ndarray[double, ndim=2] z = np.empty((b, n))
    cdef cnp.ndarray[double, ndim=1] pk_arr = np.empty(MLP_NPARAMS)
    cdef double* pk = &pk_arr[0]
    cdef double h = dt
    cdef double q = 1.0 / (r1 * c1)
    cdef double r = 1.0 / c1
    cdef double h1buf[NH]
    cdef double h2buf[NH]
    cdef double cv, cz, ik, ink, tnk, wrate, g1, g2, g3, g4, zb, zd, zcl, x
    cdef Py_ssize_t w, k
    cdef Py_ssize_t diverged = -1
    with nogil:
        _repack_mlp(&th[0], pk)
        for w in range(b):
            cv = 0.0
            cz = z0_arr[w]
            z[w, 0] = cz
            for k in range(n - 1):
                ik = ip[w, k]
                ink = inm[w, k]
                tnk = tnm[w, k]
                wrate = -eta * ik / q_nom
                zb = cz + 0.5 * h * wrate
                zd = cz + h * wrate
                g1 = _stage_rate(pk, q, r, f_scale, v1_scale, z_center, z_scale,
                                 cv, cz, ik, ink, tnk, h1buf, h2buf)
                g2 = _stage_rate(pk, q, r, f_scale, v1_scale, z_center, z_scale,
                                 cv + 0.5 * h * g1, zb, ik, ink, tnk, h1buf, h2buf)
                g3 = _stage_rate(pk, q, r, f_scale, v1_scale, z_center, z_scale,
                                 cv + 0.5 * h * g2, zb, ik, ink, tnk, h1buf, h2buf)
                g4 = _stage_rate(pk, q, r, f_scale, v1_scale, z_center, z_scale,
                                 cv + h * g3, zd, ik, ink, tnk, h1buf, h2buf)
                cv = cv + (h / 6.0) * (g1 + 2.0 * g2 + 2.0 * g3 + g4)
                cz = cz + h * wrate
                if not (isfinite(cv) and isfinite(cz)):
                    if diverged < 0 or k + 1 < diverged:
                        diverged = k + 1
                    break
                v1[w, k + 1] = cv
                z[w, k + 1] = cz
            if diverged < 0:
                for k in range(n):
                    zcl = z[w, k]
                    if zcl < 0.0:
                        zcl = 0.0
                    elif zcl > 1.0:
                        zcl = 1.0
                    x = 2.0 * zcl - 1.0
                    v_out[w, k] = _cheb_eval_c(&c_arr[0], nc, x) - r0 * ip[w, k] - v1[w, k]
    if diverged >= 0:
        raise IntegrationDivergedError(diverged)
    return v_out, v1, z


def ude_loss_grad(theta, ocv_c, double r0, double r1, double c1, double eta,
                  double q_nom, i_phys, i_norm, t_norm, z0, target_norm,
                  double v_mean, double v_std, double dt,
                  double f_scale, double v1_scale, double z_center, double z_scale):
    """Normalized-voltage MSE plus exact gradients via reverse accumulation.

    Same semantics as the numpy reference: per window the forward sweep
    stashes stage states and hidden activations, the output map seeds the
    adjoints, and a reverse sweep over the RK4 steps propagates them while
    accumulating parameter gradients.
    """
    cdef cnp.ndarray[double, ndim=1] th = np.ascontiguousarray(theta, dtype=np.float64)
    if th.shape[0] != MLP_NPARAMS:
        raise ValueError(f"expected {MLP_NPARAMS} MLP parameters, got {th.shape[0]}")
    cdef cnp.ndarray[double, ndim=1] c_arr = np.ascontiguousarray(ocv_c, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] ip = np.ascontiguousarray(i_phys, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] inm = np.ascontiguousarray(i_norm, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] tnm = np.ascontiguousarray(t_norm, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] z0_arr = np.ascontiguousarray(z0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] tgt = np.ascontiguousarray(target_norm, dtype=np.float64)
    cdef Py_ssize_t b = ip.shape[0], n = ip.shape[1], nc = c_arr.shape[0]
    cdef Py_ssize_t n_steps = n - 1
    cdef Py_ssize_t nstash = n_steps if n_steps > 0 else 1

    cdef cnp.ndarray[double, ndim=2] v_out = np.empty((b, n))
    cdef cnp.ndarray[double, ndim=1] d_theta = np.zeros(MLP_NPARAMS)
    cdef cnp.ndarray[double, ndim=1] d_ocv = np.zeros(nc)
    cdef cnp.ndarray[double, ndim=1] pk_arr = np.empty(MLP_NPARAMS)

    # Per-window stashes, reused across windows.
    cdef cnp.ndarray[double, ndim=1] v1_tr = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] z_tr = np.empty(n)
    cdef cnp.ndarray[double, ndim=2] sv = np.empty((nstash, 4))
    cdef cnp.ndarray[double, ndim=2] sz = np.empty((nstash, 4))
    cdef cnp.ndarray[double, ndim=3] h1s = np.empty((nstash, 4, NH))
    cdef cnp.ndarray[double, ndim=3] h2s = np.empty((nstash, 4, NH))
    cdef cnp.ndarray[double, ndim=3] gp1s = np.empty((nstash, 4, NH))
    cdef cnp.ndarray[double, ndim=3] gp2s = np.empty((nstash, 4, NH))
    cdef cnp.ndarray[double, ndim=1] lam_v_out = np.empty(n)
    cdef cnp.ndarray[double, ndim=1] lam_z_out = np.empty(n)

    cdef double* thp = &th[0]
    cdef double* pk = &pk_arr[0]
    cdef double* gth = &d_theta[0]
    cdef double h = dt
    cdef double q = 1.0 / (r1 * c1)
    cdef double r = 1.0 / c1
    cdef double inv_bn = 1.0 / (<double> (b * n))
    cdef double loss = 0.0
    cdef double d_r0 = 0.0, d_r1 = 0.0, d_c1 = 0.0, d_eta = 0.0

    cdef double xbuf[NIN]
    cdef double wk2[NH]
    cdef double wk1[NH]
    cdef double stage_g[4]
    cdef double stage_x0[4]
    cdef double stage_x2[4]
    cdef double gvst[4]
    cdef double gzst[4]
    cdef double lamg[4]

    cdef double cv, cz, ik, ink, tnk, wrate, zb, zd, zcl, x, err, dldv
    cdef double t0c, t1c, tnc
    cdef double lv, lz, lg1, lg2, lg3, lg4, lva, lvb, lvc, lvd, lza, lzb, lzc, lzd, lamw
    cdef double h6 = h / 6.0, h3 = h / 3.0, h2_ = h / 2.0
    cdef double sc
    cdef Py_ssize_t w, k, s, j
    cdef Py_ssize_t diverged = -1

    with nogil:
        _repack_mlp(thp, pk)
        for w in range(b):
            # ---- forward sweep with stage stashes
            cv = 0.0
            cz = z0_arr[w]
            v1_tr[0] = 0.0
            z_tr[0] = cz
            for k in range(n_steps):
                ik = ip[w, k]
                ink = inm[w, k]
                tnk = tnm[w, k]
                wrate = -eta * ik / q_nom
                zb = cz + 0.5 * h * wrate
                zd = cz + h * wrate
                sv[k, 0] = cv
                sz[k, 0] = cz
                stage_g[0] = _stage_fwd(pk, q, r, f_scale, v1_scale, z_center, z_scale,
                                        cv, cz, ik, ink, tnk,
                                        &h1s[k, 0, 0], &h2s[k, 0, 0], &gp1s[k, 0, 0], &gp2s[k, 0, 0])
                sv[k, 1] = cv + 0.5 * h * stage_g[0]
                sz[k, 1] = zb
                stage_g[1] = _stage_fwd(pk, q, r, f_scale, v1_scale, z_center, z_scale,
                                        sv[k, 1], zb, ik, ink, tnk,
                                        &h1s[k, 1, 0], &h2s[k, 1, 0], &gp1s[k, 1, 0], &gp2s[k, 1, 0])
                sv[k, 2] = cv + 0.5 * h * stage_g[1]
                sz[k, 2] = zb
                stage_g[2] = _stage_fwd(pk, q, r, f_scale, v1_scale, z_center, z_scale,
                                        sv[k, 2], zb, ik, ink, tnk,
                                        &h1s[k, 2, 0], &h2s[k, 2, 0], &gp1s[k, 2, 0], &gp2s[k, 2, 0])
                sv[k, 3] = cv + h * stage_g[2]
                sz[k, 3] = zd
                stage_g[3] = _stage_fwd(pk, q, r, f_scale, v1_scale, z_center, z_scale,
                                        sv[k, 3], zd, ik, ink, tnk,
                                        &h1s[k, 3, 0], &h2s[k, 3, 0], &gp1s[k, 3, 0], &gp2s[k, 3, 0])
                cv = cv + h6 * (stage_g[0] + 2.0 * stage_g[1] + 2.0 * stage_g[2] + stage_g[3])
                cz = cz + h * wrate
                if not (isfinite(cv) and isfinite(cz)):
                    if diverged < 0 or k + 1 < diverged:
                        diverged = k + 1
                    break
                v1_tr[k + 1] = cv
                z_tr[k + 1] = cz
            if diverged >= 0:
                break

            # ---- output map, loss, adjoint seeds, r0/OCV gradients
            for k in range(n):
                zcl = z_tr[k]
                if zcl < 0.0:
                    zcl = 0.0
                elif zcl > 1.0:
                    zcl = 1.0
                x = 2.0 * zcl - 1.0
                v_out[w, k] = _cheb_eval_c(&c_arr[0], nc, x) - r0 * ip[w, k] - v1_tr[k]
                err = (v_out[w, k] - v_mean) / v_std - tgt[w, k]
                loss += err * err
                dldv = 2.0 * inv_bn * err / v_std
                lam_v_out[k] = -dldv
                if z_tr[k] >= 0.0 and z_tr[k] <= 1.0:
                    lam_z_out[k] = dldv * 2.0 * _cheb_deriv_c(&c_arr[0], nc, x)
                else:
                    lam_z_out[k] = 0.0
                d_r0 -= dldv * ip[w, k]
                t0c = 1.0
                t1c = x
                d_ocv[0] += dldv
                d_ocv[1] += dldv * t1c
                for j in range(2, nc):
                    tnc = 2.0 * x * t1c - t0c
                    t0c = t1c
                    t1c = tnc
                    d_ocv[j] += dldv * t1c

            # ---- reverse sweep
            lv = lam_v_out[n - 1]
            lz = lam_z_out[n - 1]
            for k in range(n_steps - 1, -1, -1):
                ik = ip[w, k]
                ink = inm[w, k]
                tnk = tnm[w, k]
                for s in range(4):
                    stage_x0[s] = sv[k, s] / v1_scale
                    stage_x2[s] = (sz[k, s] - z_center) / z_scale
                    _input_grads(thp, &gp1s[k, s, 0], &gp2s[k, s, 0],
                                 &wk2[0], &wk1[0], &gvst[s], &gzst[s])
                    gvst[s] = -q + (f_scale / v1_scale) * gvst[s]
                    gzst[s] = (f_scale / z_scale) * gzst[s]
                lg4 = h6 * lv
                lvd = lg4 * gvst[3]
                lzd = lg4 * gzst[3]
                lg3 = h3 * lv + h * lvd
                lvc = lg3 * gvst[2]
                lzc = lg3 * gzst[2]
                lg2 = h3 * lv + h2_ * lvc
                lvb = lg2 * gvst[1]
                lzb = lg2 * gzst[1]
                lg1 = h6 * lv + h2_ * lvb
                lva = lg1 * gvst[0]
                lza = lg1 * gzst[0]
                lamg[0] = lg1
                lamg[1] = lg2
                lamg[2] = lg3
                lamg[3] = lg4
                lamw = h * lz + h2_ * (lzb + lzc) + h * lzd
                lv = lv + lva + lvb + lvc + lvd + lam_v_out[k]
                lz = lz + lza + lzb + lzc + lzd + lam_z_out[k]
                d_eta += lamw * (-ik / q_nom)
                for s in range(4):
                    sc = lamg[s]
                    d_r1 += sc * sv[k, s] * q / r1
                    d_c1 += sc * (sv[k, s] * q - ik * r) / c1
                    xbuf[0] = stage_x0[s]
                    xbuf[1] = ink
                    xbuf[2] = stage_x2[s]
                    xbuf[3] = tnk
                    _param_grads(thp, gth, &xbuf[0], &h1s[k, s, 0], &h2s[k, s, 0],
                                 &gp1s[k, s, 0], &gp2s[k, s, 0], f_scale * sc,
                                 &wk2[0], &wk1[0])

    if diverged >= 0:
        raise IntegrationDivergedError(diverged)
    loss *= inv_bn
    return loss, v_out, d_theta, d_ocv, d_r0, d_r1, d_c1, d_eta


# ---------------------------------------------------------------------------
# Stacked LSTM
# ---------------------------------------------------------------------------

cdef inline double _sigm(double x) nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def _lstm_offsets(Py_ssize_t n_params, Py_ssize_t n_input, Py_ssize_t n_hidden,
                  Py_ssize_t n_layers):
    """Rows 0..n_layers-1: (W_ih, W_hh, b_ih, b_hh) offsets; row n_layers:
    (head_w, head_b, 0, 0)."""
    offs = np.zeros((n_layers + 1, 4), dtype=np.int64)
    off = 0
    feat = n_input
    g = 4 * n_hidden
    for ll in range(n_layers):
        offs[ll, 0] = off
        off += g * feat
        offs[ll, 1] = off
        off += g * n_hidden
        offs[ll, 2] = off
        off += g
        offs[ll, 3] = off
        off += g
        feat = n_hidden
    offs[n_layers, 0] = off
    offs[n_layers, 1] = off + n_hidden
    if off + n_hidden + 1 != n_params:
        raise ValueError(f"parameter vector has {n_params} entries, layout needs "
                         f"{off + n_hidden + 1}")
    return offs


def _lstm_repack(params, offs, Py_ssize_t n_input, Py_ssize_t n_hidden,
                 Py_ssize_t n_layers):
    """Copy of the parameter vector with W_ih and W_hh stored transposed."""
    pk = np.array(params, dtype=np.float64, copy=True)
    feat = n_input
    g = 4 * n_hidden
    for ll in range(n_layers):
        w_ih = params[offs[ll, 0] : offs[ll, 0] + g * feat].reshape(g, feat)
        pk[offs[ll, 0] : offs[ll, 0] + g * feat] = np.ascontiguousarray(w_ih.T).ravel()
        w_hh = params[offs[ll, 1] : offs[ll, 1] + g * n_hidden].reshape(g, n_hidden)
        pk[offs[ll, 1] : offs[ll, 1] + g * n_hidden] = np.ascontiguousarray(w_hh.T).ravel()
        feat = n_hidden
    return pk


def lstm_forward(params, x, Py_ssize_t n_input=3, Py_ssize_t n_hidden=32,
                 Py_ssize_t n_layers=2):
    """Stacked LSTM over x (B, L, n_input) with zero initial states."""
    cdef cnp.ndarray[double, ndim=1] p = np.ascontiguousarray(params, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] xs = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = xs.shape[0], n = xs.shape[1]
    cdef Py_ssize_t g = 4 * n_hidden
    cdef cnp.ndarray[cnp.int64_t, ndim=2] offs = _lstm_offsets(p.shape[0], n_input,
                                                               n_hidden, n_layers)
    cdef cnp.ndarray[double, ndim=1] pk_arr = _lstm_repack(p, offs, n_input, n_hidden, n_layers)
    cdef Py_ssize_t o_head_w = offs[n_layers, 0]
    cdef Py_ssize_t o_head_b = offs[n_layers, 1]
    cdef cnp.ndarray[double, ndim=2] y = np.empty((b, n))
    cdef Py_ssize_t max_feat = n_input if n_input > n_hidden else n_hidden
    cdef cnp.ndarray[double, ndim=2] seq = np.empty((n, max_feat))
    cdef cnp.ndarray[double, ndim=1] hbuf = np.empty(n_hidden)
    cdef cnp.ndarray[double, ndim=1] cbuf = np.empty(n_hidden)
    cdef cnp.ndarray[double, ndim=1] abuf = np.empty(g)
    cdef double* pp = &pk_arr[0]
    cdef double acc, xi, gi, gf, gg, go
    cdef Py_ssize_t w, t, l, j, i, feat
    cdef Py_ssize_t o_ih, o_hh, o_bi, o_bh
    with nogil:
        for w in range(b):
            for t in range(n):
                for i in range(n_input):
                    seq[t, i] = xs[w, t, i]
            feat = n_input
            for l in range(n_layers):
                o_ih = offs[l, 0]
                o_hh = offs[l, 1]
                o_bi = offs[l, 2]
                o_bh = offs[l, 3]
                for j in range(n_hidden):
                    hbuf[j] = 0.0
                    cbuf[j] = 0.0
                for t in range(n):
                    for j in range(g):
                        abuf[j] = pp[o_bi + j] + pp[o_bh + j]
                    for i in range(feat):
                        xi = seq[t, i]
                        for j in range(g):
                            abuf[j] += pp[o_ih + i * g + j] * xi
                    for i in range(n_hidden):
                        xi = hbuf[i]
                        for j in range(g):
                            abuf[j] += pp[o_hh + i * g + j] * xi
                    for j in range(n_hidden):
                        gi = _sigm(abuf[j])
                        gf = _sigm(abuf[n_hidden + j])
                        gg = tanh(abuf[2 * n_hidden + j])
                        go = _sigm(abuf[3 * n_hidden + j])
                        cbuf[j] = gf * cbuf[j] + gi * gg
                        hbuf[j] = go * tanh(cbuf[j])
                    for j in range(n_hidden):
                        seq[t, j] = hbuf[j]
                feat = n_hidden
            for t in range(n):
                acc = pp[o_head_b]
                for j in range(n_hidden):
                    acc += pp[o_head_w + j] * seq[t, j]
                y[w, t] = acc
    return y


def lstm_loss_grad(params, x, target, Py_ssize_t n_input=3, Py_ssize_t n_hidden=32,
                   Py_ssize_t n_layers=2):
    """MSE loss over all (B, L) outputs plus the flat parameter gradient."""
    cdef cnp.ndarray[double, ndim=1] p = np.ascontiguousarray(params, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] xs = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] tgt = np.ascontiguousarray(target, dtype=np.float64)
    cdef Py_ssize_t b = xs.shape[0], n = xs.shape[1]
    cdef Py_ssize_t g = 4 * n_hidden
    cdef cnp.ndarray[cnp.int64_t, ndim=2] offs = _lstm_offsets(p.shape[0], n_input,
                                                               n_hidden, n_layers)
    cdef cnp.ndarray[double, ndim=1] pk_arr = _lstm_repack(p, offs, n_input, n_hidden, n_layers)
    cdef Py_ssize_t o_head_w = offs[n_layers, 0]
    cdef Py_ssize_t o_head_b = offs[n_layers, 1]
    cdef cnp.ndarray[double, ndim=2] y = np.empty((b, n))
    cdef cnp.ndarray[double, ndim=1] grad = np.zeros(p.shape[0])

    # Per-window stashes: inputs per layer, gate activations, cell traces.
    cdef Py_ssize_t max_feat = n_input if n_input > n_hidden else n_hidden
    cdef cnp.ndarray[double, ndim=3] x_layers = np.empty((n_layers + 1, n, max_feat))
    cdef cnp.ndarray[double, ndim=3] gates = np.empty((n_layers, n, g))
    cdef cnp.ndarray[double, ndim=3] c_seq = np.empty((n_layers, n, n_hidden))
    cdef cnp.ndarray[double, ndim=3] tc_seq = np.empty((n_layers, n, n_hidden))
    cdef cnp.ndarray[double, ndim=1] hbuf = np.empty(n_hidden)
    cdef cnp.ndarray[double, ndim=1] cbuf = np.empty(n_hidden)
    cdef cnp.ndarray[double, ndim=2] dh_seq = np.empty((n, n_hidden))
    cdef cnp.ndarray[double, ndim=2] dx_seq = np.empty((n, max_feat))
    cdef cnp.ndarray[double, ndim=1] dh = np.empty(n_hidden)
    cdef cnp.ndarray[double, ndim=1] dc = np.empty(n_hidden)
    cdef cnp.ndarray[double, ndim=1] dpre = np.empty(g)

    cdef double* pp = &p[0]
    cdef double* pkp = &pk_arr[0]
    cdef double* gp = &grad[0]
    cdef double inv_bn = 1.0 / (<double> (b * n))
    cdef double loss = 0.0
    cdef double acc, xi, gi, gf, gg, go, err, dyt, tc, c_prev, dcj, dgi, dgf, dgg, dgo, dj
    cdef Py_ssize_t w, t, l, j, i, feat
    cdef Py_ssize_t o_ih, o_hh, o_bi, o_bh

    with nogil:
        for w in range(b):
            # ---- forward with stashes
            for t in range(n):
                for i in range(n_input):
                    x_layers[0, t, i] = xs[w, t, i]
            feat = n_input
            for l in range(n_layers):
                o_ih = offs[l, 0]
                o_hh = offs[l, 1]
                o_bi = offs[l, 2]
                o_bh = offs[l, 3]
                for j in range(n_hidden):
                    hbuf[j] = 0.0
                    cbuf[j] = 0.0
                for t in range(n):
                    for j in range(g):
                        dpre[j] = pp[o_bi + j] + pp[o_bh + j]
                    for i in range(feat):
                        xi = x_layers[l, t, i]
                        for j in range(g):
                            dpre[j] += pkp[o_ih + i * g + j] * xi
                    for i in range(n_hidden):
                        xi = hbuf[i]
                        for j in range(g):
                            dpre[j] += pkp[o_hh + i * g + j] * xi
                    for j in range(n_hidden):
                        gi = _sigm(dpre[j])
                        gf = _sigm(dpre[n_hidden + j])
                        gg = tanh(dpre[2 * n_hidden + j])
                        go = _sigm(dpre[3 * n_hidden + j])
                        cbuf[j] = gf * cbuf[j] + gi * gg
                        tc = tanh(cbuf[j])
                        hbuf[j] = go * tc
                        gates[l, t, j] = gi
                        gates[l, t, n_hidden + j] = gf
                        gates[l, t, 2 * n_hidden + j] = gg
                        gates[l, t, 3 * n_hidden + j] = go
                        c_seq[l, t, j] = cbuf[j]
                        tc_seq[l, t, j] = tc
                        x_layers[l + 1, t, j] = hbuf[j]
                feat = n_hidden
            # ---- head, loss, output adjoints
            for t in range(n):
                acc = pp[o_head_b]
                for j in range(n_hidden):
                    acc += pp[o_head_w + j] * x_layers[n_layers, t, j]
                y[w, t] = acc
                err = acc - tgt[w, t]
                loss += err * err
                dyt = 2.0 * inv_bn * err
                gp[o_head_b] += dyt
                for j in range(n_hidden):
                    gp[o_head_w + j] += dyt * x_layers[n_layers, t, j]
                    dh_seq[t, j] = dyt * pp[o_head_w + j]
            # ---- backward through layers, top to bottom; dx of a layer
            # becomes d_h_seq of the layer below
            for l in range(n_layers - 1, -1, -1):
                feat = n_input if l == 0 else n_hidden
                o_ih = offs[l, 0]
                o_hh = offs[l, 1]
                o_bi = offs[l, 2]
                o_bh = offs[l, 3]
                for j in range(n_hidden):
                    dh[j] = 0.0
                    dc[j] = 0.0
                for t in range(n - 1, -1, -1):
                    for j in range(n_hidden):
                        gi = gates[l, t, j]
                        gf = gates[l, t, n_hidden + j]
                        gg = gates[l, t, 2 * n_hidden + j]
                        go = gates[l, t, 3 * n_hidden + j]
                        tc = tc_seq[l, t, j]
                        c_prev = c_seq[l, t - 1, j] if t > 0 else 0.0
                        acc = dh[j] + dh_seq[t, j]
                        dgo = acc * tc
                        dcj = dc[j] + acc * go * (1.0 - tc * tc)
                        dgi = dcj * gg
                        dgf = dcj * c_prev
                        dgg = dcj * gi
                        dpre[j] = dgi * gi * (1.0 - gi)
                        dpre[n_hidden + j] = dgf * gf * (1.0 - gf)
                        dpre[2 * n_hidden + j] = dgg * (1.0 - gg * gg)
                        dpre[3 * n_hidden + j] = dgo * go * (1.0 - go)
                        dc[j] = dcj * gf
                    for i in range(n_hidden):
                        dh[i] = 0.0
                    for j in range(g):
                        dj = dpre[j]
                        gp[o_bi + j] += dj
                        gp[o_bh + j] += dj
                        for i in range(feat):
                            gp[o_ih + j * feat + i] += dj * x_layers[l, t, i]
                        if t > 0:
                            for i in range(n_hidden):
                                gp[o_hh + j * n_hidden + i] += dj * x_layers[l + 1, t - 1, i]
                        for i in range(n_hidden):
                            dh[i] += dj * pp[o_hh + j * n_hidden + i]
                    if l > 0:
                        for i in range(feat):
                            dx_seq[t, i] = 0.0
                        for j in range(g):
                            dj = dpre[j]
                            for i in range(feat):
                                dx_seq[t, i] += dj * pp[o_ih + j * feat + i]
                if l > 0:
                    for t in range(n):
                        for i in range(n_hidden):
                            dh_seq[t, i] = dx_seq[t, i]
    loss *= inv_bn
    return loss, grad, y
