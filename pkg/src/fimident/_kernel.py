"""Compiled fixed-step integration kernel.

Machine states per unit: delta, omega (p.u.), E'q, E'd. Governor states:
gate velocity v, gate g, washout w, turbine lag xt, last input u. AVR states:
lead-lag x, E_fd, last error e. Recorded columns are listed in ``REC_*``.
"""
import numpy as np
from numba import njit

# machine parameter columns (system base except H and D on machine base)
MP_RA, MP_XD, MP_XDP, MP_XQ, MP_XQP, MP_TD0, MP_TQ0, MP_H, MP_D, MP_ZB, MP_WS = range(11)
# governor parameter columns
GP_ON, GP_KG, GP_TP, GP_SIG, GP_DEL, GP_TR, GP_KT, GP_TN, GP_TD = range(9)
GP_GMIN, GP_GMAX, GP_GDMIN, GP_GDMAX, GP_PREF = range(9, 14)
# avr parameter columns
AP_ON, AP_TA, AP_TB, AP_K, AP_TE, AP_EMIN, AP_EMAX, AP_VREF = range(8)
# recorded columns
(REC_DELTA, REC_OMEGA, REC_EQP, REC_EDP, REC_VRE, REC_VIM, REC_IRE, REC_IIM,
 REC_PM, REC_EFD, REC_PAG) = range(11)
N_REC = 11

STATUS_OK, STATUS_NONFINITE, STATUS_SINGULAR = 0, 1, 2


@njit(cache=True)
def _solve_inplace(A, b):
    # Gaussian elimination with partial pivoting; returns False if singular
    n = b.shape[0]
    for k in range(n):
        p = k
        amax = abs(A[k, k])
        for i in range(k + 1, n):
            if abs(A[i, k]) > amax:
                amax = abs(A[i, k])
                p = i
        if amax < 1e-300:
            return False
        if p != k:
            for j in range(n):
                tmp = A[k, j]
                A[k, j] = A[p, j]
                A[p, j] = tmp
            tmp = b[k]
            b[k] = b[p]
            b[p] = tmp
        for i in range(k + 1, n):
            f = A[i, k] / A[k, k]
            if f != 0.0:
                for j in range(k, n):
                    A[i, j] -= f * A[k, j]
                b[i] -= f * b[k]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for j in range(i + 1, n):
            s -= A[i, j] * b[j]
        b[i] = s / A[i, i]
    return True


@njit(cache=True)
def network(x, Yr, mp, A, b, vi, ii):
    """Solve the machine-network interface; fills terminal V and I (network frame).

    ``vi``/``ii`` get (re, im) per machine, ``ii`` also dq currents in cols 2, 3.
    """
    n = x.shape[0]
    for r in range(2 * n):
        for c in range(2 * n):
            A[r, c] = Yr[r, c]
        b[r] = 0.0
    for k in range(n):
        ra = mp[k, MP_RA]
        xdp = mp[k, MP_XDP]
        xqp = mp[k, MP_XQP]
        th = x[k, 0] - 0.5 * np.pi
        c = np.cos(th)
        s = np.sin(th)
        det = ra * ra + xdp * xqp
        # Zinv in dq: [[ra, xqp], [-xdp, ra]] / det
        z00 = ra / det
        z01 = xqp / det
        z10 = -xdp / det
        z11 = ra / det
        # Ym = R Zinv R^T
        a00 = c * z00 - s * z10
        a01 = c * z01 - s * z11
        a10 = s * z00 + c * z10
        a11 = s * z01 + c * z11
        m00 = a00 * c - a01 * s
        m01 = a00 * s + a01 * c
        m10 = a10 * c - a11 * s
        m11 = a10 * s + a11 * c
        er = c * x[k, 3] - s * x[k, 2]
        ei = s * x[k, 3] + c * x[k, 2]
        r0 = 2 * k
        A[r0, r0] += m00
        A[r0, r0 + 1] += m01
        A[r0 + 1, r0] += m10
        A[r0 + 1, r0 + 1] += m11
        b[r0] = m00 * er + m01 * ei
        b[r0 + 1] = m10 * er + m11 * ei
    if not _solve_inplace(A, b):
        return False
    for k in range(n):
        vr = b[2 * k]
        vim = b[2 * k + 1]
        vi[k, 0] = vr
        vi[k, 1] = vim
        th = x[k, 0] - 0.5 * np.pi
        c = np.cos(th)
        s = np.sin(th)
        # dq terminal voltage and stator solve
        vd = c * vr + s * vim
        vq = -s * vr + c * vim
        ra = mp[k, MP_RA]
        xdp = mp[k, MP_XDP]
        xqp = mp[k, MP_XQP]
        det = ra * ra + xdp * xqp
        dd = x[k, 3] - vd
        dq = x[k, 2] - vq
        id_ = (ra * dd + xqp * dq) / det
        iq = (-xdp * dd + ra * dq) / det
        ii[k, 0] = c * id_ - s * iq
        ii[k, 1] = s * id_ + c * iq
        ii[k, 2] = id_
        ii[k, 3] = iq
    return True


@njit(cache=True)
def machine_deriv(x, pm, efd, ii, mp, dx):
    n = x.shape[0]
    for k in range(n):
        om = x[k, 1]
        id_ = ii[k, 2]
        iq = ii[k, 3]
        xdp = mp[k, MP_XDP]
        xqp = mp[k, MP_XQP]
        pag = x[k, 3] * id_ + x[k, 2] * iq + (xqp - xdp) * id_ * iq
        te = pag / mp[k, MP_ZB] / om
        tm = pm[k] / om
        dx[k, 0] = mp[k, MP_WS] * (om - 1.0)
        dx[k, 1] = (tm - te - mp[k, MP_D] * (om - 1.0)) / (2.0 * mp[k, MP_H])
        dx[k, 2] = (-x[k, 2] - (mp[k, MP_XD] - xdp) * id_ + efd[k]) / mp[k, MP_TD0]
        dx[k, 3] = (-x[k, 3] + (mp[k, MP_XQ] - xqp) * iq) / mp[k, MP_TQ0]


@njit(cache=True)
def governor_output(gs, gp):
    kt = gp[GP_KT]
    r = gp[GP_TN] / gp[GP_TD]
    return kt * (r * gs[1] + (1.0 - r) * gs[3])


@njit(cache=True)
def governor_advance(gs, u1, gp, M1, M2, h):
    """One trapezoidal step of the gate loop and turbine with limits; mutates ``gs``."""
    v0 = gs[0]
    g0 = gs[1]
    w0 = gs[2]
    xt0 = gs[3]
    us = gs[4] + u1
    v1 = M1[0, 0] * v0 + M1[0, 1] * g0 + M1[0, 2] * w0 + M2[0] * us
    g1 = M1[1, 0] * v0 + M1[1, 1] * g0 + M1[1, 2] * w0 + M2[1] * us
    # rate limit on the servo output, then on the realised gate movement
    v1 = min(max(v1, gp[GP_GDMIN]), gp[GP_GDMAX])
    g1 = min(max(g1, g0 + h * gp[GP_GDMIN]), g0 + h * gp[GP_GDMAX])
    if g1 >= gp[GP_GMAX]:
        g1 = gp[GP_GMAX]
        if v1 > 0.0:
            v1 = 0.0
    elif g1 <= gp[GP_GMIN]:
        g1 = gp[GP_GMIN]
        if v1 < 0.0:
            v1 = 0.0
    a = 0.5 * h / gp[GP_TR]
    w1 = ((1.0 - a) * w0 + a * (g0 + g1)) / (1.0 + a)
    bt = 0.5 * h / gp[GP_TD]
    xt1 = ((1.0 - bt) * xt0 + bt * (g0 + g1)) / (1.0 + bt)
    gs[0] = v1
    gs[1] = g1
    gs[2] = w1
    gs[3] = xt1
    gs[4] = u1


@njit(cache=True)
def avr_advance(avs, e1, ap, h):
    """One trapezoidal step of lead-lag and exciter with output clamp; mutates ``avs``."""
    ta = ap[AP_TA]
    tb = ap[AP_TB]
    x0 = avs[0]
    ef0 = avs[1]
    e0 = avs[2]
    c = 0.5 * h / tb
    x1 = ((1.0 - c) * x0 + c * (e0 + e1)) / (1.0 + c)
    r = ta / tb
    y0 = r * e0 + (1.0 - r) * x0
    y1 = r * e1 + (1.0 - r) * x1
    d = 0.5 * h / ap[AP_TE]
    ef1 = ((1.0 - d) * ef0 + d * ap[AP_K] * (y0 + y1)) / (1.0 + d)
    ef1 = min(max(ef1, ap[AP_EMIN]), ap[AP_EMAX])
    avs[0] = x1
    avs[1] = ef1
    avs[2] = e1


@njit(cache=True)
def _record(out, row, x, vi, ii, pm, efd, mp):
    n = x.shape[0]
    for k in range(n):
        out[row, k, REC_DELTA] = x[k, 0]
        out[row, k, REC_OMEGA] = x[k, 1]
        out[row, k, REC_EQP] = x[k, 2]
        out[row, k, REC_EDP] = x[k, 3]
        out[row, k, REC_VRE] = vi[k, 0]
        out[row, k, REC_VIM] = vi[k, 1]
        out[row, k, REC_IRE] = ii[k, 0]
        out[row, k, REC_IIM] = ii[k, 1]
        out[row, k, REC_PM] = pm[k]
        out[row, k, REC_EFD] = efd[k]
        id_ = ii[k, 2]
        iq = ii[k, 3]
        out[row, k, REC_PAG] = (x[k, 3] * id_ + x[k, 2] * iq
                                + (mp[k, MP_XQP] - mp[k, MP_XDP]) * id_ * iq)


@njit(cache=True)
def run_segment(x, gs, avs, pm, efd, Yr, mp, gp, gM1, gM2, ap,
                start, nsteps, h, method, freeze, out):
    """Advance ``nsteps`` steps from row ``start`` of ``out`` (which must already
    hold the sample at ``start``). All state arrays are updated in place."""
    n = x.shape[0]
    A = np.empty((2 * n, 2 * n))
    b = np.empty(2 * n)
    vi = np.empty((n, 2))
    ii = np.empty((n, 4))
    k1 = np.empty((n, 4))
    k2 = np.empty((n, 4))
    k3 = np.empty((n, 4))
    k4 = np.empty((n, 4))
    xt = np.empty((n, 4))
    xn = np.empty((n, 4))
    for step in range(nsteps):
        if method == 0:
            if not network(x, Yr, mp, A, b, vi, ii):
                return STATUS_SINGULAR
            machine_deriv(x, pm, efd, ii, mp, k1)
            for k in range(n):
                for j in range(4):
                    xt[k, j] = x[k, j] + 0.5 * h * k1[k, j]
            if not network(xt, Yr, mp, A, b, vi, ii):
                return STATUS_SINGULAR
            machine_deriv(xt, pm, efd, ii, mp, k2)
            for k in range(n):
                for j in range(4):
                    xt[k, j] = x[k, j] + 0.5 * h * k2[k, j]
            if not network(xt, Yr, mp, A, b, vi, ii):
                return STATUS_SINGULAR
            machine_deriv(xt, pm, efd, ii, mp, k3)
            for k in range(n):
                for j in range(4):
                    xt[k, j] = x[k, j] + h * k3[k, j]
            if not network(xt, Yr, mp, A, b, vi, ii):
                return STATUS_SINGULAR
            machine_deriv(xt, pm, efd, ii, mp, k4)
            for k in range(n):
                for j in range(4):
                    x[k, j] += h / 6.0 * (k1[k, j] + 2.0 * k2[k, j] + 2.0 * k3[k, j] + k4[k, j])
        else:
            # implicit trapezoid, fixed-point iterations from an Euler predictor
            if not network(x, Yr, mp, A, b, vi, ii):
                return STATUS_SINGULAR
            machine_deriv(x, pm, efd, ii, mp, k1)
            for k in range(n):
                for j in range(4):
                    xn[k, j] = x[k, j] + h * k1[k, j]
            for it in range(50):
                if not network(xn, Yr, mp, A, b, vi, ii):
                    return STATUS_SINGULAR
                machine_deriv(xn, pm, efd, ii, mp, k2)
                err = 0.0
                for k in range(n):
                    for j in range(4):
                        new = x[k, j] + 0.5 * h * (k1[k, j] + k2[k, j])
                        d = abs(new - xn[k, j])
                        if d > err:
                            err = d
                        xn[k, j] = new
                if err < 1e-14:
                    break
            for k in range(n):
                for j in range(4):
                    x[k, j] = xn[k, j]
        if not network(x, Yr, mp, A, b, vi, ii):
            return STATUS_SINGULAR
        if not freeze:
            for k in range(n):
                if gp[k, GP_ON] > 0.0:
                    u1 = gp[k, GP_PREF] - (x[k, 1] - 1.0)
                    governor_advance(gs[k], u1, gp[k], gM1[k], gM2[k], h)
                    pm[k] = governor_output(gs[k], gp[k])
                if ap[k, AP_ON] > 0.0:
                    vt = np.sqrt(vi[k, 0] ** 2 + vi[k, 1] ** 2)
                    avr_advance(avs[k], ap[k, AP_VREF] - vt, ap[k], h)
                    efd[k] = avs[k, 1]
        row = start + step + 1
        _record(out, row, x, vi, ii, pm, efd, mp)
        for k in range(n):
            for j in range(4):
                if not np.isfinite(x[k, j]):
                    return STATUS_NONFINITE
    return STATUS_OK


@njit(cache=True)
def record_initial(x, pm, efd, Yr, mp, out, row):
    n = x.shape[0]
    A = np.empty((2 * n, 2 * n))
    b = np.empty(2 * n)
    vi = np.empty((n, 2))
    ii = np.empty((n, 4))
    if not network(x, Yr, mp, A, b, vi, ii):
        return STATUS_SINGULAR
    _record(out, row, x, vi, ii, pm, efd, mp)
    return STATUS_OK


@njit(cache=True)
def derivative_norm(x, pm, efd, Yr, mp):
    """Infinity norm of machine state derivatives (equilibrium check)."""
    n = x.shape[0]
    A = np.empty((2 * n, 2 * n))
    b = np.empty(2 * n)
    vi = np.empty((n, 2))
    ii = np.empty((n, 4))
    dx = np.empty((n, 4))
    if not network(x, Yr, mp, A, b, vi, ii):
        return np.inf
    machine_deriv(x, pm, efd, ii, mp, dx)
    return np.max(np.abs(dx))


def governor_matrices(gov, h):
    """Trapezoid transition matrices for the (v, g, w) gate loop."""
    kg, tp, sig, dl, tr = gov.K_g, gov.T_p, gov.sigma, gov.delta, gov.T_r
    A = np.array([
        [-1.0 / tp, -kg * (sig + dl) / tp, kg * dl / tp],
        [1.0, 0.0, 0.0],
        [0.0, 1.0 / tr, -1.0 / tr],
    ])
    B = np.array([kg / tp, 0.0, 0.0])
    eye = np.eye(3)
    lhs = eye - 0.5 * h * A
    M1 = np.linalg.solve(lhs, eye + 0.5 * h * A)
    M2 = np.linalg.solve(lhs, 0.5 * h * B)
    return M1, M2
