"""Jitted inner loops for the transient simulator.

The network is represented by pre-solved impedance columns: for the current
topology ``Z[:, c] = Y^-1 e_c`` for every current-injection column ``c``
(unique generator buses first, then dynamic load buses).  Voltages follow from
``V = Z @ I``; only the small dynamic-load block needs iteration because the
running motors are constant-power.
"""
import numpy as np
from numba import njit

PQ_LOW_V = 0.7        # constant-power loads become constant-impedance below this
FP_TOL = 1e-11
FP_MAX_ITER = 20

STATUS_OK = 0
STATUS_DIVERGED = 1
STATUS_NONFINITE = 2


@njit(cache=True)
def motor_update(run, stalled, tripped, timer, thermal, v, dt, v_stall, t_stall, t_trip):
    if v < v_stall:
        timer += dt
    else:
        timer = 0.0
    if run > 0.0 and timer >= t_stall:
        stalled += run
        run = 0.0
    if stalled > 0.0:
        thermal = min(1.0, thermal + dt / t_trip)
        affected = stalled + tripped
        tripped = affected * thermal
        stalled = affected - tripped
    total = run + stalled + tripped
    return run / total, stalled / total, tripped / total, timer, thermal


@njit(cache=True)
def _motor_current(s, v):
    # current injected by a constant-power sink drawing s at voltage v
    av = abs(v)
    if av < PQ_LOW_V:
        return -np.conj(s) * v / (PQ_LOW_V * PQ_LOW_V)
    return -np.conj(s / v)


@njit(cache=True)
def solve_network(delta, e_prime, y_gen, gen_col, n_gcol, Z_L, y_lin, s_run, VL, I):
    """Fill ``I`` (all injection columns) and ``VL`` (dynamic load-bus voltages).

    Returns (status, iterations).
    """
    ng = delta.shape[0]
    for c in range(n_gcol):
        I[c] = 0.0
    for i in range(ng):
        I[gen_col[i]] += e_prime[i] * np.exp(1j * delta[i]) * y_gen[i]
    nL = VL.shape[0]
    if nL == 0:
        return STATUS_OK, 0
    b = np.zeros(nL, dtype=np.complex128)
    for r in range(nL):
        acc = 0.0 + 0.0j
        for c in range(n_gcol):
            acc += Z_L[r, c] * I[c]
        b[r] = acc
    A = np.empty((nL, nL), dtype=np.complex128)
    for r in range(nL):
        for c in range(nL):
            A[r, c] = Z_L[r, n_gcol + c] * y_lin[c]
        A[r, r] += 1.0
    Ainv = np.linalg.inv(A)
    Im = np.empty(nL, dtype=np.complex128)
    rhs = np.empty(nL, dtype=np.complex128)
    it = 0
    while True:
        for c in range(nL):
            Im[c] = _motor_current(s_run[c], VL[c]) if s_run[c] != 0.0 else 0.0
        for r in range(nL):
            acc = b[r]
            for c in range(nL):
                acc += Z_L[r, n_gcol + c] * Im[c]
            rhs[r] = acc
        err = 0.0
        for r in range(nL):
            acc = 0.0 + 0.0j
            for c in range(nL):
                acc += Ainv[r, c] * rhs[c]
            d = abs(acc - VL[r])
            if not d < 1e300:
                return STATUS_NONFINITE, it
            if d > err:
                err = d
            VL[r] = acc
        it += 1
        if err < FP_TOL:
            break
        if it >= FP_MAX_ITER:
            return STATUS_DIVERGED, it
    for c in range(nL):
        Im[c] = _motor_current(s_run[c], VL[c]) if s_run[c] != 0.0 else 0.0
        I[n_gcol + c] = Im[c] - y_lin[c] * VL[c]
    return STATUS_OK, it


@njit(cache=True)
def electrical_power(delta, e_prime, y_gen, Z_G, I, Pe):
    ng = delta.shape[0]
    ncol = I.shape[0]
    for i in range(ng):
        v = 0.0 + 0.0j
        for c in range(ncol):
            v += Z_G[i, c] * I[c]
        ec = e_prime[i] * np.exp(1j * delta[i])
        Pe[i] = (ec * np.conj((ec - v) * y_gen[i])).real


@njit(cache=True)
def _load_terms(rem, run, stalled, y_static, y_stall, s_motor, y_lin, s_run):
    for c in range(rem.shape[0]):
        y_lin[c] = (y_static[c] + y_stall[c] * stalled[c]) * rem[c]
        s_run[c] = s_motor[c] * run[c] * rem[c]


@njit(cache=True)
def max_coi_deviation(delta, inertia):
    num = 0.0
    den = 0.0
    for i in range(delta.shape[0]):
        num += inertia[i] * delta[i]
        den += inertia[i]
    avg = num / den
    dev = 0.0
    for i in range(delta.shape[0]):
        d = abs(delta[i] - avg)
        if d > dev:
            dev = d
    return dev


@njit(cache=True)
def integrate(n_steps, dt, w_s, delta, omega, e_prime, p_mech, inertia, damping, y_gen,
              gen_col, n_gcol, Z_G, Z_L, y_static, y_stall, s_motor, rem,
              run, stalled, tripped, timer, thermal, v_stall, t_stall, t_trip,
              VL, I, lost):
    """Advance ``n_steps`` fixed RK4 steps in place on one network topology.

    Returns (status, steps_done, lost).  ``I`` holds the injections of the final
    end-of-step network solution so the caller can recover all bus voltages.
    """
    ng = delta.shape[0]
    nL = rem.shape[0]
    M = 2.0 * inertia
    y_lin = np.empty(nL, dtype=np.complex128)
    s_run = np.empty(nL, dtype=np.complex128)
    Pe = np.empty(ng)
    d2 = np.empty(ng)
    kd1 = np.empty(ng); kd2 = np.empty(ng); kd3 = np.empty(ng); kd4 = np.empty(ng)
    kw1 = np.empty(ng); kw2 = np.empty(ng); kw3 = np.empty(ng); kw4 = np.empty(ng)
    VLs = VL.copy()
    _load_terms(rem, run, stalled, y_static, y_stall, s_motor, y_lin, s_run)
    st, _ = solve_network(delta, e_prime, y_gen, gen_col, n_gcol, Z_L, y_lin, s_run, VL, I)
    if st != STATUS_OK:
        return st, 0, lost
    electrical_power(delta, e_prime, y_gen, Z_G, I, Pe)
    for step in range(n_steps):
        for i in range(ng):
            kd1[i] = w_s * omega[i]
            kw1[i] = (p_mech[i] - Pe[i] - damping[i] * omega[i]) / M[i]
            d2[i] = delta[i] + 0.5 * dt * kd1[i]
        VLs[:] = VL
        st, _ = solve_network(d2, e_prime, y_gen, gen_col, n_gcol, Z_L, y_lin, s_run, VLs, I)
        if st != STATUS_OK:
            return st, step, lost
        electrical_power(d2, e_prime, y_gen, Z_G, I, Pe)
        for i in range(ng):
            w = omega[i] + 0.5 * dt * kw1[i]
            kd2[i] = w_s * w
            kw2[i] = (p_mech[i] - Pe[i] - damping[i] * w) / M[i]
            d2[i] = delta[i] + 0.5 * dt * kd2[i]
        st, _ = solve_network(d2, e_prime, y_gen, gen_col, n_gcol, Z_L, y_lin, s_run, VLs, I)
        if st != STATUS_OK:
            return st, step, lost
        electrical_power(d2, e_prime, y_gen, Z_G, I, Pe)
        for i in range(ng):
            w = omega[i] + 0.5 * dt * kw2[i]
            kd3[i] = w_s * w
            kw3[i] = (p_mech[i] - Pe[i] - damping[i] * w) / M[i]
            d2[i] = delta[i] + dt * kd3[i]
        st, _ = solve_network(d2, e_prime, y_gen, gen_col, n_gcol, Z_L, y_lin, s_run, VLs, I)
        if st != STATUS_OK:
            return st, step, lost
        electrical_power(d2, e_prime, y_gen, Z_G, I, Pe)
        for i in range(ng):
            w = omega[i] + dt * kw3[i]
            kd4[i] = w_s * w
            kw4[i] = (p_mech[i] - Pe[i] - damping[i] * w) / M[i]
        for i in range(ng):
            delta[i] += dt / 6.0 * (kd1[i] + 2.0 * kd2[i] + 2.0 * kd3[i] + kd4[i])
            omega[i] += dt / 6.0 * (kw1[i] + 2.0 * kw2[i] + 2.0 * kw3[i] + kw4[i])
            if not abs(omega[i]) < 1e300 or not abs(delta[i]) < 1e300:
                return STATUS_NONFINITE, step, lost
        # end-of-step network solution: bus voltages seen by the motors
        st, _ = solve_network(delta, e_prime, y_gen, gen_col, n_gcol, Z_L, y_lin, s_run, VL, I)
        if st != STATUS_OK:
            return st, step, lost
        changed = False
        for c in range(nL):
            r0 = run[c]; s0 = stalled[c]
            run[c], stalled[c], tripped[c], timer[c], thermal[c] = motor_update(
                run[c], stalled[c], tripped[c], timer[c], thermal[c], abs(VL[c]), dt,
                v_stall[c], t_stall[c], t_trip[c])
            if run[c] != r0 or stalled[c] != s0:
                changed = True
        if changed:
            _load_terms(rem, run, stalled, y_static, y_stall, s_motor, y_lin, s_run)
            if step < n_steps - 1:
                st, _ = solve_network(delta, e_prime, y_gen, gen_col, n_gcol, Z_L, y_lin, s_run, VL, I)
                if st != STATUS_OK:
                    return st, step + 1, lost
        electrical_power(delta, e_prime, y_gen, Z_G, I, Pe)
        if not lost and max_coi_deviation(delta, inertia) > np.pi:
            lost = True
    return STATUS_OK, n_steps, lost
