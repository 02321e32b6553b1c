"""Hot numeric kernels.

Every kernel exists twice: a ``*_nb`` loop version compiled with numba and a
``*_np`` version written against numpy only. The public names at the bottom
of the module are bound to one or the other according to
``slope_lab._jit.USE_NUMBA``. Both twins evaluate the same arithmetic in the
same order wherever the result has to be reproducible bit for bit (the
sequential learner updates); dense backups may differ in the last ulp because
numpy hands the matrix products to BLAS.

Shapes: ``P`` is (S, A, S), ``r`` and ``Q`` are (S, A).
"""
import numpy as np

from ._jit import USE_NUMBA, njit

# status codes returned by the iteration kernels
CONVERGED = 0
MAX_ITER = 1
DIVERGED = 2


# ---------------------------------------------------------------------------
# Bellman backups
# ---------------------------------------------------------------------------

@njit
def reshaped_backup_nb(P, r, gamma, eta, Q):
    S, A = r.shape
    V = np.empty(S)
    for s in range(S):
        m = Q[s, 0]
        for a in range(1, A):
            if Q[s, a] > m:
                m = Q[s, a]
        V[s] = m
    out = np.empty((S, A))
    for s in range(S):
        phi_s = eta * V[s]
        for a in range(A):
            ephi = 0.0
            ev = 0.0
            for t in range(S):
                p = P[s, a, t]
                if p != 0.0:
                    ephi += p * (eta * V[t])
                    ev += p * V[t]
            shaped = r[s, a] + gamma * ephi - phi_s
            out[s, a] = shaped + gamma * ev
    return out


def reshaped_backup_np(P, r, gamma, eta, Q):
    V = Q.max(axis=1)
    phi = eta * V
    shaped = r + gamma * (P @ phi) - phi[:, None]
    return shaped + gamma * (P @ V)


@njit
def iterate_nb(P, r, gamma, eta, Q0, tol, max_iter, use_v_residual, guard):
    """Repeat the (reshaped) backup until the residual drops below ``tol``.

    Returns ``(Q, iterations, residual, status)``.
    """
    S, A = r.shape
    Q = Q0.copy()
    residual = np.inf
    for k in range(1, max_iter + 1):
        Qn = reshaped_backup_nb(P, r, gamma, eta, Q)
        residual = 0.0
        big = 0.0
        for s in range(S):
            if use_v_residual:
                vo = Q[s, 0]
                vn = Qn[s, 0]
                for a in range(1, A):
                    if Q[s, a] > vo:
                        vo = Q[s, a]
                    if Qn[s, a] > vn:
                        vn = Qn[s, a]
                d = abs(vn - vo)
                if d > residual:
                    residual = d
            for a in range(A):
                if not use_v_residual:
                    d = abs(Qn[s, a] - Q[s, a])
                    if d > residual:
                        residual = d
                m = abs(Qn[s, a])
                if m > big:
                    big = m
        Q = Qn
        if not np.isfinite(big) or big > guard:
            return Q, k, residual, DIVERGED
        if residual < tol:
            return Q, k, residual, CONVERGED
    return Q, max_iter, residual, MAX_ITER


def iterate_np(P, r, gamma, eta, Q0, tol, max_iter, use_v_residual, guard):
    Q = Q0.copy()
    residual = np.inf
    for k in range(1, max_iter + 1):
        Qn = reshaped_backup_np(P, r, gamma, eta, Q)
        if use_v_residual:
            residual = float(np.max(np.abs(Qn.max(axis=1) - Q.max(axis=1))))
        else:
            residual = float(np.max(np.abs(Qn - Q)))
        Q = Qn
        big = float(np.max(np.abs(Q)))
        if not np.isfinite(big) or big > guard:
            return Q, k, residual, DIVERGED
        if residual < tol:
            return Q, k, residual, CONVERGED
    return Q, max_iter, residual, MAX_ITER


# ---------------------------------------------------------------------------
# Full-batch QCE fit on a single categorical value
# ---------------------------------------------------------------------------
# The samples are sorted once and the two-hot targets are prefix-summed so the
# weighted target for any current expectation E costs one binary search:
# samples with y <= E carry weight (1 - tau), those with y > E carry tau.

@njit
def qce_fit_nb(logits0, centers, ys_sorted, prefix, tau, lr, steps, grad_tol):
    n = ys_sorted.shape[0]
    B = centers.shape[0]
    z = logits0.copy()
    losses = np.empty(steps)
    expects = np.empty(steps)
    p = np.empty(B)
    logp = np.empty(B)
    for k in range(steps):
        zmax = z[0]
        for i in range(1, B):
            if z[i] > zmax:
                zmax = z[i]
        tot = 0.0
        for i in range(B):
            p[i] = np.exp(z[i] - zmax)
            tot += p[i]
        lse = zmax + np.log(tot)
        E = 0.0
        for i in range(B):
            p[i] = p[i] / tot
            logp[i] = z[i] - lse
            E += p[i] * centers[i]
        m = np.searchsorted(ys_sorted, E, side="right")
        wsum = (1.0 - tau) * m + tau * (n - m)
        loss = 0.0
        gmax = 0.0
        for i in range(B):
            wt = (1.0 - tau) * prefix[m, i] + tau * (prefix[n, i] - prefix[m, i])
            if wt != 0.0:
                loss -= wt * logp[i]
            g = (wsum * p[i] - wt) / n
            if abs(g) > gmax:
                gmax = abs(g)
            z[i] -= lr * g
        losses[k] = loss / n
        expects[k] = E
        if not np.isfinite(losses[k]):
            return z, k + 1, losses[: k + 1], expects[: k + 1], DIVERGED
        if gmax < grad_tol:
            return z, k + 1, losses[: k + 1], expects[: k + 1], CONVERGED
    return z, steps, losses, expects, MAX_ITER


def qce_fit_np(logits0, centers, ys_sorted, prefix, tau, lr, steps, grad_tol):
    n = ys_sorted.shape[0]
    z = logits0.copy()
    losses = np.empty(steps)
    expects = np.empty(steps)
    for k in range(steps):
        zmax = z.max()
        e = np.exp(z - zmax)
        tot = e.sum()
        p = e / tot
        logp = z - (zmax + np.log(tot))
        E = float(p @ centers)
        m = int(np.searchsorted(ys_sorted, E, side="right"))
        wsum = (1.0 - tau) * m + tau * (n - m)
        wt = (1.0 - tau) * prefix[m] + tau * (prefix[n] - prefix[m])
        nz = wt != 0.0
        loss = -float(np.sum(wt[nz] * logp[nz]))
        g = (wsum * p - wt) / n
        z -= lr * g
        losses[k] = loss / n
        expects[k] = E
        if not np.isfinite(losses[k]):
            return z, k + 1, losses[: k + 1], expects[: k + 1], DIVERGED
        if np.max(np.abs(g)) < grad_tol:
            return z, k + 1, losses[: k + 1], expects[: k + 1], CONVERGED
    return z, steps, losses, expects, MAX_ITER


# ---------------------------------------------------------------------------
# Sequential tabular learner updates
# ---------------------------------------------------------------------------
# Transitions are applied one after another, each seeing the table left by the
# previous one. Terminal next states contribute neither potential nor value.

@njit
def scalar_updates_nb(Q, s, a, r, s2, done, gamma, eta, lr):
    A = Q.shape[1]
    for j in range(s.shape[0]):
        si = s[j]
        ai = a[j]
        vs = Q[si, 0]
        for b in range(1, A):
            if Q[si, b] > vs:
                vs = Q[si, b]
        if done[j]:
            vn = 0.0
        else:
            vn = Q[s2[j], 0]
            for b in range(1, A):
                if Q[s2[j], b] > vn:
                    vn = Q[s2[j], b]
        shaped = r[j] + gamma * (eta * vn) - eta * vs
        target = shaped + gamma * vn
        Q[si, ai] = Q[si, ai] + lr * (target - Q[si, ai])


def scalar_updates_np(Q, s, a, r, s2, done, gamma, eta, lr):
    for j in range(s.shape[0]):
        si = int(s[j])
        ai = int(a[j])
        vs = Q[si].max()
        vn = 0.0 if done[j] else Q[int(s2[j])].max()
        shaped = r[j] + gamma * (eta * vn) - eta * vs
        target = shaped + gamma * vn
        Q[si, ai] = Q[si, ai] + lr * (target - Q[si, ai])


@njit
def _max_expectation_nb(logits, s, centers):
    A = logits.shape[1]
    B = logits.shape[2]
    best = -np.inf
    for b in range(A):
        zmax = logits[s, b, 0]
        for i in range(1, B):
            if logits[s, b, i] > zmax:
                zmax = logits[s, b, i]
        tot = 0.0
        acc = 0.0
        for i in range(B):
            e = np.exp(logits[s, b, i] - zmax)
            tot += e
            acc += e * centers[i]
        v = acc / tot
        if v > best:
            best = v
    return best


@njit
def dist_updates_nb(logits, target, s, a, r, s2, done, gamma, eta, lr, tau,
                    centers, vmin, vmax, counter, sync_every):
    """QCE gradient steps on per-(s, a) logits; returns the updated counter."""
    B = centers.shape[0]
    width = (vmax - vmin) / (B - 1)
    p = np.empty(B)
    for j in range(s.shape[0]):
        si = s[j]
        ai = a[j]
        vs = _max_expectation_nb(logits, si, centers)
        if done[j]:
            vn = 0.0
        else:
            vn = _max_expectation_nb(target, s2[j], centers)
        shaped = r[j] + gamma * (eta * vn) - eta * vs
        y = shaped + gamma * vn
        # softmax of the predicted distribution
        zmax = logits[si, ai, 0]
        for i in range(1, B):
            if logits[si, ai, i] > zmax:
                zmax = logits[si, ai, i]
        tot = 0.0
        for i in range(B):
            p[i] = np.exp(logits[si, ai, i] - zmax)
            tot += p[i]
        E = 0.0
        for i in range(B):
            p[i] = p[i] / tot
            E += p[i] * centers[i]
        w = tau if E - y < 0.0 else 1.0 - tau
        # two-hot projection of the clamped target
        yc = min(max(y, vmin), vmax)
        pos = (yc - vmin) / width
        lo = int(np.floor(pos))
        if lo > B - 2:
            lo = B - 2
        if lo < 0:
            lo = 0
        frac = pos - lo
        for i in range(B):
            t = 0.0
            if i == lo:
                t = 1.0 - frac
            elif i == lo + 1:
                t = frac
            logits[si, ai, i] -= lr * w * (p[i] - t)
        counter += 1
        if counter % sync_every == 0:
            target[:, :, :] = logits
    return counter


def _max_expectation_np(logits, s, centers):
    z = logits[s]
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return float(((e @ centers) / e.sum(axis=1)).max())


def dist_updates_np(logits, target, s, a, r, s2, done, gamma, eta, lr, tau,
                    centers, vmin, vmax, counter, sync_every):
    B = centers.shape[0]
    width = (vmax - vmin) / (B - 1)
    for j in range(s.shape[0]):
        si = int(s[j])
        ai = int(a[j])
        vs = _max_expectation_np(logits, si, centers)
        vn = 0.0 if done[j] else _max_expectation_np(target, int(s2[j]), centers)
        shaped = r[j] + gamma * (eta * vn) - eta * vs
        y = shaped + gamma * vn
        z = logits[si, ai]
        e = np.exp(z - z.max())
        p = e / e.sum()
        E = float(p @ centers)
        w = tau if E - y < 0.0 else 1.0 - tau
        yc = min(max(y, vmin), vmax)
        pos = (yc - vmin) / width
        lo = min(max(int(np.floor(pos)), 0), B - 2)
        frac = pos - lo
        t = np.zeros(B)
        t[lo] = 1.0 - frac
        t[lo + 1] = frac
        logits[si, ai] -= lr * w * (p - t)
        counter += 1
        if counter % sync_every == 0:
            target[...] = logits
    return counter


if USE_NUMBA:
    reshaped_backup = reshaped_backup_nb
    iterate = iterate_nb
    qce_fit_loop = qce_fit_nb
    scalar_updates = scalar_updates_nb
    dist_updates = dist_updates_nb
else:
    reshaped_backup = reshaped_backup_np
    iterate = iterate_np
    qce_fit_loop = qce_fit_np
    scalar_updates = scalar_updates_np
    dist_updates = dist_updates_np
