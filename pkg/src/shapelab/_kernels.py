"""Compiled kernels: stream hashing, initial field, event engine, path replay.

The hashing here mirrors ``shapelab.streams`` exactly; tests pin the two
against each other.
"""
import math

import numba as nb
import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_ABS_MUL = np.uint64(0xD1B54A32D192ED03)
_ABS_ADD = np.uint64(0x632BE59BD9B4E019)
_DIR_SALT = np.uint64(0xA0761D6478BD642F)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_TWO_M53 = 2.0 ** -53

OK = 0
OVERFLOW = 1


@nb.njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, inline="always")
def absorb(h, v):
    return mix64((h ^ np.uint64(v)) * _ABS_MUL + _ABS_ADD)


@nb.njit(cache=True, inline="always")
def jump_wait(key, k, D):
    c = mix64(key + np.uint64(k + 1) * _GOLDEN)
    u = np.float64((c >> _S11) + _ONE) * _TWO_M53
    return -math.log(u) / D


@nb.njit(cache=True, inline="always")
def jump_dir(key, k, d):
    c = mix64(key + np.uint64(k + 1) * _GOLDEN)
    return np.int64(mix64(c ^ _DIR_SALT) % np.uint64(2 * d))


@nb.njit(cache=True)
def site_counts(seed_init, coords, mu):
    n, d = coords.shape
    out = np.empty(n, dtype=np.int64)
    p0 = math.exp(-mu)
    for i in range(n):
        h = seed_init
        for j in range(d):
            h = absorb(h, coords[i, j])
        u = np.float64(mix64(h) >> _S11) * _TWO_M53
        k = 0
        p = p0
        cdf = p
        while u >= cdf:
            k += 1
            p = p * mu / k
            if p == 0.0:
                break
            cdf += p
        out[i] = k
    return out


@nb.njit(cache=True)
def particle_keys(seed_paths, origins, index):
    n, d = origins.shape
    out = np.empty(n, dtype=np.uint64)
    for i in range(n):
        h = seed_paths
        for j in range(d):
            h = absorb(h, origins[i, j])
        out[i] = absorb(h, index[i])
    return out


@nb.njit(cache=True)
def replay_positions(origins, keys, D, t):
    """Positions at time ``t`` by replaying each particle's stream from 0."""
    n, d = origins.shape
    out = origins.copy()
    for p in range(n):
        key = keys[p]
        time = 0.0
        k = 0
        while True:
            time += jump_wait(key, k, D)
            if time > t:
                break
            j = jump_dir(key, k, d)
            if j % 2 == 0:
                out[p, j // 2] -= 1
            else:
                out[p, j // 2] += 1
            k += 1
    return out


# particle record columns: position (up to MAX_DIM coords), site index, list links
MAX_DIM = 5
_SITE = 5
_NXT = 6
_PRV = 7


@nb.njit(cache=True, inline="always")
def _unlink(ps, p, head):
    a = ps[p, _PRV]
    b = ps[p, _NXT]
    if a >= 0:
        ps[a, _NXT] = b
    else:
        head[ps[p, _SITE]] = b
    if b >= 0:
        ps[b, _PRV] = a


@nb.njit(cache=True, inline="always")
def _link(ps, p, s, head):
    h = head[s]
    ps[p, _NXT] = h
    ps[p, _PRV] = -1
    if h >= 0:
        ps[h, _PRV] = p
    head[s] = p
    ps[p, _SITE] = s


@nb.njit(cache=True, inline="always")
def _breach(ps, p, d, thr):
    for j in range(d):
        if abs(ps[p, j]) >= thr:
            return True
    return False


@nb.njit(cache=True, inline="always")
def _infect_site(l, s, t, head, ps, member, theta, nB):
    q = head[s]
    while q >= 0:
        if member[q, l] and theta[q, l] == np.inf:
            theta[q, l] = t
            nB[s, l] += 1
        q = ps[q, _NXT]


@nb.njit(cache=True)
def _bucket_sort(ev_t, ev_c, m, lo, hi, out_t, out_c, bk, cnt):
    """Stable sort of the first ``m`` events (times in (lo, hi]) into out_t/out_c.

    Counting scatter into ~m equal-width buckets, then insertion sort inside
    each bucket; equal times keep their emission order.
    """
    nbk = max(m, 1)
    scale = nbk / (hi - lo) if hi > lo else 0.0
    for k in range(nbk + 1):
        cnt[k] = 0
    for i in range(m):
        k = int((ev_t[i] - lo) * scale)
        if k >= nbk:
            k = nbk - 1
        elif k < 0:
            k = 0
        bk[i] = k
        cnt[k + 1] += 1
    for k in range(nbk):
        cnt[k + 1] += cnt[k]
    for i in range(m):
        k = bk[i]
        f = cnt[k]
        out_t[f] = ev_t[i]
        out_c[f] = ev_c[i]
        cnt[k] = f + 1
    # cnt[k] is now the end of bucket k; bucket k starts at cnt[k-1]
    a = 0
    for k in range(nbk):
        z = cnt[k]
        for i in range(a + 1, z):
            te = out_t[i]
            tc = out_c[i]
            j = i - 1
            while j >= a and out_t[j] > te:
                out_t[j + 1] = out_t[j]
                out_c[j + 1] = out_c[j]
                j -= 1
            out_t[j + 1] = te
            out_c[j + 1] = tc
        a = z


@nb.njit(cache=True)
def _gather(next_time, cursor, keys, D, d, b, ev_t, ev_c, m, p0):
    """Append every pending jump with time <= b, particle by particle.

    Stops early when the buffer is full; returns (m, p) with p == n once all
    particles are exhausted, otherwise the particle to resume from.
    """
    n = next_time.shape[0]
    cap = ev_t.shape[0]
    twod = 2 * d
    for p in range(p0, n):
        key = keys[p]
        while next_time[p] <= b:
            if m == cap:
                return m, p
            k = cursor[p]
            ev_t[m] = next_time[p]
            ev_c[m] = p * twod + jump_dir(key, k, d)
            m += 1
            cursor[p] = k + 1
            next_time[p] += jump_wait(key, k + 1, D)
    return m, n


@nb.njit(cache=True)
def _process(srt_t, srt_c, m, ps, head, stride, R, d, member, theta, nB, visited, thr, breach):
    """Apply ``m`` time-ordered jumps; move first, then infect per layer.

    Returns (ok, events applied, breach); ok is False when a particle would
    leave the grid.
    """
    nl = member.shape[1]
    twod = 2 * d
    for e in range(m):
        t = srt_t[e]
        code = srt_c[e]
        p = code // twod
        j = code - p * twod
        ax = j // 2
        step = 1 if j % 2 else -1
        newc = ps[p, ax] + step
        if newc > R or newc < -R:
            return False, e, breach
        old = ps[p, _SITE]
        new = old + step * stride[ax]
        _unlink(ps, p, head)
        ps[p, ax] = newc
        _link(ps, p, new, head)
        for l in range(nl):
            if not member[p, l]:
                continue
            if theta[p, l] <= t:
                nB[old, l] -= 1
                had = nB[new, l]
                nB[new, l] = had + 1
                if had == 0:
                    _infect_site(l, new, t, head, ps, member, theta, nB)
                if visited[new, l] == np.inf:
                    visited[new, l] = t
                    if not breach and _breach(ps, p, d, thr):
                        breach = True
            elif nB[new, l] > 0:
                theta[p, l] = t
                nB[new, l] += 1
    return True, m, breach


@nb.njit(cache=True)
def simulate(origins, keys, D, horizon, R, thr, member_in, init_B_in, start,
             snap_times, window):
    """Advance all particles to ``horizon`` and propagate types per layer.

    Events inside a time window are gathered particle by particle and ordered
    stably by time, so exact ties resolve by particle ordinal. Layer ``l``
    switches on at ``start[l]`` after every event with time <= start[l].

    Returns (status, theta, visited, snaps, n_events, breach) with theta of
    shape (layers, particles) and visited of shape (layers, grid sites).
    """
    n, d = origins.shape
    nl = member_in.shape[0]
    W = 2 * R + 1
    G = W ** d
    stride = np.empty(d, dtype=np.int64)
    acc = 1
    for j in range(d - 1, -1, -1):
        stride[j] = acc
        acc *= W

    # per-particle and per-site data laid out record-wise for locality
    ps = np.zeros((n, 8), dtype=np.int64)
    member = np.ascontiguousarray(member_in.T)
    theta = np.full((n, nl), np.inf)
    head = np.full(G, -1, dtype=np.int64)
    nB = np.zeros((G, nl), dtype=np.int32)
    visited = np.full((G, nl), np.inf)
    ns = snap_times.shape[0]
    snaps = np.empty((ns, n, d), dtype=np.int32)
    breach = False
    n_events = 0

    for p in range(n):
        s = 0
        for j in range(d):
            c = origins[p, j]
            if abs(c) > R:
                return OVERFLOW, theta.T.copy(), visited.T.copy(), snaps, n_events, breach
            ps[p, j] = c
            s += (c + R) * stride[j]
        _link(ps, p, s, head)

    next_time = np.empty(n)
    cursor = np.zeros(n, dtype=np.int64)
    for p in range(n):
        next_time[p] = jump_wait(keys[p], 0, D)

    # special times: activations, snapshots, horizon
    nsp = nl + ns + 1
    special = np.empty(nsp)
    for l in range(nl):
        special[l] = start[l]
    for i in range(ns):
        special[nl + i] = snap_times[i]
    special[nsp - 1] = horizon
    special = np.unique(special)

    cap = max(1024, int(n * D * window * 1.25) + 1024)
    ev_t = np.empty(cap)
    ev_c = np.empty(cap, dtype=np.int64)  # p * 2d + direction index
    srt_t = np.empty(cap)
    srt_c = np.empty(cap, dtype=np.int64)
    bk = np.empty(cap, dtype=np.int64)
    cnt = np.empty(cap + 1, dtype=np.int64)
    twod = 2 * d

    t_cur = 0.0
    done_snap = 0
    for si in range(special.shape[0]):
        target = special[si]
        if target > horizon:
            break
        while t_cur < target:
            b = min(t_cur + window, target)
            m = 0
            p0 = 0
            while True:
                m, p0 = _gather(next_time, cursor, keys, D, d, b, ev_t, ev_c, m, p0)
                if p0 == n:
                    break
                cap *= 2
                e1 = np.empty(cap)
                e2 = np.empty(cap, dtype=np.int64)
                e1[:m] = ev_t[:m]
                e2[:m] = ev_c[:m]
                ev_t = e1
                ev_c = e2
                srt_t = np.empty(cap)
                srt_c = np.empty(cap, dtype=np.int64)
                bk = np.empty(cap, dtype=np.int64)
                cnt = np.empty(cap + 1, dtype=np.int64)
            _bucket_sort(ev_t, ev_c, m, t_cur, b, srt_t, srt_c, bk, cnt)
            ok, done, breach = _process(srt_t, srt_c, m, ps, head, stride, R, d, member, theta, nB, visited,
                                        thr, breach)
            n_events += done
            if not ok:
                return OVERFLOW, theta.T.copy(), visited.T.copy(), snaps, n_events, breach
            t_cur = b
        for l in range(nl):
            if start[l] == target:
                for p in range(n):
                    if init_B_in[l, p] and member[p, l] and theta[p, l] == np.inf:
                        theta[p, l] = target
                        s = ps[p, _SITE]
                        nB[s, l] += 1
                        if visited[s, l] == np.inf:
                            visited[s, l] = target
                        if not breach and _breach(ps, p, d, thr):
                            breach = True
                for p in range(n):
                    if init_B_in[l, p] and member[p, l]:
                        _infect_site(l, ps[p, _SITE], target, head, ps, member, theta, nB)
        while done_snap < ns and snap_times[done_snap] == target:
            for p in range(n):
                for j in range(d):
                    snaps[done_snap, p, j] = ps[p, j]
            done_snap += 1

    return OK, theta.T.copy(), visited.T.copy(), snaps, n_events, breach
