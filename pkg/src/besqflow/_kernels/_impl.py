# cython: boundscheck=False, wraparound=False, cdivision=True
"""Numerical kernels shared by the compiled and interpreted engines.

This module is written in Cython pure-Python mode: built as
``besqflow._kernels._impl`` (extension) it provides the fast engine, and the
very same source file runs uncompiled as the fallback.  Every random draw is
a pure function of a 64-bit key and a counter (splitmix64 chain + inverse-CDF
sampling), so results are bit-identical between the two engines and
independent of thread count or replicate execution order.
"""

import cython

if cython.compiled:
    from cython.cimports.libc.math import exp, fabs, lgamma, log, sqrt
else:
    from math import exp, fabs, lgamma, log, sqrt

import numpy as np

U64 = cython.declare(cython.ulonglong, 0xFFFFFFFFFFFFFFFF)
_GOLDEN = cython.declare(cython.ulonglong, 0x9E3779B97F4A7C15)
_KEY_TWEAK = cython.declare(cython.ulonglong, 0xA5A5A5A5A5A5A5A5)
_MIX_1 = cython.declare(cython.ulonglong, 0xBF58476D1CE4E5B9)
_MIX_2 = cython.declare(cython.ulonglong, 0x94D049BB133111EB)
_INV_2_53 = cython.declare(cython.double, 1.0 / 9007199254740992.0)


def is_compiled() -> bool:
    return bool(cython.compiled)


# ---------------------------------------------------------------------------
# splitmix64 counter RNG
# ---------------------------------------------------------------------------

@cython.cfunc
@cython.inline
def _mix(z: cython.ulonglong) -> cython.ulonglong:
    z = ((z ^ (z >> 30)) * _MIX_1) & U64
    z = ((z ^ (z >> 27)) * _MIX_2) & U64
    return (z ^ (z >> 31)) & U64


@cython.cfunc
@cython.inline
def _raw(key: cython.ulonglong, i: cython.ulonglong) -> cython.ulonglong:
    return _mix((key + (((i + 1) * _GOLDEN) & U64)) & U64)


@cython.cfunc
@cython.inline
def _derive(key: cython.ulonglong, i: cython.ulonglong) -> cython.ulonglong:
    return _mix((((key ^ _KEY_TWEAK) & U64) + (((i + 1) * _GOLDEN) & U64)) & U64)


@cython.cfunc
@cython.inline
def _u01(key: cython.ulonglong, i: cython.ulonglong) -> cython.double:
    return ((_raw(key, i) >> 11) + 0.5) * _INV_2_53


@cython.ccall
def raw_word(key: cython.ulonglong, i: cython.ulonglong) -> cython.ulonglong:
    """Word #i of the deterministic 64-bit stream keyed by ``key``."""
    return _raw(key, i)


@cython.ccall
def derive_key(key: cython.ulonglong, i: cython.ulonglong) -> cython.ulonglong:
    """Child key #i of ``key``; domain-separated from raw_word draws."""
    return _derive(key, i)


@cython.cfunc
def _ppf(p: cython.double) -> cython.double:
    q: cython.double = p - 0.5
    r: cython.double
    num: cython.double
    den: cython.double
    val: cython.double
    if fabs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r
                    + 6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r
                  + 1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r
                + 1.3314166789178437745e2) * r + 3.3871328727963666080e0)
        den = (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r
                    + 3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r
                  + 5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r
                + 4.2313330701600911252e1) * r + 1.0)
        return q * num / den
    r = p if q < 0.0 else 1.0 - p
    r = sqrt(-log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r
                    + 2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r
                  + 3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r
                + 4.63033784615654529590e0) * r + 1.42343711074968357734e0)
        den = (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r
                    + 1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r
                  + 6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r
                + 2.05319162663775882187e0) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r
                  + 2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r
                + 5.46378491116411436990e0) * r + 6.65790464350110377720e0)
        den = (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r
                    + 1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r
                  + 1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r
                + 5.99832206555887937690e-1) * r + 1.0)
    val = num / den
    return -val if q < 0.0 else val


@cython.cfunc
@cython.inline
def _normal(key: cython.ulonglong, i: cython.ulonglong) -> cython.double:
    return _ppf(_u01(key, i))


@cython.ccall
def norm_ppf(p: cython.double) -> cython.double:
    """Inverse standard normal CDF (Wichura's PPND16, AS 241)."""
    return _ppf(p)


@cython.ccall
def normal_word(key: cython.ulonglong, i: cython.ulonglong) -> cython.double:
    return _normal(key, i)


# ---------------------------------------------------------------------------
# Sequential sampler state
# ---------------------------------------------------------------------------

@cython.cclass
class Rng:
    """Sequential sampler over one keyed stream.

    Pure state = (key, counter); identical call sequences reproduce
    identical draws on any engine.
    """

    key: cython.ulonglong
    ctr: cython.ulonglong

    def __init__(self, key: int, ctr: int = 0):
        self.key = key & U64
        self.ctr = ctr & U64

    @cython.ccall
    def u01(self) -> cython.double:
        u: cython.double = _u01(self.key, self.ctr)
        self.ctr = (self.ctr + 1) & U64
        return u

    @cython.ccall
    def normal(self) -> cython.double:
        return _ppf(self.u01())

    @cython.ccall
    def gamma(self, shape: cython.double) -> cython.double:
        """Standard gamma draw, Marsaglia-Tsang; valid for any shape > 0."""
        boost: cython.double = 1.0
        d: cython.double
        c: cython.double
        x: cython.double
        v: cython.double
        u: cython.double
        if shape < 1.0:
            # Gamma(s) = Gamma(s+1) * U^(1/s)
            boost = self.u01() ** (1.0 / shape)
            shape = shape + 1.0
        d = shape - 1.0 / 3.0
        c = 1.0 / sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.u01()
            if u < 1.0 - 0.0331 * (x * x) * (x * x):
                return boost * d * v
            if log(u) < 0.5 * x * x + d * (1.0 - v + log(v)):
                return boost * d * v

    @cython.ccall
    def beta(self, a: cython.double, b: cython.double) -> cython.double:
        ga: cython.double = self.gamma(a)
        gb: cython.double = self.gamma(b)
        return ga / (ga + gb)

    @cython.ccall
    def poisson(self, lam: cython.double) -> cython.long:
        if lam <= 0.0:
            return 0
        if lam < 10.0:
            return self._poisson_inv(lam)
        return self._poisson_ptrs(lam)

    @cython.cfunc
    def _poisson_inv(self, lam: cython.double) -> cython.long:
        thresh: cython.double = exp(-lam)
        k: cython.long = 0
        p: cython.double = self.u01()
        while p > thresh:
            k += 1
            p *= self.u01()
        return k

    @cython.cfunc
    def _poisson_ptrs(self, lam: cython.double) -> cython.long:
        # Hormann's PTRS transformed rejection, exact for lam >= 10.
        loglam: cython.double = log(lam)
        b: cython.double = 0.931 + 2.53 * sqrt(lam)
        a: cython.double = -0.059 + 0.02483 * b
        inv_alpha: cython.double = 1.1239 + 1.1328 / (b - 3.4)
        v_r: cython.double = 0.9277 - 3.6224 / (b - 2.0)
        u: cython.double
        v: cython.double
        us: cython.double
        kf: cython.double
        k: cython.long
        while True:
            u = self.u01() - 0.5
            v = self.u01()
            us = 0.5 - fabs(u)
            kf = (2.0 * a / us + b) * u + lam + 0.43
            if us >= 0.07 and v <= v_r:
                return int(kf)
            if kf < 0.0 or (us < 0.013 and v > us):
                continue
            k = int(kf)
            if (log(v * inv_alpha / (a / (us * us) + b))
                    <= k * loglam - lam - lgamma(k + 1.0)):
                return k

    @cython.ccall
    def poisson_ge1(self, lam: cython.double) -> cython.long:
        """Poisson(lam) conditioned to be >= 1."""
        k: cython.long
        u: cython.double
        denom: cython.double
        p: cython.double
        c: cython.double
        if lam > 30.0:
            while True:
                k = self.poisson(lam)
                if k >= 1:
                    return k
        # inversion over the conditioned pmf, ratio p_{k+1}/p_k = lam/(k+1)
        u = self.u01()
        denom = 1.0 - exp(-lam)
        p = lam * exp(-lam) / denom
        c = p
        k = 1
        while u > c and k < 100000:
            k += 1
            p *= lam / k
            c += p
        return k


# ---------------------------------------------------------------------------
# Vector fills (element i uses child key i0+i: chunking-independent)
# ---------------------------------------------------------------------------

@cython.ccall
def fill_uniforms(key: cython.ulonglong, i0: cython.ulonglong, out: cython.double[:]):
    i: cython.Py_ssize_t
    for i in range(out.shape[0]):
        out[i] = _u01(key, (i0 + i) & U64)
    return None


@cython.ccall
def fill_normals(key: cython.ulonglong, i0: cython.ulonglong, out: cython.double[:]):
    i: cython.Py_ssize_t
    for i in range(out.shape[0]):
        out[i] = _normal(key, (i0 + i) & U64)
    return None


@cython.ccall
def fill_gammas(key: cython.ulonglong, i0: cython.ulonglong, shape: cython.double,
                out: cython.double[:]):
    i: cython.Py_ssize_t
    r: Rng
    for i in range(out.shape[0]):
        r = Rng(_derive(key, (i0 + i) & U64))
        out[i] = r.gamma(shape)
    return None


@cython.ccall
def fill_betas(key: cython.ulonglong, i0: cython.ulonglong, a: cython.double,
               b: cython.double, out: cython.double[:]):
    i: cython.Py_ssize_t
    r: Rng
    for i in range(out.shape[0]):
        r = Rng(_derive(key, (i0 + i) & U64))
        out[i] = r.beta(a, b)
    return None


@cython.ccall
def fill_poissons(key: cython.ulonglong, i0: cython.ulonglong, lam: cython.double,
                  out: cython.longlong[:]):
    i: cython.Py_ssize_t
    r: Rng
    for i in range(out.shape[0]):
        r = Rng(_derive(key, (i0 + i) & U64))
        out[i] = r.poisson(lam)
    return None


# ---------------------------------------------------------------------------
# Squared Bessel transitions and paths
# ---------------------------------------------------------------------------

@cython.ccall
def besq_exact_step(rng: Rng, x: cython.double, delta: cython.double,
                    h: cython.double) -> cython.double:
    """One exact BESQ^delta transition over height h from level x (delta >= 0).

    Poisson-gamma mixture of the (noncentral chi-square) transition law:
    2h * Gamma(delta/2 + N) with N ~ Poisson(x / 2h).
    """
    lam: cython.double = x / (2.0 * h)
    n: cython.long
    if delta > 0.0:
        n = rng.poisson(lam)
        return 2.0 * h * rng.gamma(0.5 * delta + n)
    if rng.u01() < exp(-lam):
        return 0.0
    n = rng.poisson_ge1(lam)
    return 2.0 * h * rng.gamma(n)


@cython.ccall
def besq_euler_step(rng: Rng, x: cython.double, delta: cython.double,
                    h: cython.double, nsub: cython.long) -> cython.double:
    """Euler-Maruyama transition over height h with nsub substeps.

    For delta < 0 the path is absorbed at its first nonpositive value.
    """
    dt: cython.double = h / nsub
    sdt: cython.double = sqrt(dt)
    s: cython.double = x
    i: cython.long
    for i in range(nsub):
        if s <= 0.0:
            if delta < 0.0:
                return 0.0
            s = 0.0
        s = s + 2.0 * sqrt(s) * sdt * rng.normal() + delta * dt
        if s <= 0.0 and delta < 0.0:
            return 0.0
    return s if s > 0.0 else 0.0


@cython.ccall
def besq_exact_path(rng: Rng, a: cython.double, delta: cython.double,
                    h: cython.double, killed: cython.bint, theta: cython.double,
                    sub_frac: cython.double, out: cython.double[:]) -> cython.Py_ssize_t:
    """Fill out[1:] with successive transitions from out[0] = a.

    Returns the index of the first absorbed grid point, or -1.  Absorption:
    level <= theta with delta <= 0, or with killed=True (checked strictly
    after the start).  delta < 0 uses Euler substeps of size sub_frac * h.
    """
    n: cython.Py_ssize_t = out.shape[0]
    out[0] = a
    s: cython.double = a
    absorbed: cython.Py_ssize_t = -1
    j: cython.Py_ssize_t
    nsub: cython.long = int(1.0 / sub_frac + 0.5)
    for j in range(1, n):
        if s <= theta and (delta <= 0.0 or killed) and j > 1:
            absorbed = j - 1
            break
        if delta < 0.0:
            s = besq_euler_step(rng, s, delta, h, nsub)
        else:
            s = besq_exact_step(rng, s, delta, h)
        out[j] = s
    if absorbed >= 0:
        for j in range(absorbed, n):
            out[j] = 0.0
    elif s <= theta and (delta <= 0.0 or killed):
        absorbed = n - 1
    return absorbed


@cython.ccall
def fill_besq_steps(key: cython.ulonglong, i0: cython.ulonglong, x: cython.double,
                    delta: cython.double, h: cython.double, out: cython.double[:]):
    i: cython.Py_ssize_t
    r: Rng
    for i in range(out.shape[0]):
        r = Rng(_derive(key, (i0 + i) & U64))
        out[i] = besq_exact_step(r, x, delta, h)
    return None


@cython.ccall
def fill_euler_marginal(key: cython.ulonglong, i0: cython.ulonglong, a: cython.double,
                        delta: cython.double, height: cython.double, nsteps: cython.long,
                        out: cython.double[:]):
    """Euler-Maruyama marginal oracle: value at `height` after nsteps."""
    i: cython.Py_ssize_t
    r: Rng
    for i in range(out.shape[0]):
        r = Rng(_derive(key, (i0 + i) & U64))
        out[i] = besq_euler_step(r, a, delta, height, nsteps)
    return None


@cython.ccall
def fill_euler_absorption(key: cython.ulonglong, i0: cython.ulonglong, a: cython.double,
                          delta: cython.double, dt: cython.double, max_steps: cython.long,
                          out: cython.double[:]):
    """Absorption heights of Euler paths with delta < 0 (censored at max_steps*dt)."""
    i: cython.Py_ssize_t
    n: cython.long
    r: Rng
    s: cython.double
    t: cython.double
    sdt: cython.double = sqrt(dt)
    for i in range(out.shape[0]):
        r = Rng(_derive(key, (i0 + i) & U64))
        s = a
        t = max_steps * dt
        for n in range(max_steps):
            s = s + 2.0 * sqrt(s) * sdt * r.normal() + delta * dt
            if s <= 0.0:
                t = (n + 1) * dt
                break
        out[i] = t
    return None


@cython.ccall
def fill_switch_hitting_oracle(key: cython.ulonglong, i0: cython.ulonglong,
                               r_switch: cython.double, d1: cython.double,
                               d2: cython.double, h: cython.double,
                               censor: cython.double, theta: cython.double,
                               out: cython.double[:]):
    """Grid simulation of T = inf{x >= r : S_x = 0}, S ~ BESQ_0(d1 |_r d2).

    Exact transitions on a step-h grid; zero detection at level <= theta;
    results censored at `censor`.
    """
    i: cython.Py_ssize_t
    n1: cython.long = int(r_switch / h + 0.5)
    nmax: cython.long = int(censor / h + 0.5)
    n: cython.long
    rng: Rng
    s: cython.double
    t: cython.double
    for i in range(out.shape[0]):
        rng = Rng(_derive(key, (i0 + i) & U64))
        s = 0.0
        for n in range(n1):
            s = besq_exact_step(rng, s, d1, h)
        t = censor
        for n in range(n1, nmax):
            s = besq_exact_step(rng, s, d2, h)
            if s <= theta:
                t = (n + 1) * h
                break
        out[i] = t
    return None


@cython.ccall
def fill_cond_hitting_oracle(key: cython.ulonglong, i0: cython.ulonglong,
                             a: cython.double, b: cython.double, d1: cython.double,
                             d2: cython.double, h: cython.double, censor: cython.double,
                             theta: cython.double, out: cython.double[:]):
    """Conditioned-path oracle for T_{a,b} given {S_b > 0}.

    S ~ BESQ_0(d1 |_a 0 |_b d2); paths are rerun until S_b > 0 (the
    conditioning event), then T = first zero after b, censored at `censor`.
    The dim-0 middle piece has an exact atom at 0, so survival is exact.
    """
    i: cython.Py_ssize_t
    n1: cython.long = int(a / h + 0.5)
    nmid: cython.long = int((b - a) / h + 0.5)
    nmax: cython.long = int(censor / h + 0.5)
    nb: cython.long = int(b / h + 0.5)
    n: cython.long
    rng: Rng
    s: cython.double
    t: cython.double
    alive: cython.bint
    if n1 < 1:
        n1 = 1
    if nmid < 1:
        nmid = 1
    for i in range(out.shape[0]):
        rng = Rng(_derive(key, (i0 + i) & U64))
        while True:
            s = 0.0
            for n in range(n1):
                s = besq_exact_step(rng, s, d1, a / n1)
            alive = True
            for n in range(nmid):
                s = besq_exact_step(rng, s, 0.0, (b - a) / nmid)
                if s == 0.0:
                    alive = False
                    break
            if alive and s > 0.0:
                break
        t = censor
        for n in range(nb, nmax):
            s = besq_exact_step(rng, s, d2, h)
            if s <= theta:
                t = (n + 1) * h
                break
        out[i] = t
    return None


# ---------------------------------------------------------------------------
# Piecewise-constant drift helper
# ---------------------------------------------------------------------------

@cython.cfunc
@cython.inline
def _drift_at(x: cython.double, nbp: cython.Py_ssize_t, bp: cython.double[:],
              bv: cython.double[:]) -> cython.double:
    i: cython.Py_ssize_t = 0
    while i < nbp and x >= bp[i]:
        i += 1
    return bv[i]


# ---------------------------------------------------------------------------
# Lazy white-noise columns (level -> cumulative integral, Brownian in level)
# ---------------------------------------------------------------------------

@cython.cclass
class ColumnCache:
    """Per-column lazy evaluation of C_j(s) = W([0,s] x column_j).

    Each column is a Brownian motion in the level variable with variance
    dx per unit level, sampled on demand: free increments above the largest
    known level, Brownian bridges between known levels.  Equal in law to the
    dense grid columns in the fine-level limit.  Draws are keyed per column
    and indexed by a per-column counter, so a fixed visit schedule
    regenerates bit-identically.
    """

    levels: cython.double[:, ::1]
    values: cython.double[:, ::1]
    counts: cython.int[::1]
    keys: cython.ulonglong[::1]
    ctrs: cython.ulonglong[::1]
    dx: cython.double
    n_cols: cython.Py_ssize_t
    cap: cython.Py_ssize_t
    rep_key: cython.ulonglong

    def __init__(self, n_cols: int, dx: float, cap: int = 64):
        self.n_cols = n_cols
        self.cap = cap
        self.dx = dx
        self.levels = np.empty((n_cols, cap), dtype=np.float64)
        self.values = np.empty((n_cols, cap), dtype=np.float64)
        self.counts = np.zeros(n_cols, dtype=np.int32)
        self.keys = np.zeros(n_cols, dtype=np.uint64)
        self.ctrs = np.zeros(n_cols, dtype=np.uint64)
        self.rep_key = 0

    @cython.ccall
    def reset(self, rep_key: int):
        self.rep_key = rep_key & U64
        i: cython.Py_ssize_t
        for i in range(self.n_cols):
            self.counts[i] = 0
        return None

    @cython.ccall
    def query(self, j: cython.Py_ssize_t, s: cython.double) -> cython.double:
        """C_j evaluated at level s >= 0, consistent with all prior queries."""
        cnt: cython.Py_ssize_t
        lo: cython.Py_ssize_t
        hi: cython.Py_ssize_t
        mid: cython.Py_ssize_t
        k: cython.Py_ssize_t
        v: cython.double
        z: cython.double
        sa: cython.double
        sb: cython.double
        va: cython.double
        vb: cython.double
        w: cython.double
        f: cython.double
        if s <= 0.0:
            return 0.0
        cnt = self.counts[j]
        if cnt == 0:
            self.keys[j] = _derive(self.rep_key, j)
            self.ctrs[j] = 0
            self.levels[j, 0] = 0.0
            self.values[j, 0] = 0.0
            cnt = 1
            self.counts[j] = 1
        lo = 0
        hi = cnt
        while lo < hi:
            mid = (lo + hi) >> 1
            if self.levels[j, mid] < s:
                lo = mid + 1
            else:
                hi = mid
        if lo < cnt and self.levels[j, lo] == s:
            return self.values[j, lo]
        if lo == cnt:
            z = _normal(self.keys[j], self.ctrs[j])
            self.ctrs[j] = (self.ctrs[j] + 1) & U64
            v = self.values[j, cnt - 1] + z * sqrt((s - self.levels[j, cnt - 1]) * self.dx)
        else:
            sa = self.levels[j, lo - 1]
            sb = self.levels[j, lo]
            va = self.values[j, lo - 1]
            vb = self.values[j, lo]
            w = sb - sa
            if w <= 1e-300:
                v = va
            else:
                f = (s - sa) / w
                z = _normal(self.keys[j], self.ctrs[j])
                self.ctrs[j] = (self.ctrs[j] + 1) & U64
                v = va + f * (vb - va) + z * sqrt((sb - s) * (s - sa) / w * self.dx)
        if cnt >= self.cap:
            raise MemoryError("ColumnCache capacity exceeded; raise cap")
        k = cnt
        while k > lo:
            self.levels[j, k] = self.levels[j, k - 1]
            self.values[j, k] = self.values[j, k - 1]
            k -= 1
        self.levels[j, lo] = s
        self.values[j, lo] = v
        self.counts[j] = cnt + 1
        return v


@cython.ccall
def flow_line_record(cache: ColumnCache, a: cython.double, j0: cython.Py_ssize_t,
                     j1: cython.Py_ssize_t, bp: cython.double[:], bv: cython.double[:],
                     x0: cython.double, dx: cython.double, killed: cython.bint,
                     theta: cython.double, out: cython.double[:]) -> cython.Py_ssize_t:
    """Euler flow-line recursion on sparse columns, recording edge levels.

    out[j] (absolute column-edge index) receives the level at height
    x0 + j*dx for j in [j0, j1].  Returns the absorbed edge index or -1.
    """
    nbp: cython.Py_ssize_t = bp.shape[0]
    s: cython.double = a
    absorbed: cython.Py_ssize_t = -1
    j: cython.Py_ssize_t
    d: cython.double
    out[j0] = a
    for j in range(j0, j1):
        d = _drift_at(x0 + (j + 0.5) * dx, nbp, bp, bv)
        if s <= theta and (d <= 0.0 or killed) and j > j0:
            absorbed = j
            break
        s = s + 2.0 * cache.query(j, s) + d * dx
        if s < 0.0:
            s = 0.0
        out[j + 1] = s
    if absorbed >= 0:
        for j in range(absorbed, j1 + 1):
            out[j] = 0.0
    return absorbed


@cython.ccall
def flow_line_meet(cache: ColumnCache, a: cython.double, j0: cython.Py_ssize_t,
                   j1: cython.Py_ssize_t, bp: cython.double[:], bv: cython.double[:],
                   x0: cython.double, dx: cython.double, killed: cython.bint,
                   theta: cython.double, other: cython.double[:],
                   from_j: cython.Py_ssize_t, tol: cython.double,
                   sign: cython.int):
    """Run a flow line and detect its meeting with a recorded line.

    sign=+1 when this line starts below `other` (meet when other - s <= tol),
    sign=-1 when it starts above.  Returns (met_edge_index or -1, level_there).
    """
    nbp: cython.Py_ssize_t = bp.shape[0]
    s: cython.double = a
    j: cython.Py_ssize_t
    d: cython.double
    if j0 >= from_j and sign * (other[j0] - s) <= tol:
        return j0, s
    for j in range(j0, j1):
        d = _drift_at(x0 + (j + 0.5) * dx, nbp, bp, bv)
        if s <= theta and (d <= 0.0 or killed) and j > j0:
            s = 0.0
        else:
            s = s + 2.0 * cache.query(j, s) + d * dx
            if s < 0.0:
                s = 0.0
        if j + 1 >= from_j and sign * (other[j + 1] - s) <= tol:
            return j + 1, s
    return -1, s


@cython.ccall
def flow_line_record_rev(cache: ColumnCache, a: cython.double, j_hi: cython.Py_ssize_t,
                         j_lo: cython.Py_ssize_t, bp: cython.double[:], bv: cython.double[:],
                         x0: cython.double, dx: cython.double, killed: cython.bint,
                         theta: cython.double, out: cython.double[:]) -> cython.Py_ssize_t:
    """Downward line driven by the reflected, negated noise (dual direction).

    Starts at edge j_hi with level `a` and steps toward lower edges; the
    drift arrays are expressed in original-height coordinates.  out[j]
    receives the level at edge j for j in [j_lo, j_hi].  Returns the
    absorbed edge index or -1.
    """
    nbp: cython.Py_ssize_t = bp.shape[0]
    s: cython.double = a
    absorbed: cython.Py_ssize_t = -1
    j: cython.Py_ssize_t = j_hi
    d: cython.double
    out[j_hi] = a
    while j > j_lo:
        j -= 1
        d = _drift_at(x0 + (j + 0.5) * dx, nbp, bp, bv)
        if s <= theta and (d <= 0.0 or killed) and j < j_hi - 1:
            absorbed = j + 1
            break
        s = s - 2.0 * cache.query(j, s) + d * dx
        if s < 0.0:
            s = 0.0
        out[j] = s
    if absorbed >= 0:
        for j in range(j_lo, absorbed + 1):
            out[j] = 0.0
    return absorbed


@cython.ccall
def flow_split_accumulate(cache: ColumnCache, line: cython.double[:],
                          j0: cython.Py_ssize_t, j1: cython.Py_ssize_t,
                          lo: cython.double, hi: cython.double,
                          shifted: cython.bint) -> cython.double:
    """Integral of a level-interval indicator against the noise columns.

    shifted=True integrates 1_[lo,hi) in the level coordinate shifted by the
    line (the noise above the line); shifted=False integrates 1_[lo,hi)
    intersected with [0, S_x) (the noise below the line).
    """
    acc: cython.double = 0.0
    j: cython.Py_ssize_t
    s: cython.double
    a: cython.double
    b: cython.double
    for j in range(j0, j1):
        s = line[j]
        if shifted:
            a = s + lo
            b = s + hi
        else:
            a = lo
            b = hi if hi < s else s
        if b > a:
            acc += cache.query(j, b) - cache.query(j, a)
    return acc


# ---------------------------------------------------------------------------
# Dense-grid flow line
# ---------------------------------------------------------------------------

@cython.ccall
def dense_line(C: cython.double[:, ::1], dlev: cython.double, lmax: cython.double,
               a: cython.double, j0: cython.Py_ssize_t, j1: cython.Py_ssize_t,
               bp: cython.double[:], bv: cython.double[:], x0: cython.double,
               dx: cython.double, killed: cython.bint, theta: cython.double,
               out: cython.double[:]):
    """Flow-line recursion on a materialized grid (linear interpolation).

    C has shape (n_cols, n_levels+1) of per-column cumulative sums.
    Returns (status, edge): status 0 with absorbed edge or -1; status 1 when
    the line left the level domain at `edge`.
    """
    nbp: cython.Py_ssize_t = bp.shape[0]
    nlev: cython.Py_ssize_t = C.shape[1] - 1
    s: cython.double = a
    absorbed: cython.Py_ssize_t = -1
    j: cython.Py_ssize_t
    i: cython.Py_ssize_t
    d: cython.double
    c: cython.double
    pos: cython.double
    out[j0] = a
    for j in range(j0, j1):
        d = _drift_at(x0 + (j + 0.5) * dx, nbp, bp, bv)
        if s <= theta and (d <= 0.0 or killed) and j > j0:
            absorbed = j
            break
        if s > lmax:
            return 1, j
        pos = s / dlev
        i = int(pos)
        if i >= nlev:
            i = nlev - 1
        c = C[j, i] + (pos - i) * (C[j, i + 1] - C[j, i])
        s = s + 2.0 * c + d * dx
        if s < 0.0:
            s = 0.0
        out[j + 1] = s
    if absorbed >= 0:
        for j in range(absorbed, j1 + 1):
            out[j] = 0.0
    elif s > lmax:
        return 1, j1
    return 0, absorbed


# ---------------------------------------------------------------------------
# Skew Brownian kernels
# ---------------------------------------------------------------------------

@cython.ccall
def skew_path(B: cython.double[:], beta: cython.double, r: cython.double,
              eps: cython.double, dt: cython.double, n0: cython.Py_ssize_t,
              X: cython.double[:], L: cython.double[:], ell: cython.double[:]):
    """Band recursion for the skew SDE driven by B, started at index n0.

    X[n] = L[n] - (B[n] - B[n0]) with L[n] = r + beta*ell[n] and
    ell[n+1] = ell[n] + (dt/2eps) * 1{|X[n]| < eps}.  Entries before n0 are
    filled with the starting values.
    """
    n: cython.Py_ssize_t = B.shape[0]
    i: cython.Py_ssize_t
    w: cython.double = dt / (2.0 * eps)
    e: cython.double = 0.0
    for i in range(n0 + 1):
        X[i] = r
        L[i] = r
        ell[i] = 0.0
    for i in range(n0, n - 1):
        if fabs(X[i]) < eps:
            e += w
        ell[i + 1] = e
        L[i + 1] = r + beta * e
        X[i + 1] = L[i + 1] - (B[i + 1] - B[n0])
    return None


@cython.cfunc
@cython.inline
def _leap_steps(d: cython.double, eps: cython.double, dt: cython.double,
                remaining: cython.longlong) -> cython.longlong:
    # number of grid steps safely jumpable from barrier distance d (> 8 eps)
    g: cython.double = (d - 2.0 * eps) / 6.0
    k: cython.longlong = int(g * g / dt)
    if k < 1:
        k = 1
    if k > remaining:
        k = remaining
    return k


@cython.ccall
def skew_meet(key: cython.ulonglong, beta: cython.double, beta_hat: cython.double,
              r: cython.double, dt: cython.double, eps: cython.double,
              level_cap: cython.double, max_steps: cython.longlong,
              leaps: cython.bint):
    """Meeting of the skew solutions X^r (beta) and X-hat (beta_hat, from 0).

    Both are driven by one Brownian path generated sequentially from `key`.
    Meeting is declared when |X^r - Xhat| = |L - Lhat| < 2*eps.  Returns
    (status, Lhat, t): status 0 met, 1 Lhat exceeded level_cap, 2 time cap.
    With leaps=True, Gaussian block steps are taken while B is farther than
    8*eps from both accumulator barriers (exact for the Brownian path; the
    band indicators are unaffected up to a 6-sigma tail).
    """
    rng: Rng = Rng(key)
    w: cython.double = dt / (2.0 * eps)
    B: cython.double = 0.0
    ell: cython.double = 0.0
    ellh: cython.double = 0.0
    L: cython.double = r
    Lh: cython.double = 0.0
    n: cython.longlong = 0
    d: cython.double
    d2: cython.double
    k: cython.longlong
    ind: cython.bint
    indh: cython.bint
    while True:
        if fabs(L - Lh) < 2.0 * eps:
            return 0, Lh, n * dt
        if Lh > level_cap or L > level_cap:
            return 1, Lh, n * dt
        if n >= max_steps:
            return 2, Lh, n * dt
        d = fabs(L - B)
        d2 = fabs(Lh - B)
        if d2 < d:
            d = d2
        if leaps and d > 8.0 * eps:
            k = _leap_steps(d, eps, dt, max_steps - n)
            B += rng.normal() * sqrt(k * dt)
            n += k
            continue
        ind = fabs(L - B) < eps
        indh = fabs(Lh - B) < eps
        B += rng.normal() * sqrt(dt)
        n += 1
        if ind:
            ell += w
            L = r + beta * ell
        if indh:
            ellh += w
            Lh = beta_hat * ellh


@cython.ccall
def skew_embed(key: cython.ulonglong, beta: cython.double, r: cython.double,
               x_target: cython.double, dt: cython.double, eps: cython.double,
               bin_w: cython.double, max_steps: cython.longlong, leaps: cython.bint):
    """Local time of B at level x_target accumulated until tau^r_{x_target}.

    Runs X^r until its accumulator L first exceeds x_target and measures the
    occupation of B in [x_target, x_target + bin_w) normalized by bin_w.
    Returns (status, occupation, tau): status 0 ok, 2 time cap.
    """
    rng: Rng = Rng(key)
    w: cython.double = dt / (2.0 * eps)
    B: cython.double = 0.0
    ell: cython.double = 0.0
    L: cython.double = r
    occ: cython.double = 0.0
    n: cython.longlong = 0
    d: cython.double
    db: cython.double
    k: cython.longlong
    ind: cython.bint
    while True:
        if L > x_target:
            return 0, occ, n * dt
        if n >= max_steps:
            return 2, occ, n * dt
        d = fabs(L - B)
        if B < x_target:
            db = x_target - B
        elif B > x_target + bin_w:
            db = B - x_target - bin_w
        else:
            db = 0.0
        if db < d:
            d = db
        if leaps and d > 8.0 * eps:
            k = _leap_steps(d, eps, dt, max_steps - n)
            B += rng.normal() * sqrt(k * dt)
            n += k
            continue
        ind = fabs(L - B) < eps
        if x_target <= B < x_target + bin_w:
            occ += dt / bin_w
        B += rng.normal() * sqrt(dt)
        n += 1
        if ind:
            ell += w
            L = r + beta * ell


@cython.ccall
def skew_marginal(key: cython.ulonglong, beta: cython.double, r: cython.double,
                  t_end: cython.double, dt: cython.double, eps: cython.double,
                  leaps: cython.bint) -> cython.double:
    """X^r at the fixed time t_end (band recursion, optional leaps)."""
    rng: Rng = Rng(key)
    w: cython.double = dt / (2.0 * eps)
    n_end: cython.longlong = int(t_end / dt + 0.5)
    B: cython.double = 0.0
    ell: cython.double = 0.0
    L: cython.double = r
    n: cython.longlong = 0
    d: cython.double
    k: cython.longlong
    ind: cython.bint
    while n < n_end:
        d = fabs(L - B)
        if leaps and d > 8.0 * eps:
            k = _leap_steps(d, eps, dt, n_end - n)
            B += rng.normal() * sqrt(k * dt)
            n += k
            continue
        ind = fabs(L - B) < eps
        B += rng.normal() * sqrt(dt)
        n += 1
        if ind:
            ell += w
            L = r + beta * ell
    return L - B


@cython.ccall
def skew_rk_firstjump(key: cython.ulonglong, beta: cython.double, z: cython.double,
                      dt: cython.double, eps: cython.double,
                      max_steps: cython.longlong):
    """First jump location of r -> L^r at tau^0_z via the backward solution.

    Forward pass: run X^0 until L^0 > z (plain steps; increments indexed by
    counter so the backward pass can replay them).  Backward pass: run the
    backward skew solution from (tau, 0) down to time 0; its value at 0 is
    the largest r whose forward line has coalesced with X^0 by tau.
    Returns (status, xjump): status 0 ok, 2 time cap.
    """
    bkey: cython.ulonglong = _derive(key, 0)
    w: cython.double = dt / (2.0 * eps)
    sdt: cython.double = sqrt(dt)
    B: cython.double = 0.0
    ell: cython.double = 0.0
    L: cython.double = 0.0
    n: cython.longlong = 0
    m: cython.longlong
    Xc: cython.double
    ind: cython.bint
    while L <= z:
        if n >= max_steps:
            return 2, 0.0
        ind = fabs(L - B) < eps
        B += _normal(bkey, n) * sdt
        n += 1
        if ind:
            ell += w
            L = beta * ell
    # backward pass over the same increments
    Xc = 0.0
    m = n
    while m > 0:
        m -= 1
        ind = fabs(Xc) < eps
        Xc = Xc + _normal(bkey, m) * sdt
        if ind:
            Xc -= beta * w
    if Xc < 0.0:
        Xc = 0.0
    return 0, Xc


@cython.ccall
def backward_skew_scan(B: cython.double[:], beta: cython.double, x: cython.double,
                       dt: cython.double, eps: cython.double,
                       out: cython.double[:]):
    """Backward skew solution from (t_end, x) over a stored Brownian path.

    out[m] receives the backward solution at time index m; out[n-1] = x.
    """
    n: cython.Py_ssize_t = B.shape[0]
    w: cython.double = dt / (2.0 * eps)
    Xc: cython.double = x
    m: cython.Py_ssize_t = n - 1
    ind: cython.bint
    out[n - 1] = x
    while m > 0:
        m -= 1
        ind = fabs(Xc) < eps
        Xc = Xc + (B[m + 1] - B[m])
        if ind:
            Xc -= beta * w
        out[m] = Xc
    return None
