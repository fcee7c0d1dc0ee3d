"""Counter-based normal variates keyed by (seed, point, path, step, component).

Each variate is a pure function of its key, so any subset of paths can be
regenerated in any order with identical results. Keys are mixed with the
SplitMix64 finaliser; uniforms are mapped to normals by the inverse CDF
(Wichura's AS 241, relative accuracy about 1e-16).
"""

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_TWO_M53 = 2.0**-53


@nb.njit(cache=True, inline="always")
def mix(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, inline="always")
def path_key(seed, point, path):
    return mix(mix(mix(np.uint64(seed)) ^ np.uint64(point)) ^ np.uint64(path))


@nb.njit(cache=True, inline="always")
def step_key(pkey, step):
    return mix(pkey ^ np.uint64(step))


@nb.njit(cache=True, inline="always")
def uniform(skey, comp):
    h = mix(skey ^ np.uint64(comp))
    return (float(h >> _S11) + 0.5) * _TWO_M53


@nb.njit(cache=True)
def ndtri(p):
    """Inverse standard normal CDF (AS 241, PPND16)."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        num = (((((((2509.0809287301226727 * r + 33430.575583588128105) * r
                    + 67265.770927008700853) * r + 45921.953931549871457) * r
                  + 13731.693765509461125) * r + 1971.5909503065514427) * r
                + 133.14166789178437745) * r + 3.387132872796366608)
        den = (((((((5226.495278852545925 * r + 28729.085735721942674) * r
                    + 39307.89580009271061) * r + 21213.794301586595867) * r
                  + 5394.1960214247511077) * r + 687.1870074920579083) * r
                + 42.313330701600911252) * r + 1.0)
        return q * num / den
    r = p if q < 0 else 1.0 - p
    r = np.sqrt(-np.log(r))
    if r <= 5.0:
        r -= 1.6
        num = (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r
                    + 0.24178072517745061177) * r + 1.27045825245236838258) * r
                  + 3.64784832476320460504) * r + 5.7694972214606914055) * r
                + 4.6303378461565452959) * r + 1.42343711074968357734)
        den = (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r
                    + 0.0151986665636164571966) * r + 0.14810397642748007459) * r
                  + 0.68976733498510000455) * r + 1.6763848301838038494) * r
                + 2.05319162663775882187) * r + 1.0)
    else:
        r -= 5.0
        num = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r
                    + 0.0012426609473880784386) * r + 0.026532189526576123093) * r
                  + 0.29656057182850489123) * r + 1.7848265399172913358) * r
                + 5.4637849111641143699) * r + 6.6579046435011037772)
        den = (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r
                    + 1.8463183175100546818e-5) * r + 7.868691311456132591e-4) * r
                  + 0.0148753612908506148525) * r + 0.13692988092273580531) * r
                + 0.59983220655588793769) * r + 1.0)
    val = num / den
    return -val if q < 0 else val


@nb.njit(cache=True, inline="always")
def normal(skey, comp):
    return ndtri(uniform(skey, comp))


@nb.njit(cache=True)
def normals(seed, point_ids, paths, steps, step_offset, d):
    """Array of variates with shape ``(len(point_ids), paths, steps, d)``."""
    out = np.empty((point_ids.shape[0], paths, steps, d))
    for i in range(point_ids.shape[0]):
        for m in range(paths):
            pk = path_key(seed, point_ids[i], m)
            for j in range(steps):
                sk = step_key(pk, step_offset + j)
                for c in range(d):
                    out[i, m, j, c] = normal(sk, c)
    return out
