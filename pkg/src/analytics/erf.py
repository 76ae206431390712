"""
Error function for the stockout probabilities.

Piecewise rational approximation following the SunPro/FreeBSD msun erf
(s_erf.c, "Copyright (C) 1993 by Sun Microsystems, Inc. ... Permission to use,
copy, modify, and distribute this software is freely granted, provided that
this notice is preserved."). The approximation is evaluated on |x| and the sign
is copied back afterwards, so erf(-x) == -erf(x) holds bit for bit.
"""

from typing import Callable, List, Union

import numpy as np
from numpy.polynomial import Polynomial

ArrayOrFloat = Union[float, np.ndarray]

ERX = 8.45062911510467529297e-01
EFX = 1.28379167095512586316e-01

# |x| < 0.84375
_PP = Polynomial([
    1.28379167095512558561e-01,
    -3.25042107247001499370e-01,
    -2.84817495755985104766e-02,
    -5.77027029648944159157e-03,
    -2.37630166566501626084e-05,
])
_QQ = Polynomial([
    1.0,
    3.97917223959155352819e-01,
    6.50222499887672944485e-02,
    5.08130628187576562776e-03,
    1.32494738004321644526e-04,
    -3.96022827877536812320e-06,
])

# 0.84375 <= |x| < 1.25
_PA = Polynomial([
    -2.36211856075265944077e-03,
    4.14856118683748331666e-01,
    -3.72207876035701323847e-01,
    3.18346619901161753674e-01,
    -1.10894694282396677476e-01,
    3.54783043256182359371e-02,
    -2.16637559486879084300e-03,
])
_QA = Polynomial([
    1.0,
    1.06420880400844228286e-01,
    5.40397917702171048937e-01,
    7.18286544141962662868e-02,
    1.26171219808761642112e-01,
    1.36370839120290507362e-02,
    1.19844998467991074170e-02,
])

# 1.25 <= |x| < 1/0.35
_RA = Polynomial([
    -9.86494403484714822705e-03,
    -6.93858572707181764372e-01,
    -1.05586262253232909814e01,
    -6.23753324503260060396e01,
    -1.62396669462573470355e02,
    -1.84605092906711035994e02,
    -8.12874355063065934246e01,
    -9.81432934416914548592e00,
])
_SA = Polynomial([
    1.0,
    1.96512716674392571292e01,
    1.37657754143519042600e02,
    4.34565877475229228821e02,
    6.45387271733267880336e02,
    4.29008140027567833386e02,
    1.08635005541779435134e02,
    6.57024977031928170135e00,
    -6.04244152148580987438e-02,
])

# 1/0.35 <= |x| < 6
_RB = Polynomial([
    -9.86494292470009928597e-03,
    -7.99283237680523006574e-01,
    -1.77579549177547519889e01,
    -1.60636384855821916062e02,
    -6.37566443368389627722e02,
    -1.02509513161107724954e03,
    -4.83519191608651397019e02,
])
_SB = Polynomial([
    1.0,
    3.03380607434824582924e01,
    3.25792512996573918826e02,
    1.53672958608443695994e03,
    3.19985821950859553908e03,
    2.55305040643316442583e03,
    4.74528541206955367215e02,
    -2.24409524465858183362e01,
])

# Lower edges of the approximation intervals on |x|
_EDGES = np.array([2.0**-28, 0.84375, 1.25, 1.0 / 0.35, 6.0])


def _tiny(a: np.ndarray) -> np.ndarray:
    return a + EFX * a


def _small(a: np.ndarray) -> np.ndarray:
    z = a * a
    return a + a * (_PP(z) / _QQ(z))


def _near_one(a: np.ndarray) -> np.ndarray:
    s = a - 1.0
    return ERX + _PA(s) / _QA(s)


def _tail(num: Polynomial, den: Polynomial) -> Callable[[np.ndarray], np.ndarray]:
    def evaluate(a: np.ndarray) -> np.ndarray:
        z = a * a
        s = 1.0 / z
        return 1.0 - np.exp(-z - 0.5625 + num(s) / den(s)) / a

    return evaluate


_PIECES: List[Callable[[np.ndarray], np.ndarray]] = [
    _tiny,
    _small,
    _near_one,
    _tail(_RA, _SA),
    _tail(_RB, _SB),
    np.ones_like,
]


def erf(x: ArrayOrFloat) -> ArrayOrFloat:
    """
    Error function, accurate to about 1e-15 absolute for finite x.

    Accepts a scalar or an array; returns the same kind. NaN propagates.
    """
    arr = np.asarray(x, dtype=float)
    a = np.abs(arr).ravel()
    out = np.full_like(a, np.nan)
    piece = np.searchsorted(_EDGES, a, side="right")
    for idx, evaluate in enumerate(_PIECES):
        mask = (piece == idx) & ~np.isnan(a)
        if mask.any():
            out[mask] = evaluate(a[mask])
    result = np.copysign(out.reshape(arr.shape), arr)
    if np.ndim(x) == 0:
        return float(result)
    return result
