"""Math helpers that work on plain numpy values and on autodiff tensors.

The voltage expression and the OCP fits are written once and evaluated
both in the reference simulator (numpy floats) and inside recorded
autodiff graphs (``spmeid.nn.Tensor``).  Tensors expose ``exp``/``tanh``/
``sqrt``/``asinh``/``log`` methods; everything else goes to numpy.
"""

import numpy as np


def _is_plain(x):
    return isinstance(x, (np.ndarray, np.generic, float, int))


def exp(x):
    return np.exp(x) if _is_plain(x) else x.exp()


def log(x):
    return np.log(x) if _is_plain(x) else x.log()


def sqrt(x):
    return np.sqrt(x) if _is_plain(x) else x.sqrt()


def tanh(x):
    return np.tanh(x) if _is_plain(x) else x.tanh()


def asinh(x):
    return np.arcsinh(x) if _is_plain(x) else x.asinh()
