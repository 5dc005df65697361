"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
import numpy as np

from .exceptions import ValidationError

PSD_TOL = 1e-10


def check_array(x, name="array", ndim=None, allow_nan=False):
    """Return ``x`` as a float64 C-contiguous array after basic checks."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if allow_nan:
        bad = np.isinf(arr)
    else:
        bad = ~np.isfinite(arr)
    if bad.any():
        raise ValidationError(f"{name} contains non-finite entries")
    return arr


def check_square(x, name="matrix"):
    arr = check_array(x, name, ndim=2)
    if arr.shape[0] != arr.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {arr.shape}")
    return arr


def check_psd(x, name="covariance", tol=PSD_TOL):
    """Symmetric positive semi-definite check; returns the symmetrized matrix."""
    arr = check_square(x, name)
    if not np.allclose(arr, arr.T, rtol=1e-8, atol=1e-12):
        raise ValidationError(f"{name} is not symmetric")
    arr = 0.5 * (arr + arr.T)
    if arr.size and np.linalg.eigvalsh(arr).min() < -tol * max(1.0, np.abs(arr).max()):
        raise ValidationError(f"{name} is not positive semi-definite")
    return arr


def check_positive(x, name="value"):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ValidationError(f"{name} must be finite and strictly positive")
    return arr


def check_random_state(seed):
    """Turn ``seed`` into a Philox-backed ``numpy.random.Generator``.

    Generators are passed through untouched so callers can thread explicit
    streams; ints and SeedSequences build a fresh counter-based generator.
    """
    from .rng import make_generator

    if isinstance(seed, np.random.Generator):
        return seed
    return make_generator(seed)
