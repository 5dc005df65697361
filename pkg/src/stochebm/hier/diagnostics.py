"""Convergence diagnostics."""
import numpy as np

from ..exceptions import ValidationError


def split_rhat(x):
    """Split-chain potential scale reduction factor.

    Parameters
    ----------
    x : array (n_chains, n_draws)

    Notes
    -----
    Each chain is cut into halves, giving ``2 n_chains`` sequences of length
    ``n``; with ``W`` the mean within-sequence variance and ``B / n`` the
    variance of sequence means, ``R = sqrt(((n - 1) / n W + B / n) / W)``.
    Returns 1 for a constant series and ``inf`` if only the means differ.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError("split_rhat expects (n_chains, n_draws)")
    n = x.shape[1] // 2
    if n < 2:
        return np.nan
    halves = np.concatenate([x[:, :n], x[:, x.shape[1] - n:]], axis=0)
    means = halves.mean(axis=1)
    w = halves.var(axis=1, ddof=1).mean()
    b_over_n = means.var(ddof=1)
    if w == 0:
        return 1.0 if b_over_n == 0 else np.inf
    var_plus = (n - 1) / n * w + b_over_n
    return float(np.sqrt(var_plus / w))


def rhat_table(output):
    """``{summary name: split R-hat}`` for every scalar summary."""
    return {k: split_rhat(v) for k, v in output.summaries().items()}


def effective_sample_size(x):
    """Initial-positive-sequence ESS of a single chain (Geyer)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    xc = x - x.mean()
    var = xc @ xc / n
    if var == 0:
        return float(n)
    f = np.fft.rfft(xc, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    rho = acov / var
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))
