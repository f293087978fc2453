import numpy as np


def central_diff(f, arr, idx, h=1e-4):
    """Central finite difference of scalar f w.r.t. arr[idx], in place."""
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def probe_gradient(f, arr, analytic, n_probes, seed, h=1e-4, rel_tol=1e-4, abs_floor=1e-7):
    """Compare analytic gradient entries against central differences.

    Probes n_probes random coordinates; relative error is measured
    against max(|analytic|, |numeric|, abs_floor) so exact zeros pass.
    """
    rng = np.random.default_rng(seed)
    flat = arr.reshape(-1)
    g = np.asarray(analytic).reshape(-1)
    n = min(n_probes, flat.size)
    picks = rng.choice(flat.size, size=n, replace=False)
    worst = 0.0
    for i in picks:
        num = central_diff(f, flat, i, h)
        denom = max(abs(num), abs(g[i]), abs_floor)
        worst = max(worst, abs(num - g[i]) / denom)
    return worst
