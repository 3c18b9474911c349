import numpy as np

from advasr.autodiff import gradient


def param_fd_error(params, loss_fn, step=1e-5, per_param=None, seed=0):
    """Max relative error between analytic parameter gradients and central differences.

    ``loss_fn`` takes no arguments and reads the parameters' current values.
    With ``per_param`` set, only that many random coordinates of each parameter are probed.
    """
    params = list(params.parameters() if hasattr(params, "parameters") else params)
    analytic = [g.data for g in gradient(loss_fn(), params)]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic):
        coords = list(np.ndindex(p.shape))
        if per_param is not None and len(coords) > per_param:
            coords = [coords[j] for j in rng.choice(len(coords), per_param, replace=False)]
        for i in coords:
            base = p.data
            vals = []
            for sgn in (1.0, -1.0):
                probe = base.copy()
                probe[i] += sgn * step
                p.data = probe
                vals.append(loss_fn().item())
            p.data = base
            numeric = (vals[0] - vals[1]) / (2 * step)
            worst = max(worst, abs(g[i] - numeric) / max(1.0, abs(g[i])))
    return worst
