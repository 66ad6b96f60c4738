import numpy as np

from scmvae import autodiff as ad


def fd_directional(f, args, i, v, h=1e-5):
    """Central finite difference of scalar f(*args) along direction v in arg i."""
    ap = [a.copy() for a in args]
    am = [a.copy() for a in args]
    ap[i] = ap[i] + h * v
    am[i] = am[i] - h * v
    return (f(*ap) - f(*am)) / (2.0 * h)


def grad_vs_fd(f, args, seed=0, h=1e-5):
    """Max relative error between autodiff directional grads and central FD.

    f maps float64 ndarrays to a scalar (Tensor or float); returns worst
    relative error across the arguments.
    """
    rng = np.random.default_rng(seed)
    ts = [ad.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in args]
    out = f(*ts)
    out.backward()
    worst = 0.0
    for i, (a, t) in enumerate(zip(args, ts)):
        v = rng.standard_normal(np.shape(a))
        v /= np.linalg.norm(v) + 1e-300

        def scalar_f(*xs):
            return float(ad.value(f(*[ad.astensor(x) for x in xs])))

        want = fd_directional(scalar_f, [np.asarray(a, dtype=np.float64) for a in args], i, v, h=h)
        got = 0.0 if t.grad is None else float(np.sum(t.grad * v))
        denom = max(abs(want), abs(got), 1e-8)
        worst = max(worst, abs(got - want) / denom)
    return worst
