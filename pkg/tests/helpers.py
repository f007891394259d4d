"""Shared test utilities: the finite-difference gradient oracle."""

import numpy as np

from nutime import tensor as T


def finite_difference_grad(f, args, idx, weights, h=1e-5):
    """Central finite differences of sum(f(*args) * weights) w.r.t. args[idx].

    All args are float64 numpy arrays; f maps Tensors to a Tensor.
    """
    a = args[idx]
    grad = np.zeros_like(a)
    it = np.nditer(a, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        plus, minus = a.copy(), a.copy()
        plus[i] += h
        minus[i] -= h
        args_p = list(args)
        args_p[idx] = plus
        args_m = list(args)
        args_m[idx] = minus
        with T.no_grad():
            fp = (f(*[T.Tensor(x) for x in args_p]).data * weights).sum()
            fm = (f(*[T.Tensor(x) for x in args_m]).data * weights).sum()
        grad[i] = (fp - fm) / (2 * h)
    return grad


def gradcheck(f, args, rtol=1e-3, h=1e-5, seed=0):
    """Check analytic vs central-FD gradients of f for every argument.

    Runs in float64; the scalar objective is a fixed random weighting of the
    outputs.  Returns the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.dtype_mode(np.float64):
        args = [np.asarray(a, dtype=np.float64) for a in args]
        out = f(*[T.Tensor(a) for a in args])
        weights = rng.standard_normal(out.shape)
        tensors = [T.Tensor(a.copy(), requires_grad=True) for a in args]
        loss = T.tsum(T.mul(f(*tensors), T.Tensor(weights)))
        T.backward(loss)
        for idx, t in enumerate(tensors):
            analytic = t.grad
            assert analytic is not None, f"no gradient for argument {idx}"
            numeric = finite_difference_grad(f, args, idx, weights, h=h)
            denom = np.maximum(np.abs(numeric), 1.0)
            err = float(np.max(np.abs(np.asarray(analytic) - numeric) / denom))
            worst = max(worst, err)
            assert err < rtol, f"argument {idx}: relative error {err:.2e}"
    return worst


def params_gradcheck(build_loss, params, rtol=1e-3, h=1e-5):
    """FD-check gradients of a scalar loss w.r.t. a dict of parameters.

    `build_loss(params)` must return a scalar Tensor; runs in float64.
    """
    with T.dtype_mode(np.float64):
        T.zero_grads(params)
        loss = build_loss(params)
        T.backward(loss)
        worst = 0.0
        for name, p in sorted(params.items()):
            analytic = np.asarray(p.grad)
            numeric = np.zeros_like(p.data)
            it = np.nditer(p.data, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                orig = p.data[i]
                p.data[i] = orig + h
                with T.no_grad():
                    fp = build_loss(params).item()
                p.data[i] = orig - h
                with T.no_grad():
                    fm = build_loss(params).item()
                p.data[i] = orig
                numeric[i] = (fp - fm) / (2 * h)
            denom = np.maximum(np.abs(numeric), 1.0)
            err = float(np.max(np.abs(analytic - numeric) / denom))
            worst = max(worst, err)
            assert err < rtol, f"parameter '{name}': relative error {err:.2e}"
    return worst
