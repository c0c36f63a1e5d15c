"""Independent reference implementations used to check the package.

Everything here is written from the definitions, on purpose without
reusing package internals, so tests compare two separate routes to the
same numbers.
"""

import math

import numpy as np


def stable_sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def reference_forward(tree, x, steepness=1.0):
    """Walk every root-to-leaf path explicitly and mix leaf distributions.

    ``steepness`` scales the pre-sigmoid margin of every decision node,
    which hardens the routing without touching the stored parameters.
    """
    x = np.asarray(x, dtype=np.float64)
    exps = np.exp(tree.beta - tree.beta.max(axis=1, keepdims=True))
    tilde = exps / exps.sum(axis=1, keepdims=True)
    out = np.zeros(tree.n_actions)
    for leaf in range(tree.n_leaves):
        prob = 1.0
        node = 1
        for level in range(tree.depth):
            bit = (leaf >> (tree.depth - 1 - level)) & 1
            z = steepness * (float(tilde[node - 1] @ x) - float(tree.phi[node - 1]))
            p = stable_sigmoid(z)
            prob *= p if bit == 0 else 1.0 - p
            node = 2 * node + bit
        shifted = np.exp(-(tree.w[leaf] - tree.w[leaf].min()))
        out += prob * shifted / shifted.sum()
    return out


def numeric_gradients(loss, arrays, h=1e-5):
    """Central finite differences of ``loss(arrays)`` for each entry."""
    grads = [np.zeros_like(a) for a in arrays]
    for ai, arr in enumerate(arrays):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = [a.copy() for a in arrays]
            plus[ai][idx] += h
            minus = [a.copy() for a in arrays]
            minus[ai][idx] -= h
            grads[ai][idx] = (loss(plus) - loss(minus)) / (2.0 * h)
    return grads


def max_rel_error(analytic, numeric, floor=1e-8) -> float:
    """Worst elementwise relative error with a floored denominator."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def reference_adam(arrays, grad_fn, steps, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Textbook Adam, re-derived for differential testing."""
    params = [a.copy() for a in arrays]
    m = [np.zeros_like(a) for a in arrays]
    v = [np.zeros_like(a) for a in arrays]
    for t in range(1, steps + 1):
        grads = grad_fn(params)
        for i, g in enumerate(grads):
            m[i] = beta1 * m[i] + (1 - beta1) * g
            v[i] = beta2 * v[i] + (1 - beta2) * g * g
            m_hat = m[i] / (1 - beta1 ** t)
            v_hat = v[i] / (1 - beta2 ** t)
            params[i] = params[i] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


def day_objective(day, u_norm_sequence, e0, e_max, p_max, eta_rt,
                  lambda_cap, p_agg_min, injection_ratio, dt=1.0):
    """Episode objective evaluated directly from the billing formulas.

    Re-simulates the battery with its clipping rules and sums the energy
    and capacity terms hour by hour; used to confirm that per-step costs
    add up to the objective.
    """
    eta = math.sqrt(eta_rt)
    e = e0
    total = 0.0
    for t, u_norm in enumerate(u_norm_sequence):
        u = max(-p_max, min(p_max, u_norm * p_max))
        if u >= 0:
            delta = eta * u * dt
            if e + delta > e_max:
                delta = e_max - e
                u = delta / (eta * dt)
        else:
            delta = u * dt / eta
            if e + delta < 0:
                delta = -e
                u = delta * eta / dt
        e += delta
        p_agg = float(day.p_con[t]) + float(day.p_pv[t]) + u
        lam = float(day.lambda_con[t])
        if p_agg >= 0:
            total += lam * p_agg * dt
        else:
            total += injection_ratio * lam * p_agg * dt
        total += lambda_cap * max(p_agg, p_agg_min)
    return total
