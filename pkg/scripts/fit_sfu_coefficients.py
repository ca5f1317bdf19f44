"""Fit the SFU polynomial kernels used by qdk.sim.sfu.

log2 kernel:  log2(m) = t * P(t^2),  t = (m - 1) / (m + 1),  m in [sqrt(1/2), sqrt(2)]
exp2 kernel:  2^f = Q(f),            f in [-1/2, 1/2]

Both are fitted in the relative-error sense with a Remez exchange on
Chebyshev starting nodes and printed as float32 literals.
"""

import mpmath as mp
import numpy as np

mp.mp.dps = 50


def remez(func, lo, hi, degree, weight, iters=30):
    n = degree + 2
    nodes = [mp.mpf(lo) + (mp.mpf(hi) - lo) * (1 - mp.cos(mp.pi * k / (n - 1))) / 2 for k in range(n)]
    coeffs = None
    for _ in range(iters):
        rows, rhs = [], []
        for k, x in enumerate(nodes):
            rows.append([x**j for j in range(degree + 1)] + [(-1) ** k / weight(x)])
            rhs.append(func(x))
        sol = mp.lu_solve(mp.matrix(rows), mp.matrix(rhs))
        coeffs = [sol[j] for j in range(degree + 1)]

        def err(x):
            return (sum(c * x**j for j, c in enumerate(coeffs)) - func(x)) * weight(x)

        grid = [mp.mpf(lo) + (mp.mpf(hi) - lo) * i / 4000 for i in range(4001)]
        vals = [err(x) for x in grid]
        # one extremum per sign-alternating run
        new_nodes, run = [], [0]
        for i in range(1, len(grid)):
            if mp.sign(vals[i]) == mp.sign(vals[run[0]]):
                run.append(i)
            else:
                new_nodes.append(grid[max(run, key=lambda j: abs(vals[j]))])
                run = [i]
        new_nodes.append(grid[max(run, key=lambda j: abs(vals[j]))])
        if len(new_nodes) < n:
            break
        nodes = new_nodes[:n]
    return coeffs, max(abs(v) for v in vals)


def main():
    tmax = (mp.sqrt(2) - 1) / (mp.sqrt(2) + 1)
    umax = tmax**2

    def log_kernel(u):
        if u == 0:
            return 2 / mp.log(2)
        t = mp.sqrt(u)
        return 2 * mp.atanh(t) / (t * mp.log(2))

    c_log, e_log = remez(log_kernel, 0, umax, 3, lambda u: 1 / log_kernel(u))
    c_exp, e_exp = remez(lambda f: mp.power(2, f), -0.5, 0.5, 6, lambda f: 1 / mp.power(2, f))
    print("LOG2_COEFFS =", [float(np.float32(float(c))) for c in c_log], "# rel err", mp.nstr(e_log, 3))
    print("EXP2_COEFFS =", [float(np.float32(float(c))) for c in c_exp], "# rel err", mp.nstr(e_exp, 3))


if __name__ == "__main__":
    main()
