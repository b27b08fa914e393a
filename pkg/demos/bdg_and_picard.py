"""Moment inequalities for stochastic integrals and Picard iteration on one path."""
import numpy as np

from glevy import expectation as ex
from glevy.models import example51, example51_set, r_for_l
from glevy.noise import TimeGrid, sample_noise
from glevy.sde import euler_solve, picard_solve
from glevy.uncertainty import ControlPath


def main():
    U = example51_set()
    grid = TimeGrid(0.0, 1.0, 1000)
    integrand = ex.ElementaryIntegrand([0.0, 0.5, 1.0], [1.0, lambda x: np.tanh(x[..., 0])],
                                       lambda z: z[..., 0])
    for kind in ("jump", "brownian", "covariation"):
        r = ex.bdg_check(kind, integrand, U, grid, 4000, seed=0)
        print(f"{kind:12s} lhs {r.lhs:.4f}  rhs {r.rhs:.4f}  ratio {r.ratio:.3f} "
              f"<= {r.constant:g}: {r.passed}")

    coeffs = example51(r_for_l(1.0))
    theta = ControlPath([0.0, 0.5, 1.0], [(0, 0, 1), (1, 0, 0)])
    noise = sample_noise(grid, U.base, seed=3)
    path, log = picard_solve(coeffs, theta, noise, 1.0, U, tol=1e-8)
    ref = euler_solve(coeffs, theta, noise, 1.0, U)
    print(f"Picard: {len(log)} iterations, sup-differences", " ".join(f"{d:.1e}" for d in log))
    print(f"sup |Picard - Euler| = {np.max(np.abs(path.y - ref.y)):.2e}")


if __name__ == "__main__":
    main()
