"""Regenerates cobyla_reference.json with scipy's Fortran COBYLA (scipy < 1.16)."""
import json
import math
from pathlib import Path

import scipy
from scipy.optimize import minimize

PROBLEMS = {
    "quadratic": dict(f=lambda x: (x[0] - 1) ** 2, cons=[], x0=[0.0], rho=(0.5, 1e-8)),
    "disc": dict(
        f=lambda x: x[0] + x[1],
        cons=[lambda x: 1 - x[0] ** 2 - x[1] ** 2],
        x0=[0.0, 0.0],
        rho=(0.5, 1e-6),
    ),
    "rosenbrock_halfplane": dict(
        f=lambda x: 10 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2,
        cons=[lambda x: 1 - x[0] - x[1]],
        x0=[-1.0, 1.0],
        rho=(0.5, 1e-7),
    ),
    "box_quadratic3": dict(
        f=lambda x: (x[0] - 2) ** 2 + 2 * (x[1] + 1) ** 2 + 0.5 * (x[2] - 0.3) ** 2 + x[0] * x[2],
        cons=[lambda x: 1 - x[0], lambda x: x[1] + 0.5, lambda x: 4 - x[0] - x[1] - x[2]],
        x0=[0.0, 0.0, 0.0],
        rho=(1.0, 1e-8),
    ),
    "weighted_l1_flip": dict(
        f=lambda x: 2 * abs(x[0]) + 0.5 * abs(x[1]),
        cons=[lambda x: 1 / (1 + math.exp(-(x[0] + 0.3 * x[1] - 1.2) * 4)) - 0.55],
        x0=[0.0, 0.0],
        rho=(0.25, 1e-6),
    ),
    "powell_hexagon_like": dict(
        f=lambda x: -x[0] * x[1] * x[2],
        cons=[lambda x: 72 - x[0] - 2 * x[1] - 2 * x[2], lambda x: x[0] + 2 * x[1] + 2 * x[2]],
        x0=[10.0, 10.0, 10.0],
        rho=(1.0, 1e-6),
    ),
}

MAXFUN = 5000


def main():
    out = {"scipy_version": scipy.__version__, "problems": {}}
    for name, p in PROBLEMS.items():
        rho_begin, rho_end = p["rho"]
        cons = [{"type": "ineq", "fun": g} for g in p["cons"]]
        res = minimize(
            p["f"],
            p["x0"],
            method="COBYLA",
            constraints=cons,
            options={"rhobeg": rho_begin, "tol": rho_end, "maxiter": MAXFUN},
        )
        out["problems"][name] = {
            "x0": p["x0"],
            "rho_begin": rho_begin,
            "rho_end": rho_end,
            "max_evals": MAXFUN,
            "nfev": int(res.nfev),
            "x": [float(v) for v in res.x],
            "fun": float(res.fun),
        }
    path = Path(__file__).with_name("cobyla_reference.json")
    path.write_text(json.dumps(out, indent=2) + "\n")


if __name__ == "__main__":
    main()
