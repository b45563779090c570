"""Flow matching on a 2-D Gaussian target, checked against the closed-form field.

Trains the piecewise-linear-in-time field, then compares Euler samples with
the target moments and with samples from the optimal field.

    python scripts/toy_flow.py --steps 2000 --knots 21
"""

import argparse
import logging

import numpy as np

from nowflow.cfm import CFMConfig, train
from nowflow.diffusion import DDIMConfig, ddim_sample, make_schedule
from nowflow.solvers import SolverConfig, integrate
from nowflow.tensor import Tensor
from nowflow.toy import GaussianToy, TimeLinearField, optimal_cfm_field, optimal_eps_predictor


def moments(z):
    return f"mean {np.round(z.mean(0), 3)} std {np.round(z.std(0), 3)}"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--knots", type=int, default=11)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--lr", type=float, default=3e-2)
    ap.add_argument("--draws", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    toy = GaussianToy()
    rng = np.random.default_rng(args.seed)
    n_data = args.batch * 40
    cfg = CFMConfig(lr=args.lr, batch=args.batch, epochs=max(1, args.steps // 40), ema_decay=0.99,
                    weight_decay=0.0, seed=args.seed)
    model = TimeLinearField(2, args.knots)
    res = train(model, toy.sample(n_data, rng), None, cfg, log_every=500)
    model.load_state_dict(res.ema_state)

    z0 = np.random.default_rng(args.seed + 1).standard_normal((args.draws, 2))
    learned = integrate(lambda z, t: model(Tensor(z), np.full(len(z), t)).data, z0, SolverConfig("euler", 10)).z
    exact = integrate(lambda z, t: optimal_cfm_field(z, t, toy), z0, SolverConfig("rk4", 100)).z
    sched = make_schedule()
    ddim = ddim_sample(lambda x, t: optimal_eps_predictor(x, sched.alpha_bars[t], toy), z0, sched, DDIMConfig(50)).x0

    print(f"target            mean {np.round(toy.mean, 3)} std [{toy.s} {toy.s}]")
    print(f"learned euler-10  {moments(learned)}")
    print(f"optimal rk4-100   {moments(exact)}")
    print(f"optimal ddim-50   {moments(ddim)}")


if __name__ == "__main__":
    main()
