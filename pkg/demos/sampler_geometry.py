"""Why a straight flow needs one Euler step, and where the sampler spends its steps.

    python demos/sampler_geometry.py
"""

import numpy as np

from textldm.flowdiff import Schedule, euler_integrate, inference_grid, interpolate


def main():
    rng = np.random.default_rng(0)
    noise, data = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))

    # The interpolant is a line from noise to data, so its velocity is constant.
    ts = np.linspace(0, 1, 5)
    path = np.stack([interpolate(noise, data, t) for t in ts])
    steps = np.diff(path, axis=0) / np.diff(ts)[:, None, None]
    print("velocity along the path is constant:", np.allclose(steps, data - noise))

    field = lambda z, k, t: data - noise  # noqa: E731
    for k in (1, 5, 50):
        z, _ = euler_integrate(field, noise, inference_grid(Schedule(), k))
        print(f"K={k:2d}: max error {np.abs(z - data).max():.1e}")

    # A learned field is not straight; the logit-normal grid spends steps mid-way.
    for sched in (Schedule("uniform"), Schedule("logit_normal", 1.5), Schedule("logit_normal", 0.5)):
        grid = inference_grid(sched, 10)
        label = sched.kind if sched.kind == "uniform" else f"{sched.kind} std={sched.std}"
        print(f"{label:>24}: " + " ".join(f"{s:.2f}" for s in grid))

    # A curved field: rotation by 90 degrees over the unit interval.
    def rotate(z, k, t):
        return np.pi / 2 * np.stack([-z[:, 1], z[:, 0]], axis=1)

    exact = np.stack([-noise[:, 1], noise[:, 0]], axis=1)
    for k in (1, 5, 50, 500):
        z, _ = euler_integrate(rotate, noise, inference_grid(Schedule("uniform"), k))
        print(f"rotation, K={k:3d}: max error {np.abs(z - exact).max():.2e}")


if __name__ == "__main__":
    main()
