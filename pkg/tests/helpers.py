import copy

import numpy as np

BENCH = {
    "pipeline": "vanilla",
    "seed": 0,
    "dataset": {"kind": "blobs", "classes": 3, "per_class": 200, "test_per_class": 300,
                "dims": [32], "spread": 0.15},
    "model": {"architecture": "mlp", "layer_sizes": [32, 3]},
    "fl": {"num_clients": 4, "rounds": 10, "lr": 0.05, "momentum": 0.9, "weight_decay": 0.0005,
           "batch_size": 10},
    "distill": {"steps": 200, "unroll": 10, "expert_delta": 2, "student_lr": 0.5, "synth_lr": 0.3,
                "ipc": 2, "init": "real"},
    "attack": {"epsilon": 0.1, "eta": 0.025, "steps": 10, "norm": "inf"},
    "adv_train": {"epochs": 40, "lr": 0.05, "batch_size": 128},
    "trajsynfed": {"server_adv_epochs": 5},
}


def bench_config(**overrides) -> dict:
    """The desk-scale blobs benchmark (3 classes, N=4, T=10, ipc=2, eps=0.1) as a raw dict."""
    cfg = copy.deepcopy(BENCH)
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    return cfg


def small_config(**overrides) -> dict:
    """A seconds-scale config for harness plumbing tests."""
    cfg = bench_config(
        dataset={"per_class": 40, "test_per_class": 40, "dims": [8]},
        model={"layer_sizes": [8, 3]},
        fl={"rounds": 3, "batch_size": 4},
        distill={"steps": 5, "unroll": 3, "expert_delta": 1},
        adv_train={"epochs": 2},
        trajsynfed={"server_adv_epochs": 1},
        timing={"warmup": 2, "min_steps": 10},
    )
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg.setdefault(key, {}).update(value)
        else:
            cfg[key] = value
    return cfg


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, entry by entry."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        orig = x[i]
        x[i] = orig + h
        fp = f(x)
        x[i] = orig - h
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def _away_from_zero(rng, shape):
    x = rng.uniform(0.1, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _op_cases():
    from trajsyn import autodiff as ad

    labels = {}

    def sce(x):
        return ad.softmax_cross_entropy(x, labels["y"])

    def sce_builder(rng):
        n, k = rng.integers(1, 5), rng.integers(2, 5)
        labels["y"] = rng.integers(0, k, size=n)
        return [rng.standard_normal((n, k))]

    return {
        "matmul": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))], lambda a, b: ad.matmul(a, b)),
        "add": (lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)], lambda a, b: ad.add(a, b)),
        "sub": (lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))], lambda a, b: ad.sub(a, b)),
        "mul": (lambda r: [r.standard_normal((3, 3)), r.standard_normal((1, 3))], lambda a, b: ad.mul(a, b)),
        "div": (lambda r: [r.standard_normal(5), _away_from_zero(r, 5)], lambda a, b: ad.div(a, b)),
        "neg": (lambda r: [r.standard_normal((2, 2))], lambda a: ad.neg(a)),
        "sum": (lambda r: [r.standard_normal((3, 4))], lambda a: ad.sum(a, axis=1)),
        "mean": (lambda r: [r.standard_normal((3, 4))], lambda a: ad.mean(a, axis=0, keepdims=True)),
        "tanh": (lambda r: [r.standard_normal((3, 4))], lambda a: ad.tanh(a)),
        "relu": (lambda r: [_away_from_zero(r, (3, 4))], lambda a: ad.relu(a)),
        "exp": (lambda r: [r.standard_normal(6)], lambda a: ad.exp(a)),
        "log": (lambda r: [r.uniform(0.2, 3.0, size=6)], lambda a: ad.log(a)),
        "softmax": (lambda r: [r.standard_normal((3, 4))], lambda a: ad.softmax(a)),
        "softmax_cross_entropy": (sce_builder, sce),
        "l2_norm_squared": (lambda r: [r.standard_normal(7)], lambda a: ad.l2_norm_squared(a)),
        "reshape": (lambda r: [r.standard_normal((2, 6))], lambda a: ad.reshape(a, (3, 4))),
        "slice": (lambda r: [r.standard_normal((4, 5))], lambda a: a[1:3, np.array([0, 2, 2, 4])]),
        "transpose": (lambda r: [r.standard_normal((2, 5))], lambda a: ad.transpose(a)),
    }


OP_NAMES = list(_op_cases())


def check_op_gradient(name: str, rng: np.random.Generator, h: float = 1e-5) -> float:
    """Relative error of reverse-mode vs central differences for one random instance of ``name``."""
    from trajsyn import autodiff as ad

    builder, fn = _op_cases()[name]
    # builder and fn share closure state (labels), so rebuild fn from the same dict entry
    arrays = builder(rng)
    out_shape = fn(*[ad.Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape)

    def scalar(*tensors):
        return ad.sum(ad.mul(fn(*tensors), ad.Tensor(weights)))

    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    grads = ad.grad(scalar(*leaves), leaves)
    worst = 0.0
    for i, a in enumerate(arrays):
        def f(xi, i=i):
            with ad.no_grad():
                args = [ad.Tensor(xi if j == i else arrays[j]) for j in range(len(arrays))]
                return scalar(*args).item()
        worst = max(worst, rel_err(grads[i].data, central_difference(f, a, h)))
    return worst


def mlp_meta_gradient(k_steps: int, rng: np.random.Generator, lr: float = 0.5):
    """Meta-gradient of the matching loss w.r.t. 4 synthetic points through K steps
    on an MLP 2-4-2, with its central-difference oracle."""
    from trajsyn import autodiff as ad
    from trajsyn.distill import matching_loss
    from trajsyn.models import ModelSpec, forward_tensor, init_model

    spec = ModelSpec("mlp", [2, 4, 2], (2,), 2, activation="tanh")
    theta0 = init_model(spec, int(rng.integers(1 << 30))).theta
    target = theta0 + 0.3 * rng.standard_normal(theta0.shape)
    x0 = rng.uniform(0, 1, size=(4, 2))
    y = np.array([0, 1, 0, 1])

    def outer(x_tensor):
        unrolled = ad.UnrolledSGD(ad.Tensor(theta0, requires_grad=True), lr)
        for _ in range(k_steps):
            unrolled.step(lambda th: ad.softmax_cross_entropy(forward_tensor(spec, th, x_tensor), y))
        return unrolled, matching_loss(unrolled.theta, target, theta0)

    x = ad.Tensor(x0, requires_grad=True)
    unrolled, loss = outer(x)
    (g,) = ad.backward_through_update(loss, unrolled, [x])

    def f(xv):
        return outer(ad.Tensor(xv))[1].item()

    return g.data, central_difference(f, x0)
