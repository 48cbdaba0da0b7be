"""Central finite-difference checks of the analytic gradients (float64).

Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.  In the
end-to-end check a coordinate is skipped when the ±h evaluations change
the network's piecewise-linear regime (a ReLU sign, a max-pool winner or
the BCE clamp): across such a kink a central difference is not an estimate
of the derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses
from .losses import AdaptiveWeights, TverskyParams
from .unet import ModelConfig, build_unet3d, init_params

TVERSKY_PAIRS = ((0.7, 0.3), (0.5, 0.5), (1.0, 1.0))


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    checked: int
    skipped: int = 0
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_err <= self.tolerance

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = (f"{status} {self.name}: max relative error {self.max_rel_err:.3e} "
                f"(tolerance {self.tolerance:g}, {self.checked} coordinates")
        if self.skipped:
            text += f", {self.skipped} skipped at kinks"
        text += ")"
        if not self.passed and self.worst:
            text += "\n    worst case: " + ", ".join(f"{k}={v}" for k, v in self.worst.items())
        return text


def rel_err(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def random_instance(rng: np.random.Generator, max_extent: int = 6):
    """Probability field (1, 2, d, h, w) and a label with both classes present when possible."""
    shape = tuple(int(s) for s in rng.integers(1, max_extent + 1, size=3))
    p0 = rng.uniform(0.02, 0.98, size=(1,) + shape)
    p = np.stack([p0, 1 - p0], axis=1)
    g = (rng.random((1,) + shape) < rng.uniform(0.2, 0.6)).astype(np.uint8)
    if g.size > 1 and g.all():
        g.flat[0] = 0
    if not g.any():
        g.flat[-1] = 1
    return p, g


def check_tversky_grad(instances: int = 20, max_extent: int = 6, h: float = 1e-5,
                       tolerance: float = 1e-4, seed: int = 0, pairs=TVERSKY_PAIRS,
                       floor: float = 1e-12) -> CheckResult:
    """Analytic dT/dp0, dT/dp1 against central differences of the index."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    where = {}
    checked = 0
    for inst in range(instances):
        p, g = random_instance(rng, max_extent)
        for alpha, beta in pairs:
            params = TverskyParams(alpha, beta)
            analytic = losses.tversky_grad(p, g, params)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = losses.tversky_index(p, g, params)
                p[idx] = old - h
                down = losses.tversky_index(p, g, params)
                p[idx] = old
                numeric = (up - down) / (2 * h)
                err = rel_err(analytic[idx], numeric, floor)
                checked += 1
                if err > worst:
                    worst = err
                    where = {"instance": inst, "seed": seed, "alpha": alpha, "beta": beta,
                             "channel": idx[1], "voxel": idx[2:],
                             "analytic": float(analytic[idx]), "numeric": float(numeric)}
    return CheckResult("tversky gradient (loss level)", worst, tolerance, checked, 0, where)


def _regime(model, probs) -> bytes:
    """Fingerprint of every kink-bearing decision in the last forward pass."""
    parts = []
    g = model.graph
    for node in g.nodes:
        if node.kind == "relu":
            parts.append(np.packbits(g.values[node.inputs[0]].data > 0).tobytes())
        elif node.kind == "maxpool3d":
            parts.append(node.cache.tobytes())
    p0 = probs[:, 0]
    parts.append(np.packbits((p0 < losses.BCE_EPS) | (p0 > 1 - losses.BCE_EPS)).tobytes())
    return b"".join(parts)


def check_end_to_end(seed: int = 0, extent: int = 4, depth: int = 1, base_channels: int = 2,
                     h: float = 1e-3, tolerance: float = 1e-3, floor: float = 1e-7,
                     params: TverskyParams = TverskyParams(0.7, 0.3),
                     weights: AdaptiveWeights = AdaptiveWeights(0.6, 0.4),
                     downsample_mode: str = "strided_conv") -> CheckResult:
    """Total-loss gradient through the full UNet against central differences."""
    cfg = ModelConfig(depth=depth, base_channels=base_channels, downsample_mode=downsample_mode)
    model = init_params(build_unet3d(cfg), seed).astype(np.float64)
    rng = np.random.default_rng([seed, 7])
    x = rng.standard_normal((1, 1) + (extent,) * 3)
    g = (rng.random((1,) + (extent,) * 3) < 0.3).astype(np.uint8)
    g.flat[0] = 1

    probs = model.forward(x).data
    base = _regime(model, probs)
    analytic = model.backward(losses.total_loss_grad(probs, g, weights, params))

    def loss_and_regime():
        pr = model.forward(x).data
        return losses.total_loss(pr, g, weights, params).l_total, _regime(model, pr)

    worst, where, checked, skipped = 0.0, {}, 0, 0
    for name, t in model.params.items():
        flat = t.data.reshape(-1)
        a = analytic[name].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up, r_up = loss_and_regime()
            flat[i] = old - h
            down, r_down = loss_and_regime()
            flat[i] = old
            if r_up != base or r_down != base:
                skipped += 1
                continue
            numeric = (up - down) / (2 * h)
            err = rel_err(a[i], numeric, floor)
            checked += 1
            if err > worst:
                worst = err
                where = {"seed": seed, "param": name, "index": i,
                         "analytic": float(a[i]), "numeric": float(numeric)}
    return CheckResult("total loss gradient (end to end)", worst, tolerance, checked, skipped, where)
