"""Unique-parameter counts of equivariant backbones against their channel-matched N=1 twins."""
import numpy as np

from eposenet.model import Backbone, ModelConfig, classical_twin, count_params

for preset, widths in (("study10", (16, 16, 32, 32, 64)), ("resnet_s", (32, 64))):
    for N in (1, 4, 8):
        cfg = ModelConfig(N=N, preset=preset, widths=widths)
        rng = np.random.default_rng(0)
        eq = count_params(Backbone(cfg, rng))[0]
        cl = count_params(Backbone(classical_twin(cfg), rng))[0]
        print(f"{preset:9s} N={N}: {eq:7d} vs {cl:7d} classical, ratio x N = {eq / cl * N:.3f}")
