"""FGSM, PGD and the random-start variant on an untrained small CNN."""
import numpy as np

from fgsmlab import autodiff as ad
from fgsmlab.attacks import AttackConfig, fgsm, pgd, run_attack
from fgsmlab.data import synth_dataset
from fgsmlab.nn import ModelConfig, build_model

eps = 8 / 255
data = synth_dataset(64, classes=10, image_size=16, seed=0)
model = build_model(ModelConfig(width=8, input_shape=(3, 16, 16)), rng_seed=0)
x, y = data.images, data.labels

loss = lambda v: ad.cross_entropy(model.forward(v), y).item()  # noqa: E731

d1 = fgsm(model, x, y, eps, clamp_pixel_box=True)
d2 = pgd(model, x, y, eps, eps, steps=1, restarts=1, init="zero", train_mode=True)
print("FGSM == one zero-init PGD step:", np.array_equal(d1, d2))

for cfg in [AttackConfig("fgsm", eps), AttackConfig("pgd", eps, 2 / 255, 10, 2), AttackConfig("fast_fgsm", eps)]:
    d = run_attack(model, x, y, cfg, np.random.default_rng(1))
    print(f"{cfg.family:9s} max|delta|*255 = {np.abs(d).max() * 255:.3f}  "
          f"box ok = {bool((x + d).min() >= 0 and (x + d).max() <= 1)}  "
          f"loss {loss(x):.4f} -> {loss(x + d):.4f}")
