"""The stabilizing tricks as plain functions."""
import numpy as np

from fgsmlab.data import synth_dataset
from fgsmlab.nn import ModelConfig, build_model
from fgsmlab.tricks import fgsm_mask_attack, gradalign_term, gradnorm_term, make_mask, weightnorm_term

rng = np.random.default_rng(0)
data = synth_dataset(32, classes=10, image_size=16, seed=0)
x, y = data.images.astype(np.float64), data.labels
model = build_model(ModelConfig(width=4, input_shape=(3, 16, 16)), dtype=np.float64)

m = make_mask((16, 16), 0.3, rng)
print("mask keeps", int(m.sum()), "of 256 pixels")
x_adv, delta = fgsm_mask_attack(model, x, y, 8 / 255, m)
print("masked FGSM perturbation range:", delta.min() * 255, delta.max() * 255)

print("GradNorm term  (beta=0.1):", gradnorm_term(model, x, y, 0.1).item())
print("GradAlign term (lambda=0.2):", gradalign_term(model, x, y, 8 / 255, 0.2, rng).item())
print("WeightNorm term (lambda=9):", weightnorm_term(model, delta, 9.0).item())
print("WeightNorm at delta=0:", weightnorm_term(model, np.zeros_like(x), 9.0).item())

for stride in (1, 2, 4):
    net = build_model(ModelConfig(width=4, input_shape=(3, 16, 16), first_conv_stride=stride))
    print(f"stride {stride}: logits shape {net.forward(x[:2]).shape}")
