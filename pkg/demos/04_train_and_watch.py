"""A short FGSM adversarial-training run with per-epoch monitoring and collapse detection.

Synthetic data keeps this to a minute or two; point the harness at CIFAR-10
for the real thing.
"""
from fgsmlab.attacks import AttackConfig
from fgsmlab.data import synth_dataset
from fgsmlab.nn import ModelConfig
from fgsmlab.training import TrainConfig, detect_collapse, evaluate, train

data = synth_dataset(1200, classes=10, image_size=16, seed=3)
train_set, probe = data.first(1000), data.select(range(1000, 1200))

cfg = TrainConfig(
    epochs=8, lr_decay_epochs=[6], batch_size=50, probe_size=200,
    model=ModelConfig(width=8, input_shape=(3, 16, 16)),
    monitor_attack=AttackConfig("pgd", 8 / 255, 2 / 255, 5, 1),
)
model, log = train(cfg, train_set, probe=probe, progress=True)

for r in log.records:
    print(f"epoch {r.epoch}: clean {r.clean_acc:.3f} robust {r.robust_acc:.3f} grad-norm {r.mean_input_grad_norm:.3f}")
print("collapse events:", detect_collapse(log.records, **log.config["collapse"]))

res = evaluate(model, probe, AttackConfig("pgd", 8 / 255, 2 / 255, 10, 2), repeats=2)
print(f"final: clean {res.clean_acc:.3f}, robust {res.robust_acc:.3f} +- {res.robust_var ** 0.5:.3f}")
