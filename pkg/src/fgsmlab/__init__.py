"""Single-step adversarial training on a small numpy autodiff engine."""
from . import attacks, autodiff, data, nn, training, tricks
from .attacks import AttackConfig, fast_fgsm, fgsm, pgd
from .nn import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import RunLog, TrainConfig, detect_collapse, evaluate, train
from .tricks import MaskSpec, RegularizerConfig, gradalign_term, gradnorm_term, weightnorm_term

__version__ = "0.1.0"
