from .config import TrainConfig, desk_preset, load_config, full_preset
from .training import evaluate, lr_at, mcd_step, self_train, train

__all__ = ["TrainConfig", "desk_preset", "evaluate", "load_config", "lr_at", "mcd_step",
           "full_preset", "self_train", "train"]
