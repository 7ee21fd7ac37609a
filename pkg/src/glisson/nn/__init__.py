from .layers import ShapeError
from .model import (CLASS_COUNTS, FULL_INPUT, MODEL_KINDS, ROI_INPUT, ModelSpec,
                    Network, build_model, load_model, save_model)
from .train import ModelState, TrainConfig, TrainingError, predict, train
from .gradcheck import grad_check
