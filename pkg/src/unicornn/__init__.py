"""UnICORNN: undamped independent oscillator recurrent networks."""
from .core import (ConfigurationError, LayerParams, LayerState, ModelConfig,
                   NumericalStabilityError, StateMeter, forward_step, hamiltonian,
                   input_transform, inverse_step, layer_forward, sigma_hat)
from .backward import LayerGrads, layer_backward_reconstructing, layer_backward_stored, model_backward
from .model import DropoutMask, Model, cross_entropy_loss, model_forward, mse_loss, nrmse
from .train import TrainConfig, adam_step, evaluate, fit, init_params, loss_and_grads, predict
from .tasks import SequenceDataset, Standardizer, lorenz96_generate, noise_padded_task
from ._kernels import get_num_threads, set_num_threads

__version__ = "0.1.0"
